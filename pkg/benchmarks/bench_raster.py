"""Compare the numba and pure-numpy rasterizer kernels (forward and forward+backward).

Usage: python3 benchmarks/bench_raster.py [--sizes 100 1000 5000] [--res 128] [--repeat 3]
"""
import argparse
import statistics
import time

import numpy as np

from featsplat import _backend
from featsplat.gradcheck import loss_and_grad
from featsplat.losses import LossWeights
from featsplat.raster import render_view
from featsplat.synthetic import front_camera, random_scene, random_targets

TERMS = ("rgb", "affordance", "semantic")


def timed(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[100, 1000, 5000])
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    backends = ["numpy"] + (["numba"] if _backend.HAVE_NUMBA else [])
    cam = front_camera(a.res, fov_deg=60)
    targets = random_targets(a.res, a.res, 3, a.seed)
    weights = LossWeights()

    if "numba" in backends:  # compile outside the timed region
        with _backend.backend("numba"):
            loss_and_grad(random_scene(5, seed=a.seed), cam, targets, weights, TERMS)

    print(f"{'gaussians':>10} {'backend':>8} {'forward s':>11} {'fwd+bwd s':>11} {'max |diff|':>12}")
    for n in a.sizes:
        scene = random_scene(n, seed=a.seed)
        ref = None
        for name in backends:
            with _backend.backend(name):
                t_fwd, buf = timed(lambda: render_view(scene, cam), a.repeat)
                t_bwd, _ = timed(lambda: loss_and_grad(scene, cam, targets, weights, TERMS), a.repeat)
            diff = 0.0 if ref is None else float(np.abs(buf.rgb - ref.rgb).max())
            ref = ref or buf
            print(f"{n:>10} {name:>8} {t_fwd:>11.4f} {t_bwd:>11.4f} {diff:>12.2e}")


if __name__ == "__main__":
    main()
