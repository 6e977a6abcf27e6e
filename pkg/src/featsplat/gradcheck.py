"""Central finite-difference oracle for the analytic backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import PARAM_CLASSES, SceneGradients, composite_backward
from .losses import LossWeights, ViewTargets, view_loss
from .raster import RasterSettings, render_view

REL_TOL = 1e-3
ABS_FLOOR = 1e-6


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class ClassReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_params: int


@dataclass
class GradCheckReport:
    classes: list[ClassReport] = field(default_factory=list)
    rel_tol: float = REL_TOL

    @property
    def passed(self) -> bool:
        return all(c.max_rel_error <= self.rel_tol for c in self.classes)

    def failing(self) -> list[str]:
        return [c.name for c in self.classes if c.max_rel_error > self.rel_tol]

    def table(self) -> str:
        rows = [f"{'class':<16}{'n':>6}{'max_rel_err':>14}{'analytic':>14}{'numeric':>14}  worst"]
        for c in self.classes:
            rows.append(f"{c.name:<16}{c.n_params:>6}{c.max_rel_error:>14.3e}{c.analytic:>14.6e}"
                        f"{c.numeric:>14.6e}  {c.worst_index}")
        rows.append("PASS" if self.passed else "FAIL: " + ", ".join(self.failing()))
        return "\n".join(rows)


def loss_and_grad(scene, cam, targets: ViewTargets, weights: LossWeights, terms, settings=None):
    buffers, state = render_view(scene, cam, settings, return_state=True)
    total, _, upstream = view_loss(buffers, targets, weights, terms)
    return total, composite_backward(scene, cam, upstream, state=state)


def relative_error(a: float, f: float, floor: float = ABS_FLOOR) -> float:
    return abs(a - f) / max(abs(a), abs(f), floor)


def finite_diff_check(scene, cam, targets: ViewTargets, weights: LossWeights | None = None,
                      terms=("rgb", "affordance", "semantic"), h: float = 1e-4,
                      settings: RasterSettings | None = None, analytic: SceneGradients | None = None,
                      classes=PARAM_CLASSES) -> GradCheckReport:
    """Compare analytic gradients against central differences for every scalar parameter.

    The realized step ``x(+h) - x(-h)`` is used as the divisor.
    """
    weights = weights or LossWeights()

    def loss(s):
        val, _, _ = view_loss(render_view(s, cam, settings), targets, weights, terms)
        if not np.isfinite(val):
            raise NonFiniteLossError(f"non-finite loss {val}")
        return val

    if analytic is None:
        loss(scene)
        _, analytic = loss_and_grad(scene, cam, targets, weights, terms, settings)
    report = GradCheckReport()
    work = scene.copy()
    for name in classes:
        arr = getattr(work, name)
        ga = getattr(analytic, name)
        worst = ClassReport(name, 0.0, (), 0.0, 0.0, arr.size)
        for idx in np.ndindex(arr.shape):
            x0 = arr[idx]
            xp = x0 + h
            xm = x0 - h
            arr[idx] = xp
            fp = loss(work)
            arr[idx] = xm
            fm = loss(work)
            arr[idx] = x0
            num = (fp - fm) / (float(xp) - float(xm))
            err = relative_error(float(ga[idx]), num)
            if err >= worst.max_rel_error:
                worst = ClassReport(name, err, idx, float(ga[idx]), num, arr.size)
        report.classes.append(worst)
    return report
