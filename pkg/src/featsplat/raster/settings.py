from dataclasses import dataclass
import math


@dataclass(frozen=True)
class RasterSettings:
    """Compositing constants.

    ``falloff_floor`` is subtracted from the Gaussian falloff and the splat is
    skipped where the falloff drops below it, which bounds each footprint while
    keeping the rendered image continuous in every parameter.
    """

    tile_size: int = 16
    alpha_max: float = 0.99
    min_transmittance: float = 1e-4
    cov_blur: float = 0.3
    near: float = 0.01
    falloff_floor: float = 1e-10

    @property
    def cutoff_mahalanobis(self) -> float:
        return -2.0 * math.log(self.falloff_floor)
