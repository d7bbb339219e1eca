"""Length-scale bookkeeping: field of view, stage counts, output resolution."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

REL_TOL = 1e-9
TEMPLATE_SIZE = 5


class PlanError(ValueError):
    """The requested scale combination admits no reconstruction."""


def fov(length_scale: float, size: float) -> float:
    """Physical extent of ``size`` voxels of edge ``length_scale``."""
    if not (length_scale > 0 and size > 0):
        raise ValueError(f"length scale and size must be positive, got {length_scale}, {size}")
    return length_scale * size


def _floor_log2(ratio: float) -> int:
    # exact powers of two land on the larger integer despite float noise
    return int(math.floor(math.log2(ratio) + REL_TOL))


def _ceil_tol(x: float) -> int:
    return int(math.ceil(x * (1.0 - REL_TOL)))


@dataclass(frozen=True)
class Stage:
    index: int
    input_scale: float
    level: int


@dataclass(frozen=True)
class ScalePlan:
    """Derived stage counts, scales and size bounds for one LR/HR pair.

    ``n_max`` is the number of upsampling stages the scales allow,
    ``m_max`` the number of dictionary levels (and therefore the number of
    stages actually run).  ``stages[k]`` consumes the dictionary at
    ``level = m_max - k``; level 1 is the native HR scale.
    """

    lr_scale: float
    hr_scale: float
    lr_size: int
    hr_size: int
    n_max: int
    m_max: int
    out_scale: float
    cc_range: tuple[int, int]
    pad_multiplicity: int
    stages: tuple[Stage, ...] = field(default=())
    template_size: int = TEMPLATE_SIZE

    @property
    def stage_shortfall(self) -> int:
        """Upsampling stages the scales allow but the HR size cannot feed."""
        return self.n_max - self.m_max

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cc_range"] = list(self.cc_range)
        d["stage_shortfall"] = self.stage_shortfall
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScalePlan":
        d = dict(d)
        d.pop("stage_shortfall", None)
        d["cc_range"] = tuple(d["cc_range"])
        d["stages"] = tuple(Stage(**s) for s in d.get("stages", ()))
        return cls(**d)


def plan(lr_scale: float, hr_scale: float, lr_size: int, hr_size: int,
         template_size: int = TEMPLATE_SIZE) -> ScalePlan:
    """Work out how an LR volume is refined with dictionaries from an HR volume.

    Args:
        lr_scale: voxel edge of the low-resolution volume, micrometres.
        hr_scale: voxel edge of the high-resolution volume, micrometres.
        lr_size: LR voxels per axis.
        hr_size: HR voxels per axis.
        template_size: edge of the dictionary scan template.

    Raises:
        PlanError: if the LR scale is not coarser than the HR scale by at least
            a factor of two, or the HR volume is too small for one level.
    """
    for name, v in (("lr_scale", lr_scale), ("hr_scale", hr_scale),
                    ("lr_size", lr_size), ("hr_size", hr_size)):
        if not v > 0:
            raise PlanError(f"{name} must be positive, got {v}")
    if lr_scale < hr_scale * (1.0 - REL_TOL):
        raise PlanError(f"nothing to reconstruct: LR scale {lr_scale} is finer than HR scale {hr_scale}")

    ratio = lr_scale / hr_scale
    n_max = _floor_log2(ratio)
    if n_max < 1:
        raise PlanError(f"nothing to reconstruct: LR/HR scale ratio {ratio:.6g} is below 2")

    # both dictionary conditions: the scale bracket and the template fit
    m_scale = n_max
    m_size = _floor_log2(hr_size / template_size) if hr_size >= template_size else -1
    m_max = min(m_scale, m_size)
    if m_max < 1:
        raise PlanError(
            f"HR size {hr_size} is too small: m_max would be 0 for template size {template_size}")

    out_scale = lr_scale / 2 ** m_max
    lo = _ceil_tol(out_scale / hr_scale) ** 3
    hi = _ceil_tol(lr_scale / hr_scale) ** 3
    fov_ratio = (lr_scale * lr_size) / (hr_scale * hr_size)
    pad = max(1, int(round(fov_ratio ** 3)))
    stages = tuple(Stage(k, lr_scale / 2 ** (k - 1), m_max - k + 1)
                   for k in range(1, m_max + 1))
    return ScalePlan(lr_scale, hr_scale, int(lr_size), int(hr_size), n_max, m_max,
                     out_scale, (lo, hi), pad, stages, template_size)
