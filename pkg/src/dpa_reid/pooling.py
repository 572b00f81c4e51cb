"""Global pooling operators: average, minimum, generalized-mean and soft pooling.

Each operator reduces either over the spatial plane of every channel
(``PoolAxis.SPATIAL``: N×C×H×W -> N×C×1×1) or over the channels at every
location (``PoolAxis.CHANNEL``: N×C×H×W -> N×HW×1×1, locations in row-major
order).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .exceptions import InvalidAlpha, ShapeMismatch


class PoolAxis(enum.Enum):
    SPATIAL = "spatial"
    CHANNEL = "channel"


class SoftMode(enum.Enum):
    SCALAR = "scalar"
    RETAINED_MAP = "retained_map"


@dataclass(frozen=True)
class GemParams:
    alpha: float = 3.0
    clamp_floor: float = 1e-6

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise InvalidAlpha(f"alpha must be finite and positive, got {self.alpha}")


def _regions(x: Tensor, axis: PoolAxis) -> Tensor:
    """Lay the input out as N×R×|R|, one row per pooling region."""
    if x.ndim != 4:
        raise ShapeMismatch(f"pooling expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if PoolAxis(axis) is PoolAxis.SPATIAL:
        return F.reshape(x, (n, c, h * w))
    return F.reshape(F.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def _descriptor(r: Tensor) -> Tensor:
    n, k = r.shape
    return F.reshape(r, (n, k, 1, 1))


def _restore(field: Tensor, shape, axis: PoolAxis) -> Tensor:
    n, c, h, w = shape
    if PoolAxis(axis) is PoolAxis.SPATIAL:
        return F.reshape(field, shape)
    return F.transpose(F.reshape(field, (n, h, w, c)), (0, 3, 1, 2))


def avg_pool(x: Tensor, axis: PoolAxis = PoolAxis.SPATIAL) -> Tensor:
    return _descriptor(F.mean(_regions(x, axis), axis=2))


def max_pool(x: Tensor, axis: PoolAxis = PoolAxis.SPATIAL) -> Tensor:
    return _descriptor(F.max(_regions(x, axis), axis=2))


def min_pool(x: Tensor, axis: PoolAxis = PoolAxis.SPATIAL) -> Tensor:
    """Minimum written as ``-max(-x)``.

    The gradient reaches only the first minimizer in row-major order.
    """
    return F.neg(max_pool(F.neg(x), axis))


def gem_pool(x: Tensor, axis: PoolAxis = PoolAxis.SPATIAL, params: GemParams | None = None) -> Tensor:
    """Generalized mean ``(mean(x**alpha))**(1/alpha)`` over each region.

    Inputs are clamped to ``params.clamp_floor`` first. The power mean is
    evaluated on inputs scaled by their (constant) region maximum, which keeps
    large alphas in range and makes a constant region map to itself exactly.
    """
    params = params or GemParams()
    a = float(params.alpha)
    r = F.clamp_min(_regions(x, axis), params.clamp_floor)
    scale = Tensor(r.data.max(axis=2, keepdims=True))
    powered = F.pow(F.div(r, scale), a)
    m = F.pow(F.mean(powered, axis=2, keepdims=True), 1.0 / a)
    n, k, _ = r.shape
    return F.reshape(F.mul(m, scale), (n, k, 1, 1))


def soft_pool(x: Tensor, axis: PoolAxis = PoolAxis.SPATIAL, mode: SoftMode = SoftMode.SCALAR) -> Tensor:
    """Softmax-weighted pooling.

    ``SCALAR`` returns ``sum(softmax(x) * x)`` per region (a descriptor);
    ``RETAINED_MAP`` returns the unsummed field ``softmax(x) * x`` in the input
    layout, whose region sums equal the scalar form.
    """
    r = _regions(x, axis)
    field = F.mul(F.softmax(r, axis=2), r)
    if SoftMode(mode) is SoftMode.SCALAR:
        return _descriptor(F.sum(field, axis=2))
    return _restore(field, x.shape, axis)
