"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import BranchRecorder, Tensor, Tape, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def _signed_eval(fn):
    with BranchRecorder() as rec:
        value = fn().item()
    return value, rec.signature()


def grad_check_many(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0, skip_kinks: bool = True) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` is re-evaluated with each coordinate of each tensor in ``tensors``
    perturbed in place by ±h. With ``max_coords`` set, at most that many
    coordinates per tensor are probed (chosen by ``seed``).

    With ``skip_kinks`` a coordinate whose ±h probe flips a relu mask, a clamp
    or an arg-extremum is not differentiable on that interval and is
    replaced by another coordinate of the same tensor.
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    base_sig = _signed_eval(fn)[1] if skip_kinks else None
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = grads.get(t)
        analytic = np.zeros_like(t.data) if analytic is None else analytic.reshape(t.shape)
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        order = np.arange(flat.size) if max_coords is None else rng.permutation(flat.size)
        quota = flat.size if max_coords is None else min(max_coords, flat.size)
        probed = 0
        for i in order:
            if probed >= quota:
                break
            orig = flat[i]
            flat[i] = orig + h
            plus, sig_p = _signed_eval(fn)
            flat[i] = orig - h
            minus, sig_m = _signed_eval(fn)
            flat[i] = orig
            if skip_kinks and not (sig_p == base_sig == sig_m):
                continue
            probed += 1
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, float(relative_error(a_flat[i], numeric)))
    return worst


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor | np.ndarray, h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, skip_kinks: bool = True) -> float:
    """Check ``fn`` (tensor -> scalar) at ``point``; returns the max relative error."""
    data = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(data, requires_grad=True)
    return grad_check_many(lambda: fn(x), [x], h=h, max_coords=max_coords, seed=seed, skip_kinks=skip_kinks)
