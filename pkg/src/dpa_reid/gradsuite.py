"""The release gradient-check suite: every differentiable piece, checked in float64."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, losses, model, pooling
from .autodiff import functional as F
from .autodiff.gradcheck import grad_check_many
from .autodiff.tensor import Tensor

TOL = 1e-4
MODEL_TOL = 1e-3
# Deep-model gradients reach 1e-8..1e-12 while the loss is O(1), so at
# h=1e-5 the central difference is mostly roundoff. A wider step is safe
# because probes that cross a relu/argmax switch are resampled.
MODEL_H = 1e-3


@dataclass
class CheckItem:
    name: str
    build: Callable  # seed -> (fn, tensors)
    tol: float = TOL
    points: int = 3
    max_coords: int | None = None
    h: float = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def away_from_zero(a: np.ndarray, gap: float = 1e-3) -> np.ndarray:
    """Push entries out of (-gap, gap) so kinks at zero are never probed."""
    return np.where(a >= 0, a + gap, a - gap)


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    return F.sum(F.mul(out, Tensor(rng.standard_normal(out.shape))))


def _unary(op, positive=False, kink=False, shape=(2, 3, 4)):
    def build(seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal(shape)
        if positive:
            a = np.abs(a) + 0.5
        if kink:
            a = away_from_zero(a)
        x = _leaf(a)
        r = Tensor(rng.standard_normal(op(Tensor(a)).shape))
        return (lambda: F.sum(F.mul(op(x), r))), [x]
    return build


def _binary(op, shape_a=(2, 3, 4), shape_b=(3, 1), positive_b=False):
    def build(seed):
        rng = np.random.default_rng(seed)
        a = _leaf(rng.standard_normal(shape_a))
        bd = rng.standard_normal(shape_b)
        b = _leaf(np.abs(bd) + 0.5 if positive_b else bd)
        r = Tensor(rng.standard_normal(op(a, b).shape))
        return (lambda: F.sum(F.mul(op(a, b), r))), [a, b]
    return build


def _conv(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng.standard_normal((2, 3, 5, 5)))
    w = _leaf(rng.standard_normal((4, 3, 3, 3)))
    b = _leaf(rng.standard_normal(4))
    stride = 1 + seed % 2
    r = Tensor(rng.standard_normal(F.conv2d(x, w, b, stride, 1).shape))
    return (lambda: F.sum(F.mul(F.conv2d(x, w, b, stride, 1), r))), [x, w, b]


def _bn(training):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng.standard_normal((3, 2, 3, 3)))
        g = _leaf(rng.uniform(0.5, 1.5, 2))
        b = _leaf(rng.standard_normal(2))
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
        r = Tensor(rng.standard_normal(x.shape))
        return (lambda: F.sum(F.mul(F.batchnorm2d(x, g, b, rm, rv, training), r))), [x, g, b]
    return build


def _pool(kind, axis, mode=None):
    def build(seed):
        rng = np.random.default_rng(seed)
        if kind == "gem":
            a = rng.uniform(0.1, 2.0, (1, 4, 4, 4))
        else:
            a = rng.standard_normal((1, 4, 4, 4))
        x = _leaf(a)

        def fn():
            if kind == "avg":
                out = pooling.avg_pool(x, axis)
            elif kind == "min":
                out = pooling.min_pool(x, axis)
            elif kind == "gem":
                out = pooling.gem_pool(x, axis, pooling.GemParams(3.0))
            else:
                out = pooling.soft_pool(x, axis, mode)
            return F.sum(F.mul(out, r))

        r = Tensor(np.random.default_rng(seed + 100).standard_normal(_pool_shape(kind, axis, mode, a.shape)))
        return fn, [x]
    return build


def _pool_shape(kind, axis, mode, shape):
    n, c, h, w = shape
    if kind == "soft" and mode is pooling.SoftMode.RETAINED_MAP:
        return shape
    return (n, c, 1, 1) if axis is pooling.PoolAxis.SPATIAL else (n, h * w, 1, 1)


def randomize(module, rng):
    """Move every parameter and BN buffer off its init values (off ReLU kinks at zero)."""
    for name, p in module.named_parameters():
        if name.endswith(("gamma",)):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(("beta", "bias")):
            p.data[...] = away_from_zero(rng.normal(0.0, 0.5, p.shape), 0.05)
    for name, buf in module.named_buffers():
        if name.endswith("running_mean"):
            buf[...] = rng.normal(0.0, 0.2, buf.shape)
        else:
            buf[...] = rng.uniform(0.5, 2.0, buf.shape)
    return module


def _module_item(factory, shape, training=True):
    def build(seed):
        rng = np.random.default_rng(seed)
        m = randomize(factory(rng), rng)
        m.train(training)
        x = _leaf(rng.standard_normal(shape))
        r = Tensor(rng.standard_normal(m(x).shape))
        return (lambda: F.sum(F.mul(m(x), r))), [x] + m.parameters()
    return build


def _lsce(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng.standard_normal((6, 5)))
    labels = rng.integers(0, 5, 6)
    return (lambda: losses.lsce_loss(x, labels, losses.LsceParams(0.1))), [x]


def _hmt(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 3)
    # well-separated clusters keep every hinge strictly active or inactive
    e = rng.standard_normal((9, 4)) * 0.4 + np.repeat(rng.standard_normal((3, 4)) * 0.5, 3, axis=0)
    x = _leaf(e)
    return (lambda: losses.hmt_loss(x, labels, losses.HmtParams(0.3))), [x]


def _full_model(cfg_kwargs, n_images, training):
    def build(seed):
        rng = np.random.default_rng(seed)
        cfg = model.BackboneConfig(**cfg_kwargs)
        m = model.build_model(cfg, seed)
        m.train(training)
        x = _leaf(rng.uniform(0.0, 1.0, (n_images, 3) + cfg.input_size))
        labels = rng.integers(0, cfg.num_classes, n_images)
        return (lambda: losses.lsce_loss(m(x).logits, labels)), [x] + m.parameters()
    return build


def suite() -> list:
    P, S = pooling.PoolAxis, pooling.SoftMode
    items = [
        CheckItem("add", _binary(F.add)),
        CheckItem("sub", _binary(F.sub)),
        CheckItem("mul", _binary(F.mul)),
        CheckItem("div", _binary(F.div, positive_b=True)),
        CheckItem("pow", _unary(lambda t: F.pow(t, 2.5), positive=True)),
        CheckItem("exp", _unary(F.exp)),
        CheckItem("log", _unary(F.log, positive=True)),
        CheckItem("neg", _unary(F.neg)),
        CheckItem("sum", _unary(lambda t: F.sum(t, axis=(0, 2), keepdims=True))),
        CheckItem("mean", _unary(lambda t: F.mean(t, axis=1))),
        CheckItem("max", _unary(lambda t: F.max(t, axis=2))),
        CheckItem("min", _unary(lambda t: F.min(t, axis=(0, 1)))),
        CheckItem("reshape", _unary(lambda t: F.reshape(t, (4, 6)))),
        CheckItem("transpose", _unary(lambda t: F.transpose(t, (2, 0, 1)))),
        CheckItem("concat", _binary(lambda a, b: F.concat([a, b], axis=1), (2, 3), (2, 5))),
        CheckItem("sigmoid", _unary(F.sigmoid)),
        CheckItem("relu", _unary(F.relu, kink=True)),
        CheckItem("softmax", _unary(lambda t: F.softmax(t, axis=1))),
        CheckItem("log_softmax", _unary(lambda t: F.log_softmax(t, axis=2))),
        CheckItem("matmul", _binary(F.matmul, (3, 4), (4, 2))),
        CheckItem("clamp_min", _unary(lambda t: F.clamp_min(t, 0.1), kink=True)),
        CheckItem("conv2d", _conv),
        CheckItem("batchnorm2d[train]", _bn(True)),
        CheckItem("batchnorm2d[eval]", _bn(False)),
    ]
    for axis in (P.SPATIAL, P.CHANNEL):
        tag = axis.value
        items += [
            CheckItem(f"avg_pool[{tag}]", _pool("avg", axis)),
            CheckItem(f"min_pool[{tag}]", _pool("min", axis)),
            CheckItem(f"gem_pool[{tag}]", _pool("gem", axis)),
            CheckItem(f"soft_pool[{tag},scalar]", _pool("soft", axis, S.SCALAR)),
            CheckItem(f"soft_pool[{tag},retained_map]", _pool("soft", axis, S.RETAINED_MAP)),
        ]
    items += [
        CheckItem("obr[4x4]", _module_item(lambda rng: attention.ObrBlock(3, 4, rng, 4), (2, 3, 4, 4)),
                  points=2, max_coords=25),
        CheckItem("obr[1x1]", _module_item(lambda rng: attention.ObrBlock(4, 4, rng, 4), (4, 4, 1, 1)),
                  points=2, max_coords=25),
        CheckItem("cpa", _module_item(lambda rng: attention.CpaModule(4, rng), (1, 4, 5, 5)),
                  points=2, max_coords=20),
        CheckItem("cpa[1x8x6x6]", _module_item(lambda rng: attention.CpaModule(8, rng), (1, 8, 6, 6)),
                  points=1, max_coords=12),
        CheckItem("spa", _module_item(lambda rng: attention.SpaModule(4, 3, 3, rng), (1, 4, 3, 3)),
                  points=2, max_coords=20),
        CheckItem("spa[batch4]", _module_item(lambda rng: attention.SpaModule(4, 3, 3, rng), (4, 4, 3, 3)),
                  points=1, max_coords=20),
        CheckItem("dpa", _module_item(lambda rng: attention.DpaModule(4, 4, 4, rng), (4, 4, 4, 4)),
                  points=2, max_coords=12),
        CheckItem("lsce", _lsce),
        CheckItem("hmt", _hmt),
        CheckItem("full_model", _full_model({"num_classes": 5}, 2, training=False), tol=MODEL_TOL,
                  points=1, max_coords=2, h=MODEL_H),
        CheckItem("full_model[train]", _full_model(
            {"stage_channels": (4, 8, 8, 8), "input_size": (16, 16), "num_classes": 3}, 4, training=True),
            tol=MODEL_TOL, points=1, max_coords=6, h=MODEL_H),
    ]
    return items


def run_suite(items=None, seed: int = 0, report=print) -> list:
    results = []
    for item in items or suite():
        start = time.perf_counter()
        worst = 0.0
        for k in range(item.points):
            fn, tensors = item.build(seed + k)
            try:
                err = grad_check_many(fn, tensors, h=item.h, max_coords=item.max_coords, seed=seed + k)
            except (ArithmeticError, ValueError) as exc:
                report(f"{item.name}: error during probing: {exc}")
                err = float("inf")
            worst = max(worst, err)
        res = CheckResult(item.name, worst, item.tol, time.perf_counter() - start)
        results.append(res)
        if report is not None:
            status = "PASS" if res.passed else "FAIL"
            report(f"{res.name:<34s} {res.error:10.3e}  < {res.tol:.0e}  {status}  ({res.seconds:.1f}s)")
    return results
