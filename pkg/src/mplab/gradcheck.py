"""Randomised central finite-difference checks for every differentiable primitive.

Each check draws fresh float64 inputs, reduces the op's output to a scalar
with a fixed random projection and compares the taped gradient of every input
against ``(f(x + h) - f(x - h)) / 2h``. Relative error is
``|a - n| / max(|a|, |n|, 1e-6 * max(1, F))`` where ``F`` is the sum of the
absolute projected outputs. Round-off in ``f(x +- h)`` scales with ``F`` (``f``
itself may cancel to near zero), and some true gradients are exactly zero (a
conv bias feeding train-mode BatchNorm), leaving only that round-off.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers as L
from .models import ExtractorSpec, HfmAlign, Prediction, build_extractor, compute_loss, hfm_fuse
from .tensor import Tape, Tensor, add, backward, concat, mean, mul, precision, reshape, scale, sub, sum_

H = 1e-5
TOLERANCE = 1e-4
REL_FLOOR = 1e-6
MAX_COORDS = 40  # per input per trial; smaller inputs are checked exhaustively

Builder = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[[Sequence[Tensor]], Tensor]]]


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _conv_case(stride: int, pad: int, theta: float = 0.0) -> Builder:
    def build(rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        op = L.cdc2d if theta else L.conv2d
        return [x, w, b], lambda t: op(t[0], L.ConvParams(t[1], t[2], stride, pad, theta))
    return build


def _pointwise_conv(rng):
    x = rng.standard_normal((2, 5, 3, 3))
    w = rng.standard_normal((2, 5, 1, 1))
    return [x, w], lambda t: L.conv2d(t[0], L.ConvParams(t[1]))


def _bn_train(rng):
    x = rng.standard_normal((3, 2, 3, 3)) * 2 + 1
    g, b = rng.standard_normal(2), rng.standard_normal(2)

    def f(t):
        p = L.BatchNormParams(t[1], t[2], np.zeros(2), np.ones(2), update_stats=False)
        return L.batchnorm(t[0], p)
    return [x, g, b], f


def _bn_eval(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    return [x, g, b], lambda t: L.batchnorm(t[0], L.BatchNormParams(t[1], t[2], rm, rv, training=False))


def _unary(op, margin: float = 0.0) -> Builder:
    def build(rng):
        x = _away_from_zero(rng, (2, 3, 4), margin) if margin else rng.standard_normal((2, 3, 4))
        return [x], lambda t: op(t[0])
    return build


def _upsample(rng):
    factor = int(rng.integers(1, 4))
    return [rng.standard_normal((2, 2, 3, 3))], lambda t: L.upsample_nearest(t[0], factor)


def _avg_pool(rng):
    return [rng.standard_normal((2, 2, 4, 4))], lambda t: L.avg_pool2d(t[0], 2)


def _gap(rng):
    return [rng.standard_normal((2, 3, 3, 3))], lambda t: L.global_avg_pool(t[0])


def _linear(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    return [x, w, b], lambda t: L.linear(t[0], t[1], t[2])


def _bce(rng):
    logits = rng.standard_normal((4, 2))
    labels = rng.integers(0, 2, 4)
    return [logits], lambda t: L.bce_loss(L.softmax(t[0]), labels)


def _mse(rng):
    pred, target = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3))
    return [pred], lambda t: L.mse_loss(t[0], target)


def _joint_loss(rng):
    logits, mlog = rng.standard_normal((3, 2)), rng.standard_normal((3, 1, 2, 2))
    labels = rng.integers(0, 2, 3)
    return [logits, mlog], lambda t: compute_loss(Prediction(L.softmax(t[0]), L.sigmoid(t[1])), labels)


def _elementwise(rng):
    a, b, c = (rng.standard_normal((2, 3, 2, 2)) for _ in range(3))

    def f(t):
        y = mul(add(t[0], t[1]), sub(t[2], scale(t[0], 0.5)))
        y = concat([y, reshape(t[1], (2, 3, 2, 2))], axis=1)
        return add(mean(y, axis=(2, 3)), sum_(y, axis=(2, 3)))
    return [a, b, c], f


def _hfm(rng):
    mt, mb, mp = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 2, 2, 2))
    wt, wb, wp = rng.standard_normal((2, 3, 1, 1)), rng.standard_normal((2, 3, 1, 1)), rng.standard_normal((2, 2, 1, 1))
    bias = rng.standard_normal(2)

    def f(t):
        align = HfmAlign(L.ConvParams(t[3], t[6]), L.ConvParams(t[4]), L.ConvParams(t[5]))
        return hfm_fuse(t[0], t[1], t[2], align)
    return [mt, mb, mp, wt, wb, wp, bias], f


def _composite3(rng):
    x = rng.standard_normal((3, 4))
    w1, w2, w3 = rng.standard_normal((4, 5)), rng.standard_normal((5, 5)), rng.standard_normal((5, 2))
    return [x, w1, w2, w3], lambda t: L.softmax(L.linear(L.sigmoid(L.linear(L.sigmoid(L.linear(t[0], t[1])), t[2])), t[3]))


def _extractor(variant: str) -> Builder:
    spec = ExtractorSpec(variant=variant, hidden_channels=3)

    def build(rng):
        phi = build_extractor(spec, rng)
        names = phi.params.names()
        while True:
            x = rng.uniform(0, 1, (2, 3, 4, 4))
            if _relu_margin(phi, x) > 1e-3:
                break
            phi = build_extractor(spec, rng)

        def f(t):
            for name, v in zip(names, t[1:]):
                phi.params.params[name] = v
            return phi(t[0], training=True, update_stats=False)
        return [x] + [phi.params[n].data.copy() for n in names], f
    return build


def _relu_margin(phi, x: np.ndarray) -> float:
    """Smallest |pre-activation| at any ReLU of the extractor for input ``x``."""
    spec, ps = phi.spec, phi.params
    th = spec.cdc_theta if spec.uses_cdc else 0.0
    h, low = Tensor(x), np.inf
    for i in range(spec.depth - 1):
        h = L.conv2d(h, ps.conv(f"conv{i}", 1, 1, th))
        h = L.batchnorm(h, ps.bn(f"bn{i}", True, False))
        low = min(low, float(np.abs(h.data).min()))
        h = L.relu(h)
    return low


CHECKS: dict[str, Builder] = {
    "elementwise": _elementwise,
    "conv2d": _conv_case(1, 1),
    "conv2d_stride2": _conv_case(2, 1),
    "conv2d_1x1": _pointwise_conv,
    "cdc2d": _conv_case(1, 1, 0.7),
    "batchnorm_train": _bn_train,
    "batchnorm_eval": _bn_eval,
    "relu": _unary(L.relu, margin=0.05),
    "sigmoid": _unary(L.sigmoid),
    "softmax": _unary(L.softmax),
    "upsample_nearest": _upsample,
    "avg_pool2d": _avg_pool,
    "global_avg_pool": _gap,
    "linear": _linear,
    "bce_loss": _bce,
    "mse_loss": _mse,
    "joint_loss": _joint_loss,
    "hfm_fuse": _hfm,
    "composite3": _composite3,
    "extractor_conv2": _extractor("CONV2"),
    "extractor_cdc3": _extractor("CDC3"),
}


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(a, n, f_scale: float = 1.0):
    floor = REL_FLOOR * max(1.0, abs(f_scale))
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_once(build: Builder, rng: np.random.Generator) -> float:
    """One randomised trial; returns the largest relative error over checked coordinates."""
    arrays, fn = build(rng)
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(leaves)
        proj = rng.standard_normal(out.shape)
        loss = sum_(mul(out, Tensor(proj)))
    f_scale = float(np.sum(np.abs(out.data * proj)))
    backward(loss, tape)

    def value() -> float:
        return float(np.sum(fn(leaves).data * proj))

    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > MAX_COORDS:
            coords = rng.choice(flat.size, MAX_COORDS, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + H
            fp = value()
            flat[i] = orig - H
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * H)
            worst = max(worst, float(rel_error(analytic.reshape(-1)[i], num, f_scale)))
    return worst


def run_check(name: str, trials: int = 100, seed: int = 0) -> CheckResult:
    build = CHECKS[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    with precision(np.float64):
        worst = max(check_once(build, rng) for _ in range(trials))
    return CheckResult(name, trials, worst, time.perf_counter() - start)


def run_suite(trials: int = 100, seed: int = 0, names: Optional[Sequence[str]] = None,
              report: Optional[Callable[[CheckResult], None]] = None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        res = run_check(name, trials, seed)
        if report is not None:
            report(res)
        results.append(res)
    return results
