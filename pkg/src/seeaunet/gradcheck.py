"""Central finite-difference gradient checks for every primitive op and block.

Each check projects the op's output onto a fixed random direction ``w`` so the
scalar objective is ``sum(w * f(inputs))``, then compares the analytic gradient
from :func:`~seeaunet.autodiff.backward` with central differences in float64.

The elementwise error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
The floor keeps entries whose true gradient is essentially zero from dividing
finite-difference round-off (about ``eps * |objective| / h``) by a tiny number.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import blocks, ops
from .autodiff import Tensor, backward, no_grad
from .objectives import FocalLossConfig, binary_focal_loss
from .params import ParameterStore

STEP = 1e-5
TOLERANCE = 1e-6
FLOOR = 1e-3
KINK_MARGIN = 1e-2


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    kink_distance: float = float("inf")

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(objective: Callable[[], float], array: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``objective`` w.r.t. every entry of ``array`` (mutated and restored in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = objective()
        flat[i] = orig - h
        minus = objective()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def check(name: str, fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0, h: float = STEP) -> GradCheckResult:
    """Compare analytic and numeric gradients of ``sum(w * fn(*inputs))`` for all inputs requiring grad."""
    rng = np.random.default_rng(seed)
    with ops.kink_monitor() as kinks:
        out = fn(*inputs)
    w = rng.standard_normal(out.shape)

    def objective() -> float:
        with no_grad():
            return float(np.sum(w * fn(*inputs).data))

    loss = ops.sum_all(ops.mul(out, Tensor(w)))
    backward(loss)
    worst, count = 0.0, 0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        numeric = numeric_grad(objective, t.data, h)
        err = relative_error(analytic, numeric)
        worst = max(worst, float(err.max(initial=0.0)))
        count += t.size
    distance = min((d for _, d in kinks), default=float("inf"))
    return GradCheckResult(name, worst, count, distance)


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _separated(rng, shape, spacing=0.05):
    """Values whose pairwise gaps are all multiples of ``spacing``, away from 0 by >= spacing/2."""
    n = int(np.prod(shape))
    grid = (np.arange(n) - n / 2 + 0.5) * spacing
    return Tensor(rng.permutation(grid).reshape(shape), requires_grad=True, dtype=np.float64)


def _kink_free(build, seed: int, tries: int = 200):
    """Draw inputs until every relu/maxpool input stays ``KINK_MARGIN`` away from its kink."""
    for attempt in range(tries):
        rng = np.random.default_rng(seed + attempt)
        fn, inputs = build(rng)
        with ops.kink_monitor() as kinks:
            fn(*inputs)
        if min((d for _, d in kinks), default=np.inf) >= KINK_MARGIN:
            return fn, inputs
    raise RuntimeError("could not draw kink-free inputs")


def _factory(rng) -> blocks.ParamFactory:
    return blocks.ParamFactory(ParameterStore(), rng, np.float64)


def _randomise(f: blocks.ParamFactory, rng) -> list:
    """Make every trainable parameter a float64 leaf with non-trivial values."""
    leaves = []
    for p in f.store:
        if p.trainable:
            p.tensor.data[...] = rng.standard_normal(p.tensor.shape) * 0.5 + (1.0 if p.name.endswith("gamma") else 0.0)
            leaves.append(p.tensor)
        else:
            if p.name.endswith("running_var"):
                p.tensor.data[...] = rng.uniform(0.5, 2.0, p.tensor.shape)
            else:
                p.tensor.data[...] = rng.standard_normal(p.tensor.shape) * 0.1
    return leaves


def _cases() -> dict:
    """name -> builder(rng) returning (fn, inputs)."""

    def conv(rng):
        x, w, b = _leaf(rng, (2, 3, 5, 5)), _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
        return (lambda x, w, b: ops.conv2d(x, w, b, 1, "same")), [x, w, b]

    def conv_strided(rng):
        x, w, b = _leaf(rng, (1, 2, 6, 6)), _leaf(rng, (3, 2, 2, 2)), _leaf(rng, (3,))
        return (lambda x, w, b: ops.conv2d(x, w, b, 2, "same")), [x, w, b]

    def conv_valid(rng):
        x, w, b = _leaf(rng, (1, 2, 5, 4)), _leaf(rng, (2, 2, 3, 2)), _leaf(rng, (2,))
        return (lambda x, w, b: ops.conv2d(x, w, b, 1, "valid")), [x, w, b]

    def maxpool(rng):
        return (lambda x: ops.maxpool2d(x, 2, 2)), [_separated(rng, (2, 2, 4, 6))]

    def gap(rng):
        return ops.global_avg_pool, [_leaf(rng, (2, 3, 3, 4))]

    def bn_train(rng):
        c = 3
        rm, rv = Tensor(np.zeros(c)), Tensor(np.ones(c))
        fn = lambda x, g, b: ops.batchnorm2d(x, g, b, rm, rv, True)  # noqa: E731
        return fn, [_leaf(rng, (2, c, 3, 3)), _leaf(rng, (c,)), _leaf(rng, (c,))]

    def bn_infer(rng):
        c = 3
        rm, rv = Tensor(rng.standard_normal(c)), Tensor(rng.uniform(0.5, 2, c))
        fn = lambda x, g, b: ops.batchnorm2d(x, g, b, rm, rv, False)  # noqa: E731
        return fn, [_leaf(rng, (2, c, 3, 3)), _leaf(rng, (c,)), _leaf(rng, (c,))]

    def dense(rng):
        return ops.dense, [_leaf(rng, (4, 5)), _leaf(rng, (5, 3)), _leaf(rng, (3,))]

    def relu(rng):
        return ops.relu, [_separated(rng, (2, 3, 4))]

    def sigmoid(rng):
        return ops.sigmoid, [_leaf(rng, (2, 3, 4), 2.0)]

    def upsample(rng):
        return (lambda x: ops.upsample2d(x, 2)), [_leaf(rng, (2, 2, 3, 3))]

    def concat(rng):
        return ops.concat_channels, [_leaf(rng, (2, 2, 3, 3)), _leaf(rng, (2, 3, 3, 3))]

    def add(rng):
        return ops.add, [_leaf(rng, (2, 3, 4)), _leaf(rng, (2, 3, 4))]

    def mul(rng):
        return ops.mul, [_leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 1, 4, 4))]

    def scale(rng):
        return ops.scale_channels, [_leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 3, 1, 1))]

    def fan_out(rng):
        fn = lambda x: ops.add(ops.sigmoid(x), ops.mul(x, x))  # noqa: E731
        return fn, [_leaf(rng, (3, 4))]

    def focal(rng):
        pred = Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 4)), requires_grad=True, dtype=np.float64)
        target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        return (lambda p: binary_focal_loss(p, target, FocalLossConfig())), [pred]

    def conv_block(rng):
        f = _factory(rng)
        p = f.conv_block("b", 2, 3)
        leaves = _randomise(f, rng)
        x = _leaf(rng, (2, 2, 4, 4))
        return (lambda x, *_: blocks.conv_block(x, p, train=True)), [x] + leaves

    def se(rng):
        f = _factory(rng)
        p = f.se_block("se", 4, 2)
        leaves = _randomise(f, rng)
        x = _leaf(rng, (2, 4, 3, 3))
        return (lambda x, *_: blocks.se_block(x, p)), [x] + leaves

    def gating(rng):
        f = _factory(rng)
        p = f.gating("g", 4, 2)
        leaves = _randomise(f, rng)
        x = _leaf(rng, (2, 4, 2, 2))
        return (lambda x, *_: blocks.gating_signal(x, p, train=True)), [x] + leaves

    def gate(rng, layout="compact"):
        f = _factory(rng)
        p = f.attention_gate("ag", 2, 3, 2, layout)
        leaves = _randomise(f, rng)
        xs, g = _leaf(rng, (2, 2, 4, 4)), _leaf(rng, (2, 3, 2, 2))
        return (lambda xs, g, *_: blocks.attention_gate(xs, g, p, train=True)), [xs, g] + leaves

    def residual(rng, layout="compact"):
        f = _factory(rng)
        p = f.residual_block("r", 2, 3, layout)
        leaves = _randomise(f, rng)
        x = _leaf(rng, (2, 2, 4, 4))
        return (lambda x, *_: blocks.residual_conv_block(x, p, train=True)), [x] + leaves

    return {
        "conv2d": conv,
        "conv2d_stride2": conv_strided,
        "conv2d_valid": conv_valid,
        "maxpool2d": maxpool,
        "global_avg_pool": gap,
        "batchnorm2d_train": bn_train,
        "batchnorm2d_infer": bn_infer,
        "dense": dense,
        "relu": relu,
        "sigmoid": sigmoid,
        "upsample2d": upsample,
        "concat_channels": concat,
        "add": add,
        "mul_broadcast": mul,
        "scale_channels": scale,
        "fan_out": fan_out,
        "binary_focal_loss": focal,
        "conv_block": conv_block,
        "se_block": se,
        "gating_signal": gating,
        "attention_gate": gate,
        "attention_gate_reference": lambda rng: gate(rng, "reference"),
        "residual_conv_block": residual,
        "residual_conv_block_reference": lambda rng: residual(rng, "reference"),
    }


CASE_NAMES = tuple(_cases())


def run_case(name: str, seed: int = 0) -> GradCheckResult:
    fn, inputs = _kink_free(_cases()[name], seed)
    return check(name, fn, inputs, seed=seed)


def run_all(seed: int = 0, names: Sequence[str] | None = None) -> list[GradCheckResult]:
    return [run_case(n, seed) for n in (names or CASE_NAMES)]
