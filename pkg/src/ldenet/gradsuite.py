"""Finite-difference gradient suite over every primitive and composed block.

Each case returns a scalar closure and the float64 leaves it depends on.
Non-scalar outputs are reduced by a fixed random projection so every output
coordinate contributes to the checked gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import grad_check
from .autodiff.nn import Parameter
from .autodiff.rng import Rng
from .autodiff.tensor import Tensor
from .blocks import (Attention, ContentAwareEmbedding, DisentanglementBlock, DualAttention, FeedForward,
                     TransposedBlock)
from .losses import LossWeights, enhancement_loss, ssim_t
from .models import Disentangler, Enhancer, LightEnhancer, ModelConfig, Reconstructor

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclass(frozen=True)
class Case:
    name: str
    kind: str  # "primitive" or "block"
    build: Callable[[Rng], tuple[Callable[[], Tensor], list[Tensor]]]

    @property
    def tol(self) -> float:
        return PRIMITIVE_TOL if self.kind == "primitive" else BLOCK_TOL


@dataclass
class CaseResult:
    name: str
    kind: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def leaf(rng: Rng, shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(shape, low, high), requires_grad=True)


def projected(out_fn: Callable[[], Tensor | tuple], rng: Rng) -> Callable[[], Tensor]:
    """Scalarize ``out_fn`` by summing each output against fixed random weights."""
    weights: list[np.ndarray] = []

    def f() -> Tensor:
        outs = out_fn()
        outs = outs if isinstance(outs, (tuple, list)) else (outs,)
        while len(weights) < len(outs):
            weights.append(rng.uniform(outs[len(weights)].shape, -1.0, 1.0))
        total = None
        for o, w in zip(outs, weights):
            term = ops.sum(o * Tensor(w))
            total = term if total is None else total + term
        return total

    return f


def _unary(op, low=-1.0, high=1.0, shape=(3, 4)):
    def build(rng):
        x = leaf(rng, shape, low, high)
        return projected(lambda: op(x), rng), [x]

    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), low_b=-1.0, high_b=1.0):
    def build(rng):
        a = leaf(rng, shape_a)
        b = leaf(rng, shape_b, low_b, high_b)
        return projected(lambda: op(a, b), rng), [a, b]

    return build


def _away_from(points, margin=0.05):
    """Uniform draw on [-1, 1] avoiding kinks (for abs/relu/clamp)."""

    def build_leaf(rng, shape):
        x = rng.uniform(shape, -1.0, 1.0)
        for p in points:
            near = np.abs(x - p) < margin
            x[near] = p + np.where(x[near] >= p, margin, -margin)
        return Tensor(x, requires_grad=True)

    return build_leaf


def _kinked(op, points):
    make = _away_from(points)

    def build(rng):
        x = make(rng, (3, 4))
        return projected(lambda: op(x), rng), [x]

    return build


def _conv(stride, pad, k, cin=3, cout=4, bias=True):
    def build(rng):
        x = leaf(rng, (2, 7, 6, cin))
        w = leaf(rng, (k, k, cin, cout))
        b = leaf(rng, (cout,)) if bias else None
        params = [x, w] + ([b] if bias else [])
        return projected(lambda: ops.conv2d(x, w, b, stride, pad), rng), params

    return build


def _dwconv(stride, pad, k, c=3):
    def build(rng):
        x = leaf(rng, (2, 7, 6, c))
        w = leaf(rng, (k, k, c))
        b = leaf(rng, (c,))
        return projected(lambda: ops.depthwise_conv2d(x, w, b, stride, pad), rng), [x, w, b]

    return build


def _layer_norm(rng):
    x = leaf(rng, (2, 3, 5))
    g = leaf(rng, (5,))
    b = leaf(rng, (5,))
    return projected(lambda: ops.layer_norm(x, g, b), rng), [x, g, b]


def _concat(rng):
    a, b = leaf(rng, (2, 3)), leaf(rng, (2, 2))
    return projected(lambda: ops.concat([a, b], axis=-1), rng), [a, b]


def _reductions(rng):
    x = leaf(rng, (3, 4, 2))
    return projected(lambda: (ops.sum(x, axis=1), ops.mean(x, axis=(0, 2)), ops.mean(x)), rng), [x]


def _loss_reductions(rng):
    x = _away_from([0.0])(rng, (3, 4))
    return projected(lambda: (ops.abs_sum(x), ops.abs_mean(x), ops.square_mean(x)), rng), [x]


def _shape_ops(rng):
    x = leaf(rng, (2, 3, 4))
    return projected(lambda: (ops.reshape(x, (6, 4)), ops.transpose(x, (2, 0, 1)), ops.swap_last(x),
                              x[1, :, 1:3]), rng), [x]


def _pad_reflect(rng):
    x = leaf(rng, (1, 5, 4, 2))
    return projected(lambda: ops.pad_reflect(x, (1, 3), (2, 0)), rng), [x]


def _softmax(rng):
    x = leaf(rng, (2, 3, 5), -2.0, 2.0)
    return projected(lambda: (ops.softmax(x, axis=-1), ops.softmax(x, axis=1)), rng), [x]


def _matmul(rng):
    a, b = leaf(rng, (2, 3, 4)), leaf(rng, (2, 4, 5))
    return projected(lambda: ops.matmul(a, b), rng), [a, b]


def _shuffle(rng):
    x = leaf(rng, (2, 4, 6, 3))
    y = leaf(rng, (1, 2, 3, 8))
    return projected(lambda: (ops.pixel_unshuffle(x, 2), ops.pixel_shuffle(y, 2)), rng), [x, y]


def _gap(rng):
    x = leaf(rng, (2, 3, 4, 5))
    return projected(lambda: ops.global_avg_pool(x), rng), [x]


def _module_case(make, in_shapes, call=None):
    """Block case: every parameter and every input is checked."""

    def build(rng):
        module = make(rng.derive("module")).astype(np.float64)
        inputs = [leaf(rng, s) for s in in_shapes]
        fn = call or (lambda m, *xs: m(*xs))
        return projected(lambda: fn(module, *inputs), rng), inputs + module.parameters()

    return build


def _small_cfg() -> ModelConfig:
    return ModelConfig(c=4, n_blocks=2, heads=2, recon_blocks=1, light_c=4)


def _enh_loss(rng):
    s_r = leaf(rng, (1, 16, 16, 3), 0.05, 0.95)
    s_t = Tensor(rng.uniform((1, 16, 16, 3), 0.05, 0.95))
    return (lambda: enhancement_loss(s_r, s_t, LossWeights())), [s_r]


def _ssim(rng):
    x = leaf(rng, (1, 13, 12, 3), 0.0, 1.0)
    y = Tensor(rng.uniform((1, 13, 12, 3)))
    return (lambda: ssim_t(x, y)), [x]


def _cae_open(rng):
    module = ContentAwareEmbedding(4, 2, rng.derive("module")).astype(np.float64)
    fc, fi = leaf(rng, (1, 5, 6, 4)), leaf(rng, (1, 5, 6, 4))
    return projected(lambda: module(fc, fi), rng), [fc, fi] + module.parameters()


CASES: list[Case] = [
    Case("add", "primitive", _binary(ops.add, (3, 4), (4,))),
    Case("sub", "primitive", _binary(ops.sub, (2, 1, 4), (3, 1))),
    Case("mul", "primitive", _binary(ops.mul, (3, 4), (3, 1))),
    Case("div", "primitive", _binary(ops.div, (3, 4), (4,), 0.5, 2.0)),
    Case("neg", "primitive", _unary(ops.neg)),
    Case("scale", "primitive", _unary(lambda x: ops.scale(x, -2.5))),
    Case("sqrt", "primitive", _unary(ops.sqrt, 0.2, 2.0)),
    Case("exp", "primitive", _unary(ops.exp)),
    Case("square", "primitive", _unary(ops.square)),
    Case("sigmoid", "primitive", _unary(ops.sigmoid, -3.0, 3.0)),
    Case("gelu", "primitive", _unary(ops.gelu, -3.0, 3.0)),
    Case("relu", "primitive", _kinked(ops.relu, [0.0])),
    Case("abs", "primitive", _kinked(ops.abs, [0.0])),
    Case("clamp", "primitive", _kinked(lambda x: ops.clamp(x, -0.5, 0.5), [-0.5, 0.5])),
    Case("sum/mean", "primitive", _reductions),
    Case("abs_sum/abs_mean/square_mean", "primitive", _loss_reductions),
    Case("reshape/transpose/getitem", "primitive", _shape_ops),
    Case("concat", "primitive", _concat),
    Case("pad_reflect", "primitive", _pad_reflect),
    Case("matmul", "primitive", _matmul),
    Case("softmax", "primitive", _softmax),
    Case("layer_norm", "primitive", _layer_norm),
    Case("l2_normalize", "primitive", _unary(lambda x: ops.l2_normalize(x, axis=-1), shape=(2, 3, 5))),
    Case("conv2d 3x3 s1", "primitive", _conv(1, 1, 3)),
    Case("conv2d 1x1", "primitive", _conv(1, 0, 1)),
    Case("conv2d 3x3 s2", "primitive", _conv(2, 1, 3)),
    Case("conv2d 5x5 s1 no-bias", "primitive", _conv(1, 2, 5, bias=False)),
    Case("depthwise 3x3", "primitive", _dwconv(1, 1, 3)),
    Case("depthwise 5x5", "primitive", _dwconv(1, 2, 5)),
    Case("depthwise 3x3 s2", "primitive", _dwconv(2, 1, 3)),
    Case("pixel_shuffle/unshuffle", "primitive", _shuffle),
    Case("global_avg_pool", "primitive", _gap),
    Case("dual attention", "block", _module_case(lambda r: DualAttention(4, 2, r), [(1, 5, 6, 4)])),
    Case("attention", "block", _module_case(lambda r: Attention(4, 2, r), [(1, 5, 6, 4)])),
    Case("ffn", "block", _module_case(lambda r: FeedForward(4, 2.0, r), [(1, 5, 6, 4)])),
    Case("dtb", "block", _module_case(lambda r: DisentanglementBlock(4, 2, 2.0, r), [(1, 5, 6, 4)])),
    Case("ttb", "block", _module_case(lambda r: TransposedBlock(4, 2, 2.0, r), [(1, 5, 6, 4)])),
    Case("cae", "block", _cae_open),
    Case("M_dis 8x8", "block", _module_case(lambda r: Disentangler(_small_cfg(), r), [(1, 8, 8, 3)])),
    Case("M_recon 8x8", "block",
         _module_case(lambda r: Reconstructor(_small_cfg(), r), [(1, 8, 8, 4), (1, 8, 8, 4)])),
    Case("M_enh 8x8", "block", _module_case(lambda r: Enhancer(_small_cfg(), r), [(1, 8, 8, 4), (1, 8, 8, 4)])),
    Case("light enhancer 8x8", "block",
         _module_case(lambda r: LightEnhancer(_small_cfg(), r), [(1, 8, 8, 4), (1, 8, 8, 4)])),
    Case("ssim", "block", _ssim),
    Case("enhancement loss 16x16", "block", _enh_loss),
]


def run_case(case: Case, seed: int = 0, max_samples: int | None = 12) -> CaseResult:
    rng = Rng(seed, f"gradsuite.{case.name}")
    f, params = case.build(rng)
    t0 = time.perf_counter()
    err = grad_check(f, params, eps=1e-5, max_samples=max_samples, seed=seed)
    return CaseResult(case.name, case.kind, err, case.tol, time.perf_counter() - t0)


def run_suite(seed: int = 0, max_samples: int | None = 12, names=None) -> list[CaseResult]:
    cases = CASES if names is None else [c for c in CASES if c.name in names]
    return [run_case(c, seed, max_samples) for c in cases]


def worst(results: list[CaseResult]) -> CaseResult:
    """The case with the largest error relative to its tolerance."""
    return max(results, key=lambda r: r.error / r.tol)
