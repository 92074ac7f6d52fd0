"""Training objectives and image-quality metrics.

Every L1/L2 term is normalized by element count. SSIM is computed on
ITU-R 601 luma with an 11x11 Gaussian window (sigma 1.5) over valid window
positions, with dynamic range 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module
from .autodiff.rng import Rng
from .autodiff.tensor import ShapeError, Tensor, no_grad
from .errors import ConfigError

PSNR_CAP_DB = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 0.2
    lambda_s: float = 1.0
    lambda_p: float = 1.0

    def __post_init__(self):
        if min(self.lambda_recon, self.lambda_s, self.lambda_p) < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "arguments must have identical shapes", a.shape, b.shape)


def _tensor(x, dtype=np.float64) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# disentanglement objectives
# ---------------------------------------------------------------------------

def content_consistency_loss(c_low: Tensor, c_normal: Tensor) -> Tensor:
    _same_shape("content_consistency_loss", c_low, c_normal)
    return ops.abs_mean(c_low - c_normal)


Reconstructor = Callable[[Tensor, Tensor], Tensor]


def reconstruction_loss(c_low: Tensor, c_normal: Tensor, i_low: Tensor, i_normal: Tensor,
                        s_low: Tensor, s_normal: Tensor, recon: Reconstructor) -> Tensor:
    """Sum over all four (Content, Illumination) pairings of ``mean|recon(C_i, I_j) - S_j|``.

    The target image follows the Illumination index. Batched (4-D) inputs are
    stacked into a single ``recon`` call; equal term sizes make the sum of the
    four means equal to four times the stacked mean.
    """
    _same_shape("reconstruction_loss", c_low, c_normal)
    _same_shape("reconstruction_loss", i_low, i_normal)
    _same_shape("reconstruction_loss", s_low, s_normal)
    if c_low.ndim == 4:
        contents = ops.concat([c_low, c_low, c_normal, c_normal], axis=0)
        illums = ops.concat([i_low, i_normal, i_low, i_normal], axis=0)
        targets = ops.concat([s_low, s_normal, s_low, s_normal], axis=0)
        return ops.scale(ops.abs_mean(recon(contents, illums) - targets), 4.0)
    total = None
    for content in (c_low, c_normal):
        for illum, target in ((i_low, s_low), (i_normal, s_normal)):
            term = ops.abs_mean(recon(content, illum) - target)
            total = term if total is None else total + term
    return total


def disentangle_loss(l_cc, l_recon, lambda_recon: float = 0.2):
    return l_cc + l_recon * lambda_recon


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(x, y) -> float:
    """Peak-1 PSNR in dB; identical inputs (and anything above) report 100 dB."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    if xd.shape != yd.shape:
        raise ShapeError("psnr", "arguments must have identical shapes", xd.shape, yd.shape)
    diff = xd.astype(np.float64) - yd.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized ``size x size`` Gaussian (outer product of 1-D profiles)."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def to_luma(x: Tensor) -> Tensor:
    if x.shape[-1] == 1:
        return x
    if x.shape[-1] != 3:
        raise ShapeError("ssim", "expected RGB or single-channel images", x.shape)
    w = Tensor(np.asarray(LUMA_WEIGHTS, dtype=x.dtype).reshape(3, 1))
    return ops.matmul(x, w)


def ssim_map(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """Per-window SSIM over valid positions (differentiable)."""
    _same_shape("ssim", x, y)
    if x.shape[-3] < params.window or x.shape[-2] < params.window:
        raise ShapeError("ssim", f"image smaller than the {params.window}x{params.window} window", x.shape)
    lx, ly = to_luma(x), to_luma(y)
    win = Tensor(gaussian_window(params.window, params.sigma).astype(x.dtype)[..., None])

    def blur(t: Tensor) -> Tensor:
        return ops.depthwise_conv2d(t, win)

    mu_x, mu_y = blur(lx), blur(ly)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = blur(lx * lx) - mu_xx
    s_yy = blur(ly * ly) - mu_yy
    s_xy = blur(lx * ly) - mu_xy
    c1, c2 = params.c1, params.c2
    num = (ops.scale(mu_xy, 2.0) + c1) * (ops.scale(s_xy, 2.0) + c2)
    den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2)
    return num / den


def ssim_t(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    return ops.mean(ssim_map(x, y, params))


def ssim(x, y, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM as a float, evaluated in float64."""
    with no_grad():
        xt = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
        yt = Tensor(np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64))
        return float(ssim_t(xt, yt, params).data)


def contrast_structure_map(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """The ``(2 s_xy + C2) / (s_xx + s_yy + C2)`` factor of SSIM alone."""
    lx, ly = to_luma(_tensor(x)), to_luma(_tensor(y))
    win = Tensor(gaussian_window(params.window, params.sigma).astype(lx.dtype)[..., None])

    def blur(t):
        return ops.depthwise_conv2d(t, win)

    mu_x, mu_y = blur(lx), blur(ly)
    s_xx = blur(lx * lx) - mu_x * mu_x
    s_yy = blur(ly * ly) - mu_y * mu_y
    s_xy = blur(lx * ly) - mu_x * mu_y
    return (ops.scale(s_xy, 2.0) + params.c2) / (s_xx + s_yy + params.c2)


# ---------------------------------------------------------------------------
# perceptual stand-in
# ---------------------------------------------------------------------------

THETA_SEED = 20240601
THETA_WIDTHS = (3, 8, 16, 32)
THETA_PREFIX = "__theta__."
THETA_ASSET = "theta.ldec"


class PerceptualFeatures(Module):
    """Fixed, never-trained feature extractor: three stride-2 3x3 convs with GELU."""

    def __init__(self, seed: int = THETA_SEED):
        rng = Rng(seed, "theta")
        self.stages = [Conv2d(cin, cout, 3, rng, stride=2, pad=1)
                       for cin, cout in zip(THETA_WIDTHS[:-1], THETA_WIDTHS[1:])]

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for stage in self.stages:
            x = ops.gelu(stage(x))
            feats.append(x)
        return feats


@lru_cache(maxsize=None)
def _theta_weights() -> dict[str, np.ndarray]:
    from .checkpoint import read_tensors

    ref = resources.files("ldenet") / "assets" / THETA_ASSET
    with resources.as_file(ref) as path:
        return read_tensors(path)


@lru_cache(maxsize=None)
def perceptual_network(dtype: str = "float32") -> PerceptualFeatures:
    """The shipped feature extractor, frozen, cast to ``dtype``."""
    net = PerceptualFeatures()
    weights = _theta_weights()
    for name, p in net.named_parameters():
        p.data = weights[THETA_PREFIX + name].astype(dtype)
    net.requires_grad_(False)
    return net


def perceptual_distance(x: Tensor, y: Tensor) -> Tensor:
    """Mean over stages of the mean squared feature difference."""
    _same_shape("perceptual_distance", x, y)
    net = perceptual_network(str(x.dtype))
    fx, fy = net(x), net(y)
    total = None
    for a, b in zip(fx, fy):
        term = ops.square_mean(a - b)
        total = term if total is None else total + term
    return ops.scale(total, 1.0 / len(fx))


def enhancement_loss(s_r: Tensor, s_t: Tensor, weights: LossWeights = LossWeights(),
                     ssim_params: SsimParams = SsimParams()) -> Tensor:
    """``mean|S_r - S_t| + lambda_s (1 - SSIM) + lambda_p * perceptual``."""
    _same_shape("enhancement_loss", s_r, s_t)
    loss = ops.abs_mean(s_r - s_t)
    if weights.lambda_s:
        loss = loss + ops.scale(1.0 - ssim_t(s_r, s_t, ssim_params), weights.lambda_s)
    if weights.lambda_p:
        loss = loss + ops.scale(perceptual_distance(s_r, s_t), weights.lambda_p)
    return loss
