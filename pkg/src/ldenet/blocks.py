"""Transformer building blocks with channel-wise (transposed) attention.

All blocks take ``(B, H, W, C)`` tensors; a bare ``(H, W, C)`` input is
treated as a batch of one and returned without the batch axis.
"""

from __future__ import annotations

import functools

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Dense, DepthwiseConv2d, LayerNorm, Module, Parameter
from .autodiff.rng import Rng
from .autodiff.tensor import ShapeError, Tensor
from .errors import ConfigError


def _batched(method):
    @functools.wraps(method)
    def wrapper(self, *xs: Tensor):
        squeeze = xs[0].ndim == 3
        if squeeze:
            xs = tuple(ops.reshape(x, (1,) + x.shape) for x in xs)
        out = method(self, *xs)
        if not squeeze:
            return out
        if isinstance(out, tuple):
            return tuple(ops.reshape(o, o.shape[1:]) for o in out)
        return ops.reshape(out, out.shape[1:])

    return wrapper


def to_heads(x: Tensor, heads: int) -> Tensor:
    """``(B, H, W, C) -> (B, heads, C/heads, H*W)``: one row per channel."""
    B, H, W, C = x.shape
    return ops.transpose(ops.reshape(x, (B, H * W, heads, C // heads)), (0, 2, 3, 1))


def from_heads(x: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    return ops.reshape(ops.transpose(x, (0, 3, 1, 2)), shape)


def attention_logits(q: Tensor, k: Tensor, temperature: Tensor) -> Tensor:
    """Channel-by-channel logits ``alpha * q_hat k_hat^T`` per head.

    Each channel row of ``q`` and ``k`` is L2-normalized over positions first,
    so logits are cosine similarities scaled by the per-head temperature.
    """
    qn = ops.l2_normalize(q, axis=-1)
    kn = ops.l2_normalize(k, axis=-1)
    return ops.matmul(qn, ops.swap_last(kn)) * temperature


def channel_attention(q: Tensor, k: Tensor, v: Tensor, temperature: Tensor, dual: bool = False):
    """Mix the value channels with softmax(M); with ``dual`` also softmax(-M).

    The logits ``M`` are computed once and shared by both branches.
    """
    logits = attention_logits(q, k, temperature)
    a_c = ops.matmul(ops.softmax(logits, axis=-1), v)
    if not dual:
        return a_c
    a_i = ops.matmul(ops.softmax(ops.neg(logits), axis=-1), v)
    return a_c, a_i


def _check_heads(c: int, heads: int) -> None:
    if heads < 1 or c % heads:
        raise ConfigError(f"head count {heads} must divide channel count {c}")


class _QKV(Module):
    """Pointwise projection to ``n*c`` channels then 3x3 depthwise filtering."""

    def __init__(self, c: int, n: int, rng: Rng):
        self.pointwise = Conv2d(c, n * c, 1, rng)
        self.depthwise = DepthwiseConv2d(n * c, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.depthwise(self.pointwise(x))


class DualAttention(Module):
    """Content/Illumination attention pair from a shared transposed map.

    Returns ``(A_C, A_I)``; each branch has its own 1x1 output projection.
    """

    def __init__(self, c: int, heads: int, rng: Rng):
        _check_heads(c, heads)
        self.heads = heads
        self.qkv = _QKV(c, 3, rng)
        self.temperature = Parameter(np.ones((heads, 1, 1)))
        self.project_content = Conv2d(c, c, 1, rng)
        self.project_illumination = Conv2d(c, c, 1, rng)

    def mixed(self, y: Tensor) -> tuple[Tensor, Tensor]:
        """Branch outputs before the output projections."""
        shape = y.shape
        c = shape[-1]
        qkv = self.qkv(y)
        q, k, v = (to_heads(qkv[..., i * c:(i + 1) * c], self.heads) for i in range(3))
        a_c, a_i = channel_attention(q, k, v, self.temperature, dual=True)
        return from_heads(a_c, shape), from_heads(a_i, shape)

    @_batched
    def forward(self, y: Tensor) -> tuple[Tensor, Tensor]:
        a_c, a_i = self.mixed(y)
        return self.project_content(a_c), self.project_illumination(a_i)


class Attention(Module):
    """Single-softmax transposed self-attention."""

    def __init__(self, c: int, heads: int, rng: Rng):
        _check_heads(c, heads)
        self.heads = heads
        self.qkv = _QKV(c, 3, rng)
        self.temperature = Parameter(np.ones((heads, 1, 1)))
        self.project_out = Conv2d(c, c, 1, rng)

    @_batched
    def forward(self, y: Tensor) -> Tensor:
        shape = y.shape
        c = shape[-1]
        qkv = self.qkv(y)
        q, k, v = (to_heads(qkv[..., i * c:(i + 1) * c], self.heads) for i in range(3))
        return self.project_out(from_heads(channel_attention(q, k, v, self.temperature), shape))


class FeedForward(Module):
    """1x1 expand, GELU, 3x3 depthwise, 1x1 project back to ``c``."""

    def __init__(self, c: int, expansion: float, rng: Rng):
        hidden = int(round(c * expansion))
        self.project_in = Conv2d(c, hidden, 1, rng)
        self.dwconv = DepthwiseConv2d(hidden, 3, rng)
        self.project_out = Conv2d(hidden, c, 1, rng)

    @_batched
    def forward(self, x: Tensor) -> Tensor:
        return self.project_out(self.dwconv(ops.gelu(self.project_in(x))))


class DisentanglementBlock(Module):
    """Splits a feature into Content and Illumination parts.

    ``forward(F) -> (C, I, F_next)`` with::

        A_C, A_I = attn(LN1(F))
        C = FFN(LN2(A_C + F)) + A_C + F
        I = FFN(LN2(A_I)) + A_I
        F_next = C + I

    The Illumination branch carries no ``F`` residual. Both FFN applications
    share one set of weights and one norm.
    """

    def __init__(self, c: int, heads: int, ffn_expansion: float, rng: Rng):
        self.norm1 = LayerNorm(c)
        self.attn = DualAttention(c, heads, rng)
        self.norm2 = LayerNorm(c)
        self.ffn = FeedForward(c, ffn_expansion, rng)

    @_batched
    def forward(self, f: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        a_c, a_i = self.attn(self.norm1(f))
        s = a_c + f
        content = self.ffn(self.norm2(s)) + s
        illumination = self.ffn(self.norm2(a_i)) + a_i
        return content, illumination, content + illumination


class TransposedBlock(Module):
    """Pre-norm residual block: ``x + Attn(LN(x))`` then ``+ FFN(LN(.))``."""

    def __init__(self, c: int, heads: int, ffn_expansion: float, rng: Rng):
        self.norm1 = LayerNorm(c)
        self.attn = Attention(c, heads, rng)
        self.norm2 = LayerNorm(c)
        self.ffn = FeedForward(c, ffn_expansion, rng)

    @_batched
    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class ContentAwareEmbedding(Module):
    """Cross transposed attention from Illumination (query) to Content (key/value).

    The attended feature ``X`` is gated per channel by ``g = sigmoid(MLP(GAP(X)))``
    and added to the Illumination input: ``out = F_I + g * X``.
    """

    def __init__(self, c: int, heads: int, rng: Rng, reduction: int = 4):
        _check_heads(c, heads)
        self.heads = heads
        self.q = _QKV(c, 1, rng)
        self.kv = _QKV(c, 2, rng)
        self.temperature = Parameter(np.ones((heads, 1, 1)))
        hidden = max(c // reduction, 1)
        self.gate_hidden = Dense(c, hidden, rng)
        self.gate_out = Dense(hidden, c, rng)

    def attend(self, f_content: Tensor, f_illumination: Tensor) -> tuple[Tensor, Tensor]:
        """Return the cross-attention feature ``X`` and the gate ``g`` of shape ``(B, C)``."""
        if f_content.shape != f_illumination.shape:
            raise ShapeError("cae_fuse", "Content and Illumination features differ", f_content.shape,
                             f_illumination.shape)
        shape = f_illumination.shape
        c = shape[-1]
        q = to_heads(self.q(f_illumination), self.heads)
        kv = self.kv(f_content)
        k = to_heads(kv[..., :c], self.heads)
        v = to_heads(kv[..., c:], self.heads)
        x = from_heads(channel_attention(q, k, v, self.temperature), shape)
        g = ops.sigmoid(self.gate_out(ops.gelu(self.gate_hidden(ops.global_avg_pool(x)))))
        return x, g

    @_batched
    def forward(self, f_content: Tensor, f_illumination: Tensor) -> Tensor:
        x, g = self.attend(f_content, f_illumination)
        B, C = g.shape
        return f_illumination + ops.reshape(g, (B, 1, 1, C)) * x

    def close_gate(self) -> None:
        """Force ``g`` to 0 so the module passes ``F_I`` through unchanged."""
        self.gate_out.weight.data[...] = 0.0
        self.gate_out.bias.data[...] = -1e4


# functional spellings
def transposed_dual_attention(y: Tensor, attn: DualAttention) -> tuple[Tensor, Tensor]:
    return attn(y)


def ffn(x: Tensor, block: FeedForward) -> Tensor:
    return block(x)


def dtb_forward(f: Tensor, block: DisentanglementBlock) -> tuple[Tensor, Tensor, Tensor]:
    return block(f)


def ttb_forward(x: Tensor, block: TransposedBlock) -> Tensor:
    return block(x)


def cae_fuse(f_content: Tensor, f_illumination: Tensor, cae: ContentAwareEmbedding) -> Tensor:
    return cae(f_content, f_illumination)
