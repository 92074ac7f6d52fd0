"""The four networks and the end-to-end enhancement pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

from .autodiff import ops
from .autodiff.nn import Conv2d, DepthwiseConv2d, Module
from .autodiff.rng import Rng
from .autodiff.tensor import ShapeError, Tensor
from .blocks import ContentAwareEmbedding, DisentanglementBlock, TransposedBlock
from .errors import ConfigError

MIN_EXTENT = 8


@dataclass
class ModelConfig:
    c: int = 16
    n_blocks: int = 2
    heads: int = 1
    ffn_expansion: float = 2.0
    levels: int = 4
    enh_blocks_per_level: tuple[int, ...] = field(default=(1, 1, 1, 1))
    recon_blocks: int = 2
    light_c: int = 16

    def __post_init__(self):
        self.enh_blocks_per_level = tuple(int(n) for n in self.enh_blocks_per_level)
        self.validate()

    def validate(self) -> None:
        if self.c < 1 or self.light_c < 1:
            raise ConfigError("channel widths must be positive")
        if self.n_blocks < 1:
            raise ConfigError(f"need at least one disentanglement block, got {self.n_blocks}")
        if self.levels != 4:
            raise ConfigError(f"the enhancer has exactly 4 levels, got {self.levels}")
        if self.heads < 1 or self.c % self.heads:
            raise ConfigError(f"heads={self.heads} must divide c={self.c}")
        if len(self.enh_blocks_per_level) != self.levels:
            raise ConfigError("enh_blocks_per_level needs one entry per level")
        if self.recon_blocks < 0 or any(n < 0 for n in self.enh_blocks_per_level):
            raise ConfigError("block counts must be nonnegative")
        if self.ffn_expansion <= 0:
            raise ConfigError("ffn_expansion must be positive")

    @property
    def divisor(self) -> int:
        """Spatial extents the enhancer accepts must be multiples of this."""
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enh_blocks_per_level"] = list(self.enh_blocks_per_level)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class DisentangleOutput(NamedTuple):
    content: Tensor
    illumination: Tensor


class Sequential(Module):
    def __init__(self, blocks: list[Module]):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError("model", "expected HxWxC or BxHxWxC input", x.shape)
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


class Disentangler(Module):
    """3x3 embedding followed by chained disentanglement blocks (no downsampling)."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.embed = Conv2d(3, cfg.c, 3, rng)
        self.blocks = [DisentanglementBlock(cfg.c, cfg.heads, cfg.ffn_expansion, rng) for _ in range(cfg.n_blocks)]

    def forward(self, s: Tensor) -> DisentangleOutput:
        x, squeeze = _as_batch(s)
        if x.shape[-1] != 3:
            raise ShapeError("disentangle", "input must have 3 channels", s.shape)
        if x.shape[1] < MIN_EXTENT or x.shape[2] < MIN_EXTENT:
            raise ShapeError("disentangle", f"image must be at least {MIN_EXTENT}x{MIN_EXTENT}", s.shape)
        f = self.embed(x)
        content = illumination = None
        for block in self.blocks:
            content, illumination, f = block(f)
        return DisentangleOutput(_unbatch(content, squeeze), _unbatch(illumination, squeeze))


class Reconstructor(Module):
    """Transposed blocks over ``C + I`` then a 3x3 convolution to RGB."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.blocks = [TransposedBlock(cfg.c, cfg.heads, cfg.ffn_expansion, rng) for _ in range(cfg.recon_blocks)]
        self.output = Conv2d(cfg.c, 3, 3, rng)

    def forward(self, content: Tensor, illumination: Tensor, clamp: bool = False) -> Tensor:
        if content.shape != illumination.shape:
            raise ShapeError("reconstruct", "Content and Illumination shapes differ", content.shape,
                             illumination.shape)
        x, squeeze = _as_batch(content + illumination)
        for block in self.blocks:
            x = block(x)
        out = self.output(x)
        if clamp:
            out = ops.clamp(out, 0.0, 1.0)
        return _unbatch(out, squeeze)


class Enhancer(Module):
    """4-level U-shaped Illumination enhancer guided by Content.

    Level ``l`` runs at ``1/2**l`` resolution with ``c * 2**l`` channels. Each
    encoder level starts with a content-aware embedding of the level's
    Illumination feature and a Content feature brought to the same scale by
    the same pixel-unshuffle + 1x1 chain the encoder uses for downsampling.
    Decoder levels upsample with 1x1 + pixel-shuffle, concatenate the
    encoder skip and project back to the level width.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        L = cfg.levels
        widths = [cfg.c * 2 ** l for l in range(L)]
        self.levels = L
        self.cae = [ContentAwareEmbedding(widths[l], cfg.heads, rng) for l in range(L)]
        self.encoder = [
            Sequential([TransposedBlock(widths[l], cfg.heads, cfg.ffn_expansion, rng)
                        for _ in range(cfg.enh_blocks_per_level[l])])
            for l in range(L)
        ]
        self.down = [Conv2d(4 * widths[l], widths[l + 1], 1, rng) for l in range(L - 1)]
        self.content_down = [Conv2d(4 * widths[l], widths[l + 1], 1, rng) for l in range(L - 1)]
        self.up = [Conv2d(widths[l + 1], 4 * widths[l], 1, rng) for l in range(L - 1)]
        self.fuse = [Conv2d(2 * widths[l], widths[l], 1, rng) for l in range(L - 1)]
        self.decoder = [
            Sequential([TransposedBlock(widths[l], cfg.heads, cfg.ffn_expansion, rng)
                        for _ in range(cfg.enh_blocks_per_level[l])])
            for l in range(L - 1)
        ]
        self.output = Conv2d(cfg.c, cfg.c, 1, rng)

    def content_pyramid(self, content: Tensor) -> list[Tensor]:
        pyramid = [content]
        for l in range(self.levels - 1):
            pyramid.append(self.content_down[l](ops.pixel_unshuffle(pyramid[-1], 2)))
        return pyramid

    def forward(self, illumination: Tensor, content: Tensor) -> Tensor:
        if illumination.shape != content.shape:
            raise ShapeError("enhance", "Content and Illumination shapes differ", content.shape, illumination.shape)
        x, squeeze = _as_batch(illumination)
        c, _ = _as_batch(content)
        div = 2 ** (self.levels - 1)
        if x.shape[1] % div or x.shape[2] % div:
            raise ShapeError("enhance", f"spatial extents must be multiples of {div}; pad the input first", x.shape)
        pyramid = self.content_pyramid(c)
        skips = []
        for l in range(self.levels):
            x = self.cae[l](pyramid[l], x)
            x = self.encoder[l](x)
            if l < self.levels - 1:
                skips.append(x)
                x = self.down[l](ops.pixel_unshuffle(x, 2))
        for l in reversed(range(self.levels - 1)):
            x = ops.pixel_shuffle(self.up[l](x), 2)
            x = self.fuse[l](ops.concat([x, skips[l]], axis=-1))
            x = self.decoder[l](x)
        return _unbatch(self.output(x), squeeze)

    def close_gates(self) -> None:
        for cae in self.cae:
            cae.close_gate()


class LightEnhancer(Module):
    """1x1 fuse of [C, I], depthwise-separable 5x5, 1x1 output."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        c, lc = cfg.c, cfg.light_c
        self.fuse = Conv2d(2 * c, lc, 1, rng)
        self.depthwise = DepthwiseConv2d(lc, 5, rng)
        self.pointwise = Conv2d(lc, lc, 1, rng)
        self.output = Conv2d(lc, c, 1, rng)

    def forward(self, illumination: Tensor, content: Tensor) -> Tensor:
        if illumination.shape != content.shape:
            raise ShapeError("enhance_light", "Content and Illumination shapes differ", content.shape,
                             illumination.shape)
        x = self.fuse(ops.concat([content, illumination], axis=-1))
        x = self.pointwise(ops.gelu(self.depthwise(x)))
        return self.output(x)


RESIDUAL_PROJECTIONS = ("project_out", "project_content", "project_illumination")


def zero_residual_projections(module: Module) -> None:
    """Zero the last projection of every residual branch so each block starts as a pass-through."""
    for name, p in module.named_parameters():
        if any(f"{proj}." in name for proj in RESIDUAL_PROJECTIONS):
            p.data[...] = 0.0


class LDENet(Module):
    """Disentangle, enhance the Illumination, reconstruct.

    Holds both enhancers so one checkpoint serves ``full`` and ``light`` mode.
    Parameter streams are derived per submodule, so each one's initial weights
    depend only on the seed and the config. The disentangler and reconstructor
    start with zeroed residual projections; with the default uniform init alone
    their stacked branches shrink image contrast, which 300 steps of stage-1
    training cannot recover.
    """

    MODES = ("full", "light")

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.config = cfg
        rng = Rng(seed, "init")
        self.dis = Disentangler(cfg, rng.derive("init.dis"))
        self.recon = Reconstructor(cfg, rng.derive("init.recon"))
        zero_residual_projections(self.dis)
        zero_residual_projections(self.recon)
        self.enh = Enhancer(cfg, rng.derive("init.enh"))
        self.light = LightEnhancer(cfg, rng.derive("init.light"))

    def enhancer(self, mode: str) -> Module:
        if mode not in self.MODES:
            raise ConfigError(f"mode must be one of {self.MODES}, got {mode!r}")
        return self.enh if mode == "full" else self.light

    def pipeline(self, s: Tensor, mode: str = "full", training: bool = False) -> Tensor:
        """Enhance an image of any extent >= 8.

        Inputs are reflect-padded to a multiple of 8 and cropped back; outputs
        are clamped to [0, 1] unless ``training``.
        """
        x, squeeze = _as_batch(s)
        H, W = x.shape[1], x.shape[2]
        if H < MIN_EXTENT or W < MIN_EXTENT:
            raise ShapeError("pipeline", f"image must be at least {MIN_EXTENT}x{MIN_EXTENT}", s.shape)
        div = self.config.divisor
        ph, pw = (-H) % div, (-W) % div
        if ph or pw:
            x = ops.pad_reflect(x, (0, ph), (0, pw))
        content, illumination = self.dis(x)
        restored = self.enhancer(mode)(illumination, content)
        out = self.recon(content, restored)
        if ph or pw:
            out = out[:, :H, :W, :]
        if not training:
            out = ops.clamp(out, 0.0, 1.0)
        return _unbatch(out, squeeze)


# functional spellings -------------------------------------------------------

def disentangle(s: Tensor, model: LDENet) -> DisentangleOutput:
    return model.dis(s)


def reconstruct(content: Tensor, illumination: Tensor, model: LDENet, clamp: bool = False) -> Tensor:
    return model.recon(content, illumination, clamp=clamp)


def enhance(illumination: Tensor, content: Tensor, model: LDENet) -> Tensor:
    return model.enh(illumination, content)


def enhance_light(content: Tensor, illumination: Tensor, model: LDENet) -> Tensor:
    return model.light(illumination, content)


def pipeline(s: Tensor, model: LDENet, mode: str = "full") -> Tensor:
    return model.pipeline(s, mode)


def param_count(module: Module) -> int:
    return module.param_count()


def param_breakdown(module: Module) -> dict[str, int]:
    """Scalar count per direct child module (and loose parameters)."""
    counts: dict[str, int] = {}
    for name, p in module.named_parameters():
        head = name.split(".", 1)[0]
        counts[head] = counts.get(head, 0) + p.size
    return counts


def light_enhancer_count(c: int, light_c: int | None = None) -> int:
    """Closed-form scalar count of :class:`LightEnhancer`."""
    lc = c if light_c is None else light_c
    return (2 * c * lc + lc) + (25 * lc + lc) + (lc * lc + lc) + (lc * c + c)


def light_param_sweep(target: int = 50_000, widths=range(8, 257)) -> tuple[int, int, list[tuple[int, int]]]:
    """Build light enhancers over ``widths`` (c = light_c) and return the one closest to ``target``.

    Returns ``(best_c, best_count, [(c, count), ...])``.
    """
    rows = []
    for c in widths:
        cfg = ModelConfig(c=c, light_c=c, heads=1)
        rows.append((c, LightEnhancer(cfg, Rng(0)).param_count()))
    best_c, best_n = min(rows, key=lambda r: abs(r[1] - target))
    return best_c, best_n, rows
