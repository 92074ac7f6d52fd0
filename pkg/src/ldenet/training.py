"""Two-stage optimization: disentanglement, then enhancement.

Stage 1 trains the disentangler and reconstructor jointly on paired patches.
Stage 2 freezes both and trains one enhancer (``full`` or ``light``) through
the frozen reconstructor. Both stages use bias-corrected Adam under a
step-based cosine schedule.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from threadpoolctl import threadpool_limits

from .autodiff import ops
from .autodiff.nn import Module, Parameter
from .autodiff.rng import Rng
from .autodiff.tensor import NonFiniteError, Tensor, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ImagePair
from .errors import CheckpointError, ConfigError, DataError, TrainingAborted
from .losses import (LossWeights, content_consistency_loss, disentangle_loss, enhancement_loss, psnr,
                     reconstruction_loss)
from .models import LDENet, ModelConfig

log = logging.getLogger(__name__)

HUE_SHIFT = 0.02
SV_SCALE = (0.95, 1.05)
GRAD_NORM_LIMIT = 1e4


@dataclass
class TrainConfig:
    lr_max: float = 2e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 2
    patch: int = 64
    total_steps: int = 300
    seed: int = 42
    hsv: bool = True
    rotation: bool = True
    flip: bool = True
    lambda_recon: float = 0.2
    lambda_s: float = 1.0
    lambda_p: float = 1.0
    grad_norm_limit: float = GRAD_NORM_LIMIT

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon must be positive")
        if self.batch_size < 1 or self.patch < 8 or self.total_steps < 1:
            raise ConfigError("batch_size >= 1, patch >= 8 and total_steps >= 1 required")
        if self.patch % 8:
            raise ConfigError(f"patch must be a multiple of 8, got {self.patch}")
        LossWeights(self.lambda_recon, self.lambda_s, self.lambda_p)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_recon, self.lambda_s, self.lambda_p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, named_params: Iterable[tuple[str, Parameter]], cfg: TrainConfig):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_epsilon
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def check_grads(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"grad[{name}]", "non-finite gradient; step aborted")

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                g = p.grad.astype(np.float64)
                total += float(np.dot(g.ravel(), g.ravel()))
        return math.sqrt(total)

    def step(self, lr: float) -> None:
        self.check_grads()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state(self) -> dict:
        return {"step": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state: dict) -> None:
        for name, p in self.params:
            if name not in state["m"] or name not in state["v"]:
                raise CheckpointError(f"optimizer state lacks parameter {name!r}")
            for kind in ("m", "v"):
                if state[kind][name].shape != p.shape:
                    raise CheckpointError(f"shape conflict for optimizer moment {kind}/{name!r}")
            self.m[name] = state["m"][name].astype(p.dtype, copy=True)
            self.v[name] = state["v"][name].astype(p.dtype, copy=True)
        self.t = int(state["step"])


def adam_step(params, grads, state: dict, lr: float, cfg: TrainConfig = TrainConfig()) -> tuple[dict, dict]:
    """Functional form over plain arrays: returns ``(new_params, new_state)``."""
    holders = []
    for name, value in params.items():
        p = Parameter(np.array(value, copy=True), dtype=np.asarray(value).dtype)
        p.grad = np.asarray(grads[name], dtype=p.dtype)
        holders.append((name, p))
    opt = Adam(holders, cfg)
    if state:
        opt.load_state(state)
    opt.step(lr)
    return {n: p.data for n, p in holders}, opt.state()


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig = TrainConfig()) -> float:
    """``lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2``; endpoints are exact."""
    if step < 0 or step > total_steps:
        warnings.warn(f"step {step} outside [0, {total_steps}]; clamped", stacklevel=2)
        step = min(max(step, 0), total_steps)
    if step == 0:
        return cfg.lr_max
    if step == total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# sampling and augmentation
# ---------------------------------------------------------------------------

def sample_patch(pair: ImagePair, rng: Rng, patch: int) -> ImagePair:
    H, W = pair.low.shape[:2]
    if H < patch or W < patch:
        raise DataError(f"pair {pair.id!r} is {H}x{W}, smaller than the {patch}x{patch} patch; "
                        f"use a smaller patch setting")
    y = rng.integer(0, H - patch + 1)
    x = rng.integer(0, W - patch + 1)
    win = (slice(y, y + patch), slice(x, x + patch))
    return ImagePair(pair.low[win].copy(), pair.normal[win].copy(), pair.id)


def _hsv_jitter(img: np.ndarray, dh: float, ds: float, dv: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * dv, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def augment(pair: ImagePair, rng: Rng, cfg: TrainConfig) -> ImagePair:
    """Identical rotation, flips and HSV jitter for both images.

    Draws are consumed in a fixed order whatever the toggles, so switching one
    augmentation off does not shift the others' random streams.
    """
    k = rng.integer(0, 4)
    flip_h, flip_v = (rng.uniform((2,)) < 0.5)
    dh = float(rng.uniform((), -HUE_SHIFT, HUE_SHIFT))
    ds, dv = (float(s) for s in rng.uniform((2,), *SV_SCALE))

    def apply(img: np.ndarray) -> np.ndarray:
        if cfg.rotation:
            img = np.rot90(img, k, axes=(0, 1))
        if cfg.flip:
            if flip_h:
                img = img[:, ::-1]
            if flip_v:
                img = img[::-1]
        if cfg.hsv:
            img = _hsv_jitter(img, dh, ds, dv)
        return np.ascontiguousarray(np.clip(img, 0.0, 1.0))

    return ImagePair(apply(pair.low), apply(pair.normal), pair.id)


def sample_batch(dataset: list[ImagePair], rng: Rng, cfg: TrainConfig, dtype=np.float32) -> tuple[Tensor, Tensor]:
    lows, normals = [], []
    for _ in range(cfg.batch_size):
        pair = dataset[rng.integer(0, len(dataset))]
        pair = augment(sample_patch(pair, rng, cfg.patch), rng, cfg)
        lows.append(pair.low)
        normals.append(pair.normal)
    return Tensor(np.stack(lows).astype(dtype)), Tensor(np.stack(normals).astype(dtype))


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def strict_mode(enabled: bool = True) -> Iterator[None]:
    """Single-threaded BLAS so repeated runs are bit-identical."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


class TraceWriter:
    """Append-only JSON-lines loss trace (optionally mirrored to a file)."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[dict]


def _checkpoint(model: LDENet, cfg: TrainConfig, step: int, rng: Rng, opt: Adam, stage: str) -> Checkpoint:
    return Checkpoint.from_model(model, train_config=cfg.to_dict(), step=step, rng_state=rng.state,
                                 optimizer=opt.state(), meta={"stage": stage})


def _require_dataset(dataset: list[ImagePair]) -> None:
    if not dataset:
        raise DataError("dataset is empty")


def _run(model: LDENet, dataset: list[ImagePair], cfg: TrainConfig, stage: str, trained: list,
         loss_fn, resume: Checkpoint | None, trace_path, checkpoint_path, strict: bool,
         until: int | None = None) -> TrainResult:
    _require_dataset(dataset)
    rng = Rng(cfg.seed, f"train.{stage}")
    opt = Adam(trained, cfg)
    start = 0
    if resume is not None:
        if resume.meta.get("stage") != stage:
            raise CheckpointError(f"cannot resume stage {stage!r} from a {resume.meta.get('stage')!r} checkpoint")
        resume.apply_to(model)
        opt.load_state(resume.optimizer)
        rng.state = resume.rng_state
        start = resume.step
    stop = cfg.total_steps if until is None else min(max(until, start), cfg.total_steps)
    trace = TraceWriter(trace_path)
    t0 = time.perf_counter()
    with strict_mode(strict):
        for step in range(start, stop):
            lr = cosine_lr(step, cfg.total_steps, cfg)
            low, normal = sample_batch(dataset, rng, cfg)
            model.zero_grad()
            total, parts = loss_fn(low, normal)
            values = {k: float(v.data) for k, v in parts.items()}
            if not all(math.isfinite(v) for v in values.values()):
                ckpt = _checkpoint(model, cfg, step, rng, opt, stage)
                raise TrainingAborted(f"non-finite loss at step {step}: {values}", ckpt)
            backward(total)
            norm = opt.grad_norm()
            skipped = not norm <= cfg.grad_norm_limit
            if skipped:
                opt.check_grads()
                warnings.warn(f"step {step}: gradient norm {norm:.3g} exceeds {cfg.grad_norm_limit:g}; skipped",
                              stacklevel=2)
            else:
                opt.step(lr)
            record = {"step": step, "lr": lr, **values, "grad_norm": norm, "skipped": skipped,
                      "wall": time.perf_counter() - t0}
            trace.write(record)
            log.info("%s step %d lr %.3g %s", stage, step, lr,
                     " ".join(f"{k} {v:.5f}" for k, v in values.items()))
    model.zero_grad()
    ckpt = _checkpoint(model, cfg, stop, rng, opt, stage)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(ckpt, trace.records)


def train_disentangle(dataset: list[ImagePair], model: LDENet, cfg: TrainConfig, resume: Checkpoint | None = None,
                      trace_path=None, checkpoint_path=None, strict: bool = True,
                      until: int | None = None) -> TrainResult:
    """Jointly fit the disentangler and reconstructor on paired patches.

    ``until`` stops early (after that many steps in total) with a resumable
    checkpoint; the schedule still follows ``cfg.total_steps``.
    """
    model.requires_grad_(False)
    model.dis.requires_grad_(True)
    model.recon.requires_grad_(True)
    trained = list(model.dis.named_parameters("dis.")) + list(model.recon.named_parameters("recon."))

    def loss_fn(low: Tensor, normal: Tensor):
        B = low.shape[0]
        content, illumination = model.dis(ops.concat([low, normal], axis=0))
        c_l, c_t = content[:B], content[B:]
        i_l, i_t = illumination[:B], illumination[B:]
        l_cc = content_consistency_loss(c_l, c_t)
        l_recon = reconstruction_loss(c_l, c_t, i_l, i_t, low, normal, model.recon)
        total = disentangle_loss(l_cc, l_recon, cfg.lambda_recon)
        return total, {"l_cc": l_cc, "l_recon": l_recon, "total": total}

    try:
        return _run(model, dataset, cfg, "disentangle", trained, loss_fn, resume, trace_path, checkpoint_path,
                    strict, until)
    finally:
        model.requires_grad_(True)


def load_stage1(model: LDENet, stage1: Checkpoint | str | os.PathLike | None) -> None:
    if stage1 is None:
        raise CheckpointError("stage 2 needs a stage-1 checkpoint")
    if not isinstance(stage1, Checkpoint):
        stage1 = load_checkpoint(stage1)
    if stage1.meta.get("stage") not in ("disentangle", "enhance"):
        raise CheckpointError("checkpoint does not come from stage-1 training")
    stage1.apply_to(model)


def train_enhance(dataset: list[ImagePair], model: LDENet, cfg: TrainConfig, mode: str = "full",
                  stage1: Checkpoint | str | os.PathLike | None = None, resume: Checkpoint | None = None,
                  trace_path=None, checkpoint_path=None, strict: bool = True,
                  until: int | None = None) -> TrainResult:
    """Train one enhancer through the frozen disentangler and reconstructor.

    ``stage1`` (a checkpoint or path) is loaded into ``model`` first; pass
    ``stage1=model_checkpoint`` even when ``model`` already holds those weights.
    """
    enhancer = model.enhancer(mode)
    if resume is None:
        load_stage1(model, stage1)
    model.requires_grad_(False)
    enhancer.requires_grad_(True)
    prefix = "enh." if mode == "full" else "light."
    trained = list(enhancer.named_parameters(prefix))
    weights = cfg.weights

    def loss_fn(low: Tensor, normal: Tensor):
        s_r = model.pipeline(low, mode, training=True)
        l_enh = enhancement_loss(s_r, normal, weights)
        return l_enh, {"l_enh": l_enh}

    try:
        return _run(model, dataset, cfg, f"enhance.{mode}", trained, loss_fn, resume, trace_path,
                    checkpoint_path, strict, until)
    finally:
        model.requires_grad_(True)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

SWAP_ROWS = (
    ("recon(C_l, I_l) vs S_l", "low", "low", "low"),
    ("recon(C_t, I_t) vs S_t", "normal", "normal", "normal"),
    ("recon(C_t, I_l) vs S_l", "normal", "low", "low"),
    ("recon(C_l, I_t) vs S_t", "low", "normal", "normal"),
)


def _disentangle_eval(model: LDENet, image: np.ndarray) -> tuple[Tensor, Tensor]:
    return model.dis(Tensor(np.asarray(image, dtype=np.float32)))


def eval_cross_reconstruction(dataset: list[ImagePair], model: LDENet) -> list[tuple[str, float]]:
    """Mean PSNR over the dataset for the four (Content, Illumination) pairings."""
    _require_dataset(dataset)
    sums = [0.0] * len(SWAP_ROWS)
    with no_grad():
        for pair in dataset:
            comps = {"low": _disentangle_eval(model, pair.low), "normal": _disentangle_eval(model, pair.normal)}
            images = {"low": pair.low, "normal": pair.normal}
            for r, (_, c_src, i_src, target) in enumerate(SWAP_ROWS):
                out = model.recon(comps[c_src][0], comps[i_src][1], clamp=True)
                sums[r] += psnr(out.data, images[target])
    return [(name, s / len(dataset)) for (name, *_), s in zip(SWAP_ROWS, sums)]


def content_gap(dataset: list[ImagePair], model: LDENet) -> float:
    """Mean ``|C_l - C_t|`` over the dataset."""
    _require_dataset(dataset)
    with no_grad():
        gaps = [float(np.mean(np.abs(_disentangle_eval(model, p.low)[0].data
                                     - _disentangle_eval(model, p.normal)[0].data))) for p in dataset]
    return float(np.mean(gaps))


def enhance_image(model: LDENet, image: np.ndarray, mode: str = "full") -> np.ndarray:
    with no_grad():
        return model.pipeline(Tensor(np.asarray(image, dtype=np.float32)), mode).data.astype(np.float64)


def eval_enhancement(dataset: list[ImagePair], model: LDENet, mode: str = "full") -> dict[str, float]:
    """Mean PSNR of the enhanced low images and of the raw inputs against the targets."""
    _require_dataset(dataset)
    out = [psnr(enhance_image(model, p.low, mode), p.normal) for p in dataset]
    raw = [psnr(p.low, p.normal) for p in dataset]
    return {"psnr_enhanced": float(np.mean(out)), "psnr_input": float(np.mean(raw))}


def new_model(cfg: ModelConfig | None = None, seed: int = 0) -> LDENet:
    return LDENet(cfg or ModelConfig(), seed)
