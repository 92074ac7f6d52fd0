"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"LDEC"                    magic
    u32                        format version
    u64                        header length in bytes
    header                     UTF-8 JSON, sorted keys, compact separators
    payload                    float32 little-endian row-major tensors, back to back

The header carries the configs, step, RNG state and a tensor directory
(``name``, ``shape``, ``offset``, ``count``) plus a 64-bit FNV-1a checksum of
the payload. Optimizer moments are stored as ordinary tensors named
``optim.m/<param>`` and ``optim.v/<param>``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.nn import Module
from .autodiff.rng import fnv1a64
from .errors import CheckpointError
from .models import ModelConfig

MAGIC = b"LDEC"
VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")
_M_PREFIX = "optim.m/"
_V_PREFIX = "optim.v/"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig | None = None
    train_config: dict | None = None
    step: int = 0
    rng_state: dict | None = None
    optimizer: dict | None = None  # {"step": int, "m": {name: arr}, "v": {name: arr}}
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_model(cls, model: Module, **kwargs) -> "Checkpoint":
        params = {name: np.array(p.data, dtype=np.float32) for name, p in model.named_parameters()}
        cfg = getattr(model, "config", None)
        return cls(params=params, model_config=cfg, **kwargs)

    def apply_to(self, model: Module, strict: bool = True) -> None:
        """Copy parameters into ``model``; every shape must agree."""
        named = dict(model.named_parameters())
        missing = [n for n in named if n not in self.params]
        if missing and strict:
            raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r} ({len(missing)} missing)")
        unexpected = [n for n in self.params if n not in named]
        if unexpected and strict:
            raise CheckpointError(f"checkpoint has unknown parameter {unexpected[0]!r}")
        for name, p in named.items():
            if name not in self.params:
                continue
            value = self.params[name]
            if value.shape != p.shape:
                raise CheckpointError(
                    f"shape conflict for parameter {name!r}: checkpoint {value.shape} vs model {p.shape}")
        for name, p in named.items():
            if name in self.params:
                p.data = self.params[name].astype(p.dtype, copy=True)

    def scalars(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))


def _header_dict(ckpt: Checkpoint, directory: list[dict], payload_bytes: int, checksum: int) -> dict:
    opt = ckpt.optimizer
    return {
        "model_config": ckpt.model_config.to_dict() if ckpt.model_config is not None else None,
        "train_config": ckpt.train_config,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "optimizer_step": int(opt["step"]) if opt is not None else None,
        "meta": ckpt.meta,
        "tensors": directory,
        "payload_bytes": payload_bytes,
        "checksum": f"{checksum:016x}",
    }


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        items += [(_M_PREFIX + k, v) for k, v in ckpt.optimizer["m"].items()]
        items += [(_V_PREFIX + k, v) for k, v in ckpt.optimizer["v"].items()]
    return items


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in _named_tensors(ckpt):
        raw = np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = _header_dict(ckpt, directory, len(payload), fnv1a64(payload))
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", ckpt.version, len(hbytes)) + hbytes + payload


def from_bytes(blob: bytes, verify: bool = True) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an LDEC checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if 16 + hlen > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    try:
        return _decode(header, blob[16 + hlen:], version, verify)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc!r}") from None


def _decode(header: dict, payload: bytes, version: int, verify: bool) -> Checkpoint:
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"truncated payload: header declares {header['payload_bytes']} bytes, found {len(payload)}")
    if verify and f"{fnv1a64(payload):016x}" != header["checksum"]:
        raise CheckpointError("payload checksum mismatch (corrupted checkpoint)")

    params, m, v = {}, {}, {}
    for entry in header["tensors"]:
        start = entry["offset"]
        stop = start + entry["count"] * _PAYLOAD_DTYPE.itemsize
        arr = np.frombuffer(payload[start:stop], dtype=_PAYLOAD_DTYPE).astype(np.float32)
        arr = arr.reshape(entry["shape"])
        name = entry["name"]
        if name.startswith(_M_PREFIX):
            m[name[len(_M_PREFIX):]] = arr
        elif name.startswith(_V_PREFIX):
            v[name[len(_V_PREFIX):]] = arr
        else:
            params[name] = arr
    optimizer = None
    if header.get("optimizer_step") is not None:
        optimizer = {"step": header["optimizer_step"], "m": m, "v": v}
    cfg = header.get("model_config")
    return Checkpoint(
        params=params,
        model_config=ModelConfig.from_dict(cfg) if cfg is not None else None,
        train_config=header.get("train_config"),
        step=header.get("step", 0),
        rng_state=header.get("rng_state"),
        optimizer=optimizer,
        meta=header.get("meta") or {},
        version=version,
    )


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write(path, to_bytes(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(blob)


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return load_checkpoint(path).params
