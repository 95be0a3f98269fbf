"""Binary checkpoints: model weights, optimizer moments and run metadata.

Layout (all integers little-endian)::

    b"SPANCKPT"  u32 version  u64 meta_len  meta (UTF-8 JSON)
    u32 n_arrays, then per array:
        u16 name_len  name  u8 ndim  u64[ndim] shape  f8[prod(shape)] data

Array names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConfigError, ModelConfig, VidGTR
from .trainer import AdamState, TrainConfig

MAGIC = b"SPANCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    train_config: TrainConfig | None = None
    optimizer: AdamState | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> VidGTR:
        return VidGTR(self.model_config, params=self.params)


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_array(fh) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, n).decode()
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def save_checkpoint(path: str | Path, model: VidGTR, step: int = 0,
                    train_config: TrainConfig | None = None,
                    optimizer: AdamState | None = None, extra: dict | None = None) -> None:
    meta = {
        "model_config": model.cfg.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "step": int(step),
        "adam_step": optimizer.step if optimizer else None,
        "adam_skipped": optimizer.skipped if optimizer else None,
        "extra": extra or {},
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    arrays = [(f"param/{k}", v) for k, v in sorted(model.state_dict().items())]
    if optimizer is not None:
        arrays += [(f"adam_m/{k}", v) for k, v in sorted(optimizer.m.items())]
        arrays += [(f"adam_v/{k}", v) for k, v in sorted(optimizer.v.items())]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_array(fh, name, arr)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        version, meta_len = struct.unpack("<IQ", _read_exact(fh, 12))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(_read_exact(fh, meta_len).decode())
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = dict(_read_array(fh) for _ in range(n))
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointError(f"unknown array section {kind!r}")
        groups[kind][key] = arr
    cfg = ModelConfig.from_dict(meta["model_config"])
    opt = None
    if meta.get("adam_step") is not None:
        opt = AdamState(meta["adam_step"], groups["adam_m"], groups["adam_v"], meta.get("adam_skipped") or 0)
    tc = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    return Checkpoint(cfg, groups["param"], int(meta["step"]), tc, opt, meta.get("extra", {}))


def restore_model(ckpt: Checkpoint, expected: ModelConfig | None = None) -> VidGTR:
    """Instantiate the checkpointed model, rejecting a config mismatch."""
    if expected is not None and expected.to_dict() != ckpt.model_config.to_dict():
        diff = {k for k, v in expected.to_dict().items() if ckpt.model_config.to_dict().get(k) != v}
        raise ConfigError(f"checkpoint incompatible with requested config (differs in {sorted(diff)})")
    model = VidGTR(ckpt.model_config)
    model.load_state_dict(ckpt.params)
    return model
