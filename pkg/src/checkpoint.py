"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"MCNT1"                       magic and format version
    uint32 manifest_length
    manifest_length bytes          UTF-8 JSON: kind, config, metadata, entries
    payload                        raw tensors, C order, at the offsets listed
    uint32 crc32                   over every preceding byte

Each manifest entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
offsets relative to the start of the payload. Names are prefixed ``param:``,
``buffer:`` (batch-norm running statistics) or ``adamax.m:`` / ``adamax.u:``.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import CheckpointError, ConfigMismatchError
from .layers import Module
from .model import Denoiser, MCNet, ModelConfig, build_denoiser, build_mcnet

logger = logging.getLogger(__name__)

MAGIC = b"MCNT1"
KINDS = ("mcnet", "denoiser")
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_NATIVE = {"f32": np.float32, "f64": np.float64}


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        """Parameters and batch-norm buffers in ``Module.state_dict`` naming."""
        out = {}
        for name, value in self.tensors.items():
            prefix, _, rest = name.partition(":")
            if prefix in ("param", "buffer"):
                out[rest] = value
        return out

    def optimizer_state(self) -> dict[str, tuple[np.ndarray, np.ndarray, int]]:
        steps = self.metadata.get("adamax_steps", {})
        out = {}
        for name, t in steps.items():
            out[name] = (self.tensors[f"adamax.m:{name}"], self.tensors[f"adamax.u:{name}"], int(t))
        return out


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def collect_tensors(model: Module, with_optimizer: bool = True) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    tensors: dict[str, np.ndarray] = {}
    steps: dict[str, int] = {}
    for name, p in model.named_parameters():
        tensors[f"param:{name}"] = p.data
        if with_optimizer and p.m is not None and p.u is not None:
            tensors[f"adamax.m:{name}"] = p.m
            tensors[f"adamax.u:{name}"] = p.u
            steps[name] = p.t
    for name, bn in model.named_buffers():
        if bn.initialized:
            tensors[f"buffer:{name}.running_mean"] = bn.running_mean
            tensors[f"buffer:{name}.running_var"] = bn.running_var
    return tensors, steps


def save_checkpoint(
    path: str | Path,
    model: Module,
    config: ModelConfig,
    metadata: Optional[dict[str, Any]] = None,
    with_optimizer: bool = True,
) -> Path:
    path = Path(path)
    kind = "denoiser" if isinstance(model, Denoiser) else "mcnet"
    tensors, steps = collect_tensors(model, with_optimizer=with_optimizer)
    meta = dict(metadata or {})
    meta["adamax_steps"] = steps

    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"kind": kind, "config": config.to_dict(), "metadata": meta, "entries": entries}, sort_keys=True
    ).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    logger.debug("saved %s checkpoint %s (%d tensors, %d bytes)", kind, path, len(entries), len(body) + 4)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint: {e}") from e
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: file truncated ({len(blob)} bytes)")
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r} (expected {MAGIC!r})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC32 mismatch, file is corrupted or truncated")

    (length,) = struct.unpack("<I", body[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        manifest = json.loads(body[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
    payload = body[start + length :]

    tensors = {}
    for entry in manifest["entries"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} extends past the payload")
        raw = np.frombuffer(payload[entry["offset"] : end], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = np.array(raw.reshape(entry["shape"]), dtype=_NATIVE[entry["dtype"]])
    kind = manifest.get("kind")
    if kind not in KINDS:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return Checkpoint(kind=kind, config=ModelConfig.from_dict(manifest["config"]), tensors=tensors,
                      metadata=manifest.get("metadata", {}))


def check_config(stored: ModelConfig, expected: ModelConfig, path: str | Path = "") -> None:
    a, b = stored.architecture(), expected.architecture()
    diffs = [f"{k}: checkpoint={a[k]!r} requested={b[k]!r}" for k in a if a[k] != b.get(k)]
    if diffs:
        raise ConfigMismatchError(f"{path}: checkpoint config does not match ({'; '.join(diffs)})")


def restore(model: Module, ckpt: Checkpoint, with_optimizer: bool = True) -> Module:
    model.load_state_dict(ckpt.params())
    if with_optimizer:
        params = dict(model.named_parameters())
        for name, (m, u, t) in ckpt.optimizer_state().items():
            p = params[name]
            p.m, p.u, p.t = m.copy(), u.copy(), t
    return model


def load_checkpoint(
    path: str | Path, config: Optional[ModelConfig] = None, kind: str = "mcnet"
) -> tuple[Module, Checkpoint]:
    """Rebuild the network stored at ``path``.

    When ``config`` is given its architecture must equal the stored one;
    runtime-only fields (conv method, end-to-end flag) are taken from it.
    """
    ckpt = read_checkpoint(path)
    if ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ckpt.kind}")
    if config is not None:
        check_config(ckpt.config, config, path)
    build_config = config or ckpt.config
    model = build_denoiser(build_config) if kind == "denoiser" else build_mcnet(build_config)
    restore(model, ckpt)
    return model, ckpt


def transfer(path: str | Path, config: Optional[ModelConfig] = None) -> tuple[MCNet, Checkpoint]:
    """Copy all weights from a checkpoint into a fresh model.

    Optimizer state is reset and the epoch counter starts again at zero.
    """
    ckpt = read_checkpoint(path)
    if ckpt.kind != "mcnet":
        raise CheckpointError(f"{path}: transfer needs an mcnet checkpoint, found {ckpt.kind}")
    if config is not None:
        check_config(ckpt.config, config, path)
    model = build_mcnet(config or ckpt.config)
    restore(model, ckpt, with_optimizer=False)
    for p in model.parameters():
        p.m = p.u = None
        p.t = 0
    ckpt.metadata = {**ckpt.metadata, "epoch": 0, "adamax_steps": {}}
    logger.info("transferred %d tensors from %s", len(ckpt.params()), path)
    return model, ckpt


def load_denoiser_into(model: MCNet, path: str | Path) -> None:
    """Copy a trained denoiser checkpoint into ``model.denoiser``."""
    if not hasattr(model, "denoiser"):
        raise ConfigMismatchError("model has no learned denoiser stage")
    ckpt = read_checkpoint(path)
    if ckpt.kind != "denoiser":
        raise CheckpointError(f"{path}: expected a denoiser checkpoint, found {ckpt.kind}")
    check_config_denoiser(ckpt.config, model.config, path)
    restore(model.denoiser, ckpt, with_optimizer=False)


def check_config_denoiser(stored: ModelConfig, expected: ModelConfig, path: str | Path = "") -> None:
    keys = ("dn_filters", "dn_filter_size")
    diffs = [f"{k}: checkpoint={getattr(stored, k)} requested={getattr(expected, k)}" for k in keys
             if getattr(stored, k) != getattr(expected, k)]
    if diffs:
        raise ConfigMismatchError(f"{path}: denoiser shape does not match ({'; '.join(diffs)})")
