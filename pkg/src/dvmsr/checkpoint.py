"""Binary checkpoint format.

Layout::

    b"DVMSRCKP" | u32 version | u64 manifest length | manifest (UTF-8 JSON)
    | float64 little-endian payloads in manifest order

The manifest carries the model config, tensor names/shapes/offsets, the
iteration counter, the RNG bit-generator state and any free-form metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, param_specs

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "weights_from_checkpoint",
]

MAGIC = b"DVMSRCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    iteration: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.group("param.")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, payloads, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        payloads.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "config": ckpt.config.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
        "iteration": int(ckpt.iteration),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + b"".join(payloads)


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: Path | str) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    start = _HEADER.size + mlen
    if len(raw) < start:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[_HEADER.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest ({exc})") from None
    expected = sum(8 * int(np.prod(e["shape"])) for e in manifest["tensors"])
    if expected != manifest["payload_bytes"]:
        raise CheckpointFormatError(f"{path}: manifest offsets are inconsistent")
    if len(raw) - start != expected:
        kind = CheckpointTruncatedError if len(raw) - start < expected else CheckpointFormatError
        raise kind(f"{path}: payload is {len(raw) - start} bytes, manifest says {expected}")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"]))
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=start + e["offset"])
        tensors[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(
        config=ModelConfig.from_dict(manifest["config"]),
        tensors=tensors,
        iteration=manifest["iteration"],
        rng_state=manifest["rng_state"],
        meta=manifest["meta"],
    )


def weights_from_checkpoint(
    ckpt: Checkpoint, cfg: ModelConfig | None = None, requires_grad: bool = False
) -> dict[str, Tensor]:
    """Model weights for ``cfg`` (default: the stored config), validated by name and shape."""
    cfg = cfg or ckpt.config
    params = ckpt.params
    for spec in param_specs(cfg):
        if spec.name not in params:
            raise CheckpointShapeError(f"tensor {spec.name!r} missing from checkpoint")
        if params[spec.name].shape != spec.shape:
            raise CheckpointShapeError(
                f"tensor {spec.name!r}: checkpoint has {params[spec.name].shape}, "
                f"config expects {spec.shape}"
            )
    return {
        s.name: Tensor(params[s.name].copy(), requires_grad=requires_grad)
        for s in param_specs(cfg)
    }


def pack_params(prefix: str, weights: Mapping[str, Tensor | np.ndarray]) -> dict[str, np.ndarray]:
    return {
        prefix + k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        for k, v in weights.items()
    }
