"""Binary checkpoint (``FQMO``) and dataset (``FQDS``) files.

Both formats share one container layout, all integers little-endian::

    magic        4 bytes   b"FQMO" | b"FQDS"
    version      u32
    header_len   u64
    header       header_len bytes of UTF-8 JSON (sorted keys)
    header_hash  32 bytes, SHA-256 of the header bytes
    payload      float64 / complex128 little-endian, complex as (re, im) pairs

Checkpoint headers carry a tensor manifest (name, dtype, shape, offset,
nbytes, sha256) in payload order. Dataset headers carry the metadata, the
array shape and the SHA-256 of the payload (inputs then targets).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import moe as moe_mod
from . import nn
from .errors import ArchitectureError, IntegrityError
from .pde import PdeDataset, PdeDatasetMeta

CHECKPOINT_MAGIC = b"FQMO"
DATASET_MAGIC = b"FQDS"
FORMAT_VERSION = 1

_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"float64": np.dtype("<f8"), "complex128": np.dtype("<c16")}


@dataclass
class ModelCheckpoint:
    """Architecture metadata plus named tensors in declared order."""

    kind: str
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def equals(self, other: "ModelCheckpoint") -> bool:
        """Bit-exact comparison of kind, header and every tensor."""
        if self.kind != other.kind or _dumps(self.header) != _dumps(other.header):
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    hb = _dumps(header)
    return _PREFIX.pack(magic, FORMAT_VERSION, len(hb)) + hb + hashlib.sha256(hb).digest() + payload


def _unpack(data: bytes, magic: bytes, what: str):
    if len(data) < _PREFIX.size:
        raise IntegrityError(f"{what}: file too short ({len(data)} bytes)")
    got, version, hlen = _PREFIX.unpack_from(data)
    if got != magic:
        raise IntegrityError(f"{what}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{what}: unsupported format version {version} (reader supports {FORMAT_VERSION})")
    start = _PREFIX.size
    end = start + hlen
    if end + 32 > len(data):
        raise IntegrityError(f"{what}: truncated header")
    hb = data[start:end]
    if hashlib.sha256(hb).digest() != data[end:end + 32]:
        raise IntegrityError(f"{what}: header checksum mismatch")
    try:
        header = json.loads(hb.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{what}: unreadable header ({exc})") from exc
    return header, data[end + 32:]


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# --- checkpoints -------------------------------------------------------------


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        dtype = "complex128" if np.iscomplexobj(arr) else "float64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        manifest.append({
            "name": name, "dtype": dtype, "shape": list(arr.shape),
            "offset": offset, "nbytes": len(raw), "sha256": _sha256(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {**ckpt.header, "kind": ckpt.kind, "tensors": manifest, "payload_sha256": _sha256(payload)}
    return _pack(CHECKPOINT_MAGIC, header, payload)


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    header, payload = _unpack(_read(path), CHECKPOINT_MAGIC, f"checkpoint {path}")
    manifest = header.pop("tensors", None)
    kind = header.pop("kind", None)
    digest = header.pop("payload_sha256", None)
    if manifest is None or kind is None or digest is None:
        raise IntegrityError(f"checkpoint {path}: header lacks kind/tensors/payload_sha256")
    if _sha256(payload) != digest:
        raise IntegrityError(f"checkpoint {path}: payload checksum mismatch")
    tensors, offset = {}, 0
    for entry in manifest:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise IntegrityError(f"checkpoint {path}: unknown dtype {entry['dtype']!r}")
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if entry["offset"] != offset or entry["nbytes"] != n:
            raise IntegrityError(f"checkpoint {path}: manifest disagrees with payload at {entry['name']!r}")
        raw = payload[offset:offset + n]
        if len(raw) != n or _sha256(raw) != entry["sha256"]:
            raise IntegrityError(f"checkpoint {path}: checksum mismatch for tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        offset += n
    if offset != len(payload):
        raise IntegrityError(f"checkpoint {path}: {len(payload) - offset} trailing payload bytes")
    return ModelCheckpoint(kind, header, tensors)


def checkpoint_from_model(model: nn.FourierModel, seed: int | None = None,
                          provenance: dict | None = None, upcycle: dict | None = None) -> ModelCheckpoint:
    header = {"config": model.config.to_dict(), "seed": seed, "provenance": provenance or {}}
    if model.kind == "freqmoe":
        header["moe"] = model.moe.to_dict()
        header["layout"] = model.moe.layout.to_dict()
    if upcycle is not None:
        header["upcycle"] = upcycle
    tensors = {k: v.copy() for k, v in model.params.items()}
    return ModelCheckpoint(model.kind, header, tensors)


def model_from_checkpoint(ckpt: ModelCheckpoint, expect: str | None = None) -> nn.FourierModel:
    if expect is not None and ckpt.kind != expect:
        raise ArchitectureError(
            f"checkpoint architecture kind is {ckpt.kind!r}, this command needs {expect!r}"
        )
    cfg = nn.FnoConfig.from_dict(ckpt.header["config"])
    params = {k: v.copy() for k, v in ckpt.tensors.items()}
    if ckpt.kind == "dense":
        expected = {k: v.shape for k, v in nn.init_fno_params(cfg, 0).items()}
    elif ckpt.kind == "freqmoe":
        moe = moe_mod.MoeConfig.from_dict(ckpt.header["moe"])
        expected = moe_mod.param_shapes(cfg, moe)
    else:
        raise ArchitectureError(f"unknown architecture kind {ckpt.kind!r}")
    for k, shape in expected.items():
        if k not in params:
            raise ArchitectureError(f"checkpoint lacks tensor {k!r}")
        if params[k].shape != tuple(shape):
            raise ArchitectureError(f"tensor {k!r} has shape {params[k].shape}, architecture needs {tuple(shape)}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise ArchitectureError(f"checkpoint has unexpected tensors {extra}")
    params = {k: params[k] for k in expected}
    if ckpt.kind == "dense":
        return nn.FNO(cfg, params, seed=ckpt.header.get("seed") or 0)
    return moe_mod.FreqMoE(cfg, moe, params)


# --- datasets ----------------------------------------------------------------


def dataset_bytes(ds: PdeDataset) -> bytes:
    inputs = np.ascontiguousarray(ds.inputs, dtype="<f8")
    targets = np.ascontiguousarray(ds.targets, dtype="<f8")
    payload = inputs.tobytes() + targets.tobytes()
    header = {"meta": ds.meta.to_dict(), "shape": list(inputs.shape), "content_sha256": _sha256(payload)}
    return _pack(DATASET_MAGIC, header, payload)


def save_dataset(path, ds: PdeDataset) -> None:
    atomic_write(path, dataset_bytes(ds))


def load_dataset(path) -> PdeDataset:
    header, payload = _unpack(_read(path), DATASET_MAGIC, f"dataset {path}")
    try:
        shape = tuple(int(v) for v in header["shape"])
        meta = PdeDatasetMeta.from_dict(header["meta"])
        digest = header["content_sha256"]
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"dataset {path}: malformed header ({exc})") from exc
    n = int(np.prod(shape, dtype=np.int64))
    if len(payload) != 2 * n * 8:
        raise IntegrityError(
            f"dataset {path}: payload has {len(payload)} bytes, shape {shape} needs {2 * n * 8}"
        )
    if _sha256(payload) != digest:
        raise IntegrityError(f"dataset {path}: content checksum mismatch")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return PdeDataset(meta, arr[:n].reshape(shape), arr[n:].reshape(shape))


def file_sha256(path) -> str:
    return _sha256(_read(path))
