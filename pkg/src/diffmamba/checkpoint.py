"""Versioned binary checkpoints.

Layout (little-endian)::

    b"DIFFSSM1" | u32 version | u64 header length | JSON header | f32 blobs | 8-byte blake2b

The header lists every tensor as ``{name, shape, offset}`` relative to the
start of the blob section; the checksum covers all preceding bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError
from .model import LanguageModel

MAGIC = b"DIFFSSM1"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CHECKSUM_BYTES = 8


def _digest(buf: bytes) -> bytes:
    return hashlib.blake2b(buf, digest_size=_CHECKSUM_BYTES).digest()


@dataclass
class Checkpoint:
    architecture: dict
    params: dict[str, np.ndarray]
    optimizer: dict | None = None
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def build_model(self, dtype=np.float32) -> LanguageModel:
        model = LanguageModel.from_architecture(self.architecture, dtype=dtype)
        model.load_state_dict(self.params)
        if self.rng_state is not None:
            model.dropout_rng.bit_generator.state = self.rng_state
        return model

    @classmethod
    def from_model(cls, model: LanguageModel, optimizer=None, step: int = 0, meta: dict | None = None) -> "Checkpoint":
        return cls(
            architecture=model.architecture(),
            params=model.state_dict(),
            optimizer=None if optimizer is None else optimizer.state_dict(),
            step=step,
            rng_state=model.dropout_rng.bit_generator.state,
            meta=dict(meta or {}),
        )

    def to_bytes(self) -> bytes:
        tensors = [("param", k, v) for k, v in self.params.items()]
        if self.optimizer is not None:
            tensors += [("adam_m", k, v) for k, v in self.optimizer["m"].items()]
            tensors += [("adam_v", k, v) for k, v in self.optimizer["v"].items()]
        entries, blobs, offset = [], [], 0
        for group, name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"group": group, "name": name, "shape": list(np.shape(arr)), "offset": offset})
            blobs.append(data)
            offset += len(data)
        header = {
            "version": self.version,
            "architecture": self.architecture,
            "step": self.step,
            "optimizer_t": None if self.optimizer is None else self.optimizer["t"],
            "rng_state": self.rng_state,
            "meta": self.meta,
            "tensors": entries,
            "blob_bytes": offset,
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        body = _PREFIX.pack(MAGIC, self.version, len(hbytes)) + hbytes + b"".join(blobs)
        return body + _digest(body)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < _PREFIX.size + _CHECKSUM_BYTES:
            raise IntegrityError("checkpoint truncated: shorter than the fixed header")
        magic, version, hlen = _PREFIX.unpack_from(buf, 0)
        if magic != MAGIC:
            raise IntegrityError(f"bad magic {magic!r}")
        if version != VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version} (expected {VERSION})")
        body, tail = buf[:-_CHECKSUM_BYTES], buf[-_CHECKSUM_BYTES:]
        start = _PREFIX.size + hlen
        if start > len(body):
            raise IntegrityError("checkpoint truncated inside the header")
        try:
            header = json.loads(body[_PREFIX.size : start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"corrupt header: {exc}") from exc
        if len(body) - start != header.get("blob_bytes", -1):
            raise IntegrityError("checkpoint truncated: blob section has the wrong size")
        if _digest(body) != tail:
            raise IntegrityError("checksum mismatch")
        blob = body[start:]
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for e in header["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
            groups[e["group"]][e["name"]] = arr.astype(np.float32)
        opt = None
        if header.get("optimizer_t") is not None:
            opt = {"t": header["optimizer_t"], "m": groups["adam_m"], "v": groups["adam_v"]}
        return cls(
            architecture=header["architecture"],
            params=groups["param"],
            optimizer=opt,
            step=header["step"],
            rng_state=header["rng_state"],
            meta=header["meta"],
            version=version,
        )


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(ckpt.to_bytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(buf)


def model_hash(model_or_params) -> str:
    """Hex digest over parameter names, shapes and f32 values."""
    params = model_or_params.state_dict() if hasattr(model_or_params, "state_dict") else model_or_params
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
