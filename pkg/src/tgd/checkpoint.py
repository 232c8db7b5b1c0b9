"""Binary checkpoints for translation model, actor and critic parameters.

Layout::

    b"TGDCKPT\\0"                  8-byte magic
    uint32 LE                     format version
    uint32 LE                     header length in bytes
    header                        UTF-8 JSON (sorted keys): kind, config, step,
                                  rng_state, meta, arrays [{name, shape}]
    array payload                 float32 little-endian, in header order

The header is serialized deterministically so save -> load -> save yields
byte-identical files.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .actor import ActorConfig, ActorParams
from .critic import CriticConfig, CriticParams
from .model import Seq2SeqConfig, Seq2SeqParams
from .nn import ParamSet

MAGIC = b"TGDCKPT\0"
VERSION = 1
KINDS = {
    "nmt": (Seq2SeqConfig, Seq2SeqParams),
    "actor": (ActorConfig, ActorParams),
    "critic": (CriticConfig, CriticParams),
}


class CheckpointFormatError(ValueError):
    pass


class CheckpointKindError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_params(self, dtype=None) -> ParamSet:
        """Rebuild the typed parameter set (arrays cast to the current precision)."""
        cfg_cls, params_cls = KINDS[self.kind]
        dtype = dtype or ad.default_dtype()
        return params_cls(cfg_cls(**self.config), {k: v.astype(dtype) for k, v in self.arrays.items()})


def save_checkpoint(component: ParamSet, path, step: int = 0, rng_state: dict | None = None, meta: dict | None = None) -> None:
    kind = component.kind
    if kind not in KINDS:
        raise CheckpointKindError(f"cannot checkpoint component of kind {kind!r}")
    names = component.names()
    header = {
        "kind": kind,
        "config": component.config.to_dict(),
        "step": int(step),
        "rng_state": rng_state,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(component[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(component[n], dtype="<f4").tobytes())


def load_checkpoint(path, expected_kind: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if len(raw) < len(MAGIC) + 8:
        raise OSError(f"checkpoint {path} is truncated")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    off = len(MAGIC) + 8
    if len(raw) < off + hlen:
        raise OSError(f"checkpoint {path} is truncated")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    kind = header.get("kind")
    if kind not in KINDS:
        raise CheckpointFormatError(f"{path}: unknown component kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointKindError(f"{path} holds a {kind!r} checkpoint, expected {expected_kind!r}")
    off += hlen
    arrays = {}
    for rec in header["arrays"]:
        shape = tuple(rec["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if len(raw) < off + nbytes:
            raise OSError(f"checkpoint {path} is truncated")
        arrays[rec["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
        off += nbytes
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - off} trailing bytes after array payload")
    return Checkpoint(kind, header["config"], arrays, header["step"], header["rng_state"], header["meta"])


def load_params(path, kind: str, dtype=None):
    """Shortcut: ``(params, checkpoint)`` for a checkpoint of the given kind."""
    ck = load_checkpoint(path, expected_kind=kind)
    return ck.to_params(dtype), ck
