"""The ``NPMK`` binary container for models, coefficient sets and permutations.

Layout, all integers little-endian::

    b"NPMK"  u32 version  u32 kind
    u32 header_len  header (UTF-8 JSON: spec, BN constants, metadata)
    u32 tensor_count
    per tensor: u16 name_len  name  u32 ndim  u32 dims[ndim]  f64 data[prod(dims)]

Tensors are written in declaration order (``ModelParams.tensors()``).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .align import PermutationSet
from .nn import MlpSpec, ModelParams

MAGIC = b"NPMK"
VERSION = 1
KINDS = {"model": 0, "alphaset": 1, "permset": 2}
_KIND_NAMES = {v: k for k, v in KINDS.items()}


class CheckpointError(ValueError):
    pass


def config_hash(config) -> str:
    """Short stable digest of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _encode(kind: str, header: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, KINDS[kind]), struct.pack("<I", len(head)), head,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def _decode(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an NPMK checkpoint (bad magic)")
    version, kind = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in _KIND_NAMES:
        raise CheckpointError(f"unknown payload kind {kind}")
    pos = 12
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(blob):
                raise CheckpointError(f"tensor {name!r} truncated at byte offset {len(blob)}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint near byte offset {pos}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after offset {pos}")
    return _KIND_NAMES[kind], header, tensors


def _model_header(model: ModelParams, metadata: dict | None) -> dict:
    momentum, eps = model._bn_consts()
    return {"spec": model.spec.to_dict(), "bn": {"momentum": momentum, "eps": eps},
            "metadata": metadata or {}}


def save_model(path, model: ModelParams, metadata: dict | None = None) -> None:
    Path(path).write_bytes(_encode("model", _model_header(model, metadata), list(model.tensors())))


def save_alphas(path, alphas: dict, model: ModelParams, metadata: dict | None = None) -> None:
    names = [k for k, _ in model.trainable()]
    Path(path).write_bytes(_encode("alphaset", _model_header(model, metadata),
                                   [(k, alphas[k]) for k in names]))


def save_permset(path, perms: PermutationSet, metadata: dict | None = None) -> None:
    header = {"metadata": metadata or {}}
    Path(path).write_bytes(_encode("permset", header,
                                   [(f"perm.{i}", p.astype(np.float64)) for i, p in enumerate(perms.perms)]))


def load(path, expected_hash: str | None = None, force: bool = False):
    """Load any checkpoint; returns ``(kind, object, metadata)``.

    ``object`` is a ``ModelParams``, an alpha dict, or a ``PermutationSet``.
    If ``expected_hash`` is given and differs from the stored config hash,
    raises unless ``force``.
    """
    kind, header, tensors = _decode(Path(path).read_bytes())
    meta = header.get("metadata", {})
    if expected_hash is not None and not force and meta.get("config_hash") != expected_hash:
        raise CheckpointError(f"{path}: config hash {meta.get('config_hash')} != {expected_hash}")
    if kind == "permset":
        perms = [tensors[f"perm.{i}"].astype(np.int64) for i in range(len(tensors))]
        return kind, PermutationSet(perms), meta
    if kind == "alphaset":
        return kind, tensors, meta
    spec = MlpSpec.from_dict(header["spec"])
    bn = header.get("bn", {})
    model = ModelParams.from_state(spec, tensors, bn.get("momentum", 0.1), bn.get("eps", 1e-5))
    return kind, model, meta


def load_model(path, **kw) -> ModelParams:
    kind, obj, _ = load(path, **kw)
    if kind != "model":
        raise CheckpointError(f"{path} holds a {kind}, not a model")
    return obj
