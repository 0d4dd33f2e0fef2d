"""Single-file checkpoints: header, JSON manifest, little-endian float64 payload.

Layout::

    b"RCST"                      4 bytes, magic
    version                      uint32 little-endian
    manifest length              uint64 little-endian, bytes of UTF-8 JSON
    manifest                     JSON, sorted keys, no whitespace
    payload                      float64 little-endian, tensors in manifest order

Each manifest tensor entry records ``name``, ``shape`` and ``offset``, the
byte offset of its data from the start of the payload.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from typing import Dict, Tuple

import numpy as np

from .core import Head, ModuleKind, RecastConfig, RecastModel
from .exceptions import FormatError, NonFiniteError, TopologyError
from .mimicry import TeacherModel
from .tensor import Tensor
from .til import TaskSnapshot, check_snapshot

MAGIC = b"RCST"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_LE_F64 = np.dtype("<f8")


def _key(l: int, m: int) -> str:
    return f"{l}.{m}"


def _unkey(s: str) -> Tuple[int, int]:
    l, m = s.split(".")
    return int(l), int(m)


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    """Write ``tensors`` (in insertion order) and ``meta`` atomically to ``path``."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"refusing to serialise non-finite tensor {name!r}")
        data = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(data)
        offset += len(data)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":"),
                          allow_nan=False).encode("utf-8")
    blob = _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".rcst-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = _HEADER.size + mlen
    if start > len(blob):
        raise FormatError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(blob[_HEADER.size:start].decode("utf-8"))
        entries = manifest["tensors"]
        meta = manifest["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    payload = memoryview(blob)[start:]
    tensors, expected = {}, 0
    for e in entries:
        count = math.prod(e["shape"])
        if e["offset"] != expected:
            raise FormatError(f"{path}: tensor {e['name']!r} at offset {e['offset']}, expected {expected}")
        end = expected + 8 * count
        if end > len(payload):
            raise FormatError(f"{path}: payload truncated inside tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(payload[expected:end], dtype=_LE_F64).astype(np.float64).reshape(e["shape"])
        expected = end
    if expected != len(payload):
        raise FormatError(f"{path}: {len(payload) - expected} trailing payload bytes")
    return tensors, meta


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        return json.loads(fh.read(mlen).decode("utf-8"))


# -- models ------------------------------------------------------------------
def save_model(model: RecastModel, path) -> None:
    tensors = {}
    for g, bank in enumerate(model.banks):
        for i, t in enumerate(bank.templates):
            tensors[f"template/{g}/{i}"] = t.data
    for l, m, _ in model.config.modules():
        tensors[f"coeff/{_key(l, m)}"] = model.coefficients[(l, m)].values.data
    for l, m, _ in model.config.modules():
        tensors[f"bias/{_key(l, m)}"] = model.biases[(l, m)].data
    for tid in sorted(model.heads):
        tensors[f"head/{tid}/weight"] = model.heads[tid].weight.data
        tensors[f"head/{tid}/bias"] = model.heads[tid].bias.data
    save_checkpoint(path, tensors, {"kind": "model", "config": model.config.to_dict()})


def _expect_kind(meta: dict, kind: str, path) -> None:
    if meta.get("kind") != kind:
        raise FormatError(f"{path}: checkpoint holds a {meta.get('kind')!r}, expected {kind!r}")


def load_model(path) -> RecastModel:
    tensors, meta = load_checkpoint(path)
    _expect_kind(meta, "model", path)
    config = RecastConfig.from_dict(meta["config"])
    try:
        banks = [np.stack([tensors[f"template/{g}/{i}"] for i in range(config.n_templates)])
                 for g in range(config.n_groups)]
        coeffs = {(l, m): tensors[f"coeff/{_key(l, m)}"] for l, m, _ in config.modules()}
        biases = {(l, m): tensors[f"bias/{_key(l, m)}"] for l, m, _ in config.modules()}
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from exc
    model = RecastModel(config, banks, coeffs, biases)
    for name in tensors:
        if name.startswith("head/") and name.endswith("/weight"):
            tid = int(name.split("/")[1])
            model.heads[tid] = Head(Tensor(tensors[name]), Tensor(tensors[f"head/{tid}/bias"]))
    return model


def save_teacher(teacher: TeacherModel, path) -> None:
    tensors = {}
    for l, m, _ in teacher.modules():
        tensors[f"weight/{_key(l, m)}"] = teacher.weights[(l, m)]
    for l, m, _ in teacher.modules():
        tensors[f"bias/{_key(l, m)}"] = teacher.biases[(l, m)]
    if teacher.head is not None:
        tensors["head/weight"], tensors["head/bias"] = teacher.head
    meta = {"kind": "teacher", "activation": teacher.activation,
            "layout": [[mk.to_dict() for mk in mods] for mods in teacher.layout]}
    save_checkpoint(path, tensors, meta)


def load_teacher(path) -> TeacherModel:
    tensors, meta = load_checkpoint(path)
    _expect_kind(meta, "teacher", path)
    layout = [[ModuleKind.from_dict(mk) for mk in mods] for mods in meta["layout"]]
    keys = [(l, m) for l, mods in enumerate(layout) for m in range(len(mods))]
    try:
        weights = {k: tensors[f"weight/{_key(*k)}"] for k in keys}
        biases = {k: tensors[f"bias/{_key(*k)}"] for k in keys}
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from exc
    head = (tensors["head/weight"], tensors["head/bias"]) if "head/weight" in tensors else None
    return TeacherModel(layout, weights, biases, meta.get("activation", "relu"), head)


# -- snapshots ----------------------------------------------------------------
def save_snapshot(snapshot: TaskSnapshot, path) -> None:
    tensors = {f"coeff/{_key(*k)}": snapshot.coefficients[k] for k in sorted(snapshot.coefficients)}
    tensors["head/weight"] = snapshot.head_weight
    tensors["head/bias"] = snapshot.head_bias
    meta = {"kind": "snapshot", "task_id": snapshot.task_id, "mode": snapshot.mode,
            "accuracy": float(snapshot.accuracy).hex()}
    save_checkpoint(path, tensors, meta)


def load_snapshot(path, model: RecastModel = None) -> TaskSnapshot:
    """Read a snapshot; when ``model`` is given, verify that it fits that model."""
    tensors, meta = load_checkpoint(path)
    _expect_kind(meta, "snapshot", path)
    coeffs = {_unkey(name.split("/", 1)[1]): arr for name, arr in tensors.items() if name.startswith("coeff/")}
    snap = TaskSnapshot(meta["task_id"], coeffs, tensors["head/weight"], tensors["head/bias"],
                        float.fromhex(meta["accuracy"]), meta["mode"])
    if model is not None:
        try:
            check_snapshot(model, snap)
        except TopologyError as exc:
            raise TopologyError(f"{path}: {exc}") from exc
    return snap
