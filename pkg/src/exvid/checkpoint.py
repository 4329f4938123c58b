"""Bit-exact named-tensor container (.exvc) and on-disk surgery.

File layout, little-endian throughout:

    header   magic "EXVC" | format version u32 | tensor count u32
    entry    name length u16 | UTF-8 name | dtype u8 (0=f32, 1=f16)
             | ndim u8 | extents u32 x ndim | payload length u64 | raw payload

Entries are sorted by name, names are unique, and payload length must equal
prod(extents) times the dtype width, so a given tensor set has exactly one
byte representation. save followed by load is bitwise identity.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, VideoModel, build_model
from .surgery import ExtensionPlan, SurgeryError, extend_model
from .tensor import Tensor

MAGIC = b"EXVC"
FORMAT_VERSION = 1

_DTYPE_CODE = {np.dtype("float32"): 0, np.dtype("float16"): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_CODE_WIDTH = {0: 4, 1: 2}


class ParseError(ValueError):
    """Malformed checkpoint bytes; message cites the failing byte offset."""


class WriteConflictError(OSError):
    """Another writer holds the same destination path."""


# -- serialization ----------------------------------------------------------


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in _DTYPE_CODE:
        raise ValueError(f"unsupported dtype {arr.dtype}; container holds float32/float16 only")
    # ascontiguousarray would promote 0-d arrays to shape (1,), so only
    # copy when the layout actually needs it
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def dumps(tensors: dict) -> bytes:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    chunks = [struct.pack("<4sII", MAGIC, FORMAT_VERSION, len(names))]
    for name in sorted(names):
        arr = _as_array(tensors[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long ({len(raw)} bytes): {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} has too many axes ({arr.ndim})")
        code = _DTYPE_CODE[arr.dtype]
        payload = arr.astype(_CODE_DTYPE[code], copy=False).tobytes()
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    return b"".join(chunks)


def save(model_or_tensors, path: str) -> None:
    """Write a model or a name->tensor mapping; atomic via rename."""
    if isinstance(model_or_tensors, VideoModel):
        tensors = model_to_tensors(model_or_tensors)
    else:
        tensors = dict(model_or_tensors)
    blob = dumps(tensors)
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    except FileExistsError as exc:
        raise WriteConflictError(f"concurrent write detected: {tmp} already exists") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise ParseError(
                f"truncated {what} at byte {self.off}: expected {n} bytes, "
                f"file has {len(self.blob) - self.off} remaining"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(blob: bytes) -> dict[str, np.ndarray]:
    cur = _Cursor(blob)
    magic, version, count = cur.unpack("<4sII", "header")
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r} at byte 0: expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version} at byte 4")
    out: dict[str, np.ndarray] = {}
    prev = None
    for i in range(count):
        entry_off = cur.off
        (name_len,) = cur.unpack("<H", f"entry {i} name length")
        name = cur.take(name_len, f"entry {i} name").decode("utf-8")
        code, ndim = cur.unpack("<BB", f"entry {i} dtype/ndim")
        if code not in _CODE_DTYPE:
            raise ParseError(f"unknown dtype code {code} at byte {entry_off}")
        shape = cur.unpack(f"<{ndim}I", f"entry {i} extents")
        (payload_len,) = cur.unpack("<Q", f"entry {i} payload length")
        expect = int(np.prod(shape, dtype=np.int64)) * _CODE_WIDTH[code] if ndim else _CODE_WIDTH[code]
        if payload_len != expect:
            raise ParseError(
                f"entry {name!r} at byte {entry_off}: payload length {payload_len} "
                f"does not match extents {tuple(shape)} ({expect} bytes)"
            )
        payload = cur.take(payload_len, f"entry {i} ({name!r}) payload")
        if prev is not None and not name > prev:
            raise ParseError(f"entry {name!r} at byte {entry_off} out of order after {prev!r}")
        prev = name
        out[name] = np.frombuffer(payload, dtype=_CODE_DTYPE[code]).reshape(shape).copy()
    if cur.off != len(blob):
        raise ParseError(f"{len(blob) - cur.off} trailing bytes after last entry at byte {cur.off}")
    return out


def load(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


# -- model round-trip -------------------------------------------------------

META_CONFIG = "meta/config"
META_PREFIX = "meta/"
OPT_PREFIX = "opt/"


def model_to_tensors(model: VideoModel) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {n: t.data for n, t in model.named_tensors().items()}
    out[META_CONFIG] = model.config.to_vector(model.frame_capacity, model.extended)
    for key, arr in model.meta.items():
        out[META_PREFIX + key] = arr
    return out


def model_from_tensors(tensors: dict[str, np.ndarray]) -> VideoModel:
    if META_CONFIG not in tensors:
        raise ParseError(f"checkpoint lacks {META_CONFIG!r}; cannot reconstruct a model")
    config, capacity, extended = ModelConfig.from_vector(tensors[META_CONFIG])
    model = build_model(config, seed=0)
    if extended:
        model = extend_model(model, ExtensionPlan(t_base=config.base_frames, t_ext=capacity))
    expected = model.named_tensors()
    got = {n for n in tensors if not n.startswith(META_PREFIX) and not n.startswith(OPT_PREFIX)}
    missing = sorted(set(expected) - got)
    extra = sorted(got - set(expected))
    if missing or extra:
        raise ParseError(
            f"tensor names do not match the declared architecture; "
            f"missing={missing[:5]} unexpected={extra[:5]}"
        )
    for name, tensor in expected.items():
        arr = tensors[name]
        if tuple(arr.shape) != tensor.shape:
            raise ParseError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tensor.shape}")
        tensor.data = np.ascontiguousarray(arr, dtype=tensor.data.dtype)
    model.meta = {
        name[len(META_PREFIX):]: arr
        for name, arr in tensors.items()
        if name.startswith(META_PREFIX) and name != META_CONFIG
    }
    return model


def load_model(path: str) -> VideoModel:
    return model_from_tensors(load(path))


# -- diffing ----------------------------------------------------------------


@dataclass
class DiffReport:
    added: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    shape_changed: dict[str, tuple[tuple, tuple]] = field(default_factory=dict)
    value_changed: dict[str, float] = field(default_factory=dict)
    unchanged_count: int = 0

    def summary(self) -> str:
        lines = [
            f"added: {len(self.added)}",
            f"removed: {len(self.removed)}",
            f"shape changed: {len(self.shape_changed)}",
            f"value changed: {len(self.value_changed)}",
            f"unchanged: {self.unchanged_count}",
        ]
        for name in self.added:
            lines.append(f"  + {name}")
        for name in self.removed:
            lines.append(f"  - {name}")
        for name, (old, new) in self.shape_changed.items():
            lines.append(f"  ~ {name}: {old} -> {new}")
        for name, diff in self.value_changed.items():
            lines.append(f"  * {name}: max abs diff {diff:.6g}")
        return "\n".join(lines)


def diff(old: dict[str, np.ndarray], new: dict[str, np.ndarray]) -> DiffReport:
    report = DiffReport()
    for name in sorted(set(old) | set(new)):
        if name not in old:
            report.added.append(name)
        elif name not in new:
            report.removed.append(name)
        elif old[name].shape != new[name].shape:
            report.shape_changed[name] = (tuple(old[name].shape), tuple(new[name].shape))
        elif old[name].tobytes() != new[name].tobytes():
            a = old[name].astype(np.float64)
            b = new[name].astype(np.float64)
            report.value_changed[name] = float(np.max(np.abs(a - b)))
        else:
            report.unchanged_count += 1
    return report


# -- on-disk surgery --------------------------------------------------------


def surgery_on_checkpoint(in_path: str, plan: ExtensionPlan, out_path: str) -> DiffReport:
    """Apply the frame-capacity extension at the file level.

    Output bytes equal save(extend_model(load(in_path))): the on-disk and
    in-memory paths cannot drift apart because this is the in-memory path.
    """
    tensors = load(in_path)
    if not any(".temporal." in name for name in tensors):
        raise SurgeryError(
            "no temporal tensors found in checkpoint; this is not a video model of the expected family"
        )
    model = model_from_tensors(tensors)
    extended = extend_model(model, plan)
    save(extended, out_path)
    return diff(tensors, load(out_path))
