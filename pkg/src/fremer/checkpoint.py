"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"FRMR1"
    u32 header_len, header_len bytes of UTF-8 ``key = value`` lines
    repeated until EOF:
        u16 name_len, name bytes
        u8  kind (0 = real, 1 = complex)
        u8  ndim, ndim x u64 dims
        f64 data, row-major; complex tensors as interleaved (re, im)

The header carries the ForecastTask fields plus free-form metadata.  Tensors
whose names start with ``extra.`` are auxiliary (e.g. normalizer statistics)
and are not part of the parameter set.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ForecastTask, FremerParams, ModelError

MAGIC = b"FRMR1"
EXTRA_PREFIX = "extra."


class CheckpointError(ModelError):
    def __init__(self, message: str):
        super().__init__(message, "checkpoint")


@dataclass
class Checkpoint:
    params: FremerParams
    header: dict[str, str] = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def task(self) -> ForecastTask:
        return self.params.task


def _format_header(task: ForecastTask, meta: dict | None) -> bytes:
    lines = [f"{k} = {v}" for k, v in task.to_dict().items()]
    for k, v in (meta or {}).items():
        if "\n" in str(v) or "=" in str(k):
            raise CheckpointError(f"header entry {k!r} cannot be encoded")
        lines.append(f"{k} = {v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line: {line!r}")
        out[key.strip()] = val.strip()
    return out


def _write_tensor(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    is_complex = np.iscomplexobj(arr)
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", int(is_complex), arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    data = np.ascontiguousarray(arr, dtype="<c16" if is_complex else "<f8")
    buf.write(data.tobytes(order="C"))


def dumps(params: FremerParams, meta: dict | None = None,
          extras: dict[str, np.ndarray] | None = None) -> bytes:
    buf = io.BytesIO()
    header = _format_header(params.task, meta)
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for name, arr in params.items():
        _write_tensor(buf, name, arr)
    for name, arr in (extras or {}).items():
        _write_tensor(buf, EXTRA_PREFIX + name, np.asarray(arr))
    return buf.getvalue()


def save_checkpoint(path, params: FremerParams, meta: dict | None = None,
                    extras: dict[str, np.ndarray] | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta, extras))


def _read(view: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(view):
        raise CheckpointError("truncated checkpoint")
    return bytes(view[pos : pos + n]), pos + n


def loads(blob: bytes, expect_task: ForecastTask | None = None) -> Checkpoint:
    view = memoryview(blob)
    magic, pos = _read(view, 0, len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError("not a Fremer checkpoint (bad magic)")
    raw, pos = _read(view, pos, 4)
    (hlen,) = struct.unpack("<I", raw)
    raw, pos = _read(view, pos, hlen)
    header = parse_header(raw.decode("utf-8"))
    try:
        task = ForecastTask.from_dict(header)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid task in header: {exc}") from exc
    if expect_task is not None and task != expect_task:
        raise CheckpointError(f"checkpoint task {task} does not match configured task {expect_task}")

    tensors, extras = {}, {}
    while pos < len(view):
        raw, pos = _read(view, pos, 2)
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _read(view, pos, nlen)
        name = raw.decode("utf-8")
        raw, pos = _read(view, pos, 2)
        kind, ndim = struct.unpack("<BB", raw)
        raw, pos = _read(view, pos, 8 * ndim)
        shape = struct.unpack(f"<{ndim}Q", raw)
        count = int(np.prod(shape, dtype=np.int64))
        itemsize = 16 if kind else 8
        raw, pos = _read(view, pos, count * itemsize)
        arr = np.frombuffer(raw, dtype="<c16" if kind else "<f8").reshape(shape).copy()
        if name.startswith(EXTRA_PREFIX):
            extras[name[len(EXTRA_PREFIX):]] = arr
        else:
            tensors[name] = arr
    try:
        params = FremerParams(task, tensors)
    except ModelError as exc:
        raise CheckpointError(str(exc)) from exc
    meta = {k: v for k, v in header.items() if k not in task.to_dict()}
    return Checkpoint(params, meta, extras)


def load_checkpoint(path, expect_task: ForecastTask | None = None) -> Checkpoint:
    return loads(Path(path).read_bytes(), expect_task)
