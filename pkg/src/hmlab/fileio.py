"""Raw array files (``.cfi``) and atomic writes.

A file is one ASCII header line ``CFI1 <dtype> <ndim> <dims...>`` followed
by row-major little-endian float64 pairs: (real, imag) for ``complex``,
(dx, dy) for ``field``.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from hmlab.sampling import KSpaceData, SamplingSchedule
from hmlab.warp import DeformationField

MAGIC = "CFI1"
DTYPES = ("complex", "field")
_UMASK = os.umask(0)
os.umask(_UMASK)


class FormatError(ValueError):
    """Unreadable or inconsistent artifact file."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_cfi(array: np.ndarray, dtype: str) -> bytes:
    """Serialize a complex array (``dtype='complex'``) or an array of
    displacement pairs with trailing axis 2 (``dtype='field'``)."""
    if dtype == "complex":
        a = np.asarray(array, dtype=np.complex128)
        dims = a.shape
        payload = np.stack([a.real, a.imag], axis=-1)
    elif dtype == "field":
        payload = np.asarray(array, dtype=np.float64)
        if payload.ndim < 1 or payload.shape[-1] != 2:
            raise ValueError("field arrays need a trailing axis of length 2 (dx, dy)")
        dims = payload.shape[:-1]
    else:
        raise ValueError(f"unknown dtype {dtype!r}")
    header = f"{MAGIC} {dtype} {len(dims)} {' '.join(str(d) for d in dims)}".rstrip() + "\n"
    return header.encode("ascii") + payload.astype("<f8").tobytes(order="C")


def decode_cfi(data: bytes):
    """Inverse of :func:`encode_cfi`; returns ``(array, dtype)``."""
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line")
    try:
        parts = data[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII") from exc
    if len(parts) < 3 or parts[0] != MAGIC or parts[1] not in DTYPES:
        raise FormatError(f"bad header {data[:nl][:60]!r}")
    try:
        ndim = int(parts[2])
        dims = tuple(int(p) for p in parts[3:])
    except ValueError as exc:
        raise FormatError("non-integer dimension in header") from exc
    if ndim != len(dims) or any(d < 0 for d in dims):
        raise FormatError("header dimension count mismatch")
    n = int(np.prod(dims, dtype=np.int64)) * 2
    body = data[nl + 1:]
    if len(body) != 8 * n:
        raise FormatError(f"payload has {len(body)} bytes, header implies {8 * n}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    pairs = flat.reshape(dims + (2,))
    if parts[1] == "complex":
        return pairs[..., 0] + 1j * pairs[..., 1], "complex"
    return pairs, "field"


def read_cfi(path, expect: str | None = None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    arr, dtype = decode_cfi(data)
    if expect is not None and dtype != expect:
        raise FormatError(f"{path}: expected {expect} data, found {dtype}")
    return arr


def write_cfi(path, array, dtype: str) -> None:
    atomic_write_bytes(path, encode_cfi(array, dtype))


# typed helpers


def write_image(path, image) -> None:
    write_cfi(path, image, "complex")


def read_image(path) -> np.ndarray:
    a = read_cfi(path, "complex")
    if a.ndim != 2:
        raise FormatError(f"{path}: expected a 2D image, got shape {a.shape}")
    return a


def fields_to_array(fields) -> np.ndarray:
    """``(K, H, W, 2)`` array of (dx, dy) pairs."""
    return np.stack([np.stack([f.dx, f.dy], axis=-1) for f in fields])


def write_fields(path, fields) -> None:
    write_cfi(path, fields_to_array(fields), "field")


def read_fields(path) -> list:
    a = read_cfi(path, "field")
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise FormatError(f"{path}: expected (K, H, W) fields")
    return [DeformationField(f[..., 0].copy(), f[..., 1].copy()) for f in a]


def schedule_path(path) -> Path:
    return Path(str(path) + ".json")


def encode_schedule(schedule: SamplingSchedule) -> str:
    return json.dumps(schedule.to_dict(), sort_keys=True) + "\n"


def write_kspace(path, data: KSpaceData) -> None:
    """Lines go to ``path``, the schedule to the ``path + '.json'`` sidecar."""
    write_cfi(path, data.lines, "complex")
    atomic_write_text(schedule_path(path), encode_schedule(data.schedule))


def read_kspace(path) -> KSpaceData:
    lines = read_cfi(path, "complex")
    try:
        sched = SamplingSchedule.from_dict(json.loads(schedule_path(path).read_text()))
    except OSError as exc:
        raise FormatError(f"missing schedule sidecar for {path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad schedule sidecar for {path}: {exc}") from exc
    try:
        return KSpaceData(sched, lines)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
