"""HASTE line schedule, line extraction and temporal partitioning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hmlab.core import NumericalError, ShapeError


@dataclass(frozen=True, eq=False)
class SamplingSchedule:
    """Ordered acquisition of k-space rows (phase-encode lines).

    ``times[e]`` and ``rows[e]`` give when and which centered-grid row
    entry ``e`` reads; every line spans all frequency-encode columns.
    """

    shape: tuple
    times: np.ndarray
    rows: np.ndarray
    total_time: float = 1.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        rows = np.asarray(self.rows, dtype=np.int64)
        shape = tuple(int(n) for n in self.shape)
        if times.shape != rows.shape or times.ndim != 1 or times.size == 0:
            raise ValueError("times and rows must be non-empty 1D arrays of equal length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("acquisition times must be strictly increasing")
        if np.any(rows < 0) or np.any(rows >= shape[0]):
            raise ValueError("scheduled row outside the grid")
        if times[0] < 0 or times[-1] > self.total_time:
            raise ValueError("acquisition times must lie in [0, total_time]")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return self.times.size

    def subset(self, index) -> "SamplingSchedule":
        return SamplingSchedule(self.shape, self.times[index], self.rows[index], self.total_time)

    def to_dict(self):
        return {
            "shape": list(self.shape),
            "total_time": self.total_time,
            "times": self.times.tolist(),
            "rows": self.rows.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["shape"]), np.array(d["times"]), np.array(d["rows"]), float(d["total_time"]))


@dataclass(frozen=True, eq=False)
class KSpaceData:
    """Acquired lines, shape ``(entries, coils, width)``, with their schedule."""

    schedule: SamplingSchedule
    lines: np.ndarray

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=np.complex128)
        if lines.ndim != 3 or lines.shape[0] != len(self.schedule) or lines.shape[2] != self.schedule.shape[1]:
            raise ShapeError(
                f"lines shape {lines.shape} does not match schedule "
                f"({len(self.schedule)} entries, width {self.schedule.shape[1]})"
            )
        if not np.all(np.isfinite(lines)):
            raise NumericalError("k-space data contains non-finite samples")
        object.__setattr__(self, "lines", lines)

    @property
    def n_coils(self) -> int:
        return self.lines.shape[1]

    def __len__(self):
        return self.lines.shape[0]

    def with_lines(self, lines) -> "KSpaceData":
        return KSpaceData(self.schedule, lines)

    def subset(self, index) -> "KSpaceData":
        return KSpaceData(self.schedule.subset(index), self.lines[index])


def haste_schedule(shape, total_time=1.0) -> SamplingSchedule:
    """Center-out half-Fourier schedule on an ``N x W`` grid.

    Entry ``j = 0..N/2`` is read at ``t = 2 j T / N`` from row
    ``N/2 + j``; ``j = N/2`` (normalized frequency ``pi``) aliases to row 0.
    """
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape), int(shape))
    n = int(shape[0])
    if n % 2 or n < 8:
        raise ValueError(f"HASTE needs an even number of rows >= 8, got {n}")
    j = np.arange(n // 2 + 1)
    times = total_time * (j / (n // 2))  # last entry exactly T
    rows = (n // 2 + j) % n
    return SamplingSchedule(tuple(shape), times, rows, total_time)


def extract_lines(kgrid, schedule: SamplingSchedule) -> KSpaceData:
    """Copy the scheduled rows out of per-coil grids ``(C, H, W)``."""
    k = np.asarray(kgrid, dtype=np.complex128)
    if k.ndim == 2:
        k = k[None]
    if tuple(k.shape[1:]) != schedule.shape:
        raise ShapeError(f"grid shape {k.shape[1:]} does not match schedule {schedule.shape}")
    lines = np.ascontiguousarray(k[:, schedule.rows, :].transpose(1, 0, 2))
    return KSpaceData(schedule, lines)


def embed_lines(data: KSpaceData) -> np.ndarray:
    """Zero-filled per-coil grids ``(C, H, W)``; repeated rows accumulate."""
    s = data.schedule
    grid = np.zeros((data.n_coils,) + s.shape, dtype=np.complex128)
    np.add.at(grid, (slice(None), s.rows), data.lines.transpose(1, 0, 2))
    return grid


def partition_sizes(n_entries, n_fractions):
    base, extra = divmod(n_entries, n_fractions)
    return [base + (1 if i < extra else 0) for i in range(n_fractions)]


def partition(data: KSpaceData, n_fractions: int) -> list:
    """Contiguous, order-preserving blocks; leading blocks take the remainder."""
    if n_fractions < 1 or n_fractions > len(data):
        raise ValueError(f"cannot split {len(data)} entries into {n_fractions} fractions")
    bounds = np.cumsum([0] + partition_sizes(len(data), n_fractions))
    return [data.subset(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
