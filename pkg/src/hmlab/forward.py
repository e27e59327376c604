"""Dynamic multi-coil forward operators and the noise model.

``forward_exact`` evaluates the deformation per acquired line (simulation);
``ApproxOperator`` blends a fixed set of warped, coil-weighted k-spaces
linearly in time (reconstruction) and provides the exact adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hmlab.core import ShapeError, check_same_shape, fft2c, ifft2c
from hmlab.sampling import KSpaceData, SamplingSchedule, extract_lines
from hmlab.warp import INTERPOLATORS, DeformationTimeline, apply_warp, blend_index, timeline_eval, warp_matrix


@dataclass(frozen=True, eq=False)
class CoilSet:
    """Complex sensitivity maps, shape ``(n_coils, H, W)``."""

    maps: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.complex128)
        if m.ndim != 3:
            raise ValueError(f"coil maps must have shape (C, H, W), got {m.shape}")
        object.__setattr__(self, "maps", m)

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self):
        return self.maps.shape[1:]

    def sum_of_squares(self):
        return np.sum(np.abs(self.maps) ** 2, axis=0)

    def check(self, shape):
        check_same_shape(self.shape, shape, "coil maps vs image")


@dataclass(frozen=True)
class ApproxModelConfig:
    """Keyframe oversampling ``eta`` and the warp interpolator of the
    reconstruction model."""

    eta: int = 2
    interpolator: str = "bilinear"
    patch: int = 7
    clamp: bool = False

    def __post_init__(self):
        if int(self.eta) != self.eta or self.eta < 1:
            raise ValueError("eta must be an integer >= 1")
        if self.interpolator not in INTERPOLATORS:
            raise ValueError(f"unknown interpolator {self.interpolator!r}")


def forward_exact(s, timeline: DeformationTimeline, coils: CoilSet, schedule: SamplingSchedule,
                  interpolator="sinc_patch", patch=7, clamp=False) -> KSpaceData:
    """Per-line model: warp ``s`` by the timeline at each line's time."""
    s = np.asarray(s, dtype=np.complex128)
    check_same_shape(s.shape, schedule.shape, "image vs schedule")
    check_same_shape(timeline.shape, s.shape, "timeline vs image")
    coils.check(s.shape)
    lines = np.empty((len(schedule), coils.n_coils, s.shape[1]), dtype=np.complex128)
    for e, (t, row) in enumerate(zip(schedule.times, schedule.rows)):
        u = timeline_eval(timeline, min(float(t), timeline.total_time), clamp)
        warped = apply_warp(u, s, interpolator, patch)
        lines[e] = fft2c(coils.maps * warped)[:, row, :]
    return KSpaceData(schedule, lines)


class ApproxOperator:
    """Linear map ``s -> y`` of the keyframe-blended model and its adjoint.

    Line ``e`` at time ``t`` reads ``(1 - d) F[S_c U_j s] + d F[S_c U_(j+1) s]``
    with ``j, d`` from :func:`hmlab.warp.blend_index` over the keyframes.
    """

    def __init__(self, keyframes, coils: CoilSet, schedule: SamplingSchedule,
                 cfg: ApproxModelConfig = ApproxModelConfig(), n_fractions=None):
        keyframes = list(keyframes)
        if not keyframes:
            raise ValueError("need at least one keyframe")
        if n_fractions is not None and len(keyframes) != cfg.eta * n_fractions:
            raise ValueError(f"expected eta * N = {cfg.eta * n_fractions} keyframes, got {len(keyframes)}")
        for u in keyframes:
            check_same_shape(u.shape, schedule.shape, "keyframe vs schedule")
        coils.check(schedule.shape)
        if all(u.is_zero() for u in keyframes):
            keyframes = keyframes[:1]
        self.coils = coils
        self.schedule = schedule
        self.cfg = cfg
        self.shape = schedule.shape
        self.n_keyframes = len(keyframes)
        self.matrices = [None if u.is_zero() else warp_matrix(u, cfg.interpolator, cfg.patch) for u in keyframes]
        idx = [blend_index(float(t), schedule.total_time, self.n_keyframes, cfg.clamp) for t in schedule.times]
        self.j = np.array([i for i, _ in idx], dtype=np.int64)
        self.d = np.array([d for _, d in idx], dtype=np.float64)

    def _warp(self, k, img):
        m = self.matrices[k]
        return img.copy() if m is None else (m @ img.ravel()).reshape(self.shape)

    def _warp_t(self, k, img):
        m = self.matrices[k]
        return img.copy() if m is None else (m.T @ img.ravel()).reshape(self.shape)

    def _used(self):
        used = set(self.j.tolist())
        used.update((self.j[self.d != 0] + 1).tolist())
        return sorted(used)

    def forward(self, s) -> KSpaceData:
        s = np.asarray(s, dtype=np.complex128)
        check_same_shape(s.shape, self.shape, "image vs operator")
        rows = self.schedule.rows
        stacks = {}
        for k in self._used():
            stacks[k] = fft2c(self.coils.maps * self._warp(k, s))
        lines = np.empty((len(self.schedule), self.coils.n_coils, self.shape[1]), dtype=np.complex128)
        for e in range(len(self.schedule)):
            j, d = self.j[e], self.d[e]
            line = stacks[j][:, rows[e], :]
            if d != 0.0:
                line = (1.0 - d) * line + d * stacks[j + 1][:, rows[e], :]
            lines[e] = line
        return KSpaceData(self.schedule, lines)

    def adjoint(self, data: KSpaceData) -> np.ndarray:
        if data.lines.shape != (len(self.schedule), self.coils.n_coils, self.shape[1]):
            raise ShapeError(f"data shape {data.lines.shape} does not match operator")
        rows = self.schedule.rows
        grids = {k: np.zeros((self.coils.n_coils,) + self.shape, dtype=np.complex128) for k in self._used()}
        for e in range(len(self.schedule)):
            j, d = self.j[e], self.d[e]
            if d == 0.0:
                grids[j][:, rows[e], :] += data.lines[e]
            else:
                grids[j][:, rows[e], :] += (1.0 - d) * data.lines[e]
                grids[j + 1][:, rows[e], :] += d * data.lines[e]
        out = np.zeros(self.shape, dtype=np.complex128)
        conj = np.conj(self.coils.maps)
        for k, g in grids.items():
            out += self._warp_t(k, np.sum(conj * ifft2c(g), axis=0))
        return out

    def normal(self, s) -> np.ndarray:
        return self.adjoint(self.forward(s))


def forward_approx(s, keyframes, coils, schedule, cfg=ApproxModelConfig(), n_fractions=None) -> KSpaceData:
    return ApproxOperator(keyframes, coils, schedule, cfg, n_fractions).forward(s)


def adjoint_approx(y: KSpaceData, keyframes, coils, schedule, cfg=ApproxModelConfig(), n_fractions=None) -> np.ndarray:
    return ApproxOperator(keyframes, coils, schedule, cfg, n_fractions).adjoint(y)


def forward_static(s, coils: CoilSet, schedule: SamplingSchedule) -> KSpaceData:
    """Motion-free model ``M F[S_c s]``."""
    return extract_lines(fft2c(coils.maps * np.asarray(s, dtype=np.complex128)), schedule)


def noise_sigma(data: KSpaceData, level: float) -> float:
    """Per-component standard deviation for a relative noise ``level``."""
    rms = float(np.sqrt(np.mean(np.abs(data.lines) ** 2)))
    return level * rms / np.sqrt(2.0)


def add_noise(data: KSpaceData, level: float, seed: int = 0) -> KSpaceData:
    """Add i.i.d. complex Gaussian noise so that ``E||noise|| ~ level * ||y||``."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return data.with_lines(data.lines.copy())
    sigma = noise_sigma(data, level)
    rng = np.random.default_rng(seed)
    shape = data.lines.shape
    noise = sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return data.with_lines(data.lines + noise)
