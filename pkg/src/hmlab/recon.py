"""Static and motion-compensated CG-SENSE reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hmlab.core import NumericalError, ShapeError, ifft2c
from hmlab.forward import ApproxModelConfig, ApproxOperator, CoilSet
from hmlab.sampling import KSpaceData, SamplingSchedule, embed_lines
from hmlab.warp import DeformationField


@dataclass(frozen=True)
class ReconConfig:
    """``tikhonov=None`` selects ``1e-6`` times a power-iteration estimate of
    the normal operator norm."""

    n_cg: int = 5
    tikhonov: float | None = None
    model: ApproxModelConfig = field(default_factory=ApproxModelConfig)
    real_valued: bool = False

    def __post_init__(self):
        if self.n_cg < 1:
            raise ValueError("n_cg must be >= 1")
        if self.tikhonov is not None and self.tikhonov < 0:
            raise ValueError("tikhonov weight must be non-negative")


def _dot(a, b):
    return np.vdot(a, b)


def power_norm(normal, shape, n_iter=8) -> float:
    """Largest eigenvalue estimate of a Hermitian PSD operator."""
    h, w = shape
    x = (1.0 + np.add.outer(np.arange(h), 0.5 * np.arange(w)) % 3).astype(np.complex128)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(n_iter):
        y = normal(x)
        lam = float(np.linalg.norm(y))
        if lam == 0:
            return 0.0
        x = y / lam
    return lam


def conjugate_gradient(normal, rhs, x0, n_iter, ridge=0.0, callback=None):
    """Fixed-count CG on ``(normal + ridge I) x = rhs``.

    ``callback(k, x, r)`` sees each iterate and its residual. Raises
    :class:`NumericalError` if an iterate goes non-finite.
    """
    x = np.array(x0, dtype=np.complex128, copy=True)
    r = rhs - (normal(x) + ridge * x)
    p = r.copy()
    rs = _dot(r, r).real
    if callback is not None:
        callback(0, x, r)
    for k in range(1, n_iter + 1):
        if rs == 0.0:
            break
        bp = normal(p) + ridge * p
        curv = _dot(p, bp).real
        if curv <= 0.0 or not np.isfinite(curv):
            raise NumericalError(f"CG breakdown at iteration {k}: p^H B p = {curv}")
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * bp
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"CG iterate became non-finite at iteration {k}")
        rs_new = _dot(r, r).real
        p = r + (rs_new / rs) * p
        rs = rs_new
        if callback is not None:
            callback(k, x, r)
    return x


@dataclass
class CGHistory:
    normal_residuals: list = field(default_factory=list)
    data_residuals: list = field(default_factory=list)
    objective: list = field(default_factory=list)


def cg_sense(y: KSpaceData, keyframes, coils: CoilSet, schedule: SamplingSchedule, s0=None,
             cfg: ReconConfig = ReconConfig(), history: CGHistory | None = None) -> np.ndarray:
    """Motion-compensated CG-SENSE: CG on ``(A^H A + ridge) s = A^H y``.

    ``keyframes`` feed the blended model (``eta * N`` fields). Pass a
    :class:`CGHistory` to record residuals per iteration (costs one extra
    forward per iteration).
    """
    op = ApproxOperator(keyframes, coils, schedule, cfg.model)
    return cg_with_operator(op, y, s0, cfg, history)


def cg_with_operator(op, y, s0, cfg, history=None):
    if y.lines.shape[0] != len(op.schedule):
        raise ShapeError("data does not match the schedule")
    shape = op.shape
    s0 = np.zeros(shape, dtype=np.complex128) if s0 is None else np.asarray(s0, dtype=np.complex128)
    normal = op.normal
    rhs = op.adjoint(y)
    if cfg.real_valued:
        # CG in the real inner product Re<a, b>: restricts s to real images
        def normal(x, _n=op.normal):
            return _n(x).real.astype(np.complex128)

        rhs = rhs.real.astype(np.complex128)
        s0 = s0.real.astype(np.complex128)
    ridge = cfg.tikhonov
    if ridge is None:
        ridge = 1e-6 * power_norm(normal, shape)

    callback = None
    if history is not None:
        def callback(k, x, r):
            res = y.lines - op.forward(x).lines
            history.normal_residuals.append(float(np.linalg.norm(r)))
            history.data_residuals.append(float(np.linalg.norm(res)))
            history.objective.append(float(np.vdot(res, res).real + ridge * np.vdot(x, x).real))

    return conjugate_gradient(normal, rhs, s0, cfg.n_cg, ridge, callback)


def identity_keyframes(shape):
    return [DeformationField.zeros(shape)]


def recon_static(y: KSpaceData, coils: CoilSet, schedule: SamplingSchedule,
                 cfg: ReconConfig = ReconConfig(), history=None) -> np.ndarray:
    """Least-squares reconstruction under the motion-free model, from zero."""
    return cg_sense(y, identity_keyframes(schedule.shape), coils, schedule, None, cfg, history)


def recon_partial(y_i: KSpaceData, coils: CoilSet, eps=1e-12) -> np.ndarray:
    """Coil-combined zero-filled adjoint of one data fraction."""
    if len(y_i) == 0:
        raise ValueError("empty data fraction")
    imgs = ifft2c(embed_lines(y_i))
    sos = coils.sum_of_squares()
    return np.sum(np.conj(coils.maps) * imgs, axis=0) / (sos + eps * sos.max())
