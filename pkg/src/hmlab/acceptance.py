"""Numerical acceptance checks shared by the test suite and ``demo``.

Every check returns a :class:`Check` with the measured value, the bound it
is held to, and a one-line description. Checks are deterministic.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from hmlab.core import FieldOfView, fft2c, ifft2c
from hmlab.estimate import Corrector, EstimateConfig, RegistrationConfig, estimate_motion
from hmlab.forward import ApproxModelConfig, ApproxOperator, forward_exact
from hmlab.metrics import field_loss, psnr, residual
from hmlab.motion_sim import (
    RigidMotionParams,
    make_phantom,
    rigid_timeline,
    sample_rigid_params,
    sample_time_curve,
    sim_coils,
    solve_navier_cauchy,
)
from hmlab.recon import ReconConfig, cg_sense, identity_keyframes, recon_static
from hmlab.sampling import KSpaceData, haste_schedule
from hmlab.warp import DeformationField, DeformationTimeline, apply_warp, compose, invert_field, keyframe_resample

# reconstruction settings of the rigid phantom suite
SUITE_MODEL = ApproxModelConfig(2, "sinc_patch")
SUITE_RECON = ReconConfig(n_cg=5, model=SUITE_MODEL, real_valued=True)


@dataclass
class Check:
    criterion: int
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] C{self.criterion} {self.name}: value={self.value:.4g} bound={self.bound:.4g}"
                f" ({self.detail}; {self.seconds:.1f}s)")

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion, "name": self.name, "passed": bool(self.passed),
            "value": _finite(self.value), "bound": _finite(self.bound), "detail": self.detail,
            "extra": {k: _finite(v) for k, v in self.extra.items()},
        }


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        chk = fn(*args, **kwargs)
        chk.seconds = time.perf_counter() - t0
        return chk

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --------------------------------------------------------------------------
# synthetic inputs


def smooth_field(shape, seed, amplitude=1.0, n_waves=3) -> DeformationField:
    """Sum of low-order sinusoids scaled to ``amplitude`` px max component."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy / h, xx / w
    comps = []
    for axis in range(2):
        acc = np.zeros(shape)
        for _ in range(n_waves):
            fx = rng.integers(1, 3) if axis == 0 else rng.integers(0, 3)
            fy = rng.integers(0, 3) if axis == 0 else rng.integers(1, 3)
            acc += rng.uniform(-1, 1) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        comps.append(acc)
    peak = max(np.abs(comps[0]).max(), np.abs(comps[1]).max())
    return DeformationField(amplitude * comps[0] / peak, amplitude * comps[1] / peak)


def bandlimited_texture(shape, seed, bandwidth=0.8) -> np.ndarray:
    """Real non-negative texture with a Gaussian spectral envelope whose
    1/e radius is ``bandwidth`` times the Nyquist frequency / 2."""
    rng = np.random.default_rng(seed)
    k = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    fy = np.fft.fftshift(np.fft.fftfreq(shape[0]))
    fx = np.fft.fftshift(np.fft.fftfreq(shape[1]))
    r = np.hypot(*np.meshgrid(fy, fx, indexing="ij"))
    k *= np.exp(-((r / (0.25 * bandwidth)) ** 2))
    img = np.abs(ifft2c(k))
    return (img / img.max()).astype(np.complex128)


def translation_motion(seed, n: int, max_fraction=0.02, axis=None, n_keyframes=8) -> DeformationTimeline:
    """Rigid translation-only timeline with keyframe displacements capped at
    ``max_fraction`` of the FOV. ``axis`` 0 keeps only x (FE) motion, 1 only
    y (PE) motion, ``None`` both."""
    rng = np.random.default_rng(seed)
    base = sample_rigid_params(rng)
    d_x, d_y = rng.uniform(-3, 3), rng.uniform(-3, 3)
    curves = base.curves
    if axis is not None:
        amp = rng.uniform(1.0, 3.0) * rng.choice([-1.0, 1.0])
        curve = sample_time_curve(rng)
        curves = (curve, curve, curve)
        d_x, d_y = (amp, 0.0) if axis == 0 else (0.0, amp)
    params = RigidMotionParams(0.0, d_x, d_y, curves)
    fov = FieldOfView.unit((n, n))
    tl = rigid_timeline(params, fov, n_keyframes)
    peak = max(k.max_abs() for k in tl.keyframes)
    if peak > max_fraction * n:
        tl = rigid_timeline(params.scaled(max_fraction * n / peak), fov, n_keyframes)
    return tl


# --------------------------------------------------------------------------
# criteria


@_timed
def check_adjoint(seed=0) -> Check:
    """C1: dot-product test over interpolator x eta x coils x N^U."""
    shape = (16, 16)
    sched = haste_schedule(16)
    rng = np.random.default_rng(seed)
    worst = 0.0
    count = 0
    for interp in ("bilinear", "sinc_patch"):
        for eta in (1, 2):
            for n_coils in (1, 2, 4):
                coils = sim_coils(n_coils, shape)
                for n_u in (1, 2, 8):
                    cfg = ApproxModelConfig(eta, interp)
                    kf = [smooth_field(shape, int(rng.integers(1 << 30)), 2.0) for _ in range(eta * n_u)]
                    op = ApproxOperator(kf, coils, sched, cfg, n_fractions=n_u)
                    s = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
                    y = rng.standard_normal((len(sched), n_coils, 16)) + 1j * rng.standard_normal((len(sched), n_coils, 16))
                    a_s = op.forward(s).lines
                    lhs = np.vdot(y, a_s)
                    rhs = np.vdot(op.adjoint(KSpaceData(sched, y)), s)
                    err = abs(lhs - rhs) / (np.linalg.norm(a_s) * np.linalg.norm(y))
                    worst = max(worst, float(err))
                    count += 1
    return Check(1, "adjoint dot-product", worst <= 1e-10, worst, 1e-10, f"{count} combinations, 16x16")


def _brute_dft(x):
    h, w = x.shape
    ky = np.arange(h) - h // 2
    kx = np.arange(w) - w // 2
    fy = np.exp(-2j * np.pi * np.outer(ky, ky) / h)
    fx = np.exp(-2j * np.pi * np.outer(kx, kx) / w)
    return fy @ x @ fx.T / math.sqrt(h * w)


@_timed
def check_fourier(seed=0) -> Check:
    """C2: Parseval, round trips and brute-force DFT agreement."""
    rng = np.random.default_rng(seed)
    unit = 0.0
    brute = 0.0
    for shape in [(8, 8), (16, 16), (9, 12), (15, 7), (64, 48)]:
        x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        k = fft2c(x)
        nx = np.linalg.norm(x)
        unit = max(unit, abs(np.linalg.norm(k) - nx) / nx, np.linalg.norm(ifft2c(k) - x) / nx,
                   np.linalg.norm(fft2c(ifft2c(x)) - x) / nx)
        if max(shape) <= 16:
            brute = max(brute, np.max(np.abs(k - _brute_dft(x))))
    ok = unit <= 1e-10 and brute <= 1e-8
    return Check(2, "Fourier unitarity", ok, max(unit, brute), 1e-10,
                 f"Parseval/round-trip {unit:.1e} (<=1e-10), brute-force DFT {brute:.1e} (<=1e-8)",
                 extra={"unitarity": float(unit), "brute_force": float(brute)})


def _roundtrip_rmse(s, u, v, interp, margin):
    r = apply_warp(v, apply_warp(u, s, interp), interp)
    d = np.abs(r - s)[margin:-margin, margin:-margin]
    return float(np.sqrt(np.mean(d * d)))


@_timed
def check_sinc_vs_bilinear(n=64, amplitude=1.0, margin=8) -> Check:
    """C3: round trip ``U^-1[U[s]]`` with sinc patches vs bilinear.

    Five detailed images (Shepp-Logan and four band-limited textures) and
    five smooth fields of ``amplitude`` px; the inverse fields come from
    :func:`invert_field`. Errors are measured away from the border.
    """
    shape = (n, n)
    images = [make_phantom("shepp_logan", shape)] + [bandlimited_texture(shape, 10 + i) for i in range(4)]
    ratios = []
    for img in images:
        for j in range(5):
            u = smooth_field(shape, 100 + j, amplitude)
            v = invert_field(u)
            b = _roundtrip_rmse(img, u, v, "bilinear", margin)
            s = _roundtrip_rmse(img, u, v, "sinc_patch", margin)
            ratios.append(s / b)
    worst = max(ratios)
    return Check(3, "sinc vs bilinear round trip", worst <= 0.5, worst, 0.5,
                 f"max RMSE ratio over 5 images x 5 fields (mean {np.mean(ratios):.3f})",
                 extra={"mean_ratio": float(np.mean(ratios))})


@_timed
def check_inversion(n=64) -> Check:
    """C4: Landweber inversion of smooth fields and translations."""
    shape = (n, n)
    yy = np.mgrid[0:n, 0:n][0]
    fields = [DeformationField(2.0 * np.sin(2 * np.pi * yy / n), np.zeros(shape))]
    fields += [smooth_field(shape, 200 + j, 3.0) for j in range(4)]
    worst = 0.0
    for u in fields:
        v = invert_field(u, max_steps=50)
        worst = max(worst, compose(v, u).max_abs())
    t_err = 0.0
    for dx, dy in [(1.5, -0.7), (-3.0, 2.0), (0.25, 0.0)]:
        t = DeformationField.constant(shape, dx, dy)
        v = invert_field(t, max_steps=50)
        t_err = max(t_err, (v + t).max_abs())
    ok = worst <= 0.05 and t_err <= 1e-3
    return Check(4, "field inversion", ok, worst, 0.05,
                 f"smooth fields <= 3 px; translation inverse error {t_err:.1e} (<=1e-3)",
                 extra={"translation_error": float(t_err)})


@_timed
def check_reference_independence(n=32, seed=0) -> Check:
    """C5: ``field_loss(est o W, ref) = 0`` for translation sets.

    Also reports (not asserted) the loss for smooth non-rigid sets.
    """
    shape = (n, n)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        ref = [DeformationField.constant(shape, *rng.uniform(-3, 3, 2)) for _ in range(4)]
        w = DeformationField.constant(shape, *rng.uniform(-3, 3, 2))
        worst = max(worst, field_loss([compose(w, u) for u in ref], ref))
    ref = [smooth_field(shape, 300 + j, 1.0) for j in range(4)]
    w = DeformationField.constant(shape, 2.0, -1.5)
    general = field_loss([compose(w, u) for u in ref], ref)
    return Check(5, "reference independence", worst <= 1e-6, worst, 1e-6,
                 f"translation sets, |W| <= 3 px; smooth-field analogue {general:.2e} (reported only)",
                 extra={"smooth_field_loss": float(general)})


def oracle_config() -> EstimateConfig:
    return EstimateConfig(n_iter=3, n_cg=5, n_fractions=8, registration=RegistrationConfig("rigid"))


def score_oracle_recovery(seed, timeline, result) -> Check:
    """C6 verdict for an oracle-corrector run on ``timeline``."""
    true = np.array([k.mean_shift() for k in timeline.keyframes])
    est = np.array([u.mean_shift() for u in result.keyframes_est])
    err = float(np.max(np.hypot(*(est - true).T)))
    loss = result.trace.loss
    decreasing = all(b < a for a, b in zip(loss, loss[1:]))
    return Check(6, f"oracle recovery seed {seed}", err <= 0.3 and decreasing, err, 0.3,
                 "max keyframe shift error px; loss " + " > ".join(f"{v:.3g}" for v in loss)
                 + ("" if decreasing else " NOT strictly decreasing"),
                 extra={"loss": [float(v) for v in loss], "decreasing": decreasing})


@_timed
def check_oracle_recovery(seed, n=96) -> Check:
    """C6: oracle-corrector estimation of translation motion."""
    shape = (n, n)
    s = make_phantom("shepp_logan", shape)
    sched = haste_schedule(n)
    coils = sim_coils(4, shape)
    tl = translation_motion(seed, n)
    y = forward_exact(s, tl, coils, sched)
    res = estimate_motion(y, coils, sched, Corrector("oracle", s), oracle_config(), ref_keyframes=list(tl.keyframes))
    return score_oracle_recovery(seed, tl, res)


def _rigid_case(seed, n, n_coils):
    shape = (n, n)
    s = make_phantom("shepp_logan", shape)
    sched = haste_schedule(n)
    coils = sim_coils(n_coils, shape)
    tl = rigid_timeline(sample_rigid_params(seed), FieldOfView.unit(shape), 8)
    return s, sched, coils, tl


@_timed
def check_mc_gain(seed, n=96) -> Check:
    """C7: CG with true keyframes vs static CG, rigid phantom suite."""
    s, sched, coils, tl = _rigid_case(seed, n, 4)
    y = forward_exact(s, tl, coils, sched)
    static = recon_static(y, coils, sched, SUITE_RECON)
    kf = keyframe_resample(tl, SUITE_MODEL.eta, SUITE_MODEL.clamp)
    mc = cg_sense(y, kf, coils, sched, None, SUITE_RECON)
    gain = psnr(s, mc) - psnr(s, static)
    return Check(7, f"motion-compensated gain seed {seed}", gain >= 3.0, gain, 3.0,
                 f"PSNR {psnr(s, mc):.2f} dB vs static {psnr(s, static):.2f} dB")


@_timed
def check_residual_blindness(seed, n=96) -> Check:
    """C8: static recon fits motion-corrupted data as well as clean data.

    Single uniform coil, so the static model has no redundancy to expose
    the inconsistency.
    """
    s, sched, coils, tl = _rigid_case(seed, n, 1)
    cfg = ReconConfig(n_cg=5, real_valued=True)
    idk = identity_keyframes((n, n))
    y0 = forward_exact(s, DeformationTimeline.static((n, n), 8), coils, sched)
    y = forward_exact(s, tl, coils, sched)
    x0 = recon_static(y0, coils, sched, cfg)
    x = recon_static(y, coils, sched, cfg)
    r0, r = residual(y0, x0, idk, coils, sched), residual(y, x, idk, coils, sched)
    ratio = r / r0
    drop = psnr(s, x0) - psnr(s, x)
    ok = ratio <= 2.0 and drop >= 5.0
    return Check(8, f"residual blindness seed {seed}", ok, ratio, 2.0,
                 f"residual {r:.3g}% vs motion-free {r0:.3g}%; PSNR drop {drop:.1f} dB (>=5)",
                 extra={"psnr_drop": float(drop)})


@_timed
def check_navier_cauchy(n=48) -> Check:
    """C9: PDE residual, free-slip condition and zero-force solution on a disk."""
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    mask = np.hypot(yy - c, xx - c) <= 0.4 * n
    kx = np.zeros((n, n))
    ky = np.where(mask, 1.0 + 0.5 * np.cos(2 * np.pi * xx / n), 0.0)
    u, system, _ = solve_navier_cauchy(mask, 1.0, 1.0, (kx, ky), return_info=True)
    op = system.operator(u)
    interior = mask & ~system.boundary
    knorm = float(np.linalg.norm(np.concatenate([kx[mask], ky[mask]])))
    pde = float(np.max(np.hypot(op.dx + kx, op.dy + ky)[interior]))
    nx, ny = system.normals
    slip = float(np.max(np.abs(u.dx[system.boundary] * nx + u.dy[system.boundary] * ny)))
    zero = solve_navier_cauchy(mask, 1.0, 1.0, (np.zeros((n, n)), np.zeros((n, n)))).max_abs()
    rel_pde = pde / knorm
    rel_slip = slip / u.max_abs()
    ok = rel_pde <= 1e-5 and rel_slip <= 1e-6 and zero == 0.0
    return Check(9, "Navier-Cauchy solver", ok, rel_pde, 1e-5,
                 f"interior residual / |k|; |n.u| / max|u| = {rel_slip:.1e} (<=1e-6); zero force -> {zero:g}",
                 extra={"slip": rel_slip, "zero_force_max": float(zero)})


def _direction_error(seed, axis, n):
    shape = (n, n)
    s = make_phantom("shepp_logan", shape)
    sched = haste_schedule(n)
    coils = sim_coils(4, shape)
    tl = translation_motion(seed, n, axis=axis)
    y = forward_exact(s, tl, coils, sched)
    cfg = EstimateConfig(registration=RegistrationConfig("rigid"))
    res = estimate_motion(y, coils, sched, Corrector("oracle", s), cfg)
    true = np.array([k.mean_shift() for k in tl.keyframes])
    est = np.array([u.mean_shift() for u in res.keyframes_est])
    return float(np.mean(np.hypot(*(est - true).T)))


@_timed
def check_pe_fe(n_trials=20, n=48, seed0=500) -> Check:
    """C10: PE-direction shifts are recovered no better than FE shifts.

    Each trial draws one amplitude and time curve and applies it once along
    x (FE) and once along y (PE).
    """
    fe = [_direction_error(seed0 + j, 0, n) for j in range(n_trials)]
    pe = [_direction_error(seed0 + j, 1, n) for j in range(n_trials)]
    m_fe, m_pe = float(np.mean(fe)), float(np.mean(pe))
    return Check(10, "PE vs FE asymmetry", m_pe >= m_fe, m_pe, m_fe,
                 f"mean error PE {m_pe:.4f} px >= FE {m_fe:.4f} px over {n_trials} paired trials at {n}x{n}",
                 extra={"fe": fe, "pe": pe})


def fast_checks() -> list:
    """Criteria that run in seconds and do not depend on a seed."""
    return [check_adjoint(), check_fourier(), check_sinc_vs_bilinear(), check_inversion(),
            check_reference_independence(), check_navier_cauchy()]


def seed_checks(seed) -> list:
    """Per-seed criteria 6-8."""
    return [check_oracle_recovery(seed), check_mc_gain(seed), check_residual_blindness(seed)]
