"""Iterative motion estimation: reconstruct, correct, re-simulate, register
per data fraction, fuse.

The learned pieces of the loop are replaced by a pluggable
:class:`Corrector` and deterministic registration (:func:`register_pair`)
and fusion (:func:`fuse_updates`).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.restoration import denoise_tv_chambolle

from hmlab.core import NumericalError, ShapeError, check_same_shape, fft2c, ifft2c
from hmlab.forward import ApproxModelConfig, ApproxOperator, CoilSet
from hmlab.recon import ReconConfig, cg_with_operator, recon_partial
from hmlab.sampling import KSpaceData, SamplingSchedule, partition
from hmlab.warp import DeformationField, DeformationTimeline, apply_warp, keyframe_resample

CORRECTORS = ("identity", "oracle", "denoise", "external")
REGISTRATIONS = ("flow", "rigid")


# --------------------------------------------------------------------------
# corrector


@dataclass(frozen=True, eq=False)
class Corrector:
    """Image-correction slot of the loop.

    ``identity`` passes images through, ``oracle`` returns ``reference``,
    ``denoise`` applies TV smoothing of weight ``strength`` to the
    magnitude, ``external`` loads ``<prefix>_iter<k>.cfi`` for call ``k``.
    """

    kind: str = "identity"
    reference: np.ndarray | None = None
    strength: float = 0.0
    prefix: str | None = None

    def __post_init__(self):
        if self.kind not in CORRECTORS:
            raise ValueError(f"unknown corrector {self.kind!r}; choose from {CORRECTORS}")
        if self.kind == "oracle":
            if self.reference is None:
                raise ValueError("oracle corrector needs a reference image")
            object.__setattr__(self, "reference", np.asarray(self.reference, dtype=np.complex128))
        if self.kind == "denoise" and self.strength < 0:
            raise ValueError("denoise strength must be non-negative")
        if self.kind == "external" and not self.prefix:
            raise ValueError("external corrector needs a file prefix")

    def path_for(self, call_index: int) -> Path:
        return Path(f"{self.prefix}_iter{call_index}.cfi")


def correct(c: Corrector, s, call_index: int) -> np.ndarray:
    s = np.asarray(s)
    if c.kind == "identity":
        return s
    if c.kind == "oracle":
        check_same_shape(c.reference.shape, s.shape, "oracle reference vs image")
        return c.reference
    if c.kind == "denoise":
        if c.strength == 0:
            return s
        mag = np.abs(s)
        peak = mag.max()
        if peak == 0:
            return s
        smooth = peak * denoise_tv_chambolle(mag / peak, weight=c.strength)
        return smooth * np.exp(1j * np.angle(s))
    from hmlab.fileio import read_image

    path = c.path_for(call_index)
    if not path.exists():
        raise FileNotFoundError(f"external corrector output {path} not found")
    out = read_image(path)
    check_same_shape(out.shape, s.shape, "external corrector output vs image")
    return out


# --------------------------------------------------------------------------
# registration


@dataclass(frozen=True)
class RegistrationConfig:
    """``flow``: coarse-to-fine Horn-Schunck with warping; ``rigid``:
    Gauss-Newton over (angle, shift_x, shift_y) on blurred SSD.

    Magnitudes are taken after ``oversample``-fold Fourier upsampling: the
    modulus of a complex image has up to twice its bandwidth, so on the
    native grid it aliases and sub-pixel shifts are misread.

    Rigid only: ``complex_refine`` finishes with a fit of the complex
    images (see :func:`register_rigid`) and ``chain`` starts each fraction
    from the previous fraction's parameters, which makes the fractions of
    one iteration sequential.
    """

    kind: str = "flow"
    levels: int = 4
    iterations: int = 50
    smoothness: float = 0.1
    rigid_steps: int = 20
    rigid_blur: tuple = (4.0, 2.0, 1.0, 0.0)
    rigid_prior: float = 0.0
    oversample: int = 2
    complex_refine: bool = True
    chain: bool = True

    def __post_init__(self):
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")
        if self.kind not in REGISTRATIONS:
            raise ValueError(f"unknown registration {self.kind!r}; choose from {REGISTRATIONS}")
        if self.levels < 1 or self.iterations < 1 or self.rigid_steps < 1:
            raise ValueError("registration counts must be positive")
        if self.smoothness <= 0:
            raise ValueError("flow smoothness must be positive")


def _normalized_pair(fixed, moving):
    f = np.abs(np.asarray(fixed))
    m = np.abs(np.asarray(moving))
    check_same_shape(f.shape, m.shape, "fixed vs moving")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(m))):
        raise NumericalError("registration input contains non-finite values")
    peak = max(f.max(), m.max())
    if peak > 0:
        f, m = f / peak, m / peak
    return f, m


def _grid(shape):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return yy.astype(np.float64), xx.astype(np.float64)


def _rigid_coords(shape, theta, tx, ty):
    yy, xx = _grid(shape)
    cy, cx = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    qx, qy = xx + tx - cx, yy + ty - cy
    c, s = math.cos(theta), math.sin(theta)
    return c * qx - s * qy + cx, s * qx + c * qy + cy, qx, qy


def rigid_params_field(shape, theta, tx, ty) -> DeformationField:
    """Same displacement convention as the rigid motion generator."""
    x, y, _, _ = _rigid_coords(shape, theta, tx, ty)
    yy, xx = _grid(shape)
    return DeformationField(x - xx, y - yy)


def _sample(img, x, y, order=3):
    return ndimage.map_coordinates(img, np.stack([y, x]), order=order, mode="nearest")


def _data_weight(weight, shape, margin=2):
    """User weight times a mask that drops a thin border, where replicated
    samples carry no information."""
    w = np.ones(shape) if weight is None else np.array(weight, dtype=np.float64)
    check_same_shape(w.shape, shape, "registration weight")
    w[:margin] = 0
    w[-margin:] = 0
    w[:, :margin] = 0
    w[:, -margin:] = 0
    return w


def _ssd(pairs, params, weight):
    x, y, _, _ = _rigid_coords(pairs[0][0].shape, *params)
    total = 0.0
    for f, m, _, _ in pairs:
        r = _sample(m, x, y) - f
        total += float(np.sum(weight * r * r))
    return total


def _rigid_jacobian(pairs, params, w):
    """Normal equations ``(J^T W J, J^T W r)`` summed over image channels."""
    theta, tx, ty = params
    x, y, qx, qy = _rigid_coords(pairs[0][0].shape, theta, tx, ty)
    c, s = math.cos(theta), math.sin(theta)
    h = np.zeros((3, 3))
    g = np.zeros(3)
    for f, m, gx, gy in pairs:
        r = _sample(m, x, y) - f
        ix, iy = _sample(gx, x, y), _sample(gy, x, y)
        # d(x, y)/d theta = R'(q); d(x, y)/dt = R
        j_theta = ix * (-s * qx - c * qy) + iy * (c * qx - s * qy)
        j_tx = ix * c + iy * s
        j_ty = -ix * s + iy * c
        jac = np.stack([j_theta.ravel(), j_tx.ravel(), j_ty.ravel()], axis=1)
        wj = jac * w.ravel()[:, None]
        h += jac.T @ wj
        g += wj.T @ r.ravel()
    return h, g


def _channel_pairs(fixed, moving, sigma=0.0):
    out = []
    for a, b in zip(fixed, moving):
        if sigma > 0:
            a, b = ndimage.gaussian_filter(a, sigma), ndimage.gaussian_filter(b, sigma)
        gy, gx = np.gradient(b)
        out.append((a, b, gx, gy))
    return out


def _gauss_newton(pairs, params, w, steps, lam):
    def objective(p):
        return _ssd(pairs, p, w) + float(np.sum(lam * p * p))

    energy = objective(params)
    size = max(pairs[0][0].shape)
    for _ in range(steps):
        h, g = _rigid_jacobian(pairs, params, w)
        h = h + np.diag(lam) + 1e-9 * np.eye(3)
        g = g + lam * params
        delta = -np.linalg.solve(h, g)
        step = 1.0
        for _ in range(12):
            trial = params + step * delta
            e = objective(trial)
            if e < energy:
                break
            step *= 0.5
        else:
            break
        params, energy = trial, e
        if np.max(np.abs(step * delta) * [size, 1, 1]) < 1e-4:
            break
    return params, energy


def register_rigid(fixed, moving, steps=20, blur=(4.0, 2.0, 1.0, 0.0), weight=None, prior=0.0,
                   refine_complex=False, init=None):
    """Gauss-Newton over ``(theta, tx, ty)``; returns ``(params, energy)``.

    Minimizes ``sum w (moving(R(p + t - c) + c) - fixed(p))^2`` on
    magnitudes at a sequence of decreasing blur levels with backtracking
    line search. ``prior > 0`` adds ``prior * h * |D params|^2``, where ``h``
    is the mean translational curvature of the data term at zero and ``D``
    converts the angle to pixels at the half-width.

    With ``refine_complex`` a last unblurred stage fits the real and
    imaginary parts, starting from the magnitude solution. For band-pass
    images the magnitude envelope moves with the group delay of the line
    phases, i.e. it also responds to how the shift varies across the band,
    while the carrier phase follows the shift itself. The carrier makes
    the complex fit ambiguous by one carrier period, so an ``init`` from a
    neighbouring band, when given, replaces the magnitude stages.
    """
    f0, m0 = _normalized_pair(fixed, moving)
    w = _data_weight(weight, f0.shape)
    scale = np.array([(max(f0.shape) / 2.0) ** 2, 1.0, 1.0])
    params = np.zeros(3) if init is None else np.array(init, dtype=np.float64)
    energy = 0.0
    for sigma in blur if (init is None or not refine_complex) else ():
        pairs = _channel_pairs([f0], [m0], sigma)
        lam = np.zeros(3)
        if prior > 0:
            h0, _ = _rigid_jacobian(pairs, np.zeros(3), w)
            lam = prior * 0.5 * (h0[1, 1] + h0[2, 2]) * scale
        params, energy = _gauss_newton(pairs, params, w, steps, lam)
    if refine_complex:
        fc = np.asarray(fixed, dtype=np.complex128)
        mc = np.asarray(moving, dtype=np.complex128)
        peak = max(np.abs(fc).max(), np.abs(mc).max()) or 1.0
        fc, mc = fc / peak, mc / peak
        pairs = _channel_pairs([fc.real, fc.imag], [mc.real, mc.imag])
        params, energy = _gauss_newton(pairs, params, w, steps, np.zeros(3))
    return tuple(float(p) for p in params), energy


def _hs_average(a):
    k = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0
    return ndimage.convolve(a, k, mode="nearest")


def _pyramid(img, levels):
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        if min(prev.shape) < 16:
            break
        out.append(ndimage.gaussian_filter(prev, 1.0)[::2, ::2])
    return out[::-1]


def _upsample_flow(fx, fy, shape):
    zy, zx = shape[0] / fx.shape[0], shape[1] / fx.shape[1]
    ux = ndimage.zoom(fx, (zy, zx), order=1, mode="nearest", grid_mode=True)[: shape[0], : shape[1]] * zx
    uy = ndimage.zoom(fy, (zy, zx), order=1, mode="nearest", grid_mode=True)[: shape[0], : shape[1]] * zy
    return ux, uy


def register_flow(fixed, moving, levels=4, iterations=50, smoothness=0.1, weight=None):
    """Coarse-to-fine Horn-Schunck with warping; returns ``(field, energy)``.

    At each level the moving image is warped by the current flow and the
    linearized brightness-constancy term is relaxed with Jacobi sweeps.
    ``weight`` (0..1) down-weights the data term, e.g. outside the object.
    """
    f0, m0 = _normalized_pair(fixed, moving)
    w0 = _data_weight(weight, f0.shape)
    fp, mp, wp = _pyramid(f0, levels), _pyramid(m0, levels), _pyramid(w0, levels)
    ux = np.zeros_like(fp[0])
    uy = np.zeros_like(fp[0])
    for f, m, w in zip(fp, mp, wp):
        if ux.shape != f.shape:
            ux, uy = _upsample_flow(ux, uy, f.shape)
        yy, xx = _grid(f.shape)
        mw = _sample(m, xx + ux, yy + uy, order=1)
        gy, gx = np.gradient(mw)
        it = mw - f
        bx, by = ux.copy(), uy.copy()
        denom = smoothness + w * (gx * gx + gy * gy)
        for _ in range(iterations):
            ax, ay = _hs_average(ux), _hs_average(uy)
            t = w * (gx * (ax - bx) + gy * (ay - by) + it) / denom
            ux, uy = ax - gx * t, ay - gy * t
    yy, xx = _grid(f0.shape)
    r = _sample(m0, xx + ux, yy + uy, order=1) - f0
    return DeformationField(ux, uy), float(np.sum(w0 * r * r))


def fourier_upsample(img, factor: int) -> np.ndarray:
    """Band-limited interpolation by zero-padding the centered spectrum.

    Sample ``n`` of the input lands on sample ``factor * n`` of the output.
    """
    img = np.asarray(img, dtype=np.complex128)
    if factor == 1:
        return img
    h, w = img.shape
    k = np.zeros((factor * h, factor * w), dtype=np.complex128)
    oy, ox = (factor * h) // 2 - h // 2, (factor * w) // 2 - w // 2
    k[oy:oy + h, ox:ox + w] = fft2c(img)
    return ifft2c(k) * factor


def _register(fixed, moving, cfg, weight=None, init=None):
    """Returns ``(field, energy, params)``; ``params`` are the rigid
    parameters on the upsampled grid (``None`` for flow)."""
    f = cfg.oversample
    shape = np.shape(fixed)
    check_same_shape(shape, np.shape(moving), "fixed vs moving")
    if not (np.all(np.isfinite(fixed)) and np.all(np.isfinite(moving))):
        raise NumericalError("registration input contains non-finite values")
    fixed_c = fourier_upsample(fixed, f)
    moving_c = fourier_upsample(moving, f)
    weight_u = None if weight is None else np.kron(np.asarray(weight, dtype=np.float64), np.ones((f, f)))
    params = None
    if cfg.kind == "rigid":
        blur = tuple(f * b for b in cfg.rigid_blur)
        params, energy = register_rigid(
            fixed_c, moving_c, cfg.rigid_steps, blur, weight_u, cfg.rigid_prior, cfg.complex_refine, init
        )
        u_up = rigid_params_field(fixed_c.shape, *params)
    else:
        levels = cfg.levels + int(round(math.log2(f)))
        u_up, energy = register_flow(
            np.abs(fixed_c), np.abs(moving_c), levels, cfg.iterations, cfg.smoothness, weight_u
        )
    u = DeformationField(u_up.dx[::f, ::f] / f, u_up.dy[::f, ::f] / f)
    return u, energy, params


def register_pair(fixed, moving, cfg: RegistrationConfig = RegistrationConfig(), weight=None, return_energy=False):
    """Field ``u`` with ``fixed(p) ~ moving(p + u(p))``; see
    :class:`RegistrationConfig` for the image channels used."""
    u, energy, _ = _register(fixed, moving, cfg, weight)
    return (u, energy) if return_energy else u


def context_weight(ctx_a, ctx_b, level=0.05, grow=4) -> np.ndarray:
    """Registration region: dilated support of the two context images."""
    a = np.abs(ctx_a)
    b = np.abs(ctx_b)
    peak = max(a.max(), b.max())
    if peak == 0:
        return np.ones(a.shape)
    mask = (a > level * peak) | (b > level * peak)
    if grow > 0:
        mask = ndimage.binary_dilation(mask, iterations=grow)
    return mask.astype(np.float64)


# --------------------------------------------------------------------------
# fusion


def fuse_updates(current, deltas, window: int = 3) -> list:
    """``U + delta`` per keyframe, then a centered moving average over the
    keyframe index. Near the ends the window shrinks symmetrically, so the
    first and last keyframes are never averaged with one side only."""
    current, deltas = list(current), list(deltas)
    if len(current) != len(deltas):
        raise ValueError(f"{len(current)} keyframes but {len(deltas)} updates")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    summed = [u + d for u, d in zip(current, deltas)]
    half = window // 2
    n = len(summed)
    if half == 0:
        return summed
    out = []
    for i in range(n):
        h = min(half, i, n - 1 - i)
        group = summed[i - h: i + h + 1]
        dx = np.mean([g.dx for g in group], axis=0)
        dy = np.mean([g.dy for g in group], axis=0)
        out.append(DeformationField(dx, dy))
    return out


# --------------------------------------------------------------------------
# the loop


@dataclass(frozen=True)
class EstimateConfig:
    """Outer-loop settings.

    Defaults are the configuration validated on rigid desk-scale data:
    real-valued CG, a sinc-patch model with an 11x11 patch and updates
    relaxed by 0.8 (the lowest band over-responds to its keyframe).
    """

    n_iter: int = 3
    n_cg: int = 5
    n_fractions: int = 8
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    fusion_window: int = 3
    model: ApproxModelConfig = field(default_factory=lambda: ApproxModelConfig(2, "sinc_patch", patch=11))
    real_valued: bool = True
    tikhonov: float | None = None
    use_context: bool = True
    threads: int | None = None
    relaxation: float = 0.8

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.n_fractions < 2:
            raise ValueError("n_fractions must be >= 2")
        if self.n_cg < 1:
            raise ValueError("n_cg must be >= 1")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")

    def recon(self) -> ReconConfig:
        return ReconConfig(self.n_cg, self.tikhonov, self.model, self.real_valued)


@dataclass
class EstimateTrace:
    """Per-iteration diagnostics.

    ``loss[k]`` refers to the fields after ``k`` updates (``k = 0`` is the
    identity): the deformation loss against reference keyframes when those
    are given, otherwise the relative data residual (percent) of the CG
    reconstruction under those fields.
    """

    loss: list = field(default_factory=list)
    loss_kind: str = "residual"
    residuals: list = field(default_factory=list)
    field_change: list = field(default_factory=list)
    registration_energy: list = field(default_factory=list)


@dataclass
class EstimateResult:
    keyframes_est: list
    image_final: np.ndarray
    trace: EstimateTrace


class EstimationError(NumericalError):
    def __init__(self, message, trace: EstimateTrace):
        super().__init__(message)
        self.trace = trace


def _threads(cfg_threads):
    if cfg_threads is not None:
        return max(1, int(cfg_threads))
    env = os.environ.get("HMLAB_THREADS", "1")
    try:
        n = int(env)
    except ValueError:
        n = 1
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def _operator(keyframes, coils, schedule, cfg: EstimateConfig):
    tl = DeformationTimeline(tuple(keyframes), schedule.total_time)
    frames = keyframe_resample(tl, cfg.model.eta, cfg.model.clamp)
    return ApproxOperator(frames, coils, schedule, cfg.model)


def _rel_residual(op, y, s):
    return float(100.0 * np.linalg.norm(y.lines - op.forward(s).lines) / np.linalg.norm(y.lines))


def estimate_motion(y: KSpaceData, coils: CoilSet, schedule: SamplingSchedule,
                    corrector: Corrector = Corrector(), cfg: EstimateConfig = EstimateConfig(),
                    ref_keyframes=None) -> EstimateResult:
    """Estimate ``n_fractions`` keyframe fields from motion-corrupted data.

    Each outer iteration runs CG under the current fields (warm start),
    corrects the image, re-simulates data with the corrected image and the
    current fields, registers the per-fraction partial reconstructions of
    measured (fixed) and simulated (moving) data, and adds the resulting
    updates to the fields. A final CG under the final fields gives
    ``image_final``.
    """
    from hmlab.metrics import field_loss

    if y.lines.shape[0] != len(schedule):
        raise ShapeError("data does not match the schedule")
    coils.check(schedule.shape)
    n_frac = cfg.n_fractions
    if n_frac > len(schedule):
        raise ValueError(f"{n_frac} fractions but only {len(schedule)} lines")
    if ref_keyframes is not None and len(ref_keyframes) != n_frac:
        raise ValueError("reference keyframe count must equal n_fractions")

    shape = schedule.shape
    rcfg = cfg.recon()
    trace = EstimateTrace(loss_kind="field_loss" if ref_keyframes is not None else "residual")
    fields = [DeformationField.zeros(shape) for _ in range(n_frac)]
    s = np.zeros(shape, dtype=np.complex128)
    y_parts = partition(y, n_frac)
    fixed_imgs = [recon_partial(p, coils) for p in y_parts]
    n_threads = _threads(cfg.threads)
    # fractions are ordered from the k-space centre outwards; each starts
    # from its predecessor so the complex fit stays on the right carrier lobe
    chained = cfg.registration.kind == "rigid" and cfg.registration.chain

    def record(op, image, k):
        res = _rel_residual(op, y, image)
        trace.residuals.append(res)
        if ref_keyframes is not None:
            trace.loss.append(field_loss(fields, ref_keyframes))
        else:
            trace.loss.append(res)

    def reg(i, s, s_corr, moving_imgs, init=None):
        weight = None
        if cfg.use_context:
            weight = context_weight(apply_warp(fields[i], s), apply_warp(fields[i], s_corr))
        return _register(fixed_imgs[i], moving_imgs[i], cfg.registration, weight, init)

    def iterate(k, s):
        op = _operator(fields, coils, schedule, cfg)
        s = cg_with_operator(op, y, s, rcfg)
        record(op, s, k)

        s_corr = correct(corrector, s, k + 1)
        y_sim = op.forward(s_corr)
        moving_imgs = [recon_partial(p, coils) for p in partition(y_sim, n_frac)]
        if chained:
            results = [reg(0, s, s_corr, moving_imgs)]
            for i in range(1, n_frac):
                results.append(reg(i, s, s_corr, moving_imgs, results[-1][2]))
        elif n_threads > 1:
            with ThreadPoolExecutor(n_threads) as pool:
                results = list(pool.map(lambda i: reg(i, s, s_corr, moving_imgs), range(n_frac)))
        else:
            results = [reg(i, s, s_corr, moving_imgs) for i in range(n_frac)]
        deltas = [cfg.relaxation * r[0] for r in results]
        trace.registration_energy.append([r[1] for r in results])
        new_fields = fuse_updates(fields, deltas, cfg.fusion_window)
        trace.field_change.append(max((a - b).max_abs() for a, b in zip(new_fields, fields)))
        return s, new_fields

    for k in range(cfg.n_iter):
        try:
            s, fields = iterate(k, s)
        except NumericalError as exc:
            # non-finite images, data or fields all surface here
            raise EstimationError(f"iteration {k + 1}: {exc}", trace) from exc

    op = _operator(fields, coils, schedule, cfg)
    try:
        s = cg_with_operator(op, y, s, rcfg)
    except NumericalError as exc:
        raise EstimationError(f"final reconstruction: {exc}", trace) from exc
    record(op, s, cfg.n_iter)
    return EstimateResult(fields, s, trace)
