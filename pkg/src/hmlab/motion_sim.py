"""Synthetic ground truth: phantoms, coil maps, rigid and elastic motion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg as sparse_cg

from hmlab.core import FieldOfView, NumericalError
from hmlab.forward import CoilSet
from hmlab.warp import DeformationField, DeformationTimeline, compose

# (amplitude, semi-axis a, semi-axis b, x0, y0, angle in degrees); modified
# Shepp-Logan with the higher-contrast intensities
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)

PHANTOMS = ("shepp_logan", "smooth_blobs")


def _unit_coords(shape, supersample):
    h, w = shape
    ys = (np.arange(h * supersample) + 0.5) / (h * supersample)
    xs = (np.arange(w * supersample) + 0.5) / (w * supersample)
    y, x = np.meshgrid(1.0 - 2.0 * ys, 2.0 * xs - 1.0, indexing="ij")
    return x, y


def _box_down(a, k):
    if k == 1:
        return a
    h, w = a.shape
    return a.reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def shepp_logan(shape, supersample=4) -> np.ndarray:
    x, y = _unit_coords(shape, supersample)
    img = np.zeros_like(x)
    for amp, a, b, x0, y0, deg in _SHEPP_LOGAN:
        th = np.deg2rad(deg)
        xr = (x - x0) * np.cos(th) + (y - y0) * np.sin(th)
        yr = -(x - x0) * np.sin(th) + (y - y0) * np.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += amp
    return _box_down(img, supersample)


def smooth_blobs(shape, seed=0, n_blobs=7) -> np.ndarray:
    """Separated flat-topped blobs on a jittered 3x3 cell layout."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cells = rng.permutation(9)[:n_blobs]
    img = np.zeros(shape)
    for c in cells:
        cy = (c // 3 + 0.5 + rng.uniform(-0.12, 0.12)) * h / 3
        cx = (c % 3 + 0.5 + rng.uniform(-0.12, 0.12)) * w / 3
        ry = rng.uniform(0.16, 0.28) * h / 3
        rx = rng.uniform(0.16, 0.28) * w / 3
        amp = rng.uniform(0.6, 1.0)
        rr = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        img += amp * np.exp(-(rr**2))
    return img


def make_phantom(kind="shepp_logan", shape=(192, 192), seed=0, supersample=4) -> np.ndarray:
    """Magnitude phantom scaled to max 1, returned as complex with zero phase."""
    shape = tuple(int(n) for n in shape)
    if kind == "shepp_logan":
        img = shepp_logan(shape, supersample)
    elif kind == "smooth_blobs":
        img = smooth_blobs(shape, seed)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOMS}")
    img = np.clip(img, 0.0, None)
    return (img / img.max()).astype(np.complex128)


def support_mask(image, level=0.1) -> np.ndarray:
    """Filled, largest connected region of ``|image| > level * max``."""
    mag = np.abs(image)
    m = ndimage.binary_fill_holes(mag > level * mag.max())
    lab, n = ndimage.label(m)
    if n > 1:
        sizes = ndimage.sum(m, lab, range(1, n + 1))
        m = lab == (1 + int(np.argmax(sizes)))
    return m


# --------------------------------------------------------------------------
# coils


def sim_coils(n_coils, shape, width=0.6, phase_cycles=0.5) -> CoilSet:
    """Gaussian-profile coils on the image border, normalized to unit sum of squares.

    Coil ``c`` sits where the ray from the grid center at angle
    ``pi/4 + 2 pi c / n`` meets the border. Each map carries a linear phase
    ramp along its own direction (``phase_cycles`` turns across the grid).
    """
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    h, w = shape
    if n_coils == 1:
        return CoilSet(np.ones((1, h, w), dtype=np.complex128))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    sigma = width * max(h, w)
    mags, phases = [], []
    for c in range(n_coils):
        th = math.pi / 4 + 2 * math.pi * c / n_coils
        ex, ey = math.cos(th), -math.sin(th)
        reach = min(cx / abs(ex) if abs(ex) > 1e-12 else np.inf, cy / abs(ey) if abs(ey) > 1e-12 else np.inf)
        px, py = cx + reach * ex, cy + reach * ey
        mags.append(np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma**2)))
        proj = ((xx - cx) * ex + (yy - cy) * ey) / max(h, w)
        phases.append(2 * math.pi * (phase_cycles * proj + c / n_coils))
    mags = np.array(mags)
    mags /= np.sqrt(np.sum(mags**2, axis=0))
    return CoilSet(mags * np.exp(1j * np.array(phases)))


# --------------------------------------------------------------------------
# time dependence


@dataclass(frozen=True)
class TimeCurve:
    """Parameters ``(a, b, p, q, C)`` of one motion time curve."""

    a: float
    b: float
    p: float
    q: float
    C: float = 1.5


def _fbar(t, k: TimeCurve):
    sg = np.sign(k.p)
    inner = np.abs(sg * np.sin(k.a + k.C * k.b * t**k.q) / 2 + 0.5)
    return sg * (2 * inner ** (1 + abs(k.p)) - 1)


def time_curve(t, k: TimeCurve, total_time=1.0):
    """``f(t) = fbar(t) - fbar(0)``; zero at ``t = 0`` and ``|f| <= 2``.

    ``p = 0`` gives ``f = 0`` identically since ``sign(0) = 0``.
    """
    tn = np.asarray(t, dtype=np.float64) / total_time
    out = _fbar(tn, k) - _fbar(np.zeros_like(tn), k)
    return float(out) if out.ndim == 0 else out


def sample_time_curve(rng) -> TimeCurve:
    return TimeCurve(
        a=rng.uniform(0.0, 2 * math.pi),
        b=rng.uniform(0.5, 2.0),
        p=rng.uniform(-4.0, 4.0),
        q=rng.uniform(1 / 1.3, 1.3),
    )


# --------------------------------------------------------------------------
# rigid motion


@dataclass(frozen=True)
class RigidMotionParams:
    """Maximal rotation (radians), maximal shifts (percent of the field of
    view) and one time curve per channel: x shift, y shift, rotation."""

    alpha: float
    d_x: float
    d_y: float
    curves: tuple = field(default_factory=tuple)

    def scaled(self, weight):
        return replace(self, alpha=self.alpha * weight, d_x=self.d_x * weight, d_y=self.d_y * weight)

    def angle_and_shift(self, t, shape, total_time=1.0):
        """Rotation angle and (x, y) shift in pixels at time ``t``."""
        h, w = shape
        fx, fy, fr = (time_curve(t, k, total_time) for k in self.curves)
        return fr * self.alpha, fx * self.d_x / 100.0 * w, fy * self.d_y / 100.0 * h


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_rigid_params(rng) -> RigidMotionParams:
    rng = _rng(rng)
    alpha = rng.uniform(-math.pi / 36, math.pi / 36)
    d_x = rng.uniform(-3.0, 3.0)
    d_y = rng.uniform(-3.0, 3.0)
    curves = tuple(sample_time_curve(rng) for _ in range(3))
    return RigidMotionParams(alpha, d_x, d_y, curves)


def rigid_field(shape, angle, shift_x, shift_y) -> DeformationField:
    """Displacement of ``s -> s(R(p + t - c) + c)``: rotate about the grid
    center, then translate."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    qx, qy = xx + shift_x - cx, yy + shift_y - cy
    ca, sa = math.cos(angle), math.sin(angle)
    return DeformationField(ca * qx - sa * qy + cx - xx, sa * qx + ca * qy + cy - yy)


def rigid_timeline(params: RigidMotionParams, fov: FieldOfView, n_keyframes: int, total_time=1.0) -> DeformationTimeline:
    if n_keyframes < 2:
        raise ValueError("n_keyframes must be >= 2")
    times = total_time * (np.arange(n_keyframes) + 0.5) / n_keyframes
    frames = [rigid_field(fov.shape, *params.angle_and_shift(t, fov.shape, total_time)) for t in times]
    return DeformationTimeline(tuple(frames), total_time)


# --------------------------------------------------------------------------
# elastic motion


def _boundary_normals(mask, boundary):
    sm = ndimage.gaussian_filter(mask.astype(np.float64), 1.5)
    gy, gx = np.gradient(sm)
    nx, ny = -gx[boundary], -gy[boundary]
    # fall back to the direction of outside neighbours where the gradient vanishes
    pad = np.pad(mask, 1)
    ox = (~pad[1:-1, 2:]).astype(float) - (~pad[1:-1, :-2]).astype(float)
    oy = (~pad[2:, 1:-1]).astype(float) - (~pad[:-2, 1:-1]).astype(float)
    norm = np.hypot(nx, ny)
    weak = norm < 1e-8
    nx = np.where(weak, ox[boundary], nx)
    ny = np.where(weak, oy[boundary], ny)
    norm = np.hypot(nx, ny)
    norm[norm == 0] = 1.0
    return nx / norm, ny / norm


@dataclass
class ElasticSystem:
    """Discrete free-slip Navier-Cauchy system on a mask.

    Full unknown vector stacks ``u_x`` then ``u_y`` over mask pixels.
    ``hessian`` is the energy Hessian, ``prolong`` maps constrained degrees
    of freedom (two per interior pixel, one tangential per boundary pixel)
    to the full vector.
    """

    mask: np.ndarray
    boundary: np.ndarray
    normals: tuple
    hessian: sp.csr_matrix
    prolong: sp.csr_matrix

    def operator(self, u: DeformationField) -> DeformationField:
        """``mu lap u + (lam + mu) grad div u`` on mask pixels (zero elsewhere)."""
        vec = np.concatenate([u.dx[self.mask], u.dy[self.mask]])
        out = -(self.hessian @ vec)
        n = int(self.mask.sum())
        ox, oy = np.zeros(self.mask.shape), np.zeros(self.mask.shape)
        ox[self.mask], oy[self.mask] = out[:n], out[n:]
        return DeformationField(ox, oy)


def elastic_system(mask, mu=1.0, lam=1.0) -> ElasticSystem:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    n = int(mask.sum())
    idx = -np.ones(mask.shape, dtype=np.int64)
    idx[mask] = np.arange(n)
    pad = np.pad(mask, 1)
    all_nb = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    boundary = mask & ~all_nb
    interior = mask & all_nb

    # graph Laplacian over 4-neighbour edges inside the mask
    ex = mask[:, :-1] & mask[:, 1:]
    ey = mask[:-1, :] & mask[1:, :]
    p_e = np.concatenate([idx[:, :-1][ex], idx[:-1, :][ey]])
    q_e = np.concatenate([idx[:, 1:][ex], idx[1:, :][ey]])
    ne = p_e.size
    d_edge = sp.csr_matrix(
        (np.r_[np.ones(ne), -np.ones(ne)], (np.r_[np.arange(ne), np.arange(ne)], np.r_[p_e, q_e])), shape=(ne, n)
    )
    lap = (d_edge.T @ d_edge).tocsr()

    # forward-difference divergence on cells (p, p+x, p+y all inside)
    cell = np.zeros(mask.shape, dtype=bool)
    cell[:-1, :-1] = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1]
    p0 = idx[:-1, :-1][cell[:-1, :-1]]
    px = idx[:-1, 1:][cell[:-1, :-1]]
    py = idx[1:, :-1][cell[:-1, :-1]]
    nc = p0.size
    r = np.arange(nc)
    rows = np.r_[r, r, r, r]
    cols = np.r_[px, p0, n + py, n + p0]
    vals = np.r_[np.ones(nc), -np.ones(nc), np.ones(nc), -np.ones(nc)]
    div = sp.csr_matrix((vals, (rows, cols)), shape=(nc, 2 * n))

    hess = (sp.block_diag([mu * lap, mu * lap]) + (lam + mu) * (div.T @ div)).tocsr()

    nx, ny = _boundary_normals(mask, boundary)
    int_ids = idx[interior]
    bnd_ids = idx[boundary]
    ni, nb = int_ids.size, bnd_ids.size
    # dofs: [interior x | interior y | boundary tangential]
    pr_rows = np.r_[int_ids, n + int_ids, bnd_ids, n + bnd_ids]
    pr_cols = np.r_[np.arange(ni), ni + np.arange(ni), 2 * ni + np.arange(nb), 2 * ni + np.arange(nb)]
    tx, ty = -ny, nx
    pr_vals = np.r_[np.ones(2 * ni), tx, ty]
    prolong = sp.csr_matrix((pr_vals, (pr_rows, pr_cols)), shape=(2 * n, 2 * ni + nb))
    return ElasticSystem(mask, boundary, (nx, ny), hess, prolong)


def solve_navier_cauchy(mask, mu=1.0, lam=1.0, force=None, rtol=1e-10, maxiter=20000, return_info=False):
    """Static linear elasticity with free-slip boundary on ``mask``.

    Solves ``0 = mu lap u + (lam + mu) grad(div u) + k`` (density 1) inside
    the mask with ``n . u = 0`` and zero normal derivative of the tangential
    component on its boundary; ``u = 0`` outside. The discretization is the
    minimizer of the quadratic elastic energy over the slip-constrained
    space, solved by conjugate gradients on the reduced SPD system.

    ``force`` is a ``DeformationField``-like pair ``(k_x, k_y)`` or ``None``
    for a unit force along ``+y``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mu <= 0:
        raise ValueError("mu must be positive")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    system = elastic_system(mask, mu, lam)
    if not np.any(mask & ~system.boundary):
        raise NumericalError("mask has no interior pixel; elastic system is singular")
    if force is None:
        kx, ky = np.zeros(mask.shape), np.ones(mask.shape)
    else:
        kx, ky = (force.dx, force.dy) if isinstance(force, DeformationField) else force
    b_full = np.concatenate([np.asarray(kx)[mask], np.asarray(ky)[mask]])
    P = system.prolong
    A = (P.T @ system.hessian @ P).tocsr()
    b = P.T @ b_full
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        u = DeformationField.zeros(mask.shape)
        return (u, system, 0.0) if return_info else u
    z, info = sparse_cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter)
    achieved = float(np.linalg.norm(b - A @ z) / bnorm)
    if info != 0 and achieved > 1e-6:
        raise NumericalError(f"Navier-Cauchy solve did not converge: relative residual {achieved:.2e}")
    full = P @ z
    n = int(mask.sum())
    ux, uy = np.zeros(mask.shape), np.zeros(mask.shape)
    ux[mask], uy[mask] = full[:n], full[n:]
    u = DeformationField(ux, uy)
    return (u, system, achieved) if return_info else u


@dataclass(frozen=True, eq=False)
class ElasticMotionParams:
    """Cavity mask, Lame coefficients, force scale ``c``, the time curve of
    the force, and the weight of the superimposed rigid motion.

    ``amplitude_px`` sets the largest displacement of the unit-force field
    (its absolute scale is otherwise arbitrary).
    """

    mask: np.ndarray
    mu: float = 1.0
    lam: float = 1.0
    force_scale: float = 1.0
    time_params: TimeCurve = TimeCurve(0.0, 1.0, 1.0, 1.0)
    rigid_weight: float = 0.5
    amplitude_px: float = 4.0

    def __post_init__(self):
        if not np.any(self.mask):
            raise ValueError("elastic mask is empty")
        if self.mu <= 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lambda >= 0")


def sample_elastic_params(mask, rng, amplitude_px=4.0) -> ElasticMotionParams:
    rng = _rng(rng)
    c = rng.uniform(0.0, 1.0)
    return ElasticMotionParams(np.asarray(mask, bool), force_scale=c, time_params=sample_time_curve(rng),
                               amplitude_px=amplitude_px)


def elastic_timeline(params: ElasticMotionParams, fov: FieldOfView, n_keyframes: int,
                     rigid: RigidMotionParams | None = None, total_time=1.0) -> DeformationTimeline:
    """Breathing-like keyframes: scaled elastic field inside the mask,
    composed with down-weighted rigid motion (rigid applied first)."""
    base = solve_navier_cauchy(params.mask, params.mu, params.lam)
    peak = base.max_abs()
    if peak > 0:
        base = base * (params.amplitude_px / peak)
    rigid_w = rigid.scaled(params.rigid_weight) if rigid is not None else None
    times = total_time * (np.arange(n_keyframes) + 0.5) / n_keyframes
    frames = []
    for t in times:
        el = base * (params.force_scale * time_curve(t, params.time_params, total_time))
        if rigid_w is not None:
            el = compose(rigid_field(fov.shape, *rigid_w.angle_and_shift(t, fov.shape, total_time)), el)
        frames.append(el)
    return DeformationTimeline(tuple(frames), total_time)
