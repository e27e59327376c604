"""Deformation fields and discrete warping.

A field stores per-pixel displacements ``(dx, dy)`` in pixel units; warping
an image ``s`` gives ``U[s](p) = s(p + u(p))``. The zero field is the
identity. Samples falling outside the grid read as zero.

Both image interpolators are assembled as sparse matrices so the forward
model has an exact discrete adjoint (the matrix transpose).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from hmlab.core import NumericalError, ShapeError, check_same_shape

INTERPOLATORS = ("bilinear", "sinc_patch")


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Displacement field on an ``(H, W)`` grid, ``x`` = column, ``y`` = row."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ShapeError(f"dx/dy must be matching 2D arrays, got {dx.shape} and {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise NumericalError("deformation field contains non-finite displacements")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def constant(cls, shape, dx, dy):
        return cls(np.full(shape, float(dx)), np.full(shape, float(dy)))

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0], a[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def as_array(self) -> np.ndarray:
        return np.stack([self.dx, self.dy])

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def max_abs(self) -> float:
        """Largest displacement length in pixels."""
        return float(self.magnitude().max())

    def is_zero(self) -> bool:
        return not (np.any(self.dx) or np.any(self.dy))

    def mean_shift(self) -> tuple[float, float]:
        return float(self.dx.mean()), float(self.dy.mean())

    # parameter-space arithmetic; never to be confused with blending warped images
    def __add__(self, other):
        check_same_shape(self.shape, other.shape, "field addition")
        return DeformationField(self.dx + other.dx, self.dy + other.dy)

    def __sub__(self, other):
        check_same_shape(self.shape, other.shape, "field subtraction")
        return DeformationField(self.dx - other.dx, self.dy - other.dy)

    def __mul__(self, c):
        return DeformationField(self.dx * float(c), self.dy * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return DeformationField(-self.dx, -self.dy)


@dataclass(frozen=True)
class DeformationTimeline:
    """Keyframe fields interpolated piecewise linearly over ``[0, total_time]``.

    Keyframes are 0-based; keyframe ``i`` sits at ``t = T (i + 0.5) / N``.
    """

    keyframes: tuple = dc_field(default_factory=tuple)
    total_time: float = 1.0

    def __post_init__(self):
        kf = tuple(self.keyframes)
        if len(kf) < 2:
            raise ValueError("a timeline needs at least two keyframes")
        for f in kf[1:]:
            check_same_shape(kf[0].shape, f.shape, "timeline keyframes")
        if self.total_time <= 0:
            raise ValueError("total_time must be positive")
        object.__setattr__(self, "keyframes", kf)

    @classmethod
    def static(cls, shape, n_keyframes=2, total_time=1.0):
        return cls(tuple(DeformationField.zeros(shape) for _ in range(n_keyframes)), total_time)

    @property
    def n_keyframes(self) -> int:
        return len(self.keyframes)

    @property
    def shape(self):
        return self.keyframes[0].shape

    def keyframe_times(self) -> np.ndarray:
        n = self.n_keyframes
        return self.total_time * (np.arange(n) + 0.5) / n


# --------------------------------------------------------------------------
# time interpolation


def blend_index(t, total_time, n, clamp=False):
    """Bracketing keyframe index and weight for time ``t``.

    ``h = t/T * n - 1/2``, ``i = floor(min(max(h, 0), n - 2))``, ``d = h - i``.
    Taken literally, ``d`` leaves ``[0, 1]`` in the outer half-segments
    (linear extrapolation); ``clamp=True`` clips it instead. With a single
    keyframe the result is ``(0, 0.0)``.
    """
    if n == 1:
        return 0, 0.0
    h = t / total_time * n - 0.5
    i = int(np.floor(min(max(h, 0.0), n - 2)))
    d = h - i
    if clamp:
        d = min(max(d, 0.0), 1.0)
    return i, float(d)


def timeline_eval(timeline: DeformationTimeline, t: float, clamp: bool = False) -> DeformationField:
    if not 0.0 <= t <= timeline.total_time:
        raise ValueError(f"t={t} outside [0, {timeline.total_time}]")
    i, d = blend_index(t, timeline.total_time, timeline.n_keyframes, clamp)
    a, b = timeline.keyframes[i], timeline.keyframes[i + 1]
    if d == 0.0:
        return a
    return a * (1.0 - d) + b * d


def keyframe_resample(timeline: DeformationTimeline, eta: int, clamp: bool = False) -> list:
    """Evaluate the timeline at the centers of ``eta * N`` equal segments."""
    if int(eta) != eta or eta < 1:
        raise ValueError("eta must be a positive integer")
    m = int(eta) * timeline.n_keyframes
    times = timeline.total_time * (np.arange(m) + 0.5) / m
    return [timeline_eval(timeline, float(t), clamp) for t in times]


# --------------------------------------------------------------------------
# image interpolation operators


def _grid(shape):
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return yy, xx


def _assemble(shape, rows, ys, xs, weights):
    h, w = shape
    inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w) & (weights != 0)
    cols = ys[inside] * w + xs[inside]
    m = sp.csr_matrix((weights[inside], (rows[inside], cols)), shape=(h * w, h * w))
    m.sum_duplicates()
    return m


def bilinear_matrix(u: DeformationField) -> sp.csr_matrix:
    """Sparse bilinear sampling matrix of ``s -> s(p + u(p))``."""
    h, w = u.shape
    yy, xx = _grid(u.shape)
    x = xx + u.dx
    y = yy + u.dy
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64).ravel()
    y0 = y0.astype(np.int64).ravel()
    fx = fx.ravel()
    fy = fy.ravel()
    rows = np.arange(h * w)
    corners = [
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ]
    r = np.concatenate([rows] * 4)
    ys = np.concatenate([y0 + a for a, _, _ in corners])
    xs = np.concatenate([x0 + b for _, b, _ in corners])
    wts = np.concatenate([c for _, _, c in corners])
    return _assemble(u.shape, r, ys, xs, wts)


def dirichlet_weights(frac: np.ndarray, patch: int) -> np.ndarray:
    """Weights for evaluating a ``patch``-periodic trigonometric interpolant.

    Shifting a length-``patch`` signal by ``frac`` with a centered phase
    ramp and reading its center sample equals ``sum_m w[m] x[m]`` where
    ``w[m] = D(frac - m)``, ``D(z) = sin(pi z) / (patch sin(pi z / patch))``
    for offsets ``m = -r..r``. Returns shape ``frac.shape + (patch,)``.
    """
    r = patch // 2
    m = np.arange(-r, r + 1, dtype=np.float64)
    z = frac[..., None] - m
    num = np.sin(np.pi * z)
    den = patch * np.sin(np.pi * z / patch)
    small = np.abs(z) < 1e-12
    wts = np.where(small, 1.0, num / np.where(small, 1.0, den))
    # an exact integer sample is a Kronecker delta, not 1e-17 leakage
    exact = frac == 0.0
    if np.any(exact):
        wts[exact] = (m == 0).astype(np.float64)
    return wts


def sinc_patch_matrix(u: DeformationField, patch: int = 7) -> sp.csr_matrix:
    """Sparse matrix of the patch-wise Fourier-shift (sinc) interpolator.

    The rounded displacement selects a ``patch x patch`` neighbourhood; the
    remaining sub-pixel part is applied as a circular Fourier shift of that
    patch, whose center sample is the output. Patch samples outside the
    image are zero.
    """
    if patch < 3 or patch % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 3, got {patch}")
    h, w = u.shape
    r = patch // 2
    yy, xx = _grid(u.shape)
    sx = np.rint(u.dx)
    sy = np.rint(u.dy)
    wx = dirichlet_weights((u.dx - sx).ravel(), patch)  # (N, P)
    wy = dirichlet_weights((u.dy - sy).ravel(), patch)
    cx = (xx + sx).astype(np.int64).ravel()
    cy = (yy + sy).astype(np.int64).ravel()
    offs = np.arange(-r, r + 1)
    n = h * w
    rows = np.broadcast_to(np.arange(n)[:, None, None], (n, patch, patch))
    ys = np.broadcast_to(cy[:, None, None] + offs[None, :, None], (n, patch, patch))
    xs = np.broadcast_to(cx[:, None, None] + offs[None, None, :], (n, patch, patch))
    wts = wy[:, :, None] * wx[:, None, :]
    return _assemble(u.shape, rows.ravel(), ys.ravel(), xs.ravel(), wts.ravel())


def warp_matrix(u: DeformationField, interpolator: str = "bilinear", patch: int = 7) -> sp.csr_matrix:
    if interpolator == "bilinear":
        return bilinear_matrix(u)
    if interpolator == "sinc_patch":
        return sinc_patch_matrix(u, patch)
    raise ValueError(f"unknown interpolator {interpolator!r}; expected one of {INTERPOLATORS}")


def _apply_matrix(m, image, shape):
    image = np.asarray(image)
    check_same_shape(image.shape[-2:], shape, "warp field vs image")
    lead = image.shape[:-2]
    flat = image.reshape(-1, shape[0] * shape[1]).T
    out = m @ flat
    return np.ascontiguousarray(out.T).reshape(lead + tuple(shape))


def apply_warp(u: DeformationField, image, interpolator="bilinear", patch=7) -> np.ndarray:
    """Warp ``image`` (any leading batch axes) by ``u``."""
    check_same_shape(np.shape(image)[-2:], u.shape, "warp field vs image")
    if u.is_zero():
        return np.array(image, copy=True)
    return _apply_matrix(warp_matrix(u, interpolator, patch), image, u.shape)


def apply_bilinear(u: DeformationField, image) -> np.ndarray:
    return apply_warp(u, image, "bilinear")


def apply_sinc_patch(u: DeformationField, image, patch: int = 7) -> np.ndarray:
    if patch < 3 or patch % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 3, got {patch}")
    return apply_warp(u, image, "sinc_patch", patch)


# --------------------------------------------------------------------------
# field algebra


def sample_field(u: DeformationField, x: np.ndarray, y: np.ndarray) -> DeformationField:
    """Bilinearly resample ``u`` at absolute positions; clamps at the border."""
    coords = np.stack([y, x])
    dx = ndimage.map_coordinates(u.dx, coords, order=1, mode="nearest")
    dy = ndimage.map_coordinates(u.dy, coords, order=1, mode="nearest")
    return DeformationField(dx, dy)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Field ``W`` with ``W[s] = outer[inner[s]]``.

    ``w(p) = outer(p) + inner(p + outer(p))``.
    """
    check_same_shape(outer.shape, inner.shape, "compose")
    yy, xx = _grid(outer.shape)
    moved = sample_field(inner, xx + outer.dx, yy + outer.dy)
    return DeformationField(outer.dx + moved.dx, outer.dy + moved.dy)


def mean_field(fields) -> DeformationField:
    fields = list(fields)
    if not fields:
        raise ValueError("mean of an empty list of fields")
    for f in fields[1:]:
        check_same_shape(fields[0].shape, f.shape, "mean_field")
    dx = np.mean([f.dx for f in fields], axis=0)
    dy = np.mean([f.dy for f in fields], axis=0)
    return DeformationField(dx, dy)


def _laplace2d(a):
    p = np.pad(a, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * a


def laplacian(u: DeformationField) -> DeformationField:
    """Component-wise 5-point Laplacian with replicated borders."""
    return DeformationField(_laplace2d(u.dx), _laplace2d(u.dy))


def _grad_energy(a):
    return float(np.sum(np.diff(a, axis=0) ** 2) + np.sum(np.diff(a, axis=1) ** 2))


def inversion_functional(v: DeformationField, u: DeformationField, alpha: float) -> float:
    """``||v(p) + u(p + v(p))||^2 + alpha ||grad v||^2`` (sums over pixels)."""
    r = compose(v, u)
    data = float(np.sum(r.dx**2 + r.dy**2))
    return data + alpha * (_grad_energy(v.dx) + _grad_energy(v.dy))


def invert_field_trace(
    u: DeformationField,
    alpha: float = 1e-3,
    max_steps: int = 50,
    step_size: float = 0.5,
    tol: float = 1e-6,
    max_halvings: int = 30,
):
    """Landweber inversion; returns ``(v, functional_values)``.

    Gradient steps on the inversion functional starting from ``v = 0``. A
    step that would increase the functional is retried with half the step
    size; if no tried step decreases it, :class:`NumericalError` is raised.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    shape = u.shape
    v = DeformationField.zeros(shape)
    if u.is_zero():
        return v, [0.0]
    yy, xx = _grid(shape)
    # derivatives of u, sampled at p + v each step
    gx = np.gradient(u.dx)  # (d/dy, d/dx)
    gy = np.gradient(u.dy)
    jac = DeformationField(gx[1], gx[0]), DeformationField(gy[1], gy[0])

    value = inversion_functional(v, u, alpha)
    history = [value]
    for _ in range(max_steps):
        if value == 0.0:
            break
        px, py = xx + v.dx, yy + v.dy
        r = compose(v, u)
        jx = sample_field(jac[0], px, py)  # (d u_x/dx, d u_x/dy)
        jy = sample_field(jac[1], px, py)
        # (I + Du)^T r - alpha * lap(v)
        lap = laplacian(v)
        g_x = r.dx * (1.0 + jx.dx) + r.dy * jy.dx - alpha * lap.dx
        g_y = r.dx * jx.dy + r.dy * (1.0 + jy.dy) - alpha * lap.dy
        grad = DeformationField(g_x, g_y)

        tau = step_size
        for _ in range(max_halvings):
            trial = v - grad * tau
            trial_value = inversion_functional(trial, u, alpha)
            if trial_value <= value:
                break
            tau *= 0.5
        else:
            raise NumericalError(
                f"field inversion diverged: functional {value:.3e} increased for all step sizes"
            )
        decrease = value - trial_value
        v, value = trial, trial_value
        history.append(value)
        if decrease <= tol * history[-2]:
            break
    return v, history


def invert_field(u, alpha=1e-3, max_steps=50, step_size=0.5, tol=1e-6) -> DeformationField:
    """Approximate inverse ``v`` with ``v[u[s]] ~ s`` (Landweber iteration)."""
    return invert_field_trace(u, alpha, max_steps, step_size, tol)[0]
