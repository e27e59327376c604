import itertools

import numpy as np
import pytest

from hmlab.core import fft2c, ifft2c
from hmlab.forward import (
    ApproxModelConfig,
    ApproxOperator,
    CoilSet,
    add_noise,
    adjoint_approx,
    forward_approx,
    forward_exact,
    forward_static,
)
from hmlab.motion_sim import make_phantom, sim_coils
from hmlab.sampling import KSpaceData, SamplingSchedule, embed_lines, haste_schedule
from hmlab.warp import DeformationField, DeformationTimeline, keyframe_resample
from tests.conftest import random_image
from tests.test_core import brute_dft


def patch_shift_oracle(s, dx, dy, patch=7):
    """Per-pixel sinc-patch warp by a constant shift, written out directly:
    cut the zero-padded patch around the rounded position, Fourier-shift it
    by the remainder, read the center."""
    h, w = s.shape
    r = patch // 2
    ix, iy = int(np.rint(dx)), int(np.rint(dy))
    fx, fy = dx - ix, dy - iy
    pad = np.pad(s, r + max(abs(ix), abs(iy)) + 1)
    off = r + max(abs(ix), abs(iy)) + 1
    k = np.fft.fftfreq(patch)
    ramp = np.exp(2j * np.pi * (k[:, None] * fy + k[None, :] * fx))
    out = np.zeros_like(s)
    for y in range(h):
        for x in range(w):
            cy, cx = y + iy + off, x + ix + off
            p = pad[cy - r: cy + r + 1, cx - r: cx + r + 1]
            shifted = np.fft.ifft2(np.fft.fft2(np.fft.ifftshift(p)) * ramp)
            out[y, x] = np.fft.fftshift(shifted)[r, r]
    return out


def sine_timeline(shape, n_keyframes=8, amplitude=1.5):
    # smooth in space and time
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    frames = []
    for t in (np.arange(n_keyframes) + 0.5) / n_keyframes:
        a = amplitude * np.sin(2 * np.pi * t)
        frames.append(DeformationField(a * np.cos(2 * np.pi * yy / h), 0.5 * a * np.sin(2 * np.pi * xx / w)))
    return DeformationTimeline(tuple(frames))


def test_exact_identity_timeline_is_static_model(phantom32, coils4_32):
    s = haste_schedule((32, 32))
    tl = DeformationTimeline.static((32, 32), 4)
    y = forward_exact(phantom32, tl, coils4_32, s)
    ref = fft2c(coils4_32.maps * phantom32)
    for e, row in enumerate(s.rows):
        np.testing.assert_allclose(y.lines[e], ref[:, row, :], atol=1e-13)


def test_exact_zero_image(coils4_32):
    s = haste_schedule((32, 32))
    y = forward_exact(np.zeros((32, 32)), sine_timeline((32, 32)), coils4_32, s)
    assert not np.any(y.lines)


def test_exact_constant_translation_brute_force(rng):
    shape = (8, 8)
    img = random_image(rng, shape)
    coils = sim_coils(2, shape)
    s = haste_schedule(shape)
    dx, dy = 0.4, -1.3
    tl = DeformationTimeline((DeformationField.constant(shape, dx, dy),) * 2)
    y = forward_exact(img, tl, coils, s)
    warped = patch_shift_oracle(img, dx, dy)
    for e, row in enumerate(s.rows):
        for c in range(2):
            np.testing.assert_allclose(y.lines[e, c], brute_dft(coils.maps[c] * warped)[row], atol=1e-10)


def test_approx_static_keyframes_equal_exact_identity(phantom32, coils4_32):
    s = haste_schedule((32, 32))
    kf = [DeformationField.zeros((32, 32))] * 16
    a = forward_approx(phantom32, kf, coils4_32, s, ApproxModelConfig(2), n_fractions=8)
    b = forward_exact(phantom32, DeformationTimeline.static((32, 32)), coils4_32, s)
    np.testing.assert_array_equal(a.lines, b.lines)


def test_approx_matches_exact_at_keyframe_centers():
    shape = (16, 16)
    img = make_phantom("shepp_logan", shape)
    coils = sim_coils(2, shape)
    s = haste_schedule(shape)  # times j / 8
    rng = np.random.default_rng(3)
    tl = DeformationTimeline(tuple(DeformationField(rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape))
                                   for _ in range(4)))
    exact = forward_exact(img, tl, coils, s, "sinc_patch")
    approx = forward_approx(img, list(tl.keyframes), coils, s, ApproxModelConfig(1, "sinc_patch"), n_fractions=4)
    centers = [1, 3, 5, 7]  # t = 0.125, 0.375, 0.625, 0.875
    np.testing.assert_allclose(approx.lines[centers], exact.lines[centers], atol=1e-12)
    assert not np.allclose(approx.lines, exact.lines)


def test_approx_constant_in_time_field_is_exact():
    shape = (16, 16)
    img = make_phantom("shepp_logan", shape)
    coils = sim_coils(2, shape)
    s = haste_schedule(shape)
    u = sine_timeline(shape).keyframes[1]
    tl = DeformationTimeline((u, u, u, u))
    exact = forward_exact(img, tl, coils, s, "sinc_patch")
    for eta in (1, 2):
        frames = keyframe_resample(tl, eta)
        approx = forward_approx(img, frames, coils, s, ApproxModelConfig(eta, "sinc_patch"), n_fractions=4)
        np.testing.assert_allclose(approx.lines, exact.lines, atol=1e-12)


def approx_errors(etas, interp, shape):
    img = make_phantom("shepp_logan", shape)
    coils = sim_coils(2, shape)
    s = haste_schedule(shape)
    tl = sine_timeline(shape, 4)
    exact = forward_exact(img, tl, coils, s, interp)
    out = []
    for eta in etas:
        frames = keyframe_resample(tl, eta)
        approx = forward_approx(img, frames, coils, s, ApproxModelConfig(eta, interp))
        out.append(np.linalg.norm(approx.lines - exact.lines) / np.linalg.norm(exact.lines))
    return out


@pytest.mark.parametrize("interp", ["bilinear", "sinc_patch"])
def test_approx_error_decreases_monotonically_with_eta(interp):
    e1, e2, e4 = approx_errors([1, 2, 4], interp, (32, 32))
    assert e1 > e2 > e4


def test_approx_error_halves_from_eta_2_to_4():
    # both models bilinear so only the time discretization differs
    e2, e4 = approx_errors([2, 4], "bilinear", (64, 64))
    assert e4 <= 0.5 * e2


def test_operator_keyframe_count_checked(coils4_32):
    s = haste_schedule((32, 32))
    with pytest.raises(ValueError):
        ApproxOperator([DeformationField.zeros((32, 32))] * 8, coils4_32, s, ApproxModelConfig(2), n_fractions=8)
    with pytest.raises(ValueError):
        ApproxModelConfig(0)
    with pytest.raises(ValueError):
        ApproxModelConfig(2, "cubic")


COMBOS = list(itertools.product(["bilinear", "sinc_patch"], [1, 2], [1, 2, 4], [1, 2, 8]))


@pytest.mark.parametrize("interp,eta,n_coils,n_frac", COMBOS)
def test_adjoint_dot_product(interp, eta, n_coils, n_frac):
    shape = (16, 16)
    rng = np.random.default_rng(eta * 100 + n_coils * 10 + n_frac)
    s = haste_schedule(shape)
    coils = sim_coils(n_coils, shape)
    kf = [DeformationField(rng.uniform(-2, 2, shape), rng.uniform(-2, 2, shape)) for _ in range(eta * n_frac)]
    op = ApproxOperator(kf, coils, s, ApproxModelConfig(eta, interp))
    x = random_image(rng, shape)
    y = KSpaceData(s, random_image(rng, (len(s), n_coils, 16)))
    ax = op.forward(x)
    lhs = np.vdot(y.lines, ax.lines)
    rhs = np.vdot(op.adjoint(y), x)
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(ax.lines) * np.linalg.norm(y.lines)


def test_adjoint_zero_data(coils4_32):
    s = haste_schedule((32, 32))
    kf = list(sine_timeline((32, 32), 2).keyframes)
    out = adjoint_approx(KSpaceData(s, np.zeros((17, 4, 32))), kf, coils4_32, s, ApproxModelConfig(1))
    assert not np.any(out)


def test_adjoint_full_sampling_single_coil_is_ifft(rng):
    shape = (8, 8)
    full = SamplingSchedule(shape, np.arange(8) / 8, np.arange(8))
    coils = CoilSet(np.ones((1,) + shape))
    y = KSpaceData(full, random_image(rng, (8, 1, 8)))
    out = adjoint_approx(y, [DeformationField.zeros(shape)] * 2, coils, full, ApproxModelConfig(1))
    np.testing.assert_allclose(out, ifft2c(embed_lines(y)[0]), atol=1e-14)


def test_forward_variants_are_linear(rng):
    shape = (16, 16)
    coils = sim_coils(2, shape)
    s = haste_schedule(shape)
    tl = sine_timeline(shape, 2)
    a, b = 0.7 - 0.2j, -1.3
    x1, x2 = random_image(rng, shape), random_image(rng, shape)
    for fwd in (lambda x: forward_exact(x, tl, coils, s).lines,
                lambda x: forward_approx(x, keyframe_resample(tl, 2), coils, s, ApproxModelConfig(2)).lines):
        lhs = fwd(a * x1 + b * x2)
        rhs = a * fwd(x1) + b * fwd(x2)
        assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()


def test_forward_static_matches_identity_operator(phantom32, coils4_32):
    s = haste_schedule((32, 32))
    a = forward_static(phantom32, coils4_32, s)
    b = ApproxOperator([DeformationField.zeros((32, 32))], coils4_32, s).forward(phantom32)
    np.testing.assert_array_equal(a.lines, b.lines)


def unit_rms_data(seed):
    rng = np.random.default_rng(seed)
    s = haste_schedule((64, 64))
    lines = random_image(rng, (len(s), 4, 64)) / np.sqrt(2)
    return KSpaceData(s, lines / np.sqrt(np.mean(np.abs(lines) ** 2)))


def test_noise_level_zero_is_identity():
    y = unit_rms_data(0)
    np.testing.assert_array_equal(add_noise(y, 0.0, 1).lines, y.lines)


def test_noise_level_five_percent():
    y = unit_rms_data(0)
    for seed in range(10):
        ratio = np.linalg.norm(add_noise(y, 0.05, seed).lines - y.lines) / np.linalg.norm(y.lines)
        assert abs(ratio - 0.05) <= 0.005


def test_noise_is_seeded():
    y = unit_rms_data(1)
    np.testing.assert_array_equal(add_noise(y, 0.1, 7).lines, add_noise(y, 0.1, 7).lines)
    assert not np.array_equal(add_noise(y, 0.1, 7).lines, add_noise(y, 0.1, 8).lines)
    with pytest.raises(ValueError):
        add_noise(y, -0.1)
