import numpy as np
import pytest

from hmlab.acceptance import translation_motion
from hmlab.core import NumericalError, ShapeError, ifft2c
from hmlab.forward import ApproxModelConfig, CoilSet, forward_exact, forward_static
from hmlab.metrics import psnr
from hmlab.motion_sim import make_phantom, sim_coils
from hmlab.recon import (
    CGHistory,
    ReconConfig,
    cg_sense,
    conjugate_gradient,
    recon_partial,
    recon_static,
)
from hmlab.sampling import KSpaceData, SamplingSchedule, embed_lines, haste_schedule, partition
from hmlab.warp import DeformationField, DeformationTimeline, keyframe_resample


def even_phantom(n):
    p = make_phantom("shepp_logan", (n, n)).real
    # p(c - q) = p(c + q) about the DC pixel c = n / 2: a real, even image has a
    # real, even spectrum, so half of k-space determines it
    return (0.5 * (p + np.roll(np.flip(p), 1, axis=(0, 1)))).astype(np.complex128)


@pytest.fixture(scope="module")
def moving_case():
    n = 32
    img = make_phantom("shepp_logan", (n, n))
    coils = sim_coils(4, (n, n))
    sched = haste_schedule((n, n))
    tl = translation_motion(2, n, max_fraction=0.03)
    y = forward_exact(img, tl, coils, sched)
    return img, coils, sched, tl, y


def test_static_recovers_even_phantom_from_half_fourier():
    n = 32
    s = even_phantom(n)
    coils = CoilSet(np.ones((1, n, n)))
    sched = haste_schedule((n, n))
    y = forward_static(s, coils, sched)
    rec = recon_static(y, coils, sched, ReconConfig(n_cg=20, real_valued=True))
    assert np.linalg.norm(rec - s) <= 1e-3 * np.linalg.norm(s)


def test_static_zero_data():
    sched = haste_schedule((16, 16))
    coils = sim_coils(2, (16, 16))
    rec = recon_static(KSpaceData(sched, np.zeros((9, 2, 16))), coils, sched)
    assert not np.any(rec)


def test_static_residual_small_despite_motion(moving_case):
    # single coil: half-Fourier data alone cannot tell motion from image content
    img, _, sched, tl, _ = moving_case
    coil = CoilSet(np.ones((1,) + sched.shape))
    cfg = ReconConfig(n_cg=5, real_valued=True)

    def run(timeline):
        y = forward_exact(img, timeline, coil, sched)
        s = recon_static(y, coil, sched, cfg)
        res = np.linalg.norm(y.lines - forward_static(s, coil, sched).lines) / np.linalg.norm(y.lines)
        return res, psnr(img, s)

    res_still, psnr_still = run(DeformationTimeline.static(sched.shape))
    res_moving, psnr_moving = run(tl)
    assert res_moving <= 2 * res_still
    assert psnr_still - psnr_moving >= 5


def test_partial_all_lines_single_coil_is_zero_filled_ifft(rng):
    n = 16
    full = SamplingSchedule((n, n), np.arange(n) / n, np.arange(n))
    coils = CoilSet(np.ones((1, n, n)))
    y = KSpaceData(full, rng.standard_normal((n, 1, n)) + 1j * rng.standard_normal((n, 1, n)))
    np.testing.assert_allclose(recon_partial(y, coils), ifft2c(embed_lines(y)[0]), atol=1e-13)


def test_partial_dc_line_is_constant_along_rows():
    n = 32
    img = make_phantom("shepp_logan", (n, n))
    coils = CoilSet(np.ones((1, n, n)))
    sched = haste_schedule((n, n))
    dc = forward_static(img, coils, sched).subset(slice(0, 1))
    out = recon_partial(dc, coils)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-14)
    assert np.linalg.matrix_rank(out, tol=1e-10 * np.abs(out).max()) == 1


def test_partial_fractions_differ_but_correlate(coils4_32):
    img = make_phantom("shepp_logan", (32, 32))
    sched = haste_schedule((32, 32))
    parts = partition(forward_static(img, coils4_32, sched), 4)
    a, b = (np.abs(recon_partial(p, coils4_32)) for p in parts[:2])
    assert not np.allclose(a, b)
    assert np.corrcoef(a.ravel(), b.ravel())[0, 1] > 0


def test_partial_rejects_empty(coils4_32):
    sched = haste_schedule((32, 32))
    y = forward_static(np.ones((32, 32)), coils4_32, sched)
    with pytest.raises(ValueError):
        recon_partial(y.subset(slice(0, 0)), coils4_32)


def test_cg_identity_keyframes_equal_static(moving_case):
    _, coils, sched, _, y = moving_case
    cfg = ReconConfig(n_cg=5)
    zeros = [DeformationField.zeros(sched.shape)] * 16
    np.testing.assert_array_equal(cg_sense(y, zeros, coils, sched, None, cfg), recon_static(y, coils, sched, cfg))


def test_cg_true_keyframes_beat_static(moving_case):
    img, coils, sched, tl, y = moving_case
    cfg = ReconConfig(n_cg=10, model=ApproxModelConfig(2, "sinc_patch"), real_valued=True)
    s_mc = cg_sense(y, keyframe_resample(tl, 2), coils, sched, None, cfg)
    s_stat = recon_static(y, coils, sched, cfg)
    assert psnr(img, s_mc) >= psnr(img, s_stat) + 3


def test_cg_warm_start_helps(moving_case):
    _, coils, sched, tl, y = moving_case
    kf = keyframe_resample(tl, 2)
    cfg = ReconConfig(n_cg=3)

    def res(s):
        h = CGHistory()
        cg_sense(y, kf, coils, sched, s, ReconConfig(n_cg=1), h)
        return h.data_residuals[0]

    first = cg_sense(y, kf, coils, sched, None, cfg)
    warm = cg_sense(y, kf, coils, sched, first, cfg)
    cold = cg_sense(y, kf, coils, sched, None, cfg)
    assert res(warm) < res(cold)


def test_cg_data_residual_is_non_increasing(moving_case):
    _, coils, sched, tl, y = moving_case
    h = CGHistory()
    cg_sense(y, keyframe_resample(tl, 2), coils, sched, None, ReconConfig(n_cg=15), h)
    d = np.array(h.data_residuals)
    assert np.all(np.diff(d) <= 1e-8 * d[0])


def test_cg_normal_residual_is_non_increasing(moving_case):
    # ||A^H (y - A s_k)|| per iteration, 1e-8 slack relative to the start
    _, coils, sched, tl, y = moving_case
    h = CGHistory()
    cg_sense(y, keyframe_resample(tl, 2), coils, sched, None, ReconConfig(n_cg=15), h)
    r = np.array(h.normal_residuals)
    assert np.all(np.diff(r) <= 1e-8 * r[0])


def test_cg_aborts_on_nan():
    with pytest.raises(NumericalError):
        conjugate_gradient(lambda x: x * np.nan, np.ones((8, 8), complex), np.zeros((8, 8), complex), 3)


def test_cg_data_shape_checked(moving_case):
    _, coils, sched, _, y = moving_case
    other = haste_schedule((32, 32), 2.0).subset(slice(0, 5))
    with pytest.raises(ShapeError):
        recon_static(KSpaceData(other, y.lines[:5]), coils, sched)


def test_recon_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(n_cg=0)
    with pytest.raises(ValueError):
        ReconConfig(tikhonov=-1.0)
