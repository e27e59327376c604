import json
import math

import numpy as np
import pytest

from hmlab.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, PipelineConfig, build_parser, main, resolve_config
from hmlab.fileio import read_cfi, read_fields, read_image, read_kspace, write_cfi
from hmlab.forward import CoilSet, noise_sigma
from hmlab.metrics import psnr
from hmlab.recon import cg_sense, identity_keyframes


def run(*argv):
    return main([str(a) for a in argv])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def still(tmp_path_factory):
    d = tmp_path_factory.mktemp("still")
    assert run("simulate", "--size", 32, "--motion", "none", "--out", d) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def moving(tmp_path_factory):
    d = tmp_path_factory.mktemp("moving")
    assert run("simulate", "--size", 48, "--motion", "translation", "--seed", 3, "--out", d) == EXIT_OK
    return d


# -- simulate --------------------------------------------------------------


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, a, b):
        assert run("simulate", "--size", 32, "--motion", "rigid", "--seed", 7, "--out", d) == EXIT_OK
    fa, fb = files(a), files(b)
    assert set(fa) == {"truth.cfi", "keyframes.cfi", "coils.cfi", "kspace.cfi", "kspace.cfi.json",
                       "manifest_simulate.json"}
    for name in fa:
        if name != "manifest_simulate.json":  # echoes the output directory
            assert fa[name] == fb[name], name
    ma, mb = (json.loads(x["manifest_simulate.json"]) for x in (fa, fb))
    assert ma["outputs"] == mb["outputs"]
    assert ma["config"]["seed"] == 7 and ma["config"]["motion"] == "rigid"


def test_simulate_manifest_records_noise(tmp_path):
    clean, noisy = tmp_path / "clean", tmp_path / "noisy"
    common = ["simulate", "--size", 32, "--seed", 2]
    assert run(*common, "--out", clean) == EXIT_OK
    assert run(*common, "--noise", 0.05, "--out", noisy) == EXIT_OK
    y0, y1 = read_kspace(clean / "kspace.cfi"), read_kspace(noisy / "kspace.cfi")
    noise = json.loads((noisy / "manifest_simulate.json").read_text())["noise"]
    assert noise["level"] == 0.05
    assert math.isclose(noise["sigma"], noise_sigma(y0, 0.05), rel_tol=1e-12)
    assert math.isclose(noise["realized_norm"], np.linalg.norm(y1.lines - y0.lines), rel_tol=1e-12)
    assert math.isclose(noise["realized_norm"] / np.linalg.norm(y0.lines), 0.05, rel_tol=0.1)


def test_simulate_default_grid_has_97_lines(tmp_path):
    assert PipelineConfig().size == 192
    assert run("simulate", "--out", tmp_path) == EXIT_OK
    assert read_cfi(tmp_path / "kspace.cfi").shape == (97, 4, 192)


def test_simulate_elastic_needs_mask(tmp_path):
    assert run("simulate", "--size", 32, "--motion", "elastic", "--out", tmp_path) == EXIT_USAGE
    assert not any(tmp_path.iterdir())


def test_simulate_input_shape_mismatch(tmp_path, still):
    assert run("simulate", "--size", 24, "--input", still / "truth.cfi", "--out", tmp_path / "o") == EXIT_IO


# -- configuration ---------------------------------------------------------


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 3, "n_iter": 5, "noise": 0.02}))
    args = build_parser().parse_args(["simulate", "--config", str(cfg_file), "--seed", "9"])
    cfg = resolve_config(args)
    assert (cfg.seed, cfg.n_iter, cfg.noise, cfg.size) == (9, 5, 0.02, 192)
    assert resolve_config(build_parser().parse_args(["simulate", "--complex-cg"])).real_valued is False


def test_config_errors(tmp_path):
    bad_key = tmp_path / "k.json"
    bad_key.write_text('{"sizee": 3}')
    bad_json = tmp_path / "j.json"
    bad_json.write_text("{size: 3")
    out = tmp_path / "o"
    assert run("simulate", "--config", bad_key, "--out", out) == EXIT_USAGE
    assert run("simulate", "--config", bad_json, "--out", out) == EXIT_IO
    assert run("simulate", "--config", tmp_path / "none.json", "--out", out) == EXIT_IO
    assert run("simulate", "--motion", "wobble", "--out", out) == EXIT_USAGE
    assert run("simulate", "--size", 0, "--out", out) == EXIT_USAGE
    assert run("simulate", "--size", "x") == EXIT_USAGE
    assert run() == EXIT_USAGE
    assert not out.exists()


# -- estimate --------------------------------------------------------------


def test_estimate_oracle_needs_image(still, tmp_path):
    rc = run("estimate", "--kspace", still / "kspace.cfi", "--coils", still / "coils.cfi",
             "--corrector", "oracle", "--out", tmp_path / "e")
    assert rc == EXIT_USAGE
    assert not (tmp_path / "e").exists()


def test_estimate_motion_free(still, tmp_path):
    out = tmp_path / "e"
    rc = run("estimate", "--kspace", still / "kspace.cfi", "--coils", still / "coils.cfi",
             "--iterations", 2, "--out", out)
    assert rc == EXIT_OK
    fields = read_fields(out / "keyframes_est.cfi")
    assert len(fields) == 8 and max(u.max_abs() for u in fields) <= 0.1
    trace = json.loads((out / "trace.json").read_text())
    assert len(trace["loss"]) == 3
    assert read_image(out / "image.cfi").shape == (32, 32)
    manifest = json.loads((out / "manifest_estimate.json").read_text())
    assert manifest["config"]["n_iter"] == 2 and manifest["config"]["size"] == 32


def test_estimate_nan_data_is_a_numerical_failure(still, tmp_path):
    y = read_kspace(still / "kspace.cfi")
    lines = y.lines.copy()
    lines[0, 0, 0] = np.nan
    write_cfi(tmp_path / "bad.cfi", lines, "complex")
    (tmp_path / "bad.cfi.json").write_bytes((still / "kspace.cfi.json").read_bytes())
    out = tmp_path / "e"
    rc = run("estimate", "--kspace", tmp_path / "bad.cfi", "--coils", still / "coils.cfi", "--out", out)
    assert rc == EXIT_NUMERICAL
    assert not out.exists()


def test_estimate_corrupt_header_is_an_io_failure(still, tmp_path):
    bad = tmp_path / "bad.cfi"
    bad.write_bytes(b"CFI1 complex 3 17 X 32\n" + (still / "kspace.cfi").read_bytes().split(b"\n", 1)[1])
    (tmp_path / "bad.cfi.json").write_bytes((still / "kspace.cfi.json").read_bytes())
    out = tmp_path / "e"
    assert run("estimate", "--kspace", bad, "--coils", still / "coils.cfi", "--out", out) == EXIT_IO
    assert not out.exists()


# -- reconstruct -----------------------------------------------------------


def test_reconstruct_without_keyframes_is_identity_cg(still, tmp_path):
    out = tmp_path / "r.cfi"
    assert run("reconstruct", "--kspace", still / "kspace.cfi", "--coils", still / "coils.cfi",
               "--output", out) == EXIT_OK
    y = read_kspace(still / "kspace.cfi")
    coils = CoilSet(read_cfi(still / "coils.cfi"))
    cfg = PipelineConfig(size=32)
    ref = cg_sense(y, identity_keyframes(y.schedule.shape), coils, y.schedule, None, cfg.recon())
    np.testing.assert_array_equal(read_image(out), ref)


def test_reconstruct_with_true_keyframes_gains(moving, tmp_path):
    common = ["reconstruct", "--kspace", moving / "kspace.cfi", "--coils", moving / "coils.cfi"]
    assert run(*common, "--output", tmp_path / "static.cfi") == EXIT_OK
    assert run(*common, "--keyframes", moving / "keyframes.cfi", "--output", tmp_path / "mc.cfi") == EXIT_OK
    truth = read_image(moving / "truth.cfi")
    gain = psnr(truth, read_image(tmp_path / "mc.cfi")) - psnr(truth, read_image(tmp_path / "static.cfi"))
    assert gain >= 3


def test_reconstruct_corrupt_header_leaves_no_output(still, tmp_path):
    bad = tmp_path / "coils.cfi"
    bad.write_bytes(b"CFI1 complex 3 4 32\n" + bytes(64))
    out = tmp_path / "r.cfi"
    assert run("reconstruct", "--kspace", still / "kspace.cfi", "--coils", bad, "--output", out) == EXIT_IO
    assert not out.exists()


# -- evaluate / render -----------------------------------------------------


def test_evaluate_reference_against_itself(still, tmp_path, capsys):
    out = tmp_path / "rep.json"
    truth = still / "truth.cfi"
    assert run("evaluate", "--ref", truth, "--test", truth, "--output", out) == EXIT_OK
    rep = json.loads(out.read_text())
    assert set(rep) == {"res", "psnr", "ssim", "mse"}
    assert rep["psnr"] == "inf" and rep["ssim"] == 1.0 and rep["mse"] == 0.0 and rep["res"] is None
    assert json.loads(capsys.readouterr().out) == rep


def test_evaluate_with_fields_and_data(still, tmp_path):
    out = tmp_path / "rep.json"
    kf = still / "keyframes.cfi"
    rc = run("evaluate", "--ref", still / "truth.cfi", "--test", still / "truth.cfi",
             "--kspace", still / "kspace.cfi", "--coils", still / "coils.cfi",
             "--ref-keyframes", kf, "--est-keyframes", kf, "--output", out)
    assert rc == EXIT_OK
    rep = json.loads(out.read_text())
    assert set(rep) == {"res", "psnr", "ssim", "mse", "field_loss"}
    assert rep["field_loss"] == 0.0 and rep["res"] < 1.0
    assert run("evaluate", "--ref", still / "truth.cfi", "--test", still / "truth.cfi",
               "--kspace", still / "kspace.cfi", "--output", out) == EXIT_USAGE


def test_evaluate_shape_mismatch(still, moving, tmp_path):
    assert run("evaluate", "--ref", still / "truth.cfi", "--test", moving / "truth.cfi",
               "--output", tmp_path / "r.json") == EXIT_IO


def test_render_commands(still, tmp_path):
    for kind in ("magnitude",):
        assert run("render", "--input", still / "truth.cfi", "--kind", kind,
                   "--output", tmp_path / f"{kind}.png") == EXIT_OK
    for kind in ("field_color", "field_quiver"):
        assert run("render", "--input", still / "keyframes.cfi", "--kind", kind, "--index", 3,
                   "--output", tmp_path / f"{kind}.png") == EXIT_OK
    assert (tmp_path / "magnitude.png").read_bytes().startswith(b"\x89PNG")
    assert run("render", "--input", still / "truth.cfi", "--kind", "contour") == EXIT_USAGE
    assert run("render", "--input", still / "truth.cfi", "--kind", "field_color",
               "--output", tmp_path / "x.png") == EXIT_USAGE
    assert run("render", "--input", still / "keyframes.cfi", "--kind", "field_color", "--index", 99,
               "--output", tmp_path / "y.png") == EXIT_USAGE
    assert not (tmp_path / "x.png").exists() and not (tmp_path / "y.png").exists()


# -- batch -----------------------------------------------------------------


def test_batch_runs_every_job(tmp_path, monkeypatch):
    monkeypatch.setenv("HMLAB_THREADS", "2")
    jobs = [["simulate", "--size", "16", "--seed", str(s), "--out", str(tmp_path / f"s{s}")] for s in range(3)]
    jobs.append(["simulate", "--size", "16", "--motion", "wobble", "--out", str(tmp_path / "bad")])
    listing = tmp_path / "jobs.json"
    listing.write_text(json.dumps(jobs))
    assert run("--batch", listing) == EXIT_USAGE  # worst job code
    for s in range(3):
        single = tmp_path / f"single{s}"
        assert run("simulate", "--size", 16, "--seed", s, "--out", single) == EXIT_OK
        assert (single / "kspace.cfi").read_bytes() == (tmp_path / f"s{s}" / "kspace.cfi").read_bytes()


def test_batch_errors(tmp_path, monkeypatch):
    listing = tmp_path / "jobs.json"
    listing.write_text('{"not": "a list"}')
    assert run("--batch", listing) == EXIT_USAGE
    listing.write_text('[["demo"]]')
    assert run("--batch", listing) == EXIT_USAGE
    assert run("--batch", tmp_path / "missing.json") == EXIT_IO
    listing.write_text("[]")
    monkeypatch.setenv("HMLAB_THREADS", "-1")
    assert run("--batch", listing) == EXIT_USAGE
    monkeypatch.setenv("HMLAB_THREADS", "0")
    assert run("--batch", listing) == EXIT_OK
    assert run("--batch", listing, "simulate") == EXIT_USAGE
