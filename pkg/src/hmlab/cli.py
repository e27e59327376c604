"""Command-line driver: simulate, estimate, reconstruct, evaluate, render, demo.

Exit codes: 0 success, 1 numerical failure, 2 usage, 3 I/O or format error.
Configuration comes from ``--config <json>`` merged with flags (flags win).
Every command writes a JSON manifest with the resolved configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from hmlab import __version__
from hmlab.core import FieldOfView, NumericalError, ShapeError
from hmlab.estimate import (
    CORRECTORS,
    REGISTRATIONS,
    Corrector,
    EstimateConfig,
    EstimationError,
    RegistrationConfig,
    estimate_motion,
)
from hmlab.fileio import (
    FormatError,
    atomic_write_bytes,
    atomic_write_text,
    encode_cfi,
    fields_to_array,
    read_cfi,
    read_fields,
    read_image,
    read_kspace,
    write_cfi,
    write_fields,
    write_image,
    write_kspace,
)
from hmlab.forward import ApproxModelConfig, CoilSet, add_noise, forward_exact
from hmlab.metrics import quality_report, residual
from hmlab.motion_sim import (
    PHANTOMS,
    elastic_timeline,
    make_phantom,
    rigid_timeline,
    sample_elastic_params,
    sample_rigid_params,
    sim_coils,
)
from hmlab.recon import ReconConfig, cg_sense, identity_keyframes, recon_static
from hmlab.render import KINDS, load_png, png_bytes, render
from hmlab.sampling import haste_schedule
from hmlab.warp import DeformationTimeline, keyframe_resample

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
MOTIONS = ("rigid", "elastic", "translation", "none")
INTERPOLATORS = ("bilinear", "sinc_patch")


class UsageError(Exception):
    """Invalid arguments or configuration (exit code 2)."""


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved pipeline settings shared by all commands."""

    size: int = 192
    n_coils: int = 4
    n_fractions: int = 8
    n_iter: int = 3
    n_cg: int = 5
    eta: int = 2
    noise: float = 0.0
    seed: int = 0
    motion: str = "rigid"
    corrector: str = "identity"
    registration: str = "rigid"
    phantom: str = "shepp_logan"
    interpolator: str = "sinc_patch"
    patch: int = 11
    real_valued: bool = True
    fusion_window: int = 3
    relaxation: float = 0.8
    denoise_strength: float = 0.1
    out: str = "out"

    def __post_init__(self):
        for name in ("size", "n_coils", "n_fractions", "n_iter", "n_cg", "eta", "patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        choices = {"motion": MOTIONS, "corrector": CORRECTORS, "registration": REGISTRATIONS,
                   "phantom": PHANTOMS, "interpolator": INTERPOLATORS}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.n_fractions > self.size // 2 + 1:
            raise ValueError("more fractions than sampled lines")

    def model(self) -> ApproxModelConfig:
        return ApproxModelConfig(self.eta, self.interpolator, self.patch)

    def recon(self) -> ReconConfig:
        return ReconConfig(self.n_cg, None, self.model(), self.real_valued)

    def estimate(self) -> EstimateConfig:
        return EstimateConfig(
            n_iter=self.n_iter, n_cg=self.n_cg, n_fractions=self.n_fractions,
            registration=RegistrationConfig(self.registration), fusion_window=self.fusion_window,
            model=self.model(), real_valued=self.real_valued, relaxation=self.relaxation,
        )


# flag name -> config field
CONFIG_FLAGS = {
    "size": ("--size", int), "n_coils": ("--n-coils", int), "n_fractions": ("--fractions", int),
    "n_iter": ("--iterations", int), "n_cg": ("--cg", int), "eta": ("--eta", int),
    "noise": ("--noise", float), "seed": ("--seed", int), "motion": ("--motion", str),
    "corrector": ("--corrector", str), "registration": ("--registration", str),
    "phantom": ("--phantom", str), "interpolator": ("--interpolator", str), "patch": ("--patch", int),
    "fusion_window": ("--fusion-window", int), "relaxation": ("--relaxation", float),
    "denoise_strength": ("--denoise-strength", float), "out": ("--out", str),
}


def resolve_config(args, **defaults) -> PipelineConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    values = {f.name: f.default for f in dataclasses.fields(PipelineConfig)}
    values.update(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(values))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.update(loaded)
    for name in CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "complex_cg", False):
        values["real_valued"] = False
    try:
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# manifests and file helpers


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _rel(path, base) -> str:
    return os.path.relpath(str(path), str(base))


def write_manifest(out_dir, command, cfg: PipelineConfig, inputs: dict, outputs: dict, extra=None) -> Path:
    out_dir = Path(out_dir)
    doc = {
        "command": command,
        "version": __version__,
        "config": asdict(cfg),
        "inputs": {k: (None if v is None else _rel(v, out_dir)) for k, v in inputs.items()},
        "outputs": {k: {"path": _rel(v, out_dir), "sha256": _sha256(v)} for k, v in outputs.items()},
    }
    if extra:
        doc.update(extra)
    path = out_dir / f"manifest_{command}.json"
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_coils(path) -> CoilSet:
    maps = read_cfi(path, "complex")
    if maps.ndim != 3:
        raise FormatError(f"{path}: coil file must be (C, H, W), got shape {maps.shape}")
    return CoilSet(maps)


def read_input_image(path, shape=None) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        try:
            return load_png(path, shape)
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
    img = read_image(path)
    if shape is not None and img.shape != tuple(shape):
        raise ShapeError(f"{path}: image shape {img.shape} does not match grid {tuple(shape)}")
    return img


def _timeline_from_keyframes(keyframes, total_time) -> DeformationTimeline:
    return DeformationTimeline(tuple(keyframes), total_time)


def _model_keyframes(keyframes, schedule, cfg: PipelineConfig):
    tl = _timeline_from_keyframes(keyframes, schedule.total_time)
    return keyframe_resample(tl, cfg.eta, cfg.model().clamp)


# --------------------------------------------------------------------------
# simulate


@dataclass
class Simulation:
    truth: np.ndarray
    timeline: DeformationTimeline
    coils: CoilSet
    data: object
    clean: object
    noise_sigma: float
    noise_norm: float


def simulate(cfg: PipelineConfig, image=None, mask=None) -> Simulation:
    """Phantom (or ``image``), motion timeline, coils and HASTE data."""
    from hmlab.acceptance import translation_motion
    from hmlab.forward import noise_sigma

    shape = (cfg.size, cfg.size)
    truth = make_phantom(cfg.phantom, shape, seed=cfg.seed) if image is None else np.asarray(image, np.complex128)
    if truth.shape != shape:
        raise ShapeError(f"input image shape {truth.shape} does not match grid {shape}")
    rng = np.random.default_rng(cfg.seed)
    fov = FieldOfView.unit(shape)
    if cfg.motion == "rigid":
        tl = rigid_timeline(sample_rigid_params(rng), fov, cfg.n_fractions)
    elif cfg.motion == "translation":
        tl = translation_motion(cfg.seed, cfg.size, n_keyframes=cfg.n_fractions)
    elif cfg.motion == "elastic":
        if mask is None:
            raise UsageError("elastic motion requires --mask")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape:
            raise ShapeError(f"mask shape {mask.shape} does not match grid {shape}")
        tl = elastic_timeline(sample_elastic_params(mask, rng), fov, cfg.n_fractions, rigid=sample_rigid_params(rng))
    else:
        tl = DeformationTimeline.static(shape, cfg.n_fractions)
    coils = sim_coils(cfg.n_coils, shape)
    schedule = haste_schedule(cfg.size)
    clean = forward_exact(truth, tl, coils, schedule)
    data = add_noise(clean, cfg.noise, seed=cfg.seed)
    sigma = noise_sigma(clean, cfg.noise) if cfg.noise > 0 else 0.0
    return Simulation(truth, tl, coils, data, clean, float(sigma),
                      float(np.linalg.norm(data.lines - clean.lines)))


def save_simulation(sim: Simulation, cfg: PipelineConfig, out_dir, inputs=None) -> dict:
    out_dir = Path(out_dir)
    paths = {
        "truth": out_dir / "truth.cfi",
        "keyframes": out_dir / "keyframes.cfi",
        "coils": out_dir / "coils.cfi",
        "kspace": out_dir / "kspace.cfi",
    }
    write_image(paths["truth"], sim.truth)
    write_fields(paths["keyframes"], sim.timeline.keyframes)
    write_cfi(paths["coils"], sim.coils.maps, "complex")
    write_kspace(paths["kspace"], sim.data)
    outputs = dict(paths)
    outputs["schedule"] = Path(str(paths["kspace"]) + ".json")
    extra = {"noise": {"level": cfg.noise, "sigma": sim.noise_sigma, "realized_norm": sim.noise_norm,
                       "data_norm": float(np.linalg.norm(sim.clean.lines))}}
    write_manifest(out_dir, "simulate", cfg, inputs or {}, outputs, extra)
    return outputs


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    shape = (cfg.size, cfg.size)
    image = read_input_image(args.input, shape) if args.input else None
    mask = None
    if args.mask:
        mask = np.abs(read_input_image(args.mask, shape)) > 0.5 * np.abs(read_input_image(args.mask, shape)).max()
    sim = simulate(cfg, image, mask)
    outputs = save_simulation(sim, cfg, cfg.out, {"input": args.input, "mask": args.mask})
    print(f"wrote {len(outputs)} files to {cfg.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# estimate


def make_corrector(cfg: PipelineConfig, oracle=None, external_prefix=None, shape=None) -> Corrector:
    if cfg.corrector == "oracle":
        if oracle is None:
            raise UsageError("the oracle corrector requires --oracle <image file>")
        return Corrector("oracle", reference=read_input_image(oracle, shape))
    if cfg.corrector == "external":
        if not external_prefix:
            raise UsageError("the external corrector requires --external-prefix")
        return Corrector("external", prefix=external_prefix)
    if cfg.corrector == "denoise":
        return Corrector("denoise", strength=cfg.denoise_strength)
    return Corrector("identity")


def trace_json(trace) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v

    doc = {k: clean(v) for k, v in asdict(trace).items()}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_estimate(result, cfg, out_dir, inputs, prefix="") -> dict:
    out_dir = Path(out_dir)
    paths = {
        "keyframes_est": out_dir / f"{prefix}keyframes_est.cfi",
        "image": out_dir / f"{prefix}image.cfi",
        "trace": out_dir / f"{prefix}trace.json",
    }
    # encode everything before writing so a failure leaves nothing behind
    payload = {
        "keyframes_est": encode_cfi(fields_to_array(result.keyframes_est), "field"),
        "image": encode_cfi(result.image_final, "complex"),
        "trace": trace_json(result.trace).encode("utf-8"),
    }
    for k, p in paths.items():
        atomic_write_bytes(p, payload[k])
    return paths


def _with_data_size(cfg, y) -> PipelineConfig:
    h, w = y.schedule.shape
    if h != w:
        raise ShapeError(f"square grids only, got {h}x{w}")
    return dataclasses.replace(cfg, size=h)


def cmd_estimate(args) -> int:
    cfg = resolve_config(args)
    y = read_kspace(args.kspace)
    cfg = _with_data_size(cfg, y)
    coils = read_coils(args.coils)
    corrector = make_corrector(cfg, args.oracle, args.external_prefix, y.schedule.shape)
    ref = read_fields(args.ref_keyframes) if args.ref_keyframes else None
    try:
        result = estimate_motion(y, coils, y.schedule, corrector, cfg.estimate(), ref_keyframes=ref)
    except EstimationError as exc:
        sys.stderr.write(f"estimation aborted: {exc}\ntrace so far:\n{trace_json(exc.trace)}")
        return EXIT_NUMERICAL
    outputs = save_estimate(result, cfg, cfg.out, {})
    write_manifest(cfg.out, "estimate", cfg,
                   {"kspace": args.kspace, "coils": args.coils, "oracle": args.oracle,
                    "ref_keyframes": args.ref_keyframes}, outputs)
    print(f"estimated {len(result.keyframes_est)} keyframes; final loss {result.trace.loss[-1]:.4g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reconstruct / evaluate / render


def reconstruct(y, coils, cfg: PipelineConfig, keyframes=None):
    if keyframes is None:
        return recon_static(y, coils, y.schedule, cfg.recon())
    return cg_sense(y, _model_keyframes(keyframes, y.schedule, cfg), coils, y.schedule, None, cfg.recon())


def cmd_reconstruct(args) -> int:
    cfg = resolve_config(args)
    y = read_kspace(args.kspace)
    cfg = _with_data_size(cfg, y)
    coils = read_coils(args.coils)
    kf = read_fields(args.keyframes) if args.keyframes else None
    image = reconstruct(y, coils, cfg, kf)
    out = Path(args.output) if args.output else Path(cfg.out) / "recon.cfi"
    write_image(out, image)
    write_manifest(out.parent, "reconstruct", cfg,
                   {"kspace": args.kspace, "coils": args.coils, "keyframes": args.keyframes}, {"image": out})
    print(f"wrote {out}")
    return EXIT_OK


def evaluate(ref, test, cfg: PipelineConfig, y=None, coils=None, keyframes=None,
             ref_keyframes=None, est_keyframes=None, beta=0.0):
    res = None
    if y is not None and coils is not None:
        kf = identity_keyframes(y.schedule.shape) if keyframes is None else _model_keyframes(keyframes, y.schedule, cfg)
        res = residual(y, test, kf, coils, y.schedule, cfg.model())
    return quality_report(ref, test, res, est_keyframes, ref_keyframes, beta)


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ref = read_input_image(args.ref)
    test = read_input_image(args.test, ref.shape)
    y = read_kspace(args.kspace) if args.kspace else None
    coils = read_coils(args.coils) if args.coils else None
    if (y is None) != (coils is None):
        raise UsageError("--kspace and --coils must be given together")
    if (args.ref_keyframes is None) != (args.est_keyframes is None):
        raise UsageError("--ref-keyframes and --est-keyframes must be given together")
    kf = read_fields(args.keyframes) if args.keyframes else None
    ref_kf = read_fields(args.ref_keyframes) if args.ref_keyframes else None
    est_kf = read_fields(args.est_keyframes) if args.est_keyframes else None
    report = evaluate(ref, test, cfg, y, coils, kf, ref_kf, est_kf, args.beta)
    out = Path(args.output) if args.output else Path(cfg.out) / "report.json"
    atomic_write_text(out, report.to_text())
    write_manifest(out.parent, "evaluate", cfg,
                   {"ref": args.ref, "test": args.test, "kspace": args.kspace, "coils": args.coils,
                    "keyframes": args.keyframes, "ref_keyframes": args.ref_keyframes,
                    "est_keyframes": args.est_keyframes}, {"report": out})
    sys.stdout.write(report.to_text())
    return EXIT_OK


def load_renderable(path, index=0):
    arr = read_cfi(path)
    if np.iscomplexobj(arr):
        if arr.ndim != 2:
            raise FormatError(f"{path}: expected a 2D image, got shape {arr.shape}")
        return arr
    fields = read_fields(path)
    if not -len(fields) <= index < len(fields):
        raise UsageError(f"keyframe index {index} out of range for {len(fields)} fields")
    return fields[index]


def cmd_render(args) -> int:
    obj = load_renderable(args.input, args.index)
    try:
        image = render(obj, args.kind, args.window)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.output) if args.output else Path(args.input).with_suffix(f".{args.kind}.png")
    atomic_write_bytes(out, png_bytes(image))
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# demo


def run_demo(seed: int, out_dir, size=96, pe_fe_trials=20, pe_fe_size=32, log=print) -> bool:
    """Full pipeline on translation motion plus every acceptance check.

    Writes artifacts, PNGs and ``report.json`` / ``report.txt`` (no timing
    information, so reruns are byte-identical). Returns overall pass/fail.
    """
    from hmlab import acceptance as acc

    out = Path(out_dir)
    # artifacts are addressed relative to the demo root so reruns elsewhere match byte for byte
    cfg = PipelineConfig(size=size, motion="translation", registration="rigid", seed=seed, out=".")
    log(f"[demo] seed {seed}: simulate {size}x{size}")
    sim = simulate(cfg)
    sim_paths = save_simulation(sim, cfg, out / "sim")
    y, coils, sched = sim.data, sim.coils, sim.data.schedule
    truth_kf = list(sim.timeline.keyframes)

    runs = {}
    for kind in ("oracle", "identity"):
        log(f"[demo] estimate with {kind} corrector")
        c = Corrector("oracle", reference=sim.truth) if kind == "oracle" else Corrector("identity")
        runs[kind] = estimate_motion(y, coils, sched, c, cfg.estimate(), ref_keyframes=truth_kf)
        paths = save_estimate(runs[kind], cfg, out / f"estimate_{kind}", {})
        ecfg = dataclasses.replace(cfg, corrector=kind)
        write_manifest(out / f"estimate_{kind}", "estimate", ecfg,
                       {"kspace": sim_paths["kspace"], "coils": sim_paths["coils"],
                        "oracle": sim_paths["truth"] if kind == "oracle" else None,
                        "ref_keyframes": sim_paths["keyframes"]}, paths)

    log("[demo] reconstruct and evaluate")
    images = {
        "static": reconstruct(y, coils, cfg),
        "truth_keyframes": reconstruct(y, coils, cfg, truth_kf),
        "oracle_estimate": runs["oracle"].image_final,
        "identity_estimate": runs["identity"].image_final,
    }
    est_kf = {"oracle_estimate": runs["oracle"].keyframes_est, "identity_estimate": runs["identity"].keyframes_est}
    reports = {}
    recon_dir = out / "recon"
    for name, img in images.items():
        write_image(recon_dir / f"{name}.cfi", img)
        kf = est_kf.get(name, truth_kf if name == "truth_keyframes" else None)
        rep = evaluate(sim.truth, img, cfg, y, coils, kf, truth_kf if name in est_kf else None, est_kf.get(name))
        reports[name] = rep.to_dict()

    log("[demo] render")
    fig = out / "figures"
    pngs = {
        "truth.png": render(sim.truth, "magnitude"),
        "static.png": render(images["static"], "magnitude"),
        "oracle_estimate.png": render(images["oracle_estimate"], "magnitude"),
        "identity_estimate.png": render(images["identity_estimate"], "magnitude"),
        "truth_keyframe_last_color.png": render(truth_kf[-1], "field_color"),
        "oracle_keyframe_last_color.png": render(runs["oracle"].keyframes_est[-1], "field_color"),
        "truth_keyframe_last_quiver.png": render(truth_kf[-1], "field_quiver"),
        "oracle_keyframe_last_quiver.png": render(runs["oracle"].keyframes_est[-1], "field_quiver"),
    }
    for name, im in pngs.items():
        atomic_write_bytes(fig / name, png_bytes(im))

    log("[demo] acceptance checks")
    checks = acc.fast_checks()
    checks.append(acc.score_oracle_recovery(seed, sim.timeline, runs["oracle"]))
    checks.append(acc.check_mc_gain(seed))
    checks.append(acc.check_residual_blindness(seed))
    checks.append(acc.check_pe_fe(pe_fe_trials, pe_fe_size, seed0=1000 + 100 * seed))
    checks.sort(key=lambda c: c.criterion)
    for c in checks:
        log(c.line())
    passed = all(c.passed for c in checks)
    doc = {
        "seed": seed,
        "size": size,
        "passed": passed,
        "criteria": [c.to_dict() for c in checks],
        "quality": reports,
        "trace_loss": {k: [float(v) for v in r.trace.loss] for k, r in runs.items()},
    }
    atomic_write_text(out / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    lines = [("PASS " if c.passed else "FAIL ") + f"C{c.criterion} {c.name}: {c.value:.4g} vs {c.bound:.4g} ({c.detail})"
             for c in checks]
    atomic_write_text(out / "report.txt", "\n".join(lines) + "\n")
    return passed


def cmd_demo(args) -> int:
    seed = 0 if args.seed is None else args.seed
    out = args.out or f"demo_seed{seed}"
    ok = run_demo(seed, out, size=args.size or 96)
    print(f"demo seed {seed}: {'all criteria passed' if ok else 'some criteria FAILED'} -> {out}/report.txt")
    return EXIT_OK if ok else EXIT_NUMERICAL


# --------------------------------------------------------------------------
# argument parsing and dispatch


def _threads():
    raw = os.environ.get("HMLAB_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"HMLAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise UsageError("HMLAB_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON file with PipelineConfig fields; flags override it")
    for name, (flag, typ) in CONFIG_FLAGS.items():
        p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--complex-cg", action="store_true", help="complex-valued CG instead of real-valued")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmlab", description=__doc__.splitlines()[0])
    parser.add_argument("--batch", metavar="LIST",
                        help="JSON list of argument lists, each one command; run in parallel processes")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="simulate motion-corrupted HASTE data")
    _add_config_flags(p)
    p.add_argument("--input", help="input image (.cfi or gray .png) instead of the phantom")
    p.add_argument("--mask", help="cavity mask image (nonzero inside) for elastic motion")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate keyframe deformations")
    _add_config_flags(p)
    p.add_argument("--kspace", required=True)
    p.add_argument("--coils", required=True)
    p.add_argument("--oracle", help="reference image for the oracle corrector")
    p.add_argument("--external-prefix", help="file prefix for the external corrector")
    p.add_argument("--ref-keyframes", help="true keyframes; the trace then records the field loss")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("reconstruct", help="static or motion-compensated CG reconstruction")
    _add_config_flags(p)
    p.add_argument("--kspace", required=True)
    p.add_argument("--coils", required=True)
    p.add_argument("--keyframes", help="keyframe fields; omitted -> static reconstruction")
    p.add_argument("--output")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="quality report of a test image against a reference")
    _add_config_flags(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--kspace")
    p.add_argument("--coils")
    p.add_argument("--keyframes", help="fields used for the residual")
    p.add_argument("--ref-keyframes")
    p.add_argument("--est-keyframes")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="render an image or field file to PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--window", type=float, default=1.0)
    p.add_argument("--index", type=int, default=0, help="keyframe index for field files")
    p.add_argument("--output")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("demo", help="end-to-end run with acceptance report")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_demo)
    return parser


def _run_job(argv) -> int:
    return main(list(argv))


def run_batch(path) -> int:
    try:
        jobs = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read batch list {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"batch list {path} is not valid JSON: {exc}") from exc
    if not isinstance(jobs, list) or not all(isinstance(j, list) and all(isinstance(a, str) for a in j) for j in jobs):
        raise UsageError("batch list must be a JSON list of argument lists")
    if any(j and j[0] in ("--batch", "demo") for j in jobs):
        raise UsageError("batch jobs cannot nest --batch or run demo")
    workers = min(_threads(), max(1, len(jobs)))
    if workers == 1:
        codes = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            codes = list(pool.map(_run_job, jobs))
    for j, c in zip(jobs, codes):
        print(f"[batch] exit {c}: {' '.join(j)}")
    return max(codes, default=EXIT_OK)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.batch:
            if args.command:
                raise UsageError("--batch cannot be combined with a command")
            return run_batch(args.batch)
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except NumericalError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except (FormatError, ShapeError, OSError) as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    except ValueError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
