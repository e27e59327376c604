"""Error of the keyframe-blended forward model against the exact per-line
model as the number of keyframes per fraction grows.

    python scripts/eta_order.py --size 64 --etas 1 2 4 8
"""

import argparse

import numpy as np

from hmlab.forward import ApproxModelConfig, forward_approx, forward_exact
from hmlab.motion_sim import make_phantom, sim_coils
from hmlab.sampling import haste_schedule
from hmlab.warp import DeformationField, DeformationTimeline, keyframe_resample


def sine_timeline(shape, n_keyframes=4, amplitude=1.5):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    frames = []
    for t in (np.arange(n_keyframes) + 0.5) / n_keyframes:
        a = amplitude * np.sin(2 * np.pi * t)
        frames.append(DeformationField(a * np.cos(2 * np.pi * yy / h), 0.5 * a * np.sin(2 * np.pi * xx / w)))
    return DeformationTimeline(tuple(frames))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--etas", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--patch", type=int, default=7)
    args = ap.parse_args()

    shape = (args.size, args.size)
    img = make_phantom("shepp_logan", shape)
    coils = sim_coils(2, shape)
    sched = haste_schedule(shape)
    tl = sine_timeline(shape)
    for interp in ("bilinear", "sinc_patch"):
        exact = forward_exact(img, tl, coils, sched, interp, patch=args.patch)
        errs = []
        for eta in args.etas:
            frames = keyframe_resample(tl, eta)
            approx = forward_approx(img, frames, coils, sched, ApproxModelConfig(eta, interp, args.patch))
            errs.append(np.linalg.norm(approx.lines - exact.lines) / np.linalg.norm(exact.lines))
        ratios = [b / a for a, b in zip(errs, errs[1:])]
        print(f"{interp:10s} errors " + " ".join(f"{e:.3e}" for e in errs))
        print(f"{'':10s} ratios " + " ".join(f"{r:.3f}" for r in ratios))


if __name__ == "__main__":
    main()
