"""Linear response of one registration pass to keyframe errors.

Around the true keyframes of a translation run, each keyframe is offset by
``h`` pixels in x or y; the resulting change of every fraction's mean
update, divided by ``-h``, gives a 2K x 2K response matrix G (x block then
y block). A stable pass has the spectral radius of ``I - r G`` below 1 for
relaxation ``r``. Large off-diagonal entries in the y block show that
phase-encode updates respond to the error slope between neighbouring
keyframes, not only to a keyframe's own error.

    python scripts/response_matrix.py --seed 1 --size 96
"""

import argparse
import dataclasses

import numpy as np

from hmlab.acceptance import translation_motion
from hmlab.estimate import EstimateConfig, RegistrationConfig, register_pair
from hmlab.forward import ApproxOperator, forward_exact
from hmlab.motion_sim import make_phantom, sim_coils
from hmlab.recon import recon_partial
from hmlab.sampling import haste_schedule, partition
from hmlab.warp import DeformationField, DeformationTimeline, keyframe_resample


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--step", type=float, default=0.25)
    ap.add_argument("--patch", type=int, default=None, help="override the model patch size")
    args = ap.parse_args()

    n = args.size
    s = make_phantom("shepp_logan", (n, n))
    sched = haste_schedule(n)
    coils = sim_coils(4, (n, n))
    tl = translation_motion(args.seed, n)
    y = forward_exact(s, tl, coils, sched)
    cfg = EstimateConfig(registration=RegistrationConfig("rigid"))
    if args.patch is not None:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, patch=args.patch))
    k = cfg.n_fractions
    fixed = [recon_partial(p, coils) for p in partition(y, k)]

    def updates(frames):
        model = keyframe_resample(DeformationTimeline(tuple(frames), sched.total_time), cfg.model.eta,
                                  cfg.model.clamp)
        y_sim = ApproxOperator(model, coils, sched, cfg.model).forward(s)
        moving = [recon_partial(p, coils) for p in partition(y_sim, k)]
        return np.array([register_pair(f, m, cfg.registration).mean_shift() for f, m in zip(fixed, moving)])

    truth = list(tl.keyframes)
    base = updates(truth)
    print("updates at the truth (px), max |dx|, |dy|:", np.abs(base).max(axis=0).round(4))
    g = np.zeros((2 * k, 2 * k))
    for j in range(k):
        for c, d in enumerate([(args.step, 0.0), (0.0, args.step)]):
            frames = list(truth)
            frames[j] = frames[j] + DeformationField.constant((n, n), *d)
            diff = (updates(frames) - base) / -args.step
            g[:k, c * k + j] = diff[:, 0]
            g[k:, c * k + j] = diff[:, 1]
    np.set_printoptions(precision=2, suppress=True, linewidth=200)
    print("G =")
    print(g)
    for r in (1.0, cfg.relaxation):
        rho = np.abs(np.linalg.eigvals(np.eye(2 * k) - r * g)).max()
        print(f"spectral radius of I - {r} G: {rho:.3f}")


if __name__ == "__main__":
    main()
