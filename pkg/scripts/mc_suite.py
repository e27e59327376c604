"""Motion-compensated gain and residual blindness on the rigid phantom suite.

For each seed: PSNR of the static reconstruction against CG with the true
keyframes (4 coils), and the static residual and PSNR with and without
motion (single coil). Options vary the model and CG setup.

    python scripts/mc_suite.py --seeds 0 1 2 3 4
    python scripts/mc_suite.py --interpolator bilinear --complex-cg
"""

import argparse

import hmlab.acceptance as acc
from hmlab.forward import ApproxModelConfig
from hmlab.recon import ReconConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--cg", type=int, default=5)
    ap.add_argument("--interpolator", default="sinc_patch", choices=["bilinear", "sinc_patch"])
    ap.add_argument("--complex-cg", action="store_true")
    args = ap.parse_args()

    acc.SUITE_MODEL = ApproxModelConfig(2, args.interpolator)
    acc.SUITE_RECON = ReconConfig(n_cg=args.cg, model=acc.SUITE_MODEL, real_valued=not args.complex_cg)
    for seed in args.seeds:
        print(acc.check_mc_gain(seed, args.size).line())
        print(acc.check_residual_blindness(seed, args.size).line())


if __name__ == "__main__":
    main()
