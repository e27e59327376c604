"""Recovery error for shifts along the phase-encode (y) against the
frequency-encode (x) direction, paired trials.

    python scripts/pe_fe_study.py --trials 20 --size 48
"""

import argparse

import numpy as np

from hmlab.acceptance import check_pe_fe


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--seed0", type=int, default=500)
    args = ap.parse_args()

    chk = check_pe_fe(args.trials, args.size, args.seed0)
    fe, pe = np.array(chk.extra["fe"]), np.array(chk.extra["pe"])
    print("trial   FE px    PE px")
    for j, (a, b) in enumerate(zip(fe, pe)):
        print(f"{args.seed0 + j:5d}  {a:7.4f}  {b:7.4f}")
    print(f"PE worse in {np.sum(pe > fe)}/{len(fe)} trials")
    print(chk.line())


if __name__ == "__main__":
    main()
