#!/usr/bin/env python3
"""Letters robustness experiment: adversarially trained feedback policies on
a simulated 2D unit mass vs GMR+LQT and basis-weight+LQT baselines, evaluated
under deterministic, force-noise, and initial-position-noise regimes."""
import argparse

from gamp.experiments import LettersConfig, run_letters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/letters")
    ap.add_argument("--letters", nargs="+", default=list(LettersConfig().letters))
    ap.add_argument("--iterations", type=int, default=LettersConfig().iterations)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = LettersConfig(letters=tuple(args.letters), iterations=args.iterations)
    report = run_letters(cfg, seed=args.seed, out_dir=args.out,
                         threads=args.threads)
    for key in sorted(report.summary):
        print(f"{key}: {report.summary[key]:.4f}")
    print(f"done in {report.runtime_s:.1f} s -> {args.out}")


if __name__ == "__main__":
    main()
