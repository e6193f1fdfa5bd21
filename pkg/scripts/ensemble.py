"""Two-model ensemble (clean vs noisy oracle) selected by refined loss.

    python3 scripts/ensemble.py --trials 100 --high-sigma 0.3
"""
import argparse

from tuplevote.experiments import ensemble_trials, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--high-sigma", type=float, default=0.3)
    ap.add_argument("--mesh", default="lshape")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/ensemble.csv")
    args = ap.parse_args()
    rows = ensemble_trials(args.trials, args.high_sigma, args.mesh, args.seed)
    write_csv(args.out, rows)
    print(f"lower-loss model chosen {sum(r['chose_lower'] for r in rows)}/{len(rows)}, "
          f"clean model chosen {sum(r['chose_clean'] for r in rows)}/{len(rows)}")


if __name__ == "__main__":
    main()
