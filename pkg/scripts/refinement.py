"""Online alignment from perturbed starts against the Procrustes optimum,
plus a finite-difference check of the analytic gradient.

    python3 scripts/refinement.py --trials 100
"""
import argparse

from tuplevote.experiments import gradient_check, refinement_trials, write_csv
from tuplevote.refine import RefineConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--max-rot-deg", type=float, default=10.0)
    ap.add_argument("--max-trans", type=float, default=0.02, help="meters")
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/refinement.csv")
    args = ap.parse_args()
    cfg = RefineConfig(learning_rate=args.lr, iterations=args.iterations)
    rows = refinement_trials(args.trials, args.max_rot_deg, args.max_trans, seed=args.seed, cfg=cfg)
    write_csv(args.out, rows)
    ok = sum(r["rot_gap_deg"] <= 0.2 and r["trans_gap_mm"] <= 0.5 for r in rows)
    print(f"{ok}/{len(rows)} within 0.2 deg / 0.5 mm of Procrustes; "
          f"worst {max(r['rot_gap_deg'] for r in rows):.3e} deg, {max(r['trans_gap_mm'] for r in rows):.3e} mm")
    print(f"gradient check, worst relative error: {gradient_check(seed=args.seed):.2e}")


if __name__ == "__main__":
    main()
