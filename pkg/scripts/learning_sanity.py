"""Train the MLP predictor on one asymmetric mesh and compare trained,
untrained and oracle pipelines on held-out views.

    python3 scripts/learning_sanity.py --train-views 2000 --checkpoint results/ls.ckpt

An existing checkpoint is evaluated without retraining.
"""
import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from tuplevote.experiments import learning_sanity
from tuplevote.predictor import PredictorConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-views", type=int, default=2000)
    ap.add_argument("--test-views", type=int, default=20)
    ap.add_argument("--tuples-per-view", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--mesh", default="lshape")
    ap.add_argument("--pose-mode", default="tabletop", choices=["free", "tabletop"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checkpoint")
    ap.add_argument("--out", default="results/learning_sanity.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    start = time.perf_counter()

    def progress(epoch, loss):
        print(f"epoch {epoch:3d} loss {loss:.5f} ({time.perf_counter() - start:.0f} s)", flush=True)

    res = learning_sanity(args.train_views, args.test_views, args.tuples_per_view,
                          replace(PredictorConfig(), epochs=args.epochs), args.mesh, args.pose_mode,
                          args.seed, args.checkpoint, on_epoch=progress)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump(res, fh, indent=2)
    m = res["median"]
    print(f"median rot error: trained {m['trained']:.2f} deg, untrained {m['untrained']:.2f} deg, "
          f"oracle {m['oracle']:.2f} deg; worst epoch loss ratio {res['max_regression']:.3f}")


if __name__ == "__main__":
    main()
