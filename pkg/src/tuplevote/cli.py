"""Command line entry point: gen, train, infer, eval, bench, config.

Exit codes:
  0   success
  1   invalid configuration or input directory
  2   unreadable mesh (message names the path)
  3   training produced a non-finite loss
  4   feature dimension does not match the checkpoint
  5   prediction ids do not match ground-truth ids (orphans listed)
  64  command line usage error
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import config as config_mod
from .config import BUILTIN_PREFIX, RunConfig
from .dataset import TupleSource
from .experiments import MESH_SCALES, symmetry_of
from .geometry import Pose9D
from .meshes import SYMMETRIC_CATEGORIES, builtin_mesh, canonicalize, sample_surface
from .meshio import MeshReadError, read_mesh, read_pose
from .metrics import pose_error, score_sample, summarize
from .pipeline import estimate_pose, estimate_pose_ensemble
from .predictor import (
    DimensionMismatch,
    OraclePredictor,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .scene import (
    EmptyViewError,
    NoiseConfig,
    corrupt,
    load_cloud,
    load_sample,
    random_pose,
    sample_view,
    save_sample,
)

log = logging.getLogger("tuplevote")

EXIT_CONFIG = 1
EXIT_MESH = 2
EXIT_NAN = 3
EXIT_DIM = 4
EXIT_IDS = 5
EXIT_USAGE = 64

WORKERS_ENV = "TUPLEVOTE_WORKERS"
MODEL_POINTS = 1000

POSE_COLUMNS = [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz", "sx", "sy", "sz"]
PRED_COLUMNS = ["id", "status", "reason", *POSE_COLUMNS, "ambiguous", "final_loss", "chosen_model"]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _load_config(args) -> RunConfig:
    try:
        cfg = config_mod.load(args.config) if args.config else RunConfig()
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load config: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


# -- gen ---------------------------------------------------------------------


def _resolve_mesh(spec: str):
    """``(name, canonical mesh, half-extents)`` for a path or builtin name."""
    if spec.startswith(BUILTIN_PREFIX):
        name = spec[len(BUILTIN_PREFIX):]
        try:
            return name, builtin_mesh(name), None
        except KeyError as exc:
            raise MeshReadError(f"{spec}: {exc}") from exc
    mesh = read_mesh(spec)
    try:
        canon, half = canonicalize(mesh)
    except ValueError as exc:
        raise MeshReadError(f"{spec}: {exc}") from exc
    return Path(spec).stem, canon, half


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    if args.views is not None:
        cfg = replace(cfg, views=args.views)
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    timing = {"render": 0.0, "write": 0.0}
    failed = []
    rows = []
    for m_index, spec in enumerate(cfg.meshes):
        try:
            name, mesh, half = _resolve_mesh(spec)
        except MeshReadError as exc:
            print(f"error: cannot read mesh {spec}: {exc}", file=sys.stderr)
            failed.append(spec)
            continue
        scale = np.asarray(cfg.scale if cfg.scale else half, float)
        rng = np.random.default_rng([cfg.seed, m_index])
        model_pts = sample_surface(mesh, MODEL_POINTS, rng)
        np.savetxt(out / f"{name}.model.txt", model_pts, fmt="%.17g")
        for v in range(cfg.views):
            sid = f"{name}_{v:04d}"
            t0 = time.perf_counter()
            while True:
                pose = random_pose(rng, scale, mode=cfg.pose_mode)
                try:
                    sample = sample_view(mesh, pose)
                    break
                except EmptyViewError:
                    continue
            sample = corrupt(sample, cfg.noise, seed=int(rng.integers(2**31)))
            t1 = time.perf_counter()
            save_sample(out, sid, sample)
            timing["write"] += time.perf_counter() - t1
            timing["render"] += t1 - t0
            rows.append({"id": sid, "mesh": name, "symmetry": SYMMETRIC_CATEGORIES.get(name, ""),
                         "ply": f"{sid}.ply", "pose": f"{sid}.pose.txt", "model": f"{name}.model.txt"})
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["id", "mesh", "symmetry", "ply", "pose", "model"])
        w.writeheader()
        w.writerows(rows)
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config": config_mod.dumps(cfg),
        "versions": _versions(),
        "timing_seconds": timing,
        "checksums": {p.name: _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} samples to {out}")
    return EXIT_MESH if failed else 0


# -- dataset helpers ----------------------------------------------------------


def _read_index(directory: Path) -> list[dict]:
    index = directory / "samples.csv"
    if not index.is_file():
        raise CliError(EXIT_CONFIG, f"{directory}: no samples.csv (run 'gen' first)")
    with open(index, newline="") as fh:
        return list(csv.DictReader(fh))


def _scene_list(paths: list[str]) -> list[tuple[str, Path]]:
    """``(id, ply path)`` for dataset directories or individual PLY files."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += [(r["id"], p / r["ply"]) for r in _read_index(p)]
        else:
            out.append((p.name[:-4] if p.name.endswith(".ply") else p.stem, p))
    return out


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    pcfg = cfg.predictor if args.epochs is None else replace(cfg.predictor, epochs=args.epochs)
    data = Path(args.data)
    samples = [load_sample(data, r["id"]) for r in _read_index(data)]
    if not samples:
        raise CliError(EXIT_CONFIG, f"{data}: dataset is empty")
    source = TupleSource(samples, cfg.tuples_per_view, cfg.pipeline(), cfg.seed)
    model = None
    if args.resume:
        model = load_checkpoint(args.resume, pcfg)
    start = len(model.history) if model else 0

    def report(epoch, loss):
        print(f"epoch {epoch} loss {loss:.6f}", flush=True)

    try:
        model = train(source, pcfg, model=model, on_epoch=report)
    except DimensionMismatch as exc:
        raise CliError(EXIT_DIM, f"dimension mismatch: {exc}") from exc
    except TrainingDiverged as exc:
        raise CliError(EXIT_NAN, f"training aborted: {exc}") from exc
    out = Path(args.out)
    save_checkpoint(out, model)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    with open(loss_csv, "w") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(model.history):
            fh.write(f"{e},{v!r}\n")
    print(f"trained epochs {start}..{model.epoch - 1}; checkpoint {out}")
    return 0


# -- infer ---------------------------------------------------------------------


def _failure_row(sid: str, reason: str) -> dict:
    row = {k: "" for k in PRED_COLUMNS}
    row.update(id=sid, status="failed", reason=reason)
    return row


def _pose_row(sid: str, pose: Pose9D, ambiguous: bool, loss: float, chosen) -> dict:
    vals = [*pose.rotation.ravel(), *pose.translation, *pose.scale]
    row = {"id": sid, "status": "ok", "reason": ""}
    row.update({k: repr(float(v)) for k, v in zip(POSE_COLUMNS, vals)})
    row.update(ambiguous=int(ambiguous), final_loss=repr(float(loss)),
               chosen_model="" if chosen is None else chosen)
    return row


def _infer_one(sid: str, ply: Path, cfg: RunConfig, models, oracle: bool, workers: int) -> dict:
    pcfg = cfg.pipeline(workers)
    try:
        cloud, cols = load_cloud(ply)
    except EmptyViewError:
        return _failure_row(sid, "empty view")
    except (MeshReadError, OSError, ValueError) as exc:
        return _failure_row(sid, f"unreadable scene: {exc}")
    if len(cloud) < cfg.tuple_size:
        return _failure_row(sid, f"fewer than {cfg.tuple_size} points")
    if oracle:
        pose_path = ply.with_name(ply.name[:-4] + ".pose.txt")
        if "cx" not in cols or not pose_path.is_file():
            return _failure_row(sid, "oracle needs canonical columns and a pose sidecar")
        canonical = np.stack([cols["cx"], cols["cy"], cols["cz"]], axis=1)
        models = [OraclePredictor(canonical, read_pose(pose_path).scale, cfg.oracle, seed=cfg.seed)]
    try:
        if len(models) == 1:
            est = estimate_pose(cloud, models[0], pcfg)
            return _pose_row(sid, est.pose, est.ambiguous, est.final_loss, None)
        chosen, ests = estimate_pose_ensemble(cloud, models, pcfg)
    except DimensionMismatch:
        raise
    except ValueError as exc:
        return _failure_row(sid, str(exc))
    e = ests[chosen]
    return _pose_row(sid, e.pose, e.ambiguous, e.final_loss, chosen)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    workers = _workers(args)
    oracle = args.predictor == "oracle"
    models = []
    if not oracle:
        paths = args.ensemble or ([args.checkpoint] if args.checkpoint else [])
        if not paths:
            raise CliError(EXIT_USAGE, "infer needs --predictor oracle, --checkpoint or --ensemble")
        try:
            models = [load_checkpoint(p, cfg.predictor) for p in paths]
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot load checkpoint: {exc}") from exc
    scenes = _scene_list(args.scenes)
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda s: _infer_one(s[0], s[1], cfg, models, oracle, workers), scenes))
    except DimensionMismatch as exc:
        raise CliError(EXIT_DIM, f"dimension mismatch: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, PRED_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {len(rows)} predictions to {out} ({failed} failed)")
    return 0


# -- eval ----------------------------------------------------------------------


def _read_predictions(path: Path) -> dict[str, Pose9D | None]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        if r["status"] != "ok":
            out[r["id"]] = None
            continue
        v = np.array([float(r[k]) for k in POSE_COLUMNS])
        out[r["id"]] = Pose9D(v[:9].reshape(3, 3), v[9:12], v[12:15])
    return out


def cmd_eval(args) -> int:
    gt_dir = Path(args.gt)
    index = _read_index(gt_dir)
    preds = _read_predictions(Path(args.pred))
    orphans = sorted(set(preds) - {r["id"] for r in index})
    if orphans:
        raise CliError(EXIT_IDS, "prediction ids without ground truth: " + ", ".join(orphans))
    models = {}
    scores = []
    for r in index:
        if r["model"] not in models:
            models[r["model"]] = np.loadtxt(gt_dir / r["model"], ndmin=2)
        gt = read_pose(gt_dir / r["pose"])
        scores.append(score_sample(r["id"], preds.get(r["id"]), gt, models[r["model"]],
                                   r["symmetry"] or None, args.iou_samples))
    report = summarize(scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.table())
    report.scores_csv(out / "scores.csv")
    report.curves_csv(out / "curves.csv")
    print(report.table(), end="")
    return 0


# -- bench ---------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    workers = _workers(args)
    pcfg = cfg.pipeline(workers)
    names = [m[len(BUILTIN_PREFIX):] for m in cfg.meshes if m.startswith(BUILTIN_PREFIX)] or ["lshape"]
    header = ["coord_noise_sigma", "clutter_fraction", "median_rot_deg", "median_trans_cm",
              "acc_5deg_2cm", "discarded_clutter_share"]
    table = []
    for sigma in args.sigmas:
        for clutter in args.clutters:
            def run(i):
                name = names[i % len(names)]
                rng = np.random.default_rng([cfg.seed, i])
                while True:
                    try:
                        s = sample_view(builtin_mesh(name), random_pose(rng, MESH_SCALES[name], mode=cfg.pose_mode))
                        break
                    except EmptyViewError:
                        continue
                s = corrupt(s, NoiseConfig(clutter_fraction=clutter), seed=int(rng.integers(2**31)))
                orc = OraclePredictor.for_sample(s, replace(cfg.oracle, coord_noise_sigma=sigma), seed=i)
                est = estimate_pose(s.cloud, orc, replace(pcfg, seed=cfg.seed + i, workers=1))
                err = pose_error(est.pose, s.gt_pose, symmetry_of(name))
                v = est.votes
                dropped = ~v.kept
                noisy = s.noise_mask[v.idx1] | s.noise_mask[v.idx2]
                return err.rot_deg, err.trans_cm, int(dropped.sum()), int((dropped & noisy).sum())

            with ThreadPoolExecutor(max_workers=workers) as pool:
                res = np.array(list(pool.map(run, range(args.views))), float)
            share = res[:, 3].sum() / res[:, 2].sum() if res[:, 2].sum() else float("nan")
            table.append([sigma, clutter, np.median(res[:, 0]), np.median(res[:, 1]),
                          np.mean((res[:, 0] <= 5) & (res[:, 1] <= 2)), share])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(f"{x:.6g}" for x in row) + "\n")
    print(" ".join(f"{h:>14}" for h in header))
    for row in table:
        print(" ".join(f"{x:>14.4g}" for x in row))
    return 0


# -- config --------------------------------------------------------------------


def cmd_config(args) -> int:
    cfg = _load_config(args)
    if args.dump:
        print(config_mod.dumps(cfg), end="")
    else:
        missing = cfg.missing_files()
        if missing:
            raise CliError(EXIT_CONFIG, "missing mesh files: " + ", ".join(missing))
        print("config ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tuplevote", description="Tuple-based pose voting on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, workers=False):
        sp.add_argument("--config", help="config file (see 'config --dump')")
        sp.add_argument("--seed", type=int)
        if workers:
            sp.add_argument("--workers", type=int, help=f"parallel scenes (env {WORKERS_ENV})")

    g = sub.add_parser("gen", help="render synthetic scenes")
    common(g)
    g.add_argument("--out")
    g.add_argument("--views", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the MLP predictor")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume")
    t.add_argument("--loss-csv")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="estimate poses")
    common(i, workers=True)
    i.add_argument("scenes", nargs="+", help="dataset directories or PLY files")
    i.add_argument("--out", required=True)
    i.add_argument("--predictor", choices=["oracle", "mlp"], default="mlp")
    i.add_argument("--checkpoint")
    i.add_argument("--ensemble", nargs="+")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--iou-samples", type=int, default=100_000)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="oracle corruption sweep")
    common(b, workers=True)
    b.add_argument("--out", required=True)
    b.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.02, 0.05])
    b.add_argument("--clutters", type=float, nargs="+", default=[0.0, 0.3])
    b.add_argument("--views", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("config", help="print or check a config")
    c.add_argument("--config")
    c.add_argument("--dump", action="store_true")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
