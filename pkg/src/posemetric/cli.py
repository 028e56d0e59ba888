"""Command-line entry point: ``posemetric <subcommand> ...``.

Every subcommand takes an optional ``--config`` JSON file holding a run
configuration (``data``, ``train`` and ``eval`` sections); missing sections
fall back to the pinned desk-scale setup.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from posemetric.config import LOSS_VARIANTS, RunConfig, config_hash, desk_run_config, load_run_config, to_dict
from posemetric.dataset import DESIGN_STEPS, ReferenceSetDesign, generate_dataset, load_jsonl, reference_arrays, save_jsonl
from posemetric.encoder import load_checkpoint, save_checkpoint
from posemetric.evaluation import (
    GRID_AXES,
    ExperimentError,
    ExperimentGrid,
    ExperimentResult,
    evaluate,
    report_dicts,
    run_experiment,
)
from posemetric.retrieval import BACKENDS, benchmark, build_index, load_index, query_many, save_index
from posemetric.training import TrainingDiverged, train

log = logging.getLogger("posemetric")

DESIGNS = ("TrainDB",) + tuple(DESIGN_STEPS)
FLOAT_AXES = ("s_occ", "beta_train", "beta_test")


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else desk_run_config()
    if getattr(args, "epochs", None):
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    return cfg


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# ---------------------------------------------------------------- subcommands


def cmd_generate_data(args) -> int:
    cfg = _config(args).data
    seed = cfg.seed if args.seed is None else args.seed
    n = cfg.n_samples if args.n is None else args.n
    samples = generate_dataset(
        seed, n, cfg.categories, cfg.subcategory_mix, noise_sigma=cfg.noise_sigma,
        feature_dim=cfg.feature_dim, pose_prior=cfg.pose_prior, shared_maps=cfg.shared_maps,
        first_id=args.first_id,
    )
    save_jsonl(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = load_jsonl(args.data)
    t0 = time.perf_counter()
    res = train(samples, cfg.train, callback=lambda e, loss: log.debug("epoch %d loss %.5f", e, loss))
    digest = save_checkpoint(
        args.out, res.encoders, cfg.train.seed, config_hash(cfg.train),
        extra={"train_config": to_dict(cfg.train), "history": res.history},
    )
    _dump({
        "checkpoint": str(args.out), "sha256": digest, "epochs": len(res.history),
        "initial_loss": res.history[0], "final_loss": res.history[-1],
        "seconds": time.perf_counter() - t0,
    })
    return 0


def cmd_build_index(args) -> int:
    pair, header = load_checkpoint(args.checkpoint)
    design = ReferenceSetDesign(args.design)
    train_set = load_jsonl(args.data) if args.data else None
    refs = reference_arrays(design, train_set, feature_dim=pair.render.input_dim)
    index = build_index(refs, pair.render, args.backend, header["sha256"], {"design": args.design})
    digest = save_index(index, args.out)
    _dump({"index": str(args.out), "sha256": digest, "count": len(index), "dim": index.dim, "design": args.design})
    return 0


def _checked_index(args, header):
    index = load_index(args.index, args.backend)
    if index.encoder_hash and index.encoder_hash != header["sha256"]:
        raise ValueError("index was built with a different checkpoint")
    return index


def cmd_query(args) -> int:
    pair, header = load_checkpoint(args.checkpoint)
    index = _checked_index(args, header)
    samples = load_jsonl(args.data)
    angles, dist, ids = query_many(index, np.stack([s.camera_feat for s in samples]), pair.camera)
    lines = [
        json.dumps({
            "id": s.id, "azimuth": a[0], "elevation": a[1], "inplane": a[2],
            "distance": float(d), "source_id": int(i),
        })
        for s, a, d, i in zip(samples, angles.tolist(), dist, ids)
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args).eval
    pair, header = load_checkpoint(args.checkpoint)
    index = _checked_index(args, header)
    test = load_jsonl(args.data)
    levels = tuple(args.levels or cfg.levels)
    betas = tuple(args.beta_tests or cfg.beta_tests)
    report = evaluate(pair, index, test, levels, betas, cfg.seed)
    design = index.meta.get("design", "TrainDB")
    result = ExperimentResult(ExperimentGrid("reference_design", [design]))
    result.rows = report_dicts(report, "reference_design", design, design)
    paths = result.write(args.out, figures=not args.no_figures)
    _dump({k: str(v) for k, v in paths.items()})
    return 0


def _parse_values(axis: str, raw: list[str]):
    if axis in FLOAT_AXES:
        return [float(v) for v in raw]
    allowed = LOSS_VARIANTS if axis == "loss_variant" else DESIGNS
    bad = [v for v in raw if v not in allowed]
    if bad:
        raise ValueError(f"invalid {axis} values {bad}; choose from {list(allowed)}")
    return raw


def _run_grid(cfg: RunConfig, axis: str, values, out, figures: bool) -> dict:
    result = run_experiment(ExperimentGrid(axis, values), cfg.train, cfg.data, cfg.eval, progress=log.info)
    return {k: str(v) for k, v in result.write(out, figures=figures).items()}


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.levels:
        cfg.eval = dataclasses.replace(cfg.eval, levels=tuple(args.levels))
    if args.beta_tests:
        cfg.eval = dataclasses.replace(cfg.eval, beta_tests=tuple(args.beta_tests))
    _dump(_run_grid(cfg, args.axis, _parse_values(args.axis, args.values), args.out, not args.no_figures))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = {}
    if args.what in ("loss", "all"):
        out["loss_variant"] = _run_grid(cfg, "loss_variant", list(args.variants), args.out, not args.no_figures)
    if args.what in ("reference", "all"):
        out["reference_design"] = _run_grid(cfg, "reference_design", list(args.designs), args.out, not args.no_figures)
    _dump(out)
    return 0


def cmd_bench(args) -> int:
    pair, header = load_checkpoint(args.checkpoint)
    index = _checked_index(args, header)
    queries = [s.camera_feat for s in load_jsonl(args.data)[: args.n_queries]]
    report = benchmark(index, queries, pair.camera, args.repetitions)
    summary = dict(report.summary(), backend=index.backend, index_rows=len(index))
    _dump(summary, args.out)
    if args.out:
        print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posemetric", description="Pose retrieval with a pose-aware contrastive metric.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-epoch loss")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", type=Path, help="run configuration JSON (default: pinned desk setup)")
        p.set_defaults(func=func)
        return p

    p = add("generate-data", cmd_generate_data, "write a synthetic dataset as JSON Lines")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, help="number of samples (default: data.n_samples)")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.add_argument("--first-id", type=int, default=0)

    p = add("train", cmd_train, "train an encoder pair and write a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, help="override train.epochs")

    p = add("build-index", cmd_build_index, "embed a reference set into an index file", config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, help="training set JSONL (required for TrainDB)")
    p.add_argument("--design", choices=DESIGNS, default="TrainDB")
    p.add_argument("--backend", choices=BACKENDS, default="kdtree")

    def add_index_args(p):
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--index", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True, help="query samples JSONL")
        p.add_argument("--backend", choices=BACKENDS, help="override the stored backend")

    p = add("query", cmd_query, "predict poses for query samples", config=False)
    add_index_args(p)
    p.add_argument("--out", type=Path, help="predictions JSONL (default: stdout)")

    def add_eval_args(p):
        p.add_argument("--levels", nargs="+", choices=("L0", "L1", "L2", "L3"))
        p.add_argument("--beta-tests", nargs="+", type=float)
        p.add_argument("--no-figures", action="store_true")

    p = add("eval", cmd_eval, "evaluate a checkpoint/index on held-out samples")
    add_index_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    add_eval_args(p)

    p = add("sweep", cmd_sweep, "train/evaluate over one experiment axis")
    p.add_argument("--axis", choices=GRID_AXES, required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    add_eval_args(p)

    p = add("ablate", cmd_ablate, "loss-variant and reference-set ablations")
    p.add_argument("--what", choices=("loss", "reference", "all"), default="all")
    p.add_argument("--variants", nargs="+", choices=LOSS_VARIANTS, default=list(LOSS_VARIANTS))
    p.add_argument("--designs", nargs="+", choices=DESIGNS, default=list(DESIGNS))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-figures", action="store_true")

    p = add("bench", cmd_bench, "per-query embed/search latency", config=False)
    add_index_args(p)
    p.add_argument("--repetitions", type=int, default=1000)
    p.add_argument("--n-queries", type=int, default=10)
    p.add_argument("--out", type=Path, help="write the JSON summary here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, ExperimentError, TrainingDiverged) as exc:
        print(f"posemetric {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
