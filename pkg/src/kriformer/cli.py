"""Command-line entry point.

Exit codes: 0 success, 1 usage or parameter error, 2 data error, 3 numeric or training error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, default_seed, load_config, parse_config
from .data import generate_synthetic, load_bundle, load_distances_csv, load_speeds_csv, rows_to_csv, \
    save_distances_csv, save_speeds_csv, write_text_atomic
from .errors import DataError, KriformerError, NumericError, ParameterError
from .evaluation import (SCENARIOS, ablation_csv, ablation_suite, evaluate_sm, knn_predictor,
                         mask_ratio_sweep, mean_predictor, seed_means, sweep_csv, write_reports)
from .graph import SensorGraph, default_k, graph_features
from .model import ABLATIONS, gradcheck_tiny, load_checkpoint, save_checkpoint
from .pipeline import bundle_from_source, load_data, train_model
from .training import krige

log = logging.getLogger("kriformer")

GRADCHECK_TOLERANCE = 1e-5


class UsageError(ParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(text: str) -> list[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError("expected a comma-separated list")
    return items


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in _csv_list(text)]
    except ValueError:
        raise UsageError(f"not a list of numbers: {text!r}") from None


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if getattr(args, "synthetic", False):
        cfg = cfg.with_synthetic()
    raw = cfg.model_dump()
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        raw["training"]["epochs"] = args.epochs
    return parse_config(raw)


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.output.dir


def _progress(epoch, history):
    log.info("epoch %d  loss %.6f", epoch, history[-1])


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _run_config(args)
    bundle = load_data(cfg)
    model, history = train_model(cfg, bundle, callback=_progress)
    out = _out_dir(args, cfg)
    save_checkpoint(model, out / "model.ckpt")
    per_epoch = -(-len(history) // cfg.training.epochs)
    rows = [[i + 1, i // per_epoch + 1, repr(v)] for i, v in enumerate(history)]
    write_text_atomic(out / "loss.csv", rows_to_csv(["iteration", "epoch", "loss"], rows))
    print(f"trained {model.n_parameters()} parameters for {len(history)} iterations; "
          f"final loss {history[-1]:.6f}; wrote {out / 'model.ckpt'}")
    return 0


def cmd_krige(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ids, stamps, speeds, missing = load_speeds_csv(args.speeds, args.missing_sentinel)
    if tuple(ids) != model.node_ids:
        raise DataError("speeds header node ids do not match the checkpoint's node order")
    _, dist = load_distances_csv(args.distances, ids)
    if SensorGraph(tuple(ids), dist).fingerprint() != model.graph_fingerprint:
        log.warning("distances differ from the graph the model was trained on")
    targets = _csv_list(args.unobserved)
    index = {nid: i for i, nid in enumerate(ids)}
    unknown = [t for t in targets if t not in index]
    if unknown:
        raise DataError(f"unobserved ids not in the speeds header: {', '.join(unknown)}")
    if len(set(targets)) != len(targets):
        raise ParameterError("duplicate ids in --unobserved")
    cols = [index[t] for t in targets]
    pred = krige(model, speeds, cols, missing | np.isin(np.arange(len(ids)), cols)[None, :, None])
    rows = [[ts, nid, repr(float(pred[t, c, 0]))] for t, ts in enumerate(stamps)
            for nid, c in zip(targets, cols)]
    text = rows_to_csv(["timestamp", "node", "value"], rows)
    if args.out:
        write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenario = args.scenario.lower()
    if scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    if args.speeds or args.distances:
        if not (args.speeds and args.distances):
            raise UsageError("--speeds and --distances must be given together")
        bundle = load_bundle(args.speeds, args.distances, args.missing_sentinel)
    else:
        bundle = bundle_from_source(model.meta.get("source", {}))
    if bundle.node_ids != model.node_ids:
        raise DataError("dataset node ids do not match the checkpoint")
    if args.seeds:
        try:
            seeds = [int(s) for s in _csv_list(args.seeds)]
        except ValueError:
            raise UsageError(f"--seeds expects integers: {args.seeds!r}") from None
    else:
        seeds = [default_seed() if args.seed is None else args.seed]
    fraction = model.meta.get("train_fraction", 0.7)
    predictors = [model]
    if not args.no_baselines:
        predictors += [knn_predictor(bundle.graph, args.knn_k), mean_predictor()]
    reports = []
    for seed in seeds:
        for pred in predictors:
            r = evaluate_sm(pred, bundle, scenario, seed, fraction)
            if pred is model:
                r.train_mask_ratio = model.meta.get("mask_ratio")
                r.variant = ",".join(sorted(model.ablations)) or "none"
            reports.append(r)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    stem = f"eval_{scenario}_seed{seeds[0]}" if len(seeds) == 1 else f"eval_{scenario}_seeds{'-'.join(map(str, seeds))}"
    write_reports(reports, out / f"{stem}.csv", out / f"{stem}.json", timing=args.record_timing)
    for r in reports:
        print(f"{r.scenario} seed {r.seed} {r.method:<10} MAE {r.mae:.4f}  RMSE {r.rmse:.4f}  MAPE {r.mape:.3f}%")
    if len(seeds) > 1:
        means = seed_means(reports)
        write_text_atomic(out / f"{stem}_mean.json", json.dumps(means, indent=2, sort_keys=True) + "\n")
        for m in means:
            print(f"{m['scenario']} mean {m['method']:<10} MAE {m['mae']:.4f}  RMSE {m['rmse']:.4f}  "
                  f"MAPE {m['mape']:.3f}%")
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    ratios = _float_list(args.ratios)
    bundle = load_data(cfg)
    reports = mask_ratio_sweep(lambda r: train_model(cfg, bundle, mask_ratio=r, callback=_progress)[0],
                               bundle, ratios, cfg.evaluation.seeds[0], cfg.evaluation.scenarios[0],
                               cfg.data.train_fraction)
    out = Path(args.out) if args.out else cfg.output.dir / "sweep.csv"
    write_text_atomic(out, sweep_csv(reports))
    for r in reports:
        print(f"ratio {r.train_mask_ratio:g}: MAE {r.mae:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    if args.variants == "all":
        variants = ["none", *ABLATIONS]
    else:
        variants = _csv_list(args.variants)
        bad = [v for v in variants if v != "none" and v not in ABLATIONS]
        if bad:
            raise UsageError(f"unknown variants {bad}; choose from none, {', '.join(ABLATIONS)}")
    bundle = load_data(cfg)
    reports = ablation_suite(lambda v: train_model(cfg, bundle, variant=v, callback=_progress)[0],
                             bundle, variants, cfg.evaluation.seeds[0], cfg.evaluation.scenarios[0],
                             cfg.data.train_fraction)
    out = Path(args.out) if args.out else cfg.output.dir / "ablation.csv"
    write_text_atomic(out, ablation_csv(reports))
    for r in reports:
        print(f"{r.variant:<8} MAE {r.mae:.4f}")
    return 0


def cmd_embed(args) -> int:
    ids, dist = load_distances_csv(args.distances)
    graph = SensorGraph(tuple(ids), dist, args.sigma, args.epsilon)
    k = default_k(len(ids)) if args.k is None else args.k
    if not 1 <= k < len(ids):
        raise UsageError(f"--k must lie in [1, {len(ids) - 1}]")
    _, se = graph_features(graph, k, args.literal_threshold)
    rows = [[nid, *(repr(float(v)) for v in se[i])] for i, nid in enumerate(ids)]
    text = rows_to_csv(["node", *(f"v{j}" for j in range(1, k + 1))], rows)
    if args.out:
        write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    err, count = gradcheck_tiny(args.seed)
    print(f"max relative error {err:.3e} over {count} parameters")
    if not err < GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE:g}")
    return 0


def cmd_synth(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    b = generate_synthetic(args.n_nodes, args.n_steps, seed)
    out = Path(args.out)
    save_speeds_csv(out / "speeds.csv", b.node_ids, b.timestamps, b.speeds)
    save_distances_csv(out / "distances.csv", b.node_ids, b.graph.distances)
    print(f"wrote {out / 'speeds.csv'} and {out / 'distances.csv'}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kriformer", description="Transformer-based spatiotemporal kriging.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp, out_help):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--synthetic", action="store_true", help="use the synthetic road network")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("train", help="train a model and write a checkpoint")
    config_args(sp, "output directory (default: output.dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("krige", help="predict series at unobserved nodes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--speeds", required=True)
    sp.add_argument("--distances", required=True)
    sp.add_argument("--unobserved", required=True, help="comma-separated node ids")
    sp.add_argument("--missing-sentinel", type=float)
    sp.add_argument("--out", help="predictions CSV (default: stdout)")
    sp.set_defaults(func=cmd_krige)

    sp = sub.add_parser("evaluate", help="score a checkpoint under SM3/SM5/SM7")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenario", default="sm3")
    seed_group = sp.add_mutually_exclusive_group()
    seed_group.add_argument("--seed", type=int)
    seed_group.add_argument("--seeds", help="comma-separated seeds; also writes per-method means")
    sp.add_argument("--speeds")
    sp.add_argument("--distances")
    sp.add_argument("--missing-sentinel", type=float)
    sp.add_argument("--knn-k", type=int, default=3)
    sp.add_argument("--no-baselines", action="store_true")
    sp.add_argument("--record-timing", action="store_true", help="include wall-clock seconds")
    sp.add_argument("--out", help="report directory (default: next to the checkpoint)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep-mask", help="train and score one model per training mask ratio")
    config_args(sp, "sweep CSV path")
    sp.add_argument("--ratios", required=True, help="comma-separated ratios in (0, 1)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="train and score ablation variants")
    config_args(sp, "comparison CSV path")
    sp.add_argument("--variants", default="all", help="'all' or comma-separated names")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("embed", help="spatial eigenmap of a distances file")
    sp.add_argument("--distances", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--epsilon", type=float, default=0.1)
    sp.add_argument("--literal-threshold", action="store_true", help="use the d^2/sigma^2 > epsilon threshold")
    sp.add_argument("--out", help="eigenmap CSV (default: stdout)")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n-nodes", type=int, default=20)
    sp.add_argument("--n-steps", type=int, default=2000)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", level=logging.WARNING)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        return args.func(args)
    except KriformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
