"""Command line entry point: ``relnet {synth,train,eval,verify,sg}``.

Exit codes: 0 success, 2 usage or configuration error, 3 training or other
runtime failure. Every command prints a JSON summary whose ``config`` field
echoes the fully resolved options; files it writes carry the same header.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Sequence

from . import data as data_mod
from . import drnet, evaluation, pipeline, verify
from .numkit import ConfigurationError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SUPPORTED_FORMAT = 1

log = logging.getLogger("relnet")


class UsageError(Exception):
    pass


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def resolved_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "inject")}


def emit(summary: dict) -> None:
    print(json.dumps(summary, indent=2, sort_keys=True))


def per_image(fn: Callable, records: Sequence, threads: int) -> list:
    """Map over images; results keep input order whatever the thread count."""
    if threads <= 1:
        return [fn(r) for r in records]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, records))


def load_pair(args):
    ds = data_mod.load_dataset(args.data)
    model = drnet.load_checkpoint(args.model)
    if model.label_space != ds.label_space:
        raise UsageError("model and dataset label spaces differ")
    cfg = model.config
    if (cfg.appearance_dim, cfg.union_dim) != (ds.appearance_dim, ds.union_dim):
        raise UsageError("model and dataset feature dimensions differ")
    return ds, model


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = data_mod.SyntheticSpec(
        n_categories=args.n, n_predicates=args.k, appearance_dim=args.appearance_dim,
        union_dim=args.union_dim, class_separation=args.class_separation,
        predicate_separation=args.predicate_separation, potential_scale=args.potential_scale,
        images=args.images, objects_per_image=(args.min_objects, args.max_objects),
        seed=args.seed)
    ds, theta = data_mod.synth_generate(spec)
    data_mod.save_dataset(ds, args.out)
    pot_path = args.potentials_out or str(Path(args.out).with_suffix(".potentials.json"))
    data_mod.save_potentials(theta, pot_path, spec)
    emit({"config": resolved_config(args), "dataset": str(args.out), "potentials": pot_path,
          "images": len(ds), "instances": ds.n_instances(),
          "entropy": evaluation.predicate_entropy_stats(ds)})
    return EXIT_OK


def cmd_train(args) -> int:
    ds = data_mod.load_dataset(args.data)
    net = drnet.DrNetConfig(units=args.units, share_weights=args.share,
                            enforce_symmetry=args.symmetry, loss_mode=args.loss_mode,
                            relational=not args.unary_only)
    cfg = drnet.ModelConfig(ds.label_space.N, ds.label_space.K, ds.appearance_dim, ds.union_dim,
                            pair_dim=args.pair_dim, hidden_dim=args.hidden_dim,
                            mask_size=args.mask_size, drnet=net)
    hp = drnet.TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                           seed=args.seed, momentum=args.momentum, weight_decay=args.weight_decay,
                           tied_epochs=args.tied_epochs)
    batch = data_mod.instance_batch(ds, cfg.mask_size, cfg.margin_fraction)
    model, trace = drnet.drnet_train(batch, cfg, hp, label_space=ds.label_space)
    config = resolved_config(args)
    drnet.save_checkpoint(model, args.out, extra={"run": config})
    trace_path = args.trace or args.out + ".trace.jsonl"
    lines = [json.dumps({"format_version": drnet.FORMAT_VERSION, "kind": "trace", "config": config},
                        sort_keys=True)]
    lines += [json.dumps(s.to_dict(), sort_keys=True) for s in trace]
    Path(trace_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = {"config": config, "checkpoint": args.out, "trace": trace_path,
               "final": trace[-1].to_dict() if trace else None}
    if args.filter_out:
        flt = pipeline.train_pair_filter(ds, model, seed=args.seed)
        Path(args.filter_out).write_text(json.dumps(flt.to_dict()) + "\n", encoding="utf-8")
        summary["filter"] = args.filter_out
    emit(summary)
    return EXIT_OK


def _load_filter(path):
    if not path:
        return None
    return pipeline.PairFilter.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_eval(args) -> int:
    ds, model = load_pair(args)
    flt = _load_filter(args.filter)
    settings = list(evaluation.TaskSetting) if args.setting == "all" else [
        evaluation.TaskSetting.parse(args.setting)]
    for t in args.iou:
        if not 0 < t <= 1:
            raise UsageError(f"IoU threshold {t} outside (0, 1]")
    top = max(args.k)
    truth = {rec.image_id: evaluation.ground_truth_of(rec) for rec in ds.records}
    detected, given = None, None
    results = []
    for setting in settings:
        if setting is evaluation.TaskSetting.PREDICATE:
            if given is None:
                given = dict(zip(truth, per_image(
                    lambda r: pipeline.predict_given_pairs(r, model, top), ds.records, args.threads)))
            preds = given
        else:
            if detected is None:
                detected = dict(zip(truth, per_image(
                    lambda r: pipeline.detect_image(r, model, top, flt), ds.records, args.threads)))
            preds = detected
        for k in args.k:
            for thr in args.iou:
                results.append(evaluation.recall_report(preds, truth, k, setting, thr))
    report = {"format_version": drnet.FORMAT_VERSION, "kind": "report",
              "config": resolved_config(args), "results": results}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.predictions_out and detected is not None:
        pipeline.save_predictions(args.predictions_out, detected, resolved_config(args))
    emit(report)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suite(args.suite, inject=args.inject or ())
    summary = {"config": resolved_config(args), **verify.summary(results)}
    if args.report:
        Path(args.report).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    emit(summary)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.suite}/{r.name} value={r.value:.3g} "
              f"tol={r.tolerance:.1g}", file=sys.stderr)
    return EXIT_OK if summary["passed"] else EXIT_RUNTIME


def cmd_sg(args) -> int:
    ds, model = load_pair(args)
    flt = _load_filter(args.filter)

    def one(rec):
        graph = evaluation.generate_scene_graph(
            pipeline.detect_image(rec, model, args.top_k, flt), args.score_floor)
        row = {"image_id": rec.image_id, "graph": graph.to_dict()}
        if args.truth:
            row["similarity"] = evaluation.scene_graph_similarity(
                graph, evaluation.truth_scene_graph(rec), args.iou)
        return row

    rows = per_image(one, ds.records, args.threads)
    config = resolved_config(args)
    lines = [json.dumps({"format_version": drnet.FORMAT_VERSION, "kind": "scene_graphs",
                         "config": config}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in rows]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = {"config": config, "out": args.out, "images": len(rows)}
    if args.truth:
        sims = [r["similarity"] for r in rows]
        summary["mean_similarity"] = sum(sims) / len(sims) if sims else 0.0
    emit(summary)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-image stages (results do not depend on it)")
    common.add_argument("--format-version", type=int, default=SUPPORTED_FORMAT)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="relnet", parents=[common],
                                     description="Visual relationship recognition toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=6, help="object categories")
    p.add_argument("--k", type=int, default=8, help="predicates")
    p.add_argument("--appearance-dim", type=int, default=16)
    p.add_argument("--union-dim", type=int, default=16)
    p.add_argument("--images", type=int, default=500)
    p.add_argument("--potential-scale", type=float, default=3.0)
    p.add_argument("--class-separation", type=float, default=3.0)
    p.add_argument("--predicate-separation", type=float, default=1.0)
    p.add_argument("--min-objects", type=int, default=2)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--potentials-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a relation network")
    p.add_argument("--data", required=True)
    p.add_argument("--units", type=int, default=8)
    p.add_argument("--share", action="store_true", help="one parameter set for all units")
    p.add_argument("--symmetry", action="store_true", help="tie relational matrices in transpose pairs")
    p.add_argument("--loss-mode", choices=drnet.LOSS_MODES, default="final-unit")
    p.add_argument("--unary-only", action="store_true", help="drop the relational matrices (baseline)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--tied-epochs", type=int, default=0,
                   help="unshared stacks: epochs trained with tied units before untying")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--pair-dim", type=int, default=32)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--mask-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--filter-out", help="also train a pair filter and write it here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Recall@K report")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--filter")
    p.add_argument("--setting", default="all",
                   choices=["all", "predicate", "union_box", "two_boxes"] + [s.value for s in evaluation.TaskSetting])
    p.add_argument("--k", type=_ints, default=[50, 100])
    p.add_argument("--iou", type=_floats, default=[0.5])
    p.add_argument("--report")
    p.add_argument("--predictions-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", parents=[common], help="run the self-check suites")
    p.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    p.add_argument("--report")
    p.add_argument("--inject", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sg", parents=[common], help="scene graphs per image")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--filter")
    p.add_argument("--score-floor", type=float, default=0.0)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--truth", action="store_true", help="score each graph against the annotations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sg)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.format_version != SUPPORTED_FORMAT:
        print(f"error: unsupported format version {args.format_version}", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except drnet.TrainingError as exc:
        print(f"error: training failed in epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ConfigurationError, data_mod.ParseError, data_mod.VersionError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
