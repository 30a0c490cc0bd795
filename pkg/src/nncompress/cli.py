"""Command-line front end: data generation, training, pruning, quantization, reports."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import data as D
from .errors import CompressError, ParseError
from .model import (build_mnist_classifier, build_toy_classifier, count_params, evaluate, layer_param_counts,
                    train)
from .modelio import dumps_json, load_model, save_model
from .prune import (PruneConfig, PruneHistory, PruneIteration, PruneStrategy, apply_prune,
                    iterative_prune, retrain)
from .quant import QuantConfig, quantize_model
from .report import build_report, infer_cluster_counts, to_csv, to_table
from .tensor import make_rng

log = logging.getLogger("nncompress")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PIPELINE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class PipelineError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_prune_flags(p):
    p.add_argument("--strategy", default="class-blind",
                   choices=["class-blind", "layer-wise", "class-uniform", "class-distribution"])
    p.add_argument("--target-drop", type=float, default=0.05,
                   help="largest tolerated accuracy drop from the unpruned baseline")
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--initial", type=float, default=None, help="first prune percentage (default: step)")
    p.add_argument("--retrain-epochs", type=int, default=3)
    p.add_argument("--lam", type=float, default=None, help="std-dev scale for class-distribution")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--history", type=Path, default=None)


def _add_quant_flags(p):
    p.add_argument("--base-clusters", type=int, default=32)
    p.add_argument("--params-per-set", type=int, default=100_000)
    p.add_argument("--records", type=Path, default=None, help="write per-class cluster records as JSON")


def build_parser():
    parser = _Parser(prog="nncompress", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("gen-data", help="write a synthetic train/test split")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--train-samples", type=int, default=5000)
    p.add_argument("--test-samples", type=int, default=1000)
    p.add_argument("--noise-std", type=float, default=0.3)

    p = sub.add_parser("train", help="train a fresh model")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--arch", choices=["mnist", "toy"], default="toy")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("prune", help="iterative magnitude pruning with retraining")
    common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_prune_flags(p)

    p = sub.add_parser("quantize", help="k-means quantization of prunable weights")
    common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_quant_flags(p)

    p = sub.add_parser("compress", help="prune then quantize, and write a report")
    common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pruned-out", type=Path, default=None)
    p.add_argument("--report", type=Path, default=None)
    p.add_argument("--format", choices=["json", "csv", "table"], default="json")
    _add_prune_flags(p)
    _add_quant_flags(p)

    p = sub.add_parser("report", help="memory accounting for initial / pruned / quantized models")
    common(p)
    p.add_argument("--initial", type=Path, required=True)
    p.add_argument("--pruned", type=Path, required=True)
    p.add_argument("--quantized", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None, help="also record test accuracy of each stage")
    p.add_argument("--format", choices=["json", "csv", "table"], default="table")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("inspect", help="per-class statistics of a model")
    common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path)
    src.add_argument("--arch", choices=["mnist", "toy"])
    p.add_argument("--bins", type=int, default=10)
    return parser


# helpers --------------------------------------------------------------------

def _threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("THREADS")
    return max(1, int(env)) if env and env.isdigit() else 1


def _crc(path):
    return f"{zlib.crc32(Path(path).read_bytes()):08x}"


def _write(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _render(report, fmt):
    if fmt == "json":
        return dumps_json(report.to_dict())
    if fmt == "csv":
        return to_csv(report)
    return to_table(report)


def _prune_config(args):
    distribution = args.strategy == "class-distribution"
    if distribution and args.lam is None:
        raise UsageError("--lam is required with --strategy class-distribution")
    strategy = PruneStrategy(args.strategy, args.lam if distribution else None)
    return PruneConfig(
        strategy=strategy,
        initial_percentage=args.step if args.initial is None else args.initial,
        step=args.step,
        accuracy_drop_threshold=args.target_drop,
        retrain_epochs=args.retrain_epochs,
        lr=args.lr,
        batch_size=args.batch,
    )


def _run_prune(model, train_set, test_set, cfg, seed):
    """Returns ``(pruned_model, history)``; class-distribution is applied once."""
    if cfg.strategy.kind == "class_distribution":
        baseline = evaluate(model, test_set)
        pruned, info = apply_prune(model, cfg.strategy, cfg.strategy.lam)
        pruned, acc = retrain(pruned, train_set, test_set, cfg.retrain_epochs, cfg.lr, cfg.batch_size,
                              make_rng(seed))
        frac = info.pruned / info.prunable
        ok = baseline - acc <= cfg.accuracy_drop_threshold
        h = PruneHistory(cfg.strategy.kind, baseline,
                         [PruneIteration(frac, info.thresholds, acc,
                                         sum(int(np.count_nonzero(pruned.masks[c])) for c in pruned.prunable),
                                         ok)],
                         0 if ok else None, "one-shot")
        return (pruned if ok else model.copy()), h
    return iterative_prune(model, train_set, test_set, cfg, make_rng(seed))


def _quant_config(args):
    return QuantConfig(base_clusters=args.base_clusters, params_per_set=args.params_per_set)


# commands -------------------------------------------------------------------

def cmd_gen_data(args):
    spec = D.SyntheticSpec(args.num_classes, args.train_samples, args.test_samples, (1, 8, 8),
                           args.noise_std, args.seed)
    train_set, test_set = D.gen_synthetic(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    D.save_dataset(train_set, args.out / "train.npz")
    D.save_dataset(test_set, args.out / "test.npz")
    (args.out / "spec.json").write_text(dumps_json(spec.to_dict()))
    print(f"wrote {len(train_set)} train / {len(test_set)} test samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    train_set, test_set = D.load_data_dir(args.data)
    if args.arch == "mnist":
        model = build_mnist_classifier(seed=args.seed)
    else:
        model = build_toy_classifier(train_set.inputs.shape[1:], train_set.num_classes, seed=args.seed)
    train(model, train_set, args.epochs, args.lr, args.batch, make_rng(args.seed))
    save_model(model, args.out)
    print(f"train accuracy {evaluate(model, train_set):.4f}  test accuracy {evaluate(model, test_set):.4f}")
    return EXIT_OK


def _history_json(history, cfg, seed):
    d = history.to_dict()
    d["config"] = dict(cfg.to_dict(), seed=seed)
    return dumps_json(d)


def _check_reached(history):
    if history.selected_iteration is None:
        raise PipelineError("accuracy threshold unreachable: the first pruning step already "
                            "exceeded the allowed accuracy drop")


def cmd_prune(args):
    cfg = _prune_config(args)
    model = load_model(args.model)
    train_set, test_set = D.load_data_dir(args.data)
    pruned, history = _run_prune(model, train_set, test_set, cfg, args.seed)
    save_model(pruned, args.out)
    if args.history:
        args.history.write_text(_history_json(history, cfg, args.seed))
    print(f"pruned {history.final_percentage:.2%} of prunable weights; baseline accuracy "
          f"{history.baseline_accuracy:.4f}, final {evaluate(pruned, test_set):.4f}")
    _check_reached(history)
    return EXIT_OK


def _records_json(records):
    return dumps_json({k: r.summary() for k, r in records.items()})


def cmd_quantize(args):
    model = load_model(args.model)
    qmodel, records = quantize_model(model, _quant_config(args), threads=_threads(args))
    save_model(qmodel, args.out)
    if args.records:
        args.records.write_text(_records_json(records))
    print("clusters per class: " + ", ".join(f"{k}={r.c}" for k, r in records.items()))
    return EXIT_OK


def cmd_compress(args):
    cfg = _prune_config(args)
    qcfg = _quant_config(args)
    model = load_model(args.model)
    train_set, test_set = D.load_data_dir(args.data)
    pruned, history = _run_prune(model, train_set, test_set, cfg, args.seed)
    qmodel, records = quantize_model(pruned, qcfg, threads=_threads(args))
    save_model(qmodel, args.out)
    if args.pruned_out:
        save_model(pruned, args.pruned_out)
    if args.history:
        args.history.write_text(_history_json(history, cfg, args.seed))
    if args.records:
        args.records.write_text(_records_json(records))
    trace = [("initial", history.baseline_accuracy),
             ("pruned", evaluate(pruned, test_set)),
             ("quantized", evaluate(qmodel, test_set))]
    config = {"seed": args.seed, "input_model_crc32": _crc(args.model), "prune": cfg.to_dict(),
              "quant": qcfg.to_dict(), "percentage_pruned": history.final_percentage}
    report = build_report(model, pruned, qmodel, records, trace, config)
    _write(args.report, _render(report, args.format))
    if args.report is not None:
        print(f"pruned {history.final_percentage:.2%}; accuracy " +
              "  ".join(f"{s} {v:.4f}" for s, v in trace) +
              f"; compress rate {report.totals['rate']:.2f}x")
    _check_reached(history)
    return EXIT_OK


def cmd_report(args):
    models = [load_model(p) for p in (args.initial, args.pruned, args.quantized)]
    trace = []
    if args.data is not None:
        _, test_set = D.load_data_dir(args.data)
        trace = [(s, evaluate(m, test_set)) for s, m in zip(("initial", "pruned", "quantized"), models)]
    config = {"initial_crc32": _crc(args.initial), "pruned_crc32": _crc(args.pruned),
              "quantized_crc32": _crc(args.quantized)}
    report = build_report(*models, infer_cluster_counts(models[2]), trace, config)
    _write(args.out, _render(report, args.format))
    return EXIT_OK


def text_histogram(values, bins=10, width=30):
    if values.size == 0:
        return ["  (no surviving weights)"]
    counts, edges = np.histogram(values, bins=bins)
    top = counts.max()
    lines = []
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        bar = "#" * (int(round(width * c / top)) if top else 0)
        lines.append(f"  [{lo:+.4f}, {hi:+.4f})  {c:>7d}  {bar}")
    return lines


def cmd_inspect(args):
    if args.model is not None:
        model = load_model(args.model)
    elif args.arch == "mnist":
        model = build_mnist_classifier(seed=args.seed)
    else:
        model = build_toy_classifier(seed=args.seed)
    counts = count_params(model)
    header = f"{'class':<12} {'shape':<16} {'n':>8} {'surviving':>10} {'min':>10} {'max':>10} {'std':>10}"
    out = [f"architecture: {model.arch_name}", header, "-" * len(header)]
    hists = []
    for cid, p in model.params.items():
        alive = p[model.masks[cid]].astype(np.float64)
        stats = (alive.min(), alive.max(), alive.std()) if alive.size else (0.0, 0.0, 0.0)
        shape = "x".join(str(d) for d in p.shape)
        out.append(f"{cid:<12} {shape:<16} {counts[cid]['total']:>8d} {counts[cid]['surviving']:>10d} "
                   f"{stats[0]:>10.4f} {stats[1]:>10.4f} {stats[2]:>10.4f}")
        hists.append(f"{cid}:")
        hists.extend(text_histogram(alive, args.bins))
    tot = counts["__total__"]
    out.append("-" * len(header))
    out.append(f"{'TOTAL':<12} {'':<16} {tot['total']:>8d} {tot['surviving']:>10d}")
    out.append(f"initial bytes: {4 * tot['total']}  pruned bytes: {4 * tot['surviving']}")
    out.append("per layer: " + ", ".join(f"{name}={n}" for name, n in layer_param_counts(model).items()))
    out.append("")
    out.extend(hists)
    print("\n".join(out))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "prune": cmd_prune,
    "quantize": cmd_quantize,
    "compress": cmd_compress,
    "report": cmd_report,
    "inspect": cmd_inspect,
}


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PipelineError, CompressError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
