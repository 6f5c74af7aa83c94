"""Command-line entry point: ``credassign <command> [flags]``.

Every command writes its outputs under ``--out`` with fixed file names, plus a
``manifest.json`` recording argv and the resolved flags;
``credassign replay OUT/manifest.json`` re-runs it.

Exit codes: 0 success, 1 unexpected failure, 2 bad usage or configuration,
3 shape/domain error, 4 missing or malformed file, 5 non-finite values or
diverged training, 6 invalid state, 7 empty data subset.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (SUBSETS, channel_importance, channel_means, cka_grid, concordance_report,
                       dump_activations, gradient_angle, subset_sizes, top_exemplars, write_exemplars)
from .container import write_container
from .data import VAL_SIZE, class_id, eval_inputs, load_cifar10
from .errors import CredAssignError, EmptySubsetError, FormatError
from .feedback import FeedbackRule
from .network import cifar_network, init_network
from .tensor import derive_seed, make_rng, softmax_cross_entropy
from .trainer import Checkpoint, TrainConfig, TrainingDiverged, evaluate, grid_search, train, write_metrics

log = logging.getLogger("credassign")

METHODS = [r.value for r in FeedbackRule]


def _split(args):
    train_set, val, test = load_cifar10(args.data_dir, seed=args.seed, val_size=args.val_size)
    return {"train": train_set, "val": val, "test": test}[args.split]


def _model_id(path) -> str:
    return Path(path).stem


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> dict:
    config = TrainConfig(rule=args.method, lr=args.lr, sigma=args.sigma,
                         weight_decay=args.weight_decay, epochs=args.epochs,
                         batch_size=args.batch_size, seed=args.seed, data_dir=args.data_dir,
                         out_dir=str(args.out), train_subset=args.train_subset,
                         probe_every=args.probe_every, val_size=args.val_size)
    try:
        result = train(config)
    except TrainingDiverged as exc:
        exc.checkpoint.save(args.out / "last_good.ckpt")
        write_metrics(args.out / "metrics.csv", exc.metrics, exc.checkpoint.network.layer_names)
        raise
    return {"config": config.to_dict(), "best_val_acc": result.best.val_acc,
            "best_epoch": result.best.epoch}


def cmd_grid(args) -> dict:
    base = TrainConfig(rule=args.method, batch_size=args.batch_size, seed=args.seed,
                       data_dir=args.data_dir, train_subset=args.train_subset,
                       probe_every=args.probe_every, val_size=args.val_size)
    best, table = grid_search(args.method, base=base, probe_epochs=args.probe_epochs,
                              jobs=args.jobs, out_dir=args.out)
    (args.out / "best_config.json").write_text(json.dumps(best.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"best": best.to_dict(), "probes": len(table)}


def cmd_eval(args) -> dict:
    ckpt = Checkpoint.load(args.model)
    data = _split(args)
    res = evaluate(ckpt, data)
    write_container(args.out / f"eval_{args.split}.bin",
                    {"kind": "eval", "model": _model_id(args.model), "split": args.split,
                     "accuracy": res.accuracy},
                    {"logits": res.logits, "correct": res.correct.astype(np.uint8),
                     "sample_index": data.indices})
    summary = {"model": _model_id(args.model), "split": args.split, "n": len(data),
               "accuracy": res.accuracy}
    (args.out / f"eval_{args.split}.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_angle(args) -> dict:
    ckpt = Checkpoint.load(args.model)
    rule = FeedbackRule.parse(args.method or ckpt.config.rule)
    data = _split(args)
    idx = np.arange(min(args.probe_size, len(data)))
    angles = gradient_angle(ckpt.network, eval_inputs(data, idx), data.labels[idx], rule)
    _write_csv(args.out / "angle.csv", ["layer", "angle_deg"],
               [[k, _fmt(v)] for k, v in angles.items()])
    return {"rule": rule.value, "angles": angles}


def cmd_sign(args) -> dict:
    ckpt = Checkpoint.load(args.model)
    conc = concordance_report(ckpt.network)
    _write_csv(args.out / "sign.csv", ["layer", "concordance"], [[k, _fmt(v)] for k, v in conc.items()])
    return {"concordance": conc}


def cmd_cka(args) -> dict:
    a, b = Checkpoint.load(args.model_a), Checkpoint.load(args.model_b)
    data = _split(args)
    dump_a = dump_activations(a.network, data, _model_id(args.model_a), args.out / "acts_a.bin")
    dump_b = dump_activations(b.network, data, _model_id(args.model_b), args.out / "acts_b.bin")
    sizes = subset_sizes(dump_a, dump_b)
    subsets = SUBSETS if args.subset == "every" else [args.subset]
    for subset in subsets:
        grid = cka_grid(dump_a, dump_b, subset)
        _write_csv(args.out / f"cka_{subset}.csv", ["layer_a"] + dump_b.layer_names,
                   [[name] + [_fmt(v) for v in row] for name, row in zip(dump_a.layer_names, grid)])
    if not args.keep_dumps:
        del dump_a, dump_b
        (args.out / "acts_a.bin").unlink()
        (args.out / "acts_b.bin").unlink()
    return {"subset_sizes": sizes, "subsets": list(subsets)}


def cmd_channels(args) -> dict:
    ckpt = Checkpoint.load(args.model)
    cid = class_id(args.class_)
    data = _split(args)
    imp = channel_importance(ckpt.network, data, cid, args.layer)
    ranking = imp.ranking
    name = args.class_ if not args.class_.isdigit() else str(cid)
    _write_csv(args.out / f"importance_{name}_{args.layer}.csv",
               ["rank", "channel", "importance", "selected"],
               [[r + 1, int(c), repr(float(imp.scores[c])), int(r < args.top_k)]
                for r, c in enumerate(ranking)])
    return {"class_id": cid, "n_images": imp.n_images, "top": imp.top(args.top_k)}


def _channels_from_importance(path, top_k) -> list[int]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        rows.sort(key=lambda r: int(r["rank"]))
        return [int(r["channel"]) for r in rows[:top_k]]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable importance table ({exc})") from None


def cmd_exemplars(args) -> dict:
    ckpt = Checkpoint.load(args.model)
    channels = list(args.channel or [])
    if args.importance:
        channels += _channels_from_importance(args.importance, args.top_k)
    if not channels:
        raise EmptySubsetError("no channels given (use --channel or --importance)")
    data = _split(args)
    means = channel_means(ckpt.network, data, args.layer)
    written = {}
    for ch in channels:
        hits = top_exemplars(ckpt.network, data, args.layer, ch, args.k, means=means)
        write_exemplars(args.out, data, args.layer, ch, hits, _model_id(args.model))
        written[ch] = [i for i, _ in hits]
    return {"channels": channels, "positions": written}


def _time_backward(net, dlogits, rule, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        net.backward(dlogits, rule)
        times.append(time.perf_counter() - t0)
    return times


def bench_backward(batch_size: int = 128, repeats: int = 10, seed: int = 42, sigma: float = 0.05,
                   rules=None) -> dict[str, float]:
    """Median wall time of one backward pass per rule on the full architecture.

    Rules are timed round-robin so drifts in machine load hit all of them.
    """
    rules = [FeedbackRule.parse(r) for r in (rules or METHODS)]
    rng = make_rng(derive_seed(seed, "bench"))
    x = rng.standard_normal((batch_size, 3, 24, 24)).astype(np.float32)
    y = rng.integers(0, 10, batch_size)
    nets, grads = {}, {}
    for rule in rules:
        net = init_network(cifar_network(), rule, sigma, seed)
        _, grads[rule] = softmax_cross_entropy(net.forward(x), y)
        net.backward(grads[rule], rule)  # warm-up
        nets[rule] = net
    samples = {r: [] for r in rules}
    for _ in range(repeats):
        for rule in rules:
            samples[rule] += _time_backward(nets[rule], grads[rule], rule, 1)
    return {r.value: statistics.median(samples[r]) for r in rules}


def cmd_bench(args) -> dict:
    med = bench_backward(args.batch_size, args.repeats, args.seed)
    bp = med[FeedbackRule.BP.value]
    _write_csv(args.out / "bench_backward.csv", ["method", "median_seconds", "ratio_to_bp"],
               [[k, repr(v), repr(v / bp)] for k, v in med.items()])
    return {"median_seconds": med}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p, data=True):
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=42)
    if data:
        p.add_argument("--data-dir", default=None,
                       help="CIFAR-10 binary directory (default: $CREDASSIGN_DATA_DIR)")
        p.add_argument("--val-size", type=int, default=VAL_SIZE,
                       help="training images held out for validation")


def _analysis_split(p, default="test"):
    p.add_argument("--split", choices=["train", "val", "test"], default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="credassign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma", type=float, default=0.05, help="feedback scale (FA / uSF Init)")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--train-subset", type=int, default=None)
    p.add_argument("--probe-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="hyperparameter grid search with short probe runs")
    _common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--probe-epochs", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--train-subset", type=int, default=None)
    p.add_argument("--probe-every", type=int, default=100)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="accuracy, correctness bitmap and logits")
    _common(p)
    _analysis_split(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("angle", help="per-layer angle to the true error signal")
    _common(p)
    _analysis_split(p, "val")
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=METHODS, default=None,
                   help="rule to probe (default: the rule the model was trained with)")
    p.add_argument("--probe-size", type=int, default=128)
    p.set_defaults(func=cmd_angle)

    p = sub.add_parser("sign", help="sign concordance between weights and fixed feedback")
    _common(p, data=False)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_sign)

    p = sub.add_parser("cka", help="layer-by-layer linear CKA between two models")
    _common(p)
    _analysis_split(p)
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--subset", choices=list(SUBSETS) + ["every"], default="all")
    p.add_argument("--keep-dumps", action="store_true")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("channels", help="Grad-CAM style channel importance for one class")
    _common(p)
    _analysis_split(p)
    p.add_argument("--model", required=True)
    p.add_argument("--class", dest="class_", required=True, help="class name or id, e.g. dog")
    p.add_argument("--layer", choices=["conv1", "conv2"], required=True)
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_channels)

    p = sub.add_parser("exemplars", help="top-activating images for conv channels")
    _common(p)
    _analysis_split(p)
    p.add_argument("--model", required=True)
    p.add_argument("--layer", choices=["conv1", "conv2"], required=True)
    p.add_argument("--channel", type=int, action="append")
    p.add_argument("--importance", default=None, help="importance CSV from `channels`")
    p.add_argument("--top-k", type=int, default=3, help="channels taken from --importance")
    p.add_argument("--k", type=int, default=9, help="images per channel")
    p.set_defaults(func=cmd_exemplars)

    p = sub.add_parser("bench-backward", help="time one backward pass per rule")
    _common(p, data=False)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=None)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"credassign: error[{code}]: {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "replay":
        try:
            manifest = json.loads(Path(args.manifest).read_text())
            argv = manifest["argv"]
        except (OSError, ValueError, KeyError) as exc:
            return _fail(FormatError(f"{args.manifest}: unreadable manifest ({exc})"), FormatError.exit_code)
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                    if k not in ("func", "verbose")}
        manifest = {"command": args.command, "argv": argv, "args": resolved, "seed": args.seed,
                    "version": __version__}
        (args.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        summary = args.func(args)
    except CredAssignError as exc:
        return _fail(exc, exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(exc, FormatError.exit_code)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        log.debug("unexpected failure", exc_info=True)
        return _fail(exc, 1)
    if summary is not None:
        print(json.dumps(summary, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
