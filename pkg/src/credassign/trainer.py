"""Training runs, checkpoints, evaluation and the hyperparameter grid search."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import container
from .analysis import concordance_report, gradient_angle
from .data import VAL_SIZE, BatchIterator, Dataset, eval_inputs, load_cifar10, subsample
from .errors import ConfigurationError, FormatError, NonFiniteError
from .feedback import FeedbackRule
from .network import Network, cifar_network, init_network
from .optim import Adam
from .tensor import derive_seed, softmax_cross_entropy

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
PROBE_BATCH = 128

GRIDS = {
    FeedbackRule.BP: {"lr": [5e-4, 1e-3, 3e-3], "weight_decay": [0.0, 1e-4]},
    FeedbackRule.FA_RANDOM: {"lr": [1e-3, 3e-3, 1e-2], "sigma": [0.01, 0.05, 0.1]},
    FeedbackRule.FA_TOEPLITZ: {"lr": [1e-3, 3e-3, 1e-2], "sigma": [0.01, 0.05, 0.1]},
    FeedbackRule.USF_INIT: {"lr": [1e-3, 3e-3, 1e-2], "sigma": [0.01, 0.05, 0.1]},
    FeedbackRule.USF_SN: {"lr": [1e-3, 3e-3, 1e-2, 3e-2]},
}


@dataclass
class TrainConfig:
    rule: FeedbackRule = FeedbackRule.BP
    lr: float = 1e-3
    sigma: float | None = 0.05
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 128
    seed: int = 42
    data_dir: str | None = None
    out_dir: str | None = None
    train_subset: int | None = None
    probe_every: int = 100
    val_size: int = VAL_SIZE

    def __post_init__(self):
        self.rule = FeedbackRule.parse(self.rule)
        if not self.rule.uses_sigma:
            self.sigma = None
        elif self.sigma is None or not self.sigma > 0:
            raise ConfigurationError(f"{self.rule.value} needs a positive feedback scale sigma")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rule"] = self.rule.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RunRecord:
    step: int
    epoch: int
    train_loss: float | None
    train_acc: float | None
    val_acc: float | None
    angle: dict[str, float | None]
    concordance: dict[str, float | None]

    def row(self, layers) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return ([self.step, self.epoch, fmt(self.train_loss), fmt(self.train_acc), fmt(self.val_acc)]
                + [fmt(self.angle.get(l)) for l in layers]
                + [fmt(self.concordance.get(l)) for l in layers])


def metrics_header(layers) -> list[str]:
    return (["step", "epoch", "train_loss", "train_acc", "val_acc"]
            + [f"angle_{l}" for l in layers] + [f"concordance_{l}" for l in layers])


def write_metrics(path, records: list[RunRecord], layers) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(metrics_header(layers))
        for r in records:
            w.writerow(r.row(layers))


def read_metrics(path) -> list[dict]:
    def parse(key, value):
        if key in ("step", "epoch"):
            return int(value)
        return float(value) if value else None

    with open(path, newline="") as f:
        return [{k: parse(k, v) for k, v in row.items()} for row in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    network: Network
    adam: Adam
    step: int = 0
    epoch: int = 0
    val_acc: float | None = None

    @classmethod
    def capture(cls, config, net, opt, step, epoch, val_acc) -> "Checkpoint":
        adam = Adam(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay, opt.t,
                    dict(opt.m), dict(opt.v))
        return cls(config, net.copy(), adam, step, epoch, val_acc)

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.network.parameters())
        out.update(self.network.feedback_tensors())
        out.update(self.adam.state_tensors())
        return out

    def header(self) -> dict:
        return {
            "kind": CHECKPOINT_KIND,
            "config": self.config.to_dict(),
            "network": self.network.to_spec(),
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps, "weight_decay": self.adam.weight_decay, "t": self.adam.t},
            "step": self.step,
            "epoch": self.epoch,
            "val_acc": self.val_acc,
            # Every random stream is re-derived from (seed, tag); this is the full state.
            "rng": {"generator": "pcg64", "seed": self.config.seed, "next_epoch": self.epoch + 1},
        }

    def save(self, path) -> None:
        container.write_container(path, self.header(), self.tensors())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, t = container.read_container(path)
        if header.get("kind") != CHECKPOINT_KIND:
            raise FormatError(f"{path}: not a checkpoint")
        try:
            config = TrainConfig.from_dict(header["config"])
            params = {k: v for k, v in t.items() if k.endswith(".W") or k.endswith(".bias")}
            dtype = next(iter(params.values())).dtype if params else np.float32
            net = Network.from_spec(header["network"], dtype)
            net.set_parameters(params)
            for layer in net.weight_layers:
                layer.B0 = t.get(f"{layer.name}.B0")
            a = header["adam"]
            adam = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"], a["weight_decay"], a["t"])
            adam.load_state_tensors(t)
            return cls(config, net, adam, header["step"], header["epoch"], header["val_acc"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed checkpoint ({exc})") from None


class TrainingDiverged(NonFiniteError):
    def __init__(self, msg, checkpoint: Checkpoint, metrics: list[RunRecord]):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.metrics = metrics


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    correct: np.ndarray
    logits: np.ndarray


def evaluate(model, dataset: Dataset, batch_size: int = 500) -> EvalResult:
    """Center-crop evaluation of a Network or Checkpoint on ``dataset``."""
    net = model.network if isinstance(model, Checkpoint) else model
    logits = np.zeros((len(dataset), net.weight_layers[-1].weight_shape[0]), np.float32)
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(len(dataset), start + batch_size))
        logits[idx] = net.forward(eval_inputs(dataset, idx))
    correct = logits.argmax(axis=1) == dataset.labels
    acc = float(correct.mean()) if len(dataset) else 0.0
    return EvalResult(acc, correct, logits)


@dataclass
class TrainResult:
    best: Checkpoint
    metrics: list[RunRecord]
    last: Checkpoint | None = None
    layers: list[str] = field(default_factory=list)


def load_data(config: TrainConfig) -> tuple[Dataset, Dataset]:
    train, val, _ = load_cifar10(config.data_dir, seed=config.seed, val_size=config.val_size)
    if config.train_subset:
        train = subsample(train, config.train_subset, config.seed)
    return train, val


def _probe(net, rule, probe_x, probe_y):
    angles = gradient_angle(net, probe_x, probe_y, rule)
    return angles, concordance_report(net)


def train(config: TrainConfig, data: tuple[Dataset, Dataset] | None = None) -> TrainResult:
    """Run the training protocol and keep the best-validation checkpoint.

    Metric rows are logged every ``probe_every`` steps and at the end of every
    epoch (the epoch rows carry validation accuracy). With ``out_dir`` set,
    writes ``metrics.csv``, ``best.ckpt`` and ``last.ckpt``.
    """
    train_set, val_set = data if data is not None else load_data(config)
    rule = config.rule
    net = init_network(cifar_network(), rule, config.sigma, config.seed)
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    probe_idx = np.arange(min(PROBE_BATCH, len(val_set)))
    probe_x, probe_y = eval_inputs(val_set, probe_idx), val_set.labels[probe_idx]
    layers = net.layer_names

    records: list[RunRecord] = []
    step = 0
    init_acc = evaluate(net, val_set).accuracy if config.epochs == 0 else None
    best = Checkpoint.capture(config, net, opt, 0, 0, init_acc)
    last_good = best
    loss_sum = hits = seen = 0

    for epoch in range(1, config.epochs + 1):
        batches = BatchIterator(train_set, config.batch_size, augment=True,
                                epoch_seed=derive_seed(config.seed, f"epoch{epoch}"))
        for x, y in batches:
            if step % config.probe_every == 0:
                angles, conc = _probe(net, rule, probe_x, probe_y)
                records.append(RunRecord(step, epoch, loss_sum / seen if seen else None,
                                         hits / seen if seen else None, None, angles, conc))
                loss_sum = hits = seen = 0
            logits = net.forward(x)
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss diverged at step {step}", last_good, records)
            grads = net.backward(dlogits, rule).grads
            flat = {}
            for name, (dW, db) in grads.items():
                flat[f"{name}.W"], flat[f"{name}.bias"] = dW, db
            try:
                net.set_parameters(opt.step(net.parameters(), flat))
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), last_good, records) from None
            loss_sum += loss * len(y)
            hits += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
            step += 1

        val_acc = evaluate(net, val_set).accuracy
        angles, conc = _probe(net, rule, probe_x, probe_y)
        records.append(RunRecord(step, epoch, loss_sum / seen if seen else None,
                                 hits / seen if seen else None, val_acc, angles, conc))
        loss_sum = hits = seen = 0
        log.info("%s epoch %d step %d val_acc %.4f", rule.value, epoch, step, val_acc)
        last_good = Checkpoint.capture(config, net, opt, step, epoch, val_acc)
        if best.val_acc is None or val_acc > best.val_acc:
            best = last_good

    result = TrainResult(best, records, last_good, layers)
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", records, layers)
        best.save(out / "best.ckpt")
        last_good.save(out / "last.ckpt")
    return result


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def expand_grid(rule, grid: dict | None = None, base: TrainConfig | None = None) -> list[TrainConfig]:
    """All configs of the product grid, in grid order (first key varies slowest)."""
    rule = FeedbackRule.parse(rule)
    grid = GRIDS[rule] if grid is None else grid
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigurationError(f"empty hyperparameter grid for {rule.value}")
    base = base or TrainConfig(rule=rule)
    keys = list(grid)
    return [replace(base, rule=rule, **dict(zip(keys, combo)))
            for combo in itertools.product(*(grid[k] for k in keys))]


_WORKER_DATA = None


def _probe_config(config: TrainConfig) -> float:
    result = train(replace(config, out_dir=None), _WORKER_DATA)
    return result.best.val_acc


def grid_search(rule, grid: dict | None = None, base: TrainConfig | None = None,
                data: tuple[Dataset, Dataset] | None = None, probe_epochs: int = 3,
                jobs: int = 1, out_dir=None) -> tuple[TrainConfig, list[dict]]:
    """Short probe runs over the grid; return the best config and a ranked table.

    Ties keep the config that comes first in grid order.
    """
    global _WORKER_DATA
    base = replace(base or TrainConfig(rule=rule), epochs=probe_epochs)
    configs = expand_grid(rule, grid, base)
    _WORKER_DATA = data if data is not None else load_data(configs[0])
    try:
        if jobs > 1 and len(configs) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                scores = list(pool.map(_probe_config, configs))
        else:
            scores = [_probe_config(c) for c in configs]
    finally:
        _WORKER_DATA = None
    table = [{"grid_index": i, "rule": c.rule.value, "lr": c.lr, "sigma": c.sigma,
              "weight_decay": c.weight_decay, "val_acc": s}
             for i, (c, s) in enumerate(zip(configs, scores))]
    table.sort(key=lambda r: (-r["val_acc"], r["grid_index"]))
    for rank, row in enumerate(table, start=1):
        row["rank"] = rank
    best = configs[table[0]["grid_index"]]
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["rank", "grid_index", "rule", "lr", "sigma", "weight_decay", "val_acc"]
        with open(out / "grid_results.csv", "w", newline="") as f:
            w = csv.DictWriter(f, cols, lineterminator="\n")
            w.writeheader()
            for row in table:
                w.writerow({k: ("" if row[k] is None else row[k]) for k in cols})
    return best, table
