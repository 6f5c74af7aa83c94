"""Measurements on trained networks.

Alignment probes compare error signals, CKA compares activations of two
models on the same images, and the importance / exemplar tools look at
individual conv channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .data import CLASSES, Dataset, eval_inputs
from .errors import DimensionError, DomainError, EmptySubsetError, FormatError, StateError
from .feedback import FeedbackRule, sign
from .network import Network
from .tensor import softmax_cross_entropy

SUBSETS = ("all", "both_correct", "a_correct_b_wrong")
CONV_LAYERS = ("conv1", "conv2")
GRAM_F64_LIMIT = 4096


# ---------------------------------------------------------------------------
# Gradient alignment and sign concordance
# ---------------------------------------------------------------------------

def angle_between(a: np.ndarray, b: np.ndarray) -> float | None:
    """Angle in degrees between two flattened signals; None if either is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare signals of sizes {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    # atan2 form stays accurate near 0 and 180 degrees, where acos does not
    ua, ub = a / na, b / nb
    return math.degrees(2 * math.atan2(np.linalg.norm(ua - ub), np.linalg.norm(ua + ub)))


def gradient_angle(net: Network, x: np.ndarray, labels, rule) -> dict[str, float | None]:
    """Per-layer angle between the true error signal and ``rule``'s signal.

    One forward pass; both backward passes reuse its cached activations.
    Signals are taken at each layer's pre-activation, over the whole batch.
    """
    rule = FeedbackRule.parse(rule)
    logits = net.forward(x)
    _, dlogits = softmax_cross_entropy(logits, labels)
    true = net.backward(dlogits, FeedbackRule.BP).deltas
    alt = true if rule is FeedbackRule.BP else net.backward(dlogits, rule).deltas
    return {name: angle_between(true[name], alt[name]) for name in net.layer_names}


def sign_concordance(w: np.ndarray, b0: np.ndarray) -> float:
    """Fraction of entries where sign(w) == sign(b0), with sign(0) = 0."""
    if w.shape != b0.shape:
        raise DimensionError(f"weight shape {w.shape} differs from feedback shape {b0.shape}")
    return float(np.mean(sign(w) == sign(b0)))


def concordance_report(net: Network) -> dict[str, float | None]:
    out = {}
    for layer in net.weight_layers:
        if layer.B0 is None or layer.B0.shape != layer.W.shape:
            out[layer.name] = None
        else:
            out[layer.name] = sign_concordance(layer.W, layer.B0)
    return out


# ---------------------------------------------------------------------------
# Linear CKA
# ---------------------------------------------------------------------------

def _center_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float | None:
    """Linear CKA between two (samples, features) matrices.

    ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F). Returns None when either
    input has no variance across samples.
    """
    x = x.reshape(len(x), -1)
    y = y.reshape(len(y), -1)
    if len(x) != len(y):
        raise DimensionError(f"sample counts differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DimensionError("CKA needs at least two samples")
    xc, yc = _center_columns(x), _center_columns(y)
    # Gram form is cheaper whenever there are more features than samples.
    if max(xc.shape[1], yc.shape[1]) > len(xc):
        k, l = xc @ xc.T, yc @ yc.T
        num = float(np.sum(k * l))
        den = np.linalg.norm(k) * np.linalg.norm(l)
    else:
        num = float(np.linalg.norm(yc.T @ xc) ** 2)
        den = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if den == 0:
        return None
    return num / den


def centered_gram(x, rows=None, chunk: int = 2048) -> np.ndarray | None:
    """Unit-Frobenius-norm centered Gram matrix of ``x[rows]``.

    Features are streamed in column chunks so ``x`` may be a memmap of a
    dump larger than memory. Returns None for zero-variance input.
    """
    rows = np.arange(x.shape[0]) if rows is None else np.asarray(rows)
    n, p = len(rows), x.shape[1]
    gram = np.zeros((n, n), dtype=np.float64)
    for start in range(0, p, chunk):
        block = np.asarray(x[rows, start:start + chunk], dtype=np.float64)
        block -= block.mean(axis=0, keepdims=True)
        gram += block @ block.T
    norm = np.linalg.norm(gram)
    if norm == 0:
        return None
    gram /= norm
    return gram


@dataclass
class ActivationDump:
    model_id: str
    layers: dict[str, np.ndarray]  # (n, features) per layer
    labels: np.ndarray
    predictions: np.ndarray
    sample_index: np.ndarray
    split: str = "test"

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)


def dump_activations(net: Network, dataset: Dataset, model_id: str, path=None,
                     batch_size: int = 250) -> ActivationDump:
    """Record every weight layer's output for ``dataset`` (center-cropped).

    With ``path`` the activations go straight into a container file on disk and
    the returned dump holds read-only memmaps into it.
    """
    n = len(dataset)
    if n == 0:
        raise EmptySubsetError(f"nothing to dump: {dataset.split_tag} split is empty")
    net.forward(eval_inputs(dataset, np.arange(1)))
    shapes = {name: tuple(a.shape[1:]) for name, a in net.activations().items()}
    layout = [(name, np.float32, (n, int(np.prod(s)))) for name, s in shapes.items()]
    layout += [("labels", np.int64, (n,)), ("predictions", np.int64, (n,)),
               ("sample_index", np.int64, (n,))]
    header = {"kind": "activation_dump", "model_id": model_id, "split": dataset.split_tag,
              "layers": [{"name": k, "shape": list(v)} for k, v in shapes.items()]}
    if path is not None:
        store = container.create_container(path, header, layout)
    else:
        store = {name: np.zeros(shape, dtype) for name, dtype, shape in layout}
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        logits = net.forward(eval_inputs(dataset, idx))
        for name, a in net.activations().items():
            store[name][idx] = a.reshape(len(idx), -1)
        store["predictions"][idx] = logits.argmax(axis=1)
    store["labels"][:] = dataset.labels
    store["sample_index"][:] = dataset.indices
    if path is not None:
        for arr in store.values():
            if isinstance(arr, np.memmap):
                arr.flush()
        return load_dump(path)
    return ActivationDump(model_id, {k: store[k] for k in shapes}, store["labels"],
                          store["predictions"], store["sample_index"], dataset.split_tag)


def load_dump(path) -> ActivationDump:
    header, t = container.read_container(path, mmap=True)
    if header.get("kind") != "activation_dump":
        raise StateError(f"{path} is not an activation dump")
    layers = {e["name"]: t[e["name"]] for e in header["layers"]}
    return ActivationDump(header["model_id"], layers, np.asarray(t["labels"]),
                          np.asarray(t["predictions"]), np.asarray(t["sample_index"]),
                          header.get("split", "test"))


def subset_mask(dump_a: ActivationDump, dump_b: ActivationDump, subset: str) -> np.ndarray:
    if not np.array_equal(dump_a.sample_index, dump_b.sample_index):
        raise DimensionError("activation dumps cover different samples")
    if subset == "all":
        return np.ones(len(dump_a.labels), dtype=bool)
    if subset == "both_correct":
        return dump_a.correct & dump_b.correct
    if subset == "a_correct_b_wrong":
        return dump_a.correct & ~dump_b.correct
    raise DomainError(f"unknown subset {subset!r}; expected one of {', '.join(SUBSETS)}")


def subset_sizes(dump_a: ActivationDump, dump_b: ActivationDump) -> dict[str, int]:
    return {s: int(subset_mask(dump_a, dump_b, s).sum()) for s in SUBSETS}


def cka_grid(dump_a: ActivationDump, dump_b: ActivationDump, subset: str = "all") -> np.ndarray:
    """Layer-by-layer linear CKA; entry (i, j) compares A's layer i with B's layer j."""
    rows = np.flatnonzero(subset_mask(dump_a, dump_b, subset))
    if len(rows) < 2:
        sizes = ", ".join(f"{k}={v}" for k, v in subset_sizes(dump_a, dump_b).items())
        raise EmptySubsetError(f"subset {subset!r} has {len(rows)} samples ({sizes})")
    # Large subsets keep the cached grams in float32; products are summed in float64.
    compact = len(rows) > GRAM_F64_LIMIT
    grams_a = []
    for name in dump_a.layer_names:
        g = centered_gram(dump_a.layers[name], rows)
        grams_a.append(g.astype(np.float32) if compact and g is not None else g)
    grid = np.full((len(grams_a), len(dump_b.layers)), np.nan)
    for j, name in enumerate(dump_b.layer_names):
        gb = centered_gram(dump_b.layers[name], rows)
        for i, ga in enumerate(grams_a):
            if ga is not None and gb is not None:
                grid[i, j] = _gram_dot(ga, gb)
    return grid


def _gram_dot(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, len(a), chunk):
        total += float(np.sum(a[start:start + chunk].astype(np.float64) * b[start:start + chunk]))
    return total


# ---------------------------------------------------------------------------
# Channel importance and exemplars
# ---------------------------------------------------------------------------

def channel_importance_from_maps(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Mean over images of |spatial-mean gradient * spatial-mean activation|.

    Both inputs are (N, C, H, W); returns one score per channel.
    """
    if acts.shape != grads.shape or acts.ndim != 4:
        raise DimensionError(f"activation {acts.shape} and gradient {grads.shape} maps must match")
    a = acts.astype(np.float64).mean(axis=(2, 3))
    g = grads.astype(np.float64).mean(axis=(2, 3))
    return np.abs(g * a).mean(axis=0)


@dataclass
class ChannelImportance:
    layer: str
    class_id: int
    scores: np.ndarray
    n_images: int

    @property
    def ranking(self) -> np.ndarray:
        # stable sort keeps lower channel index first among ties
        return np.argsort(-self.scores, kind="stable")

    def top(self, k: int) -> list[int]:
        return [int(c) for c in self.ranking[:k]]


def channel_importance(net: Network, dataset: Dataset, class_id: int, layer: str,
                       batch_size: int = 250) -> ChannelImportance:
    """Grad-CAM style channel scores over the images of one class.

    The gradient of each image's own top logit is sent back with true
    backprop whatever rule trained ``net``.
    """
    if layer not in CONV_LAYERS:
        raise DomainError(f"channel importance is defined for {CONV_LAYERS}, not {layer!r}")
    idx_all = np.flatnonzero(dataset.labels == class_id)
    if len(idx_all) == 0:
        raise EmptySubsetError(f"no images of class {class_id} in {dataset.split_tag} split")
    total = None
    for start in range(0, len(idx_all), batch_size):
        idx = idx_all[start:start + batch_size]
        logits = net.forward(eval_inputs(dataset, idx))
        onehot = np.zeros_like(logits)
        onehot[np.arange(len(idx)), logits.argmax(axis=1)] = 1
        res = net.backward(onehot, FeedbackRule.BP)
        acts = net.activations()[layer]
        part = channel_importance_from_maps(acts, res.post_grads[layer]) * len(idx)
        total = part if total is None else total + part
    return ChannelImportance(layer, class_id, total / len(idx_all), len(idx_all))


def channel_means(net: Network, dataset: Dataset, layer: str, batch_size: int = 250) -> np.ndarray:
    """Spatial-mean activation of every channel of ``layer``, shape (N, C)."""
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(len(dataset), start + batch_size))
        net.forward(eval_inputs(dataset, idx))
        out.append(net.activations()[layer].mean(axis=(2, 3)))
    return np.concatenate(out)


def rank_exemplars(scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top ``k`` positions by score, descending; ties go to the lower index."""
    if not 0 < k <= len(scores):
        raise DomainError(f"k={k} must be in [1, {len(scores)}]")
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    return [(int(i), float(scores[i])) for i in order[:k]]


def top_exemplars(net: Network, dataset: Dataset, layer: str, channel: int, k: int = 9,
                  means: np.ndarray | None = None) -> list[tuple[int, float]]:
    """The ``k`` images of ``dataset`` that drive one channel hardest.

    Returned indices are positions in ``dataset``.
    """
    if means is None:
        means = channel_means(net, dataset, layer)
    return rank_exemplars(means[:, channel], k)


def montage(images: np.ndarray, cols: int = 3, gap: int = 2) -> np.ndarray:
    """Tile (N, 3, H, W) uint8 images into one (rows*H, cols*W, 3) grid."""
    n, _, h, w = images.shape
    rows = -(-n // cols)
    canvas = np.zeros((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap, 3), np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        canvas[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = im.transpose(1, 2, 0)
    return canvas


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_exemplars(out_dir, dataset: Dataset, layer: str, channel: int,
                    hits: list[tuple[int, float]], model_id: str = "") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    stem = out_dir / f"exemplars_{layer}_{channel}"
    idx = np.array([i for i, _ in hits], dtype=np.int64)
    write_ppm(stem.with_suffix(".ppm"), montage(dataset.pixels[idx]))
    entries = [{"rank": r, "position": int(i), "sample_index": int(dataset.indices[i]),
                "mean_activation": act, "label": int(dataset.labels[i]),
                "class": CLASSES[int(dataset.labels[i])]}
               for r, (i, act) in enumerate(hits)]
    meta = {"model": model_id, "layer": layer, "channel": int(channel), "k": len(hits),
            "split": dataset.split_tag, "entries": entries}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return stem.with_suffix(".ppm"), stem.with_suffix(".json")
