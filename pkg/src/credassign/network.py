"""Layered conv net with hand-written forward/backward passes.

Every backward pass produces the same weight gradients from (error signal,
cached input); the feedback rule only decides how the error signal reaches
the layer below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, StateError
from .feedback import FeedbackRule, effective_feedback

CONV1, CONV2, FC1, FC2, FC3 = "conv1", "conv2", "fc1", "fc2", "fc3"
CIFAR_LAYERS = (CONV1, CONV2, FC1, FC2, FC3)


@dataclass
class ConvLayer:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    relu: bool = True
    in_size: tuple[int, int] = (0, 0)
    W: np.ndarray | None = None
    bias: np.ndarray | None = None
    B0: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)

    kind = "conv"

    @property
    def out_size(self) -> tuple[int, int]:
        h, w = self.in_size
        return (T.conv_output_size(h, self.k, self.stride, self.padding),
                T.conv_output_size(w, self.k, self.stride, self.padding))

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.c_out, self.c_in, self.k, self.k)

    @property
    def d_in(self) -> int:
        return self.c_in * self.in_size[0] * self.in_size[1]

    @property
    def d_out(self) -> int:
        oh, ow = self.out_size
        return self.c_out * oh * ow

    @property
    def fan_in(self) -> int:
        return self.c_in * self.k * self.k

    def dense_feedback_shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1:] != (self.c_in, *self.in_size):
            raise DimensionError(f"{self.name}: expected input (N, {self.c_in}, {self.in_size[0]}, "
                                 f"{self.in_size[1]}), got {x.shape}")
        n = x.shape[0]
        oh, ow = self.out_size
        cols = T.im2col(x, self.k, self.k, self.stride, self.padding)
        u = cols @ self.W.reshape(self.c_out, -1).T + self.bias
        u = np.ascontiguousarray(u.reshape(n, oh, ow, self.c_out).transpose(0, 3, 1, 2))
        a = T.relu(u) if self.relu else u
        self.cache = {"cols": cols, "u": u, "a": a, "n": n}
        return a

    def param_grads(self, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = delta.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        dW = (d.T @ self.cache["cols"]).reshape(self.weight_shape)
        return dW, delta.sum(axis=(0, 2, 3))

    def send_back(self, delta: np.ndarray, rule: FeedbackRule) -> np.ndarray:
        """Error at this layer's input, routed through the rule's feedback."""
        if rule is FeedbackRule.FA_RANDOM:
            if self.B0 is None:
                raise ConfigurationError(f"{self.name}: FA_RANDOM needs a dense feedback matrix")
            e = delta.reshape(delta.shape[0], -1) @ self.B0
            return e.reshape(delta.shape[0], self.c_in, *self.in_size)
        B = effective_feedback(self.W, self.B0, rule)
        return T.conv2d_transposed(delta, B, self.stride, self.padding, self.in_size)

    def to_spec(self) -> dict:
        return {"type": "conv", "name": self.name, "c_in": self.c_in, "c_out": self.c_out,
                "k": self.k, "stride": self.stride, "padding": self.padding, "relu": self.relu}


@dataclass
class DenseLayer:
    name: str
    d_in: int
    d_out: int
    relu: bool = True
    W: np.ndarray | None = None
    bias: np.ndarray | None = None
    B0: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)

    kind = "fc"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.d_out, self.d_in)

    @property
    def fan_in(self) -> int:
        return self.d_in

    def forward(self, x: np.ndarray) -> np.ndarray:
        in_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.d_in:
            raise DimensionError(f"{self.name}: expected {self.d_in} input features, got {x.shape[1]}")
        u = x @ self.W.T + self.bias
        a = T.relu(u) if self.relu else u
        self.cache = {"x": x, "in_shape": in_shape, "u": u, "a": a, "n": x.shape[0]}
        return a

    def param_grads(self, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return delta.T @ self.cache["x"], delta.sum(axis=0)

    def send_back(self, delta: np.ndarray, rule: FeedbackRule) -> np.ndarray:
        # Feedback matrices are stored in W's (out, in) orientation and applied transposed.
        B = effective_feedback(self.W, self.B0, rule)
        return (delta @ B).reshape(self.cache["in_shape"])

    def to_spec(self) -> dict:
        return {"type": "fc", "name": self.name, "d_in": self.d_in, "d_out": self.d_out,
                "relu": self.relu}


@dataclass
class MaxPoolLayer:
    window: int = 2
    in_shape: tuple[int, int, int] = (0, 0, 0)
    cache: dict = field(default_factory=dict, repr=False)

    kind = "pool"
    name = "pool"

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, idx = T.maxpool2d(x, self.window, self.window)
        self.cache = {"argmax": idx, "shape": x.shape}
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        return T.maxpool2d_backward(g, self.cache["argmax"], self.cache["shape"], self.window)

    def to_spec(self) -> dict:
        return {"type": "pool", "window": self.window}


@dataclass
class BackwardResult:
    grads: dict[str, tuple[np.ndarray, np.ndarray]]
    deltas: dict[str, np.ndarray]
    """Error signal at each layer's pre-activation (after the ReLU mask)."""
    post_grads: dict[str, np.ndarray]
    """Signal arriving at each layer's output, before the ReLU mask."""


class Network:
    """Ordered stack of conv / pool / dense layers.

    Shapes are inferred from ``input_shape`` (C, H, W) at construction so the
    geometry is checked once, up front.
    """

    def __init__(self, layers, input_shape=(3, 24, 24), dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self._forward_done = False
        c, h, w = self.input_shape
        flat = None
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                if flat is not None:
                    raise ConfigurationError("conv layer after a dense layer")
                if layer.c_in != c:
                    raise ConfigurationError(f"{layer.name}: expects {layer.c_in} channels, gets {c}")
                layer.in_size = (h, w)
                (h, w), c = layer.out_size, layer.c_out
            elif isinstance(layer, MaxPoolLayer):
                if h % layer.window or w % layer.window:
                    raise ConfigurationError(f"pool input {(h, w)} not divisible by {layer.window}")
                layer.in_shape = (c, h, w)
                h, w = h // layer.window, w // layer.window
            elif isinstance(layer, DenseLayer):
                d = c * h * w if flat is None else flat
                if layer.d_in != d:
                    raise ConfigurationError(f"{layer.name}: expects {layer.d_in} inputs, gets {d}")
                flat = layer.d_out
            else:
                raise ConfigurationError(f"unknown layer {layer!r}")

    # -- structure ---------------------------------------------------------

    @property
    def weight_layers(self) -> list:
        return [l for l in self.layers if l.kind != "pool"]

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.weight_layers]

    def layer(self, name: str):
        for l in self.weight_layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def to_spec(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_spec() for l in self.layers]}

    @classmethod
    def from_spec(cls, spec: dict, dtype=np.float32) -> "Network":
        layers = []
        for s in spec["layers"]:
            s = dict(s)
            kind = s.pop("type")
            if kind == "conv":
                layers.append(ConvLayer(**s))
            elif kind == "fc":
                layers.append(DenseLayer(**s))
            elif kind == "pool":
                layers.append(MaxPoolLayer(**s))
            else:
                raise ConfigurationError(f"unknown layer type {kind!r}")
        return cls(layers, spec["input_shape"], dtype)

    # -- parameters --------------------------------------------------------

    def init_weights(self, rng: np.random.Generator) -> None:
        """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
        for l in self.weight_layers:
            l.W = T.randn(rng, l.weight_shape, np.sqrt(2.0 / l.fan_in), self.dtype)
            l.bias = np.zeros(l.weight_shape[0], dtype=self.dtype)

    def init_feedback(self, rule: FeedbackRule, sigma: float | None, rng: np.random.Generator) -> None:
        """Draw the fixed random feedback matrices B0 ~ N(0, sigma^2) the rule needs.

        FA_RANDOM conv layers get a dense (d_out, d_in) matrix. The bottom
        layer's dense matrix is never read (nothing sits below it) and would
        be the largest by far, so it is not allocated.
        """
        rule = FeedbackRule.parse(rule)
        for i, l in enumerate(self.weight_layers):
            l.B0 = None
            if not rule.needs_b0:
                continue
            if rule.dense_conv_feedback and l.kind == "conv":
                if i == 0:
                    continue
                shape = l.dense_feedback_shape()
            else:
                shape = l.weight_shape
            l.B0 = T.randn(rng, shape, sigma, self.dtype)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.weight_layers:
            out[f"{l.name}.W"] = l.W
            out[f"{l.name}.bias"] = l.bias
        return out

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        for l in self.weight_layers:
            l.W = params[f"{l.name}.W"]
            l.bias = params[f"{l.name}.bias"]

    def feedback_tensors(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.B0": l.B0 for l in self.weight_layers if l.B0 is not None}

    def astype(self, dtype) -> "Network":
        net = Network.from_spec(self.to_spec(), dtype)
        for src, dst in zip(self.weight_layers, net.weight_layers):
            dst.W = src.W.astype(dtype)
            dst.bias = src.bias.astype(dtype)
            dst.B0 = None if src.B0 is None else src.B0.astype(dtype)
        return net

    def copy(self) -> "Network":
        net = self.astype(self.dtype)
        return net

    # -- passes ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        h = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            h = layer.forward(h)
        self._forward_done = True
        return h

    def activations(self) -> dict[str, np.ndarray]:
        """Post-activation outputs of every weight layer from the last forward pass.

        Conv maps are post-ReLU, pre-pool; the last layer's entry is the logits.
        """
        if not self._forward_done:
            raise StateError("no forward pass has been run")
        return {l.name: l.cache["a"] for l in self.weight_layers}

    def backward(self, dlogits: np.ndarray, rule: FeedbackRule = FeedbackRule.BP) -> BackwardResult:
        """Propagate ``dlogits`` down the stack using ``rule``'s feedback.

        The top layer's error signal is ``dlogits`` itself for every rule; the
        first substitution is the feedback that carries it into the layer below.
        """
        if not self._forward_done:
            raise StateError("backward called before forward")
        rule = FeedbackRule.parse(rule)
        grads, deltas, post = {}, {}, {}
        g = dlogits.astype(self.dtype, copy=False)
        bottom = self.weight_layers[0]
        for layer in reversed(self.layers):
            if layer.kind == "pool":
                g = layer.backward(g)
                continue
            g = g.reshape(layer.cache["a"].shape)
            post[layer.name] = g
            delta = g * T.relu_backward_mask(layer.cache["u"]) if layer.relu else g
            deltas[layer.name] = delta
            grads[layer.name] = layer.param_grads(delta)
            if layer is bottom:
                break
            g = layer.send_back(delta, rule)
        return BackwardResult(grads=grads, deltas=deltas, post_grads=post)

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.weight_layers[-1].weight_shape[0]), self.dtype)


def build_network(conv_channels=(64, 64), kernel=5, hidden=(384, 192), num_classes=10,
                  input_shape=(3, 24, 24), kernels=None, dtype=np.float32) -> Network:
    """Conv/ReLU/pool blocks followed by ReLU dense layers and a linear read-out.

    Defaults give the 24x24 CIFAR architecture: 24 -> 20 -> 10 -> 6 -> 3,
    so the first dense layer sees 64 * 3 * 3 = 576 features.
    """
    kernels = kernels or [kernel] * len(conv_channels)
    layers = []
    c, h, w = input_shape
    for i, (ch, k) in enumerate(zip(conv_channels, kernels), start=1):
        layers.append(ConvLayer(f"conv{i}", c, ch, k))
        layers.append(MaxPoolLayer(2))
        c, h, w = ch, (h - k + 1) // 2, (w - k + 1) // 2
    d = c * h * w
    dims = list(hidden) + [num_classes]
    for i, d_out in enumerate(dims, start=1):
        layers.append(DenseLayer(f"fc{i}", d, d_out, relu=i < len(dims)))
        d = d_out
    return Network(layers, input_shape, dtype)


def cifar_network(dtype=np.float32) -> Network:
    net = build_network(dtype=dtype)
    assert net.layer(FC1).d_in == 576
    return net


def init_network(net: Network, rule: FeedbackRule, sigma: float | None, seed: int) -> Network:
    """Seeded init: forward weights depend only on ``seed``, so every rule starts
    from the same weights; feedback draws use a separate stream."""
    net.init_weights(T.make_rng(seed, "init"))
    net.init_feedback(rule, sigma, T.make_rng(seed, "feedback"))
    return net
