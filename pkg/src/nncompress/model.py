"""Layer graph, parameter/mask registry, SGD training and evaluation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidInputError, ShapeError, StateError


@dataclass
class Dataset:
    inputs: np.ndarray  # n x C x H x W
    labels: np.ndarray  # n
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError("inputs and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])


# Layer specs. Parametrised layers own a name; their tensors live in
# Model.params under "<name>.weight" / "<name>.bias".

@dataclass(frozen=True)
class Conv2d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def param_shapes(self):
        return {f"{self.name}.weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
                f"{self.name}.bias": (self.out_channels,)}

    def fan_in(self):
        return self.in_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int

    def param_shapes(self):
        return {f"{self.name}.weight": (self.out_features, self.in_features),
                f"{self.name}.bias": (self.out_features,)}

    def fan_in(self):
        return self.in_features


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


def layer_of(class_id):
    """Layer name a weight class belongs to (``"fc1.weight"`` -> ``"fc1"``)."""
    return class_id.rsplit(".", 1)[0]


@dataclass(eq=False)
class Model:
    arch_name: str
    layers: list
    params: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    prunable: tuple = ()
    _cache: list | None = field(default=None, repr=False, compare=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def class_ids(self):
        return list(self.params)

    def copy(self):
        m = copy.copy(self)
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.masks = {k: v.copy() for k, v in self.masks.items()}
        m._cache = None
        return m

    def astype(self, dtype):
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        return m

    def apply_masks(self):
        for k, p in self.params.items():
            p[~self.masks[k]] = 0

    # forward / backward ------------------------------------------------

    def forward(self, x, record=False):
        x = np.asarray(x, dtype=self.dtype)
        cache = []
        for layer in self.layers:
            inp = x
            if isinstance(layer, Conv2d):
                x = T.conv2d(x, self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"],
                             layer.stride, layer.padding)
            elif isinstance(layer, Linear):
                w = self.params[f"{layer.name}.weight"]
                if x.ndim != 2 or x.shape[1] != w.shape[1]:
                    raise ShapeError(f"{layer.name} expects {w.shape[1]} features, got {x.shape}")
                x = x @ w.T + self.params[f"{layer.name}.bias"]
            elif isinstance(layer, ReLU):
                x = T.relu(x)
            elif isinstance(layer, MaxPool2d):
                x = T.maxpool2d(x, layer.window, layer.stride)
            elif isinstance(layer, Flatten):
                x = x.reshape(x.shape[0], -1)
            else:
                raise TypeError(f"unknown layer {layer!r}")
            if record:
                cache.append(inp)
        if record:
            self._cache = cache
        return x

    def backward(self, grad_logits):
        """Propagate ``grad_logits`` through the recorded forward pass.

        Returns one gradient per parameter group. The cache is consumed.
        """
        if self._cache is None:
            raise StateError("backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        grads = {}
        g = grad_logits
        for layer, inp in zip(reversed(self.layers), reversed(cache)):
            if isinstance(layer, Conv2d):
                g, gw, gb = T.conv2d_backward(g, inp, self.params[f"{layer.name}.weight"],
                                              layer.stride, layer.padding)
                grads[f"{layer.name}.weight"] = gw
                grads[f"{layer.name}.bias"] = gb
            elif isinstance(layer, Linear):
                w = self.params[f"{layer.name}.weight"]
                grads[f"{layer.name}.weight"] = g.T @ inp
                grads[f"{layer.name}.bias"] = g.sum(axis=0)
                g = g @ w
            elif isinstance(layer, ReLU):
                g = T.relu_backward(g, inp)
            elif isinstance(layer, MaxPool2d):
                g = T.maxpool2d_backward(g, inp, layer.window, layer.stride)
            elif isinstance(layer, Flatten):
                g = g.reshape(inp.shape)
        return {k: grads[k] for k in self.params}

    def loss(self, x, labels):
        return T.cross_entropy(self.forward(x), labels)

    def predict(self, x, batch_size=512):
        out = []
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(self.forward(x[i:i + batch_size]), axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def backward(model, inputs, labels, loss_scale=1.0):
    """Loss and gradients of ``loss_scale`` x mean cross-entropy on one batch."""
    logits = model.forward(inputs, record=True)
    loss = T.cross_entropy(logits, labels)
    grads = model.backward(T.cross_entropy_backward(logits, labels, loss_scale))
    return loss * loss_scale, grads


# builders ----------------------------------------------------------------

def _build(arch_name, layers, seed, dtype, prune_biases=False):
    rng = T.make_rng(seed)
    params = {}
    for layer in layers:
        if not isinstance(layer, (Conv2d, Linear)):
            continue
        shapes = layer.param_shapes()
        fan_in = layer.fan_in()
        wkey, bkey = f"{layer.name}.weight", f"{layer.name}.bias"
        wb = np.sqrt(6.0 / fan_in)
        params[wkey] = T.create(shapes[wkey], "uniform", rng=rng, low=-wb, high=wb, dtype=dtype)
        bb = 1.0 / np.sqrt(fan_in)
        params[bkey] = T.create(shapes[bkey], "uniform", rng=rng, low=-bb, high=bb, dtype=dtype)
    masks = {k: np.ones(v.shape, dtype=bool) for k, v in params.items()}
    prunable = tuple(k for k in params if prune_biases or k.endswith(".weight"))
    return Model(arch_name, list(layers), params, masks, prunable)


MNIST_LAYERS = (
    Conv2d("conv1", 1, 20, 5), ReLU(), MaxPool2d(2, 2),
    Conv2d("conv2", 20, 50, 5), ReLU(), MaxPool2d(2, 2),
    Flatten(),
    Linear("fc1", 800, 500), ReLU(),
    Linear("fc2", 500, 10),
)


def build_mnist_classifier(seed=0, dtype=T.DEFAULT_DTYPE, prune_biases=False):
    """Two 5x5 conv layers (20, 50 channels) and two dense layers (500, 10): 431,080 parameters."""
    return _build("mnist", MNIST_LAYERS, seed, dtype, prune_biases)


def toy_arch_name(in_shape, num_classes, channels, hidden):
    c, h, w = in_shape
    return f"toy:{c}x{h}x{w}:{channels}:{hidden}:{num_classes}"


def build_toy_classifier(in_shape=(1, 8, 8), num_classes=10, seed=0, channels=8, hidden=32,
                         dtype=T.DEFAULT_DTYPE, prune_biases=False):
    """conv 3x3 pad 1 -> relu -> maxpool 2 -> dense ``hidden`` -> relu -> dense ``num_classes``."""
    if len(in_shape) != 3:
        raise ShapeError(f"in_shape must be C x H x W, got {in_shape}")
    c, h, w = (int(d) for d in in_shape)
    if c < 1 or h < 4 or w < 4:
        raise ShapeError(f"toy classifier needs >= 1 channel and spatial dims >= 4, got {in_shape}")
    flat = channels * (h // 2) * (w // 2)
    layers = (
        Conv2d("conv1", c, channels, 3, 1, 1), ReLU(), MaxPool2d(2, 2),
        Flatten(),
        Linear("fc1", flat, hidden), ReLU(),
        Linear("fc2", hidden, num_classes),
    )
    return _build(toy_arch_name((c, h, w), num_classes, channels, hidden), layers, seed, dtype,
                  prune_biases)


def build_from_arch(arch_name, seed=0, dtype=T.DEFAULT_DTYPE):
    """Rebuild an architecture from its ``arch_name`` string."""
    if arch_name == "mnist":
        return build_mnist_classifier(seed, dtype)
    if arch_name.startswith("toy:"):
        try:
            _, shape, channels, hidden, classes = arch_name.split(":")
            in_shape = tuple(int(d) for d in shape.split("x"))
            return build_toy_classifier(in_shape, int(classes), seed, int(channels), int(hidden), dtype)
        except ValueError as exc:
            raise InvalidInputError(f"malformed toy architecture name {arch_name!r}") from exc
    raise InvalidInputError(f"unknown architecture {arch_name!r}")


# training / evaluation ---------------------------------------------------

def train_epoch(model, dataset, lr, batch_size, rng):
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        _, grads = backward(model, dataset.inputs[idx], dataset.labels[idx])
        for k, p in model.params.items():
            m = model.masks[k]
            g = np.where(m, grads[k], 0)
            p -= (lr * g).astype(p.dtype, copy=False)
            p[~m] = 0
    return model


def train(model, dataset, epochs=10, lr=0.05, batch_size=32, rng=None):
    """Plain SGD on cross-entropy, in place. Masked positions stay exactly 0."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if epochs < 1 or lr <= 0 or batch_size < 1:
        raise InvalidInputError("epochs and batch_size must be >= 1 and lr > 0")
    rng = T.make_rng(0) if rng is None else rng
    model.apply_masks()
    for _ in range(epochs):
        train_epoch(model, dataset, lr, batch_size, rng)
    return model


def evaluate(model, dataset, batch_size=512):
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    pred = model.predict(dataset.inputs, batch_size)
    return float(np.count_nonzero(pred == dataset.labels)) / len(dataset)


def count_params(model):
    """Per-class ``{"total", "surviving", "pruned"}`` counts plus a ``"__total__"`` entry."""
    out = {}
    for k, p in model.params.items():
        surviving = int(np.count_nonzero(model.masks[k]))
        out[k] = {"total": int(p.size), "surviving": surviving, "pruned": int(p.size) - surviving}
    out["__total__"] = {key: sum(v[key] for v in out.values()) for key in ("total", "surviving", "pruned")}
    return out


def layer_param_counts(model):
    """Parameter count per parametrised layer, weights and biases together."""
    counts = {}
    for k, p in model.params.items():
        counts[layer_of(k)] = counts.get(layer_of(k), 0) + int(p.size)
    return counts
