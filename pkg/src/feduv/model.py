"""Multilayer perceptron with manual backpropagation and momentum SGD.

Layout: encoder (Linear+ReLU per hidden dim), projector (Linear, ReLU,
Linear), classifier (Linear). The projector output is the representation
matrix fed to the uniformity loss; the classifier output is the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericsError, RngStream, as_matrix, orthonormalize_rows


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    encoder_dims: tuple[int, ...] = (64,)
    projector_dim: int = 64
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        dims = (self.input_dim, *self.encoder_dims, self.projector_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for every linear layer, in forward order."""
        dims = [self.input_dim, *self.encoder_dims, self.projector_dim, self.projector_dim]
        shapes = [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
        shapes.append((self.num_classes, self.projector_dim))
        return shapes


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    frozen: bool = False

    def copy(self) -> "Layer":
        return Layer(self.weights.copy(), self.bias.copy(), self.frozen)


@dataclass
class ModelParams:
    config: MlpConfig
    layers: list[Layer]

    @property
    def n_encoder(self) -> int:
        return len(self.config.encoder_dims)

    @property
    def encoder(self) -> list[Layer]:
        return self.layers[: self.n_encoder]

    @property
    def projector(self) -> list[Layer]:
        return self.layers[self.n_encoder : self.n_encoder + 2]

    @property
    def classifier(self) -> Layer:
        return self.layers[-1]

    @property
    def reps_index(self) -> int:
        """Index of the layer whose output is the representation matrix."""
        return len(self.layers) - 2

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, [layer.copy() for layer in self.layers])

    def flatten(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias.ravel())
        return np.concatenate(parts)

    def unflatten(self, vec) -> "ModelParams":
        """New params with this model's shapes and freeze flags, filled from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise NumericsError(f"expected {self.size} values, got {vec.size}")
        layers, off = [], 0
        for layer in self.layers:
            nw, nb = layer.weights.size, layer.bias.size
            w = vec[off : off + nw].reshape(layer.weights.shape).copy()
            off += nw
            b = vec[off : off + nb].copy()
            off += nb
            layers.append(Layer(w, b, layer.frozen))
        return ModelParams(self.config, layers)

    @property
    def size(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def check_congruent(self, other: "ModelParams") -> None:
        if len(self.layers) != len(other.layers) or any(
            a.weights.shape != b.weights.shape or a.bias.shape != b.bias.shape
            for a, b in zip(self.layers, other.layers)
        ):
            raise NumericsError("parameter shapes are not congruent")


# Per-layer (dW, db) pairs, congruent with ModelParams.layers.
Gradients = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation output of each layer
    reps: np.ndarray
    logits: np.ndarray


@dataclass
class SgdState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    buffers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: ModelParams, lr=0.01, momentum=0.9, weight_decay=1e-5) -> "SgdState":
        bufs = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers]
        return cls(lr, momentum, weight_decay, bufs)


def init_params(config: MlpConfig, rng: RngStream) -> ModelParams:
    gen = rng.generator()
    layers = []
    for out_dim, in_dim in config.layer_shapes():
        w = gen.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
        layers.append(Layer(w, np.zeros(out_dim)))
    return ModelParams(config, layers)


def _has_relu(params: ModelParams, i: int) -> bool:
    # Everything except the second projector layer and the classifier.
    return i < params.reps_index


def forward(params: ModelParams, x) -> ForwardCache:
    h = as_matrix(x, "x")
    if h.shape[1] != params.config.input_dim:
        raise NumericsError(f"x has {h.shape[1]} columns, model expects {params.config.input_dim}")
    inputs, pre = [], []
    reps = None
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if _has_relu(params, i) else z
        if i == params.reps_index:
            reps = h
    return ForwardCache(inputs, pre, reps, h)


def backward(params: ModelParams, cache: ForwardCache, grad_logits, grad_reps=None) -> Gradients:
    """Gradients of a scalar loss given its derivatives w.r.t. logits and reps.

    ``grad_reps`` is added at the projector output, on top of whatever flows
    back from the classifier. Frozen layers get zero gradients but still pass
    the signal through.
    """
    g = as_matrix(grad_logits, "grad_logits")
    if g.shape != cache.logits.shape:
        raise NumericsError(f"grad_logits shape {g.shape} != logits shape {cache.logits.shape}")
    if grad_reps is not None:
        grad_reps = as_matrix(grad_reps, "grad_reps")
        if grad_reps.shape != cache.reps.shape:
            raise NumericsError(f"grad_reps shape {grad_reps.shape} != reps shape {cache.reps.shape}")
    grads: Gradients = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if i == params.reps_index and grad_reps is not None:
            g = g + grad_reps
        if _has_relu(params, i):
            g = g * (cache.pre[i] > 0.0)
        if layer.frozen:
            grads[i] = (np.zeros_like(layer.weights), np.zeros_like(layer.bias))
        else:
            grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        if i > 0:
            g = g @ layer.weights
    return grads


def sgd_step(params: ModelParams, grads: Gradients, state: SgdState) -> ModelParams:
    """One momentum-SGD step with coupled weight decay; updates ``state`` buffers."""
    if len(grads) != len(params.layers) or len(state.buffers) != len(params.layers):
        raise NumericsError("gradients/buffers are not congruent with params")
    new_layers = []
    for i, (layer, (gw, gb)) in enumerate(zip(params.layers, grads)):
        if layer.frozen:
            new_layers.append(layer)
            continue
        vw, vb = state.buffers[i]
        vw = state.momentum * vw + (gw + state.weight_decay * layer.weights)
        vb = state.momentum * vb + (gb + state.weight_decay * layer.bias)
        state.buffers[i] = (vw, vb)
        new_layers.append(Layer(layer.weights - state.lr * vw, layer.bias - state.lr * vb, False))
    return ModelParams(params.config, new_layers)


def freeze_classifier(params: ModelParams, rng: RngStream) -> ModelParams:
    """Replace the classifier by random orthonormal rows and freeze it."""
    d, p = params.classifier.weights.shape
    if d > p:
        raise NumericsError(f"cannot freeze an orthonormal {d}x{p} classifier (classes > projector_dim)")
    draw = rng.child(0).generator().standard_normal((d, p))
    w = orthonormalize_rows(draw, rng.child(1))
    out = params.copy()
    out.layers[-1] = Layer(w, np.zeros(d), frozen=True)
    return out

