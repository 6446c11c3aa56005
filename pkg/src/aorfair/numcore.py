"""Dense float64 layers with hand-written reverse-mode gradients.

Matrices are plain 2-D ``numpy.float64`` arrays. A network is a list of
layers; :func:`forward` records every activation in a :class:`Trace` and
:func:`backward` walks that trace in reverse, accumulating into the
``grad`` of each trainable :class:`Parameter`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    name: str = ""
    trainable: bool = True
    grad: np.ndarray = field(init=False)
    # bumped by optimizers; lets backward() detect activations from older weights
    version: int = field(default=0, init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(as_matrix(self.value))
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    kind = ""
    in_dim: int
    out_dim: int

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x, out, g, accumulate=True) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight: Parameter, bias: Parameter):
        if bias.shape != (1, weight.shape[1]):
            raise DimensionError(
                f"bias {bias.name!r} has shape {bias.shape}, expected (1, {weight.shape[1]})")
        self.weight = weight
        self.bias = bias
        self.in_dim, self.out_dim = weight.shape

    @classmethod
    def init(cls, in_dim, out_dim, rng: np.random.Generator, name=""):
        """He-style uniform init, bound sqrt(6 / fan_in); zero bias."""
        bound = np.sqrt(6.0 / in_dim)
        w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        return cls(Parameter(w, f"{name}.weight"),
                   Parameter(np.zeros((1, out_dim)), f"{name}.bias"))

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return x @ self.weight.value + self.bias.value

    def backward(self, x, out, g, accumulate=True):
        if accumulate:
            if self.weight.trainable:
                self.weight.grad += x.T @ g
            if self.bias.trainable:
                self.bias.grad += g.sum(axis=0, keepdims=True)
        return g @ self.weight.value.T


class ReLU(Layer):
    kind = "relu"

    def __init__(self, dim: int):
        self.in_dim = self.out_dim = dim

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, out, g, accumulate=True):
        return g * (x > 0.0)


class SoftmaxOutput(Layer):
    """Row-wise softmax as a layer. Loss code works on logits instead."""

    kind = "softmax-output"

    def __init__(self, dim: int):
        self.in_dim = self.out_dim = dim

    def forward(self, x):
        return softmax(x)

    def backward(self, x, out, g, accumulate=True):
        return out * (g - np.sum(g * out, axis=1, keepdims=True))


class Trace(list):
    """Activations of one forward pass: input first, output last."""

    def __init__(self, layers, acts):
        super().__init__(acts)
        self.layer_ids = tuple(id(layer) for layer in layers)
        self.versions = tuple(p.version for layer in layers for p in layer.parameters())

    @property
    def output(self):
        return self[-1]


def forward(layers: Sequence[Layer], X) -> Trace:
    X = as_matrix(X)
    if X.shape[0] < 1:
        raise DimensionError("empty batch")
    acts = [X]
    for i, layer in enumerate(layers):
        h = acts[-1]
        if h.shape[1] != layer.in_dim:
            raise DimensionError(
                f"layer {i} ({layer.kind}) expects {layer.in_dim} inputs, got {h.shape[1]}")
        acts.append(layer.forward(h))
    return Trace(layers, acts)


def backward(layers: Sequence[Layer], trace: Trace, upstream_grad, *,
             need_input_grad: bool = False, accumulate: bool = True):
    """Backpropagate ``upstream_grad`` (d objective / d output) through ``layers``.

    Gradients are added to trainable parameters; frozen ones are left alone.
    Returns the gradient with respect to the network input when
    ``need_input_grad`` is set, otherwise None. Propagation stops early once
    nothing below can receive a gradient.
    """
    if not isinstance(trace, Trace) or len(trace) != len(layers) + 1:
        raise ContractError("activations do not come from a forward pass over these layers")
    if trace.layer_ids != tuple(id(layer) for layer in layers):
        raise ContractError("activations were produced by a different layer stack")
    if trace.versions != tuple(p.version for layer in layers for p in layer.parameters()):
        raise ContractError("stale activations: parameters were updated after forward")
    g = as_matrix(upstream_grad)
    if g.shape != trace.output.shape:
        raise DimensionError(
            f"upstream grad shape {g.shape} != output shape {trace.output.shape}")

    # index of the lowest layer that still needs a gradient from above
    lowest = 0
    if not need_input_grad:
        lowest = len(layers)
        for i, layer in enumerate(layers):
            if any(p.trainable for p in layer.parameters()):
                lowest = i
                break
    for i in range(len(layers) - 1, lowest - 1, -1):
        g = layers[i].backward(trace[i], trace[i + 1], g, accumulate)
    return g if need_input_grad else None


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits, targets):
    """Mean categorical cross-entropy over the batch and its gradient w.r.t. logits."""
    logits = as_matrix(logits)
    targets = as_matrix(targets)
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    if logits.shape[1] < 2:
        raise DimensionError("need at least two classes")
    binary = (targets == 0.0) | (targets == 1.0)
    bad = ~(binary.all(axis=1) & (targets.sum(axis=1) == 1.0))
    if bad.any():
        raise ValueError(f"target row {int(np.argmax(bad))} is not one-hot")
    b = logits.shape[0]
    p = softmax(logits)
    loss = -np.sum(targets * np.log(np.maximum(p, PROB_FLOOR))) / b
    return float(loss), (p - targets) / b


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if v > self.tol]

    @property
    def ok(self) -> bool:
        return not self.failed


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(objective: Callable[[], float], params: Sequence[Parameter],
               h: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare each trainable parameter's stored ``grad`` with central differences.

    ``objective`` is re-evaluated with one entry perturbed at a time, so it
    must be a deterministic function of the current parameter values.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-8, 1e-4]")
    # snapshot first: the objective may accumulate into grads as it runs
    analytic_grads = [p.grad.copy() for p in params]
    errs = {}
    for k, (p, analytic) in enumerate(zip(params, analytic_grads)):
        if not p.trainable:
            continue
        numeric = np.zeros_like(analytic)
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = objective()
            flat[j] = orig - h
            fm = objective()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"objective not finite while perturbing {p.name or k}")
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * h)
        errs[p.name or str(k)] = float(rel_err(analytic, numeric).max(initial=0.0))
    return GradCheckReport(errs, tol)
