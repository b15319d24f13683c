"""Dense segment engine with explicit forward/backward.

A :class:`Segment` is an ordered stack of fully connected layers owned by one
party. Tensors are plain ``float64`` numpy arrays with the batch on axis 0.
Backward consumes the :class:`ForwardTrace` of the matching forward call and
returns exact gradients for the parameters and for the segment input, which is
what lets a segment boundary be crossed by message passing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .rng import Stream

ACTIVATIONS = ("relu", "identity")

_trace_ids = itertools.count()


class ShapeError(ValueError):
    pass


class FrozenSegmentError(RuntimeError):
    pass


class StaleTraceError(RuntimeError):
    pass


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class ForwardTrace:
    """Per-layer inputs and pre-activations cached by :func:`segment_forward`."""

    inputs: list
    preacts: list
    segment_token: int
    version: int


@dataclass
class Segment:
    layers: list
    frozen: bool = False
    momentum_state: list = field(default=None, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a segment needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer output {a.n_out} does not feed input {b.n_in}")
        if self.momentum_state is None:
            self.momentum_state = [
                (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers
            ]
        self._token = next(_trace_ids)
        self._version = 0

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def widths(self) -> list:
        return [self.n_in] + [l.n_out for l in self.layers]

    @property
    def param_count(self) -> int:
        return sum(l.size for l in self.layers)

    def copy(self) -> "Segment":
        layers = [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        state = [(vw.copy(), vb.copy()) for vw, vb in self.momentum_state]
        return Segment(layers, frozen=self.frozen, momentum_state=state)

    def freeze(self) -> "Segment":
        self.frozen = True
        return self

    def touch(self) -> None:
        """Invalidate outstanding traces after an in-place parameter change."""
        self._version += 1


def init_segment(widths, seed, activations=None, name: str = "segment") -> Segment:
    """He-normal weights and zero biases from a seeded stream.

    ``widths`` lists layer boundaries, e.g. ``[32, 64, 8]`` is two layers.
    By default every layer is ReLU except none; pass ``activations`` to override.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ShapeError(f"invalid widths {widths}")
    n_layers = len(widths) - 1
    if activations is None:
        activations = ["relu"] * n_layers
    if len(activations) != n_layers:
        raise ShapeError("one activation per layer required")
    layers = []
    for j, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
        std = np.sqrt(2.0 / n_in)
        w = Stream.of("init", name, seed, j).normal(n_out * n_in).reshape(n_out, n_in) * std
        layers.append(DenseLayer(w, np.zeros(n_out), activations[j]))
    return Segment(layers)


def concat_segments(*segments: Segment, frozen: bool = False) -> Segment:
    """Merge segments into one stack (parameters copied, optimizer state too)."""
    layers, state = [], []
    for s in segments:
        c = s.copy()
        layers.extend(c.layers)
        state.extend(c.momentum_state)
    return Segment(layers, frozen=frozen, momentum_state=state)


def segment_forward(segment: Segment, batch: np.ndarray):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != segment.n_in:
        raise ShapeError(f"batch shape {x.shape} does not match segment input width {segment.n_in}")
    inputs, preacts = [], []
    for layer in segment.layers:
        inputs.append(x)
        z = x @ layer.weight.T + layer.bias
        preacts.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return x, ForwardTrace(inputs, preacts, segment._token, segment._version)


def segment_backward(segment: Segment, trace: ForwardTrace, upstream_grad: np.ndarray):
    """Gradients of a scalar loss given dL/d(output).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list of
    ``(dW, db)`` pairs aligned with ``segment.layers``.
    """
    if trace is None:
        raise StaleTraceError("no forward trace supplied")
    if trace.segment_token != segment._token or trace.version != segment._version:
        raise StaleTraceError("trace was produced by a different or since-updated segment")
    if len(trace.inputs) != len(segment.layers):
        raise StaleTraceError("trace depth does not match layer count")
    g = np.asarray(upstream_grad, dtype=np.float64)
    expected = trace.preacts[-1].shape
    if g.shape != expected:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {expected}")
    grads = [None] * len(segment.layers)
    for j in range(len(segment.layers) - 1, -1, -1):
        layer = segment.layers[j]
        if layer.activation == "relu":
            g = g * (trace.preacts[j] > 0.0)
        grads[j] = (g.T @ trace.inputs[j], g.sum(axis=0))
        g = g @ layer.weight
    return grads, g


def sgd_step(segment: Segment, param_grads, lr: float, momentum: float = 0.0) -> Segment:
    """Heavy-ball SGD: ``v <- momentum*v + grad``; ``w <- w - lr*v``. In place."""
    if segment.frozen:
        raise FrozenSegmentError("segment is frozen")
    if len(param_grads) != len(segment.layers):
        raise ShapeError("one gradient pair per layer required")
    for layer, (vw, vb), (gw, gb) in zip(segment.layers, segment.momentum_state, param_grads):
        vw *= momentum
        vw += gw
        vb *= momentum
        vb += gb
        layer.weight -= lr * vw
        layer.bias -= lr * vb
    segment.touch()
    return segment


def softmax_xent(logits: np.ndarray, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {n}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def predict(segment: Segment, x: np.ndarray) -> np.ndarray:
    out, _ = segment_forward(segment, x)
    return out.argmax(axis=1)


def flatten_params(segment: Segment) -> np.ndarray:
    """Layer by layer: weight row-major, then bias."""
    parts = []
    for layer in segment.layers:
        parts.append(layer.weight.reshape(-1))
        parts.append(layer.bias)
    return np.concatenate(parts)


def flatten_grads(param_grads) -> np.ndarray:
    return np.concatenate([p for gw, gb in param_grads for p in (gw.reshape(-1), gb)])


def unflatten_grads(segment: Segment, flat: np.ndarray) -> list:
    out, pos = [], 0
    for layer in segment.layers:
        gw = flat[pos:pos + layer.weight.size].reshape(layer.weight.shape)
        pos += layer.weight.size
        gb = flat[pos:pos + layer.bias.size]
        pos += layer.bias.size
        out.append((gw.copy(), gb.copy()))
    return out


def unflatten_params(segment: Segment, flat: np.ndarray) -> Segment:
    """A copy of ``segment`` whose parameters are taken from ``flat``."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (segment.param_count,):
        raise ShapeError(f"expected {segment.param_count} values, got {flat.shape}")
    layers = []
    for layer, (gw, gb) in zip(segment.layers, unflatten_grads(segment, flat)):
        layers.append(DenseLayer(gw, gb, layer.activation))
    return Segment(layers, frozen=segment.frozen)
