"""Serverless relay training across trainers T1 -> ... -> Tn.

The data client hands its cached DP activations to T1 and the pseudo labels
to Tn, then leaves. Every trainer is a small state machine that reacts to
messages: activations flow downstream, Tn computes the loss, and gradients
flow back upstream. A single-threaded scheduler delivers one message at a
time in a fixed order, so a run is a pure function of its inputs and seeds.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dp import DpActivationBatch, canonical_digest, clip_l1, clip_l1_backward
from .nn import (
    Segment,
    concat_segments,
    flatten_params,
    init_segment,
    segment_backward,
    segment_forward,
    sgd_step,
    softmax_xent,
)
from .plan import ExperimentPlan
from .rng import Stream
from .transport import InProcTransport, Kind, ProtocolMessage, make_transport

log = logging.getLogger(__name__)

CLIENT = "C"


class NegotiationError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Topology:
    order: tuple  # role names in execution order
    interfaces: tuple  # tensor width at each boundary, C->T1 first, Tn output last
    trainer_widths: tuple


def role_name(i: int) -> str:
    return f"T{i}"


def negotiate(plan: ExperimentPlan) -> Topology:
    """Fix execution order and interface widths, rejecting inconsistent splits."""
    if plan.n < 1:
        raise NegotiationError("at least one trainer is required")
    if len(plan.client_widths) < 2:
        raise NegotiationError("client encoder needs at least one layer")
    prev = plan.client_widths[-1]
    interfaces = [prev]
    for i, widths in enumerate(plan.trainer_widths, start=1):
        if len(widths) < 2:
            raise NegotiationError(f"{role_name(i)} needs at least one layer")
        if widths[0] != prev:
            raise NegotiationError(
                f"{role_name(i)} expects width {widths[0]} but receives {prev}"
            )
        prev = widths[-1]
        interfaces.append(prev)
    if prev != plan.n_pseudo:
        raise NegotiationError(f"final width {prev} != {plan.n_pseudo} pseudo classes")
    return Topology(
        order=tuple(role_name(i) for i in range(1, plan.n + 1)),
        interfaces=tuple(interfaces),
        trainer_widths=tuple(tuple(w) for w in plan.trainer_widths),
    )


def init_client(plan: ExperimentPlan) -> Segment:
    """The client's encoder before local pre-training (frozen)."""
    seg = init_segment(plan.client_widths, plan.seeds.client, name="C")
    return seg.freeze()


def pretrain_client(plan: ExperimentPlan, x, y, epochs: int | None = None) -> Segment:
    """Local supervised pre-training of the client encoder on its own data.

    A throwaway linear head reads the l1-clipped encoder output, so the
    encoder learns a representation that survives clipping. Runs entirely at
    the data client before any message is sent; the result is frozen.
    """
    epochs = plan.client_pretrain_epochs if epochs is None else epochs
    enc = init_segment(plan.client_widths, plan.seeds.client, name="C")
    head = init_segment([plan.client_widths[-1], plan.q], plan.seeds.client, ["identity"], name="C-head")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    schedule = BatchSchedule(len(x), plan.batch_size, plan.seeds.client, tag="pretrain")
    clip = plan.dp.clip_radius
    for epoch in range(epochs):
        for idx in schedule.epoch(epoch):
            act, enc_trace = segment_forward(enc, x[idx])
            logits, head_trace = segment_forward(head, clip_l1(act, clip))
            _, g = softmax_xent(logits, y[idx])
            head_grads, g = segment_backward(head, head_trace, g)
            enc_grads, _ = segment_backward(enc, enc_trace, clip_l1_backward(act, g, clip))
            sgd_step(head, head_grads, plan.lr, plan.momentum)
            sgd_step(enc, enc_grads, plan.lr, plan.momentum)
    return enc.freeze()


def encode_released(client: Segment, x, clip_radius: float) -> np.ndarray:
    """Inference-time client output: encoder then l1 clip, no noise."""
    act, _ = segment_forward(client, x)
    return clip_l1(act, clip_radius)


def init_trainers(plan: ExperimentPlan, seed: int | None = None) -> list:
    """Fresh trainer segments; the last layer of Tn emits raw logits."""
    seed = plan.seeds.trainers if seed is None else seed
    segments = []
    for i, widths in enumerate(plan.trainer_widths, start=1):
        acts = ["relu"] * (len(widths) - 1)
        if i == plan.n:
            acts[-1] = "identity"
        segments.append(init_segment(widths, seed, acts, name=role_name(i)))
    return segments


class BatchSchedule:
    """Seed-derived mini-batch order, identical for every party that knows the seed."""

    def __init__(self, n_samples: int, batch_size: int, seed: int, tag: str = "batches"):
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.seed = seed
        self.tag = tag

    def epoch(self, e: int) -> list:
        perm = Stream.of(self.tag, self.seed, e).permutation(self.n_samples)
        return [perm[k:k + self.batch_size] for k in range(0, self.n_samples, self.batch_size)]

    def __iter__(self):
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


class Trainer:
    """One trainer's view of the protocol: its own segment and its two links."""

    def __init__(self, index: int, n: int, segment: Segment, lr: float, momentum: float,
                 schedule: BatchSchedule):
        self.index = index
        self.name = role_name(index)
        self.upstream = role_name(index - 1) if index > 1 else CLIENT
        self.downstream = role_name(index + 1) if index < n else None
        self.segment = segment
        self.lr = lr
        self.momentum = momentum
        self._steps = iter(schedule)
        self._traces = deque()
        self._cache = None
        self._labels = None
        self.losses = []

    @property
    def is_last(self) -> bool:
        return self.downstream is None

    def receive(self, msg: ProtocolMessage, transport) -> None:
        if msg.link[1] != self.name:
            raise ProtocolError(f"{self.name} got a message addressed to {msg.link[1]}")
        if msg.kind is Kind.PSEUDO_LABELS:
            if not self.is_last or msg.link[0] != CLIENT:
                raise ProtocolError("pseudo labels may only travel C -> Tn")
            self._labels = msg.payload.astype(np.int64)
        elif msg.kind is Kind.ACTIVATION:
            if msg.link[0] == CLIENT:
                if self.index != 1:
                    raise ProtocolError("only T1 receives the client's cache")
                self._cache = msg.payload
            elif msg.link[0] == self.upstream:
                self._forward(msg.payload, transport)
            else:
                raise ProtocolError(f"unexpected activation from {msg.link[0]}")
        elif msg.kind is Kind.GRADIENT:
            if msg.link[0] != self.downstream:
                raise ProtocolError(f"unexpected gradient from {msg.link[0]}")
            self._backward(msg.payload, transport)
        else:
            raise ProtocolError(f"{self.name} cannot handle {msg.kind.name}")

    def start_step(self, transport) -> None:
        if self.index != 1 or self._cache is None:
            raise ProtocolError("only T1 with a cached release can start a step")
        idx = next(self._steps)
        self._process(self._cache[idx], idx, transport)

    def _forward(self, x, transport) -> None:
        self._process(x, next(self._steps), transport)

    def _process(self, x, idx, transport) -> None:
        out, trace = segment_forward(self.segment, x)
        if not self.is_last:
            self._traces.append(trace)
            transport.send(ProtocolMessage(Kind.ACTIVATION, out, (self.name, self.downstream)))
            return
        if self._labels is None:
            raise ProtocolError("Tn has no pseudo labels")
        loss, grad = softmax_xent(out, self._labels[idx])
        self.losses.append(loss)
        self._apply(trace, grad, transport)

    def _backward(self, grad, transport) -> None:
        if not self._traces:
            raise ProtocolError(f"{self.name} received a gradient with no pending forward")
        self._apply(self._traces.popleft(), grad, transport)

    def _apply(self, trace, grad, transport) -> None:
        param_grads, input_grad = segment_backward(self.segment, trace, grad)
        sgd_step(self.segment, param_grads, self.lr, self.momentum)
        if self.index > 1:
            transport.send(ProtocolMessage(Kind.GRADIENT, input_grad, (self.name, self.upstream)))


def make_trainers(plan: ExperimentPlan, segments: list, n_samples: int) -> list:
    roles = []
    for i, seg in enumerate(segments, start=1):
        schedule = BatchSchedule(n_samples, plan.batch_size, plan.seeds.batches)
        roles.append(Trainer(i, len(segments), seg, plan.lr, plan.momentum, schedule))
    return roles


def pump(transport, roles: dict) -> int:
    """Deliver pending messages one at a time until the network is quiet."""
    delivered = 0
    while True:
        links = transport.pending_links()
        if not links:
            return delivered
        link = links[0]
        msg = transport.recv(link)
        roles[link[1]].receive(msg, transport)
        delivered += 1


@dataclass
class TrainingResult:
    segments: list
    epoch_losses: list
    epoch_digests: list = field(default_factory=list)  # per epoch, per segment
    transport_log: list = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_losses)


def _early_stop(losses: list, patience: int = 3, tol: float = 1e-4) -> bool:
    if len(losses) <= patience:
        return False
    gains = [losses[k - 1] - losses[k] for k in range(len(losses) - patience, len(losses))]
    return all(g < tol for g in gains)


def run_training(plan: ExperimentPlan, dp_cache, pseudo_labels, segments=None,
                 transport="inproc") -> TrainingResult:
    """Run N epochs of relay training and return the trained trainer segments."""
    negotiate(plan)
    cache = dp_cache.values if isinstance(dp_cache, DpActivationBatch) else np.asarray(dp_cache)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if len(labels) != len(cache):
        raise ValueError("one pseudo label per cached activation required")
    segments = init_trainers(plan) if segments is None else segments
    if isinstance(transport, str):
        transport = make_transport(transport)
    roles = make_trainers(plan, segments, len(cache))
    by_name = {r.name: r for r in roles}

    transport.send(ProtocolMessage(Kind.ACTIVATION, cache, (CLIENT, roles[0].name)))
    transport.send(ProtocolMessage(Kind.PSEUDO_LABELS, labels.astype(np.float64),
                                   (CLIENT, roles[-1].name)))
    pump(transport, by_name)

    schedule = BatchSchedule(len(cache), plan.batch_size, plan.seeds.batches)
    steps_per_epoch = len(schedule.epoch(0))
    last = roles[-1]
    result = TrainingResult(segments, [])
    try:
        for epoch in range(plan.epochs):
            for _ in range(steps_per_epoch):
                roles[0].start_step(transport)
                pump(transport, by_name)
            epoch_loss = float(np.mean(last.losses[-steps_per_epoch:]))
            result.epoch_losses.append(epoch_loss)
            result.epoch_digests.append([canonical_digest(flatten_params(s)) for s in segments])
            log.debug("epoch %d loss %.5f", epoch + 1, epoch_loss)
            if plan.early_stop and _early_stop(result.epoch_losses):
                break
    finally:
        transport.close()
    result.transport_log = list(transport.log)
    return result


def train_monolithic(plan: ExperimentPlan, cache, pseudo_labels, segments=None) -> TrainingResult:
    """Reference run: the same trainers merged into one network, no relay."""
    cache = cache.values if isinstance(cache, DpActivationBatch) else np.asarray(cache)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    segments = init_trainers(plan) if segments is None else segments
    merged = concat_segments(*segments)
    schedule = BatchSchedule(len(cache), plan.batch_size, plan.seeds.batches)
    result = TrainingResult([merged], [])
    for epoch in range(plan.epochs):
        losses = []
        for idx in schedule.epoch(epoch):
            out, trace = segment_forward(merged, cache[idx])
            loss, grad = softmax_xent(out, labels[idx])
            grads, _ = segment_backward(merged, trace, grad)
            sgd_step(merged, grads, plan.lr, plan.momentum)
            losses.append(loss)
        result.epoch_losses.append(float(np.mean(losses)))
        if plan.early_stop and _early_stop(result.epoch_losses):
            break
    return result


def anchor_activation(i: int, segments: list, dp_cache) -> np.ndarray:
    """Output of frozen trainers 1..i on the full cache; ``i == 0`` is the cache."""
    x = dp_cache.values if isinstance(dp_cache, DpActivationBatch) else np.asarray(dp_cache)
    for k, seg in enumerate(segments[:i], start=1):
        if not seg.frozen:
            raise ValueError(f"{role_name(k)} must be frozen before its output anchors the chain")
        x, _ = segment_forward(seg, x)
    return x


def relay_forward(segments: list, x) -> np.ndarray:
    for seg in segments:
        x, _ = segment_forward(seg, x)
    return x


def estimate_latency(interface_bytes, bandwidth: float, overhead: float = 0.0):
    """Per-link time ``size / R + theta`` and the total over the chain."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    per_link = [s / bandwidth + overhead for s in interface_bytes]
    return per_link, math.fsum(per_link)
