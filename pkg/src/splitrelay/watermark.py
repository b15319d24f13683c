"""Chained white-box watermarks for trainer segments.

Each link derives its mark and projection key from a hash over the
predecessor's anchor digest, its index, a publisher nonce and its identity,
so a mark cannot be computed before the upstream segment is final. Positions
into the flattened segment depend on the nonce alone.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass

import numpy as np

from .dp import canonical_digest
from .nn import (
    Segment,
    flatten_grads,
    flatten_params,
    segment_backward,
    segment_forward,
    sgd_step,
    softmax_xent,
    unflatten_grads,
)
from .pipeline import BatchSchedule, anchor_activation
from .plan import EmbedConfig
from .rng import Stream

log = logging.getLogger(__name__)


class EmbeddingFailure(RuntimeError):
    def __init__(self, index: int, eta: float, rounds: int):
        super().__init__(f"link {index}: detection rate {eta:.4f} after {rounds} rounds")
        self.index = index
        self.eta = eta
        self.rounds = rounds


def wm_position(nonce: int, m: int, param_count: int) -> np.ndarray:
    """``m`` distinct flat indices chosen by the nonce alone."""
    if m > param_count:
        raise ValueError(f"cannot select {m} of {param_count} parameters")
    return Stream.of("WMPosition", nonce).permutation(param_count)[:m]


def chain_hash(prev_digest: bytes, index: int, nonce: int, identity: bytes) -> bytes:
    if len(prev_digest) != 32:
        raise ValueError("anchor digest must be 32 bytes")
    if index < 1:
        raise ValueError("link indices start at 1")
    payload = prev_digest + struct.pack("<IQ", index, nonce & 0xFFFFFFFFFFFFFFFF) + bytes(identity)
    return hashlib.sha256(payload).digest()


def wm_gen(chain: bytes, bits: int) -> np.ndarray:
    return Stream.raw(chain + b"WM").bits(bits)


def key_gen(chain: bytes, bits: int, m: int) -> np.ndarray:
    return Stream.raw(chain + b"KEY").normal_single(bits * m).reshape(bits, m)


def projections(segment: Segment, positions, key) -> np.ndarray:
    return key @ flatten_params(segment)[positions]


def project_extract(segment: Segment, positions, key) -> np.ndarray:
    """Sign of each key projection of the selected weights; ties extract 1."""
    return (projections(segment, positions, key) >= 0.0).astype(np.int8)


def detection_rate(extracted, mark) -> float:
    a, b = np.asarray(extracted), np.asarray(mark)
    if a.shape != b.shape:
        raise ValueError(f"mark lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty watermark")
    return 1.0 - float(np.count_nonzero(a != b)) / a.size


def wm_regularizer(segment: Segment, positions, key, mark):
    """Summed binary cross-entropy of sigmoid projections against the mark.

    Returns ``(loss, grad)`` with ``grad`` over the full flattened parameter
    vector, zero outside ``positions``.
    """
    return _bce_from_projections(projections(segment, positions, key), segment.param_count,
                                 positions, key, mark)


def _bce_from_projections(p, param_count, positions, key, mark):
    lam = np.asarray(mark, dtype=np.float64)
    # log(1 + e^p) - mark * p, written to stay finite for large |p|
    loss = float(np.sum(np.logaddexp(0.0, p) - lam * p))
    sig = 0.5 * (1.0 + np.tanh(0.5 * p))
    grad = np.zeros(param_count)
    np.add.at(grad, positions, key.T @ (sig - lam))
    return loss, grad


@dataclass
class WatermarkLink:
    index: int
    nonce: int
    identity: bytes
    chain: bytes
    mark: np.ndarray
    key: np.ndarray
    positions: np.ndarray
    eta: float = float("nan")

    @classmethod
    def derive(cls, index: int, nonce: int, identity: bytes, anchor, param_count: int,
               bits: int, m: int) -> "WatermarkLink":
        """Regenerate a link from the anchor tensor (or its 32-byte digest)."""
        digest = anchor if isinstance(anchor, (bytes, bytearray)) else canonical_digest(anchor)
        chain = chain_hash(bytes(digest), index, nonce, identity)
        return cls(index, nonce, bytes(identity), chain, wm_gen(chain, bits),
                   key_gen(chain, bits, m), wm_position(nonce, m, param_count))

    def public(self) -> dict:
        return {"i": self.index, "nonce": self.nonce, "identity": self.identity.decode("utf-8", "replace"),
                "eta": self.eta}

    def extract(self, segment: Segment) -> np.ndarray:
        return project_extract(segment, self.positions, self.key)

    def score(self, segment: Segment) -> float:
        return detection_rate(self.extract(segment), self.mark)


def derive_nonces(seed: int, n: int) -> list:
    words = Stream.of("nonces", seed).words(n)
    return [int(w) for w in words]


@dataclass
class EmbedResult:
    link: WatermarkLink
    rounds: int
    eta_history: list
    seconds: float


def embed(index: int, segments: list, dp_cache, pseudo_labels, link: WatermarkLink,
          cfg: EmbedConfig, batch_size: int = 64, seed: int = 0) -> EmbedResult:
    """Regularized embedding of ``link`` into trainer ``index`` (1-based).

    Upstream trainers must already be frozen; downstream trainers are held
    fixed and only carry the main-task gradient back. Each round is one
    mini-batch step on ``l_w + lam * l_mark``; the segment is frozen as soon
    as the detection rate reaches ``cfg.eta_goal``.
    """
    t0 = time.perf_counter()
    seg = segments[index - 1]
    if seg.frozen:
        raise ValueError(f"trainer {index} is already frozen")
    for k, up in enumerate(segments[:index - 1], start=1):
        if not up.frozen:
            raise ValueError(f"trainer {k} must finish embedding before trainer {index}")
    x_in = anchor_activation(index - 1, segments, dp_cache)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    downstream = segments[index:]
    batches = iter(BatchSchedule(len(x_in), batch_size, seed, tag=f"embed-{index}"))
    momentum_state = [(np.zeros_like(vw), np.zeros_like(vb)) for vw, vb in seg.momentum_state]
    saved_state, seg.momentum_state = seg.momentum_state, momentum_state

    p = projections(seg, link.positions, link.key)
    eta = detection_rate((p >= 0.0).astype(np.int8), link.mark)
    history = [eta]
    rounds = 0
    try:
        while eta < cfg.eta_goal and rounds < cfg.max_rounds:
            idx = next(batches)
            out, trace = segment_forward(seg, x_in[idx])
            traces = []
            h = out
            for d in downstream:
                h, tr = segment_forward(d, h)
                traces.append(tr)
            _, g = softmax_xent(h, labels[idx])
            for d, tr in zip(reversed(downstream), reversed(traces)):
                _, g = segment_backward(d, tr, g)
            grads, _ = segment_backward(seg, trace, g)
            flat = flatten_grads(grads)
            if cfg.lam > 0:
                reg = _bce_from_projections(p, seg.param_count, link.positions, link.key, link.mark)[1]
                flat = flat + cfg.lam * reg
            sgd_step(seg, unflatten_grads(seg, flat), cfg.embed_lr, 0.0)
            rounds += 1
            p = projections(seg, link.positions, link.key)
            eta = detection_rate((p >= 0.0).astype(np.int8), link.mark)
            history.append(eta)
    finally:
        seg.momentum_state = saved_state
    link.eta = eta
    if eta < cfg.eta_goal:
        raise EmbeddingFailure(index, eta, rounds)
    seg.freeze()
    elapsed = time.perf_counter() - t0
    log.debug("link %d embedded: eta=%.4f after %d rounds", index, eta, rounds)
    return EmbedResult(link, rounds, history, elapsed)


def embed_chain(segments: list, dp_cache, pseudo_labels, nonces, identities, cfg: EmbedConfig,
                batch_size: int = 64, seed: int = 0) -> list:
    """Embed links 1..n in order; each link is derived from the frozen upstream anchor."""
    results = []
    for i in range(1, len(segments) + 1):
        t0 = time.perf_counter()
        anchor = anchor_activation(i - 1, segments, dp_cache)
        link = WatermarkLink.derive(i, nonces[i - 1], identities[i - 1], anchor,
                                    segments[i - 1].param_count, cfg.bits, cfg.M)
        res = embed(i, segments, dp_cache, pseudo_labels, link, cfg, batch_size, seed)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
