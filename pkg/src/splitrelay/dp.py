"""One-shot activation release: l1 clipping, Laplace noise, caching, digests."""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Segment, segment_forward
from .rng import Stream
from .serialization import FormatError, encode_tensor, read_tensor

CACHE_MAGIC = b"CLDP"


class DigestMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DpParams:
    """Privacy budget and clip radius. ``epsilon=inf`` releases without noise."""

    epsilon: float
    clip_radius: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.clip_radius > 0:
            raise ValueError(f"clip radius must be positive, got {self.clip_radius}")

    @property
    def sensitivity(self) -> float:
        return 2.0 * self.clip_radius

    @property
    def scale(self) -> float:
        """Laplace scale b = sensitivity / epsilon."""
        return 0.0 if math.isinf(self.epsilon) else self.sensitivity / self.epsilon


@dataclass(frozen=True)
class DpActivationBatch:
    values: np.ndarray
    params: DpParams
    digest: bytes
    seed: int

    def verify(self) -> None:
        if canonical_digest(self.values) != self.digest:
            raise DigestMismatch("cached activations do not match their digest")


def clip_l1(rows, clip_radius: float) -> np.ndarray:
    """Scale each row (or a single vector) into the l1 ball of radius S."""
    if not clip_radius > 0:
        raise ValueError("clip radius must be positive")
    x = np.asarray(rows, dtype=np.float64)
    norms = np.abs(x).sum(axis=-1, keepdims=True)
    factor = np.where(norms > clip_radius, clip_radius / np.where(norms > 0, norms, 1.0), 1.0)
    return x * factor


def clip_l1_backward(rows, upstream_grad, clip_radius: float) -> np.ndarray:
    """Vector-Jacobian product of :func:`clip_l1` at ``rows``."""
    a = np.asarray(rows, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    norms = np.abs(a).sum(axis=-1, keepdims=True)
    clipped = norms > clip_radius
    safe = np.where(clipped, norms, 1.0)
    factor = np.where(clipped, clip_radius / safe, 1.0)
    coupling = np.where(clipped, clip_radius / safe**2, 0.0) * (g * a).sum(axis=-1, keepdims=True)
    return factor * g - coupling * np.sign(a)


def canonical_digest(t) -> bytes:
    """SHA-256 over the shape (u32 each) followed by the f64 values."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot digest non-finite values")
    h = hashlib.sha256(struct.pack(f"<{t.ndim}I", *t.shape))
    h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return h.digest()


def laplace_perturb(clipped, params: DpParams, seed: int) -> DpActivationBatch:
    x = np.asarray(clipped, dtype=np.float64)
    if params.scale > 0.0:
        x = x + Stream.of("laplace", seed).laplace(x.size, params.scale).reshape(x.shape)
    else:
        x = x.copy()
    return DpActivationBatch(x, params, canonical_digest(x), int(seed))


def protect(client: Segment, features, params: DpParams, seed: int) -> DpActivationBatch:
    """Encode the whole expanded dataset once, clip, perturb and cache.

    ``features`` may be an :class:`ExpandedDataset` or a raw (n, d) array.
    """
    if not client.frozen:
        raise ValueError("client segment must be frozen before release")
    x = getattr(features, "features", features)
    act, _ = segment_forward(client, x)
    return laplace_perturb(clip_l1(act, params.clip_radius), params, seed)


def encode_cache(batch: DpActivationBatch) -> bytes:
    p = batch.params
    out = CACHE_MAGIC + struct.pack("<dddQ", p.epsilon, p.clip_radius, p.sensitivity, batch.seed)
    return out + encode_tensor(batch.values) + batch.digest


def decode_cache(data: bytes, check: bool = True) -> DpActivationBatch:
    """Parse a cache; with ``check`` the stored digest must match the values."""
    buf = io.BytesIO(data)
    if buf.read(4) != CACHE_MAGIC:
        raise FormatError("not a CLDP cache")
    head = buf.read(32)
    if len(head) != 32:
        raise FormatError("truncated cache header")
    eps, clip, sens, seed = struct.unpack("<dddQ", head)
    if sens != 2.0 * clip:
        raise FormatError("stored sensitivity is not twice the clip radius")
    values = read_tensor(buf)
    digest = buf.read(32)
    if len(digest) != 32 or buf.read(1):
        raise FormatError("bad digest trailer")
    batch = DpActivationBatch(values, DpParams(eps, clip), digest, seed)
    if check:
        batch.verify()
    return batch


def save_cache(batch: DpActivationBatch, path) -> None:
    Path(path).write_bytes(encode_cache(batch))


def load_cache(path, check: bool = True) -> DpActivationBatch:
    return decode_cache(Path(path).read_bytes(), check)


def laplace_log_density_ratio(y, x, x_prime, scale: float) -> float:
    """log( p(y|x) / p(y|x') ) for product Laplace densities of scale b."""
    y, x, x_prime = (np.asarray(v, dtype=np.float64) for v in (y, x, x_prime))
    return float((np.abs(y - x_prime).sum() - np.abs(y - x).sum()) / scale)


def _log_laplace(y, x, scale):
    return -np.abs(np.asarray(y) - np.asarray(x)).sum(axis=-1) / scale


def pair_log_likelihood_ratio(y_a, y_b, class_t, class_u, scale: float, weights_t=None, weights_u=None) -> float:
    """log of Pr[(y_a, y_b) both released from class t] / Pr[same pair from class u].

    ``class_t`` and ``class_u`` are (members, d) arrays of clipped activations;
    optional weights are within-class priors (uniform by default). Each term
    of the mixture changes by at most e^(2 eps) between classes, so the
    ratio obeys the same bound.
    """
    def log_joint(members, w):
        members = np.atleast_2d(members)
        w = np.full(len(members), 1.0 / len(members)) if w is None else np.asarray(w, dtype=np.float64)
        terms = _log_laplace(y_a, members, scale) + _log_laplace(y_b, members, scale) + np.log(w)
        return float(np.logaddexp.reduce(terms))

    return log_joint(class_t, weights_t) - log_joint(class_u, weights_u)
