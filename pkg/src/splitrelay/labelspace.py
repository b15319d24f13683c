"""Secret one-to-many label expansion and demasking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rng import Stream


@dataclass(frozen=True)
class LabelMap:
    """Map from ``q`` true classes to ``sum(g)`` shuffled pseudo classes.

    Slots are enumerated class by class (class 0 slots first); ``perm[s]`` is
    the pseudo id assigned to slot ``s``.
    """

    q: int
    g: tuple
    perm: tuple
    seed: int
    forward: tuple = field(init=False, repr=False, compare=False)
    inverse: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        total = sum(self.g)
        if sorted(self.perm) != list(range(total)):
            raise ValueError("perm must be a permutation of the pseudo id range")
        fwd, inv, slot = [], [0] * total, 0
        for cls, gi in enumerate(self.g):
            ids = tuple(self.perm[slot:slot + gi])
            for pid in ids:
                inv[pid] = cls
            fwd.append(ids)
            slot += gi
        object.__setattr__(self, "forward", tuple(fwd))
        object.__setattr__(self, "inverse", tuple(inv))

    @property
    def n_pseudo(self) -> int:
        return len(self.perm)

    @property
    def gamma(self) -> float:
        return gamma(self)

    def to_json(self) -> str:
        return json.dumps({"q": self.q, "g": list(self.g), "perm": list(self.perm), "seed": self.seed})

    @classmethod
    def from_json(cls, text: str) -> "LabelMap":
        d = json.loads(text)
        m = cls(int(d["q"]), tuple(int(x) for x in d["g"]), tuple(int(x) for x in d["perm"]), int(d["seed"]))
        if len(m.g) != m.q:
            raise ValueError("g length must equal q")
        return m


def build_label_map(q: int, g, seed: int) -> LabelMap:
    g = tuple(int(x) for x in g)
    if q < 2:
        raise ValueError("need at least two true classes")
    if len(g) != q:
        raise ValueError(f"g has {len(g)} entries for q={q}")
    if min(g) < 1:
        raise ValueError("every expansion factor must be >= 1")
    perm = Stream.of("labelmap", seed).permutation(sum(g))
    return LabelMap(q, g, tuple(int(p) for p in perm), int(seed))


def gamma(label_map: LabelMap) -> float:
    return sum(label_map.g) / label_map.q


def factors_for_gamma(q: int, target: float) -> list:
    """Expansion factors whose mean is ``round(target*q)/q``, spread evenly."""
    total = int(round(target * q))
    if total < q:
        raise ValueError(f"gamma {target} is below 1 for q={q}")
    base, extra = divmod(total, q)
    return [base + (1 if i < extra else 0) for i in range(q)]


def demask(pseudo, label_map: LabelMap):
    """True class of one pseudo id, or elementwise for an array of ids."""
    inv = np.asarray(label_map.inverse)
    arr = np.asarray(pseudo)
    if arr.size and (arr.min() < 0 or arr.max() >= len(inv)):
        raise ValueError(f"unknown pseudo id in {pseudo!r}")
    out = inv[arr]
    return int(out) if out.ndim == 0 else out


@dataclass
class ExpandedDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # pseudo labels, (n,)
    origin: np.ndarray  # original sample index, (n,)
    aug_id: np.ndarray  # 0 for an original sample, k >= 1 for its k-th jitter copy

    def __len__(self) -> int:
        return len(self.labels)


def expand_dataset(features, labels, label_map: LabelMap, noise_sigma: float, seed: int) -> ExpandedDataset:
    """Partition each class round-robin over its pseudo ids and top up by jitter.

    Every pseudo class of true class ``i`` ends with exactly as many samples
    as class ``i`` originally had. Originals come first in their original
    order; augmentations follow, grouped by class and pseudo slot.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    if y.size and (y.min() < 0 or y.max() >= label_map.q):
        raise ValueError(f"labels must lie in [0, {label_map.q})")

    pseudo = np.empty_like(y)
    aug_feats, aug_labels, aug_origin, aug_ids = [], [], [], []
    noise = Stream.of("augment", seed)
    for cls in range(label_map.q):
        members = np.flatnonzero(y == cls)
        gi = label_map.g[cls]
        if len(members) < gi:
            raise ValueError(f"class {cls} has {len(members)} samples, cannot fill {gi} pseudo classes")
        for slot, pid in enumerate(label_map.forward[cls]):
            part = members[slot::gi]
            pseudo[part] = pid
            deficit = len(members) - len(part)
            if deficit == 0:
                continue
            src = part[np.arange(deficit) % len(part)]
            jitter = noise.normal(deficit * x.shape[1]).reshape(deficit, x.shape[1])
            aug_feats.append(x[src] + noise_sigma * jitter)
            aug_labels.append(np.full(deficit, pid))
            aug_origin.append(src)
            aug_ids.append(np.arange(deficit) // len(part) + 1)

    feats = np.concatenate([x] + aug_feats) if aug_feats else x.copy()
    return ExpandedDataset(
        features=feats,
        labels=np.concatenate([pseudo] + aug_labels).astype(np.int64),
        origin=np.concatenate([np.arange(len(y))] + aug_origin).astype(np.int64),
        aug_id=np.concatenate([np.zeros(len(y), dtype=np.int64)] + aug_ids).astype(np.int64),
    )


def demasked_accuracy(pseudo_pred, true_labels, label_map: LabelMap) -> float:
    pred = demask(np.asarray(pseudo_pred, dtype=np.int64), label_map)
    return float(np.mean(pred == np.asarray(true_labels)))
