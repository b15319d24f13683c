"""Black-box model extraction against a pseudo-label API."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import Segment, init_segment, predict, segment_backward, segment_forward, sgd_step, softmax_xent
from ..pipeline import BatchSchedule
from ..rng import Stream


@dataclass
class ExtractionOutcome:
    surrogate: Segment
    pseudo_label_queries: int
    surrogate_true_accuracy: float
    mapping: np.ndarray  # pseudo id -> guessed true class


def jitter_probes(x, sigma: float, copies: int, seed: int) -> np.ndarray:
    """Unlabelled probe inputs: Gaussian jitter around known training inputs."""
    x = np.asarray(x, dtype=np.float64)
    reps = np.repeat(x, copies, axis=0)
    return reps + sigma * Stream.of("probes", seed).normal(reps.size).reshape(reps.shape)


def train_classifier(x, y, widths, epochs: int = 30, lr: float = 0.05, momentum: float = 0.9,
                     batch_size: int = 64, seed: int = 0) -> Segment:
    acts = ["relu"] * (len(widths) - 2) + ["identity"]
    seg = init_segment(widths, seed, acts, name="surrogate")
    schedule = BatchSchedule(len(x), batch_size, seed, tag="surrogate")
    for epoch in range(epochs):
        for idx in schedule.epoch(epoch):
            out, trace = segment_forward(seg, x[idx])
            _, g = softmax_xent(out, y[idx])
            grads, _ = segment_backward(seg, trace, g)
            sgd_step(seg, grads, lr, momentum)
    return seg.freeze()


def extraction_attack(api, probe_data, q: int, seed: int, x_test, y_test, n_pseudo: int | None = None,
                      mapping=None, hidden: int = 64, epochs: int = 30) -> ExtractionOutcome:
    """Query ``api`` for pseudo labels, guess their meaning, train a copy.

    ``api(x)`` returns pseudo-class ids (or scores, reduced by argmax). Each
    pseudo id is mapped to a uniformly random true class unless ``mapping``
    is given, which is the control condition where the attacker holds the
    real inverse map.
    """
    probes = np.asarray(probe_data, dtype=np.float64)
    answers = np.asarray(api(probes))
    if answers.ndim == 2:
        answers = answers.argmax(axis=1)
    answers = answers.astype(np.int64)
    if n_pseudo is None:
        n_pseudo = int(answers.max()) + 1
    if mapping is None:
        mapping = Stream.of("extraction-map", seed).integers(n_pseudo, q)
    mapping = np.asarray(mapping, dtype=np.int64)
    labels = mapping[answers]
    surrogate = train_classifier(probes, labels, [probes.shape[1], hidden, q], epochs=epochs, seed=seed)
    acc = float(np.mean(predict(surrogate, x_test) == np.asarray(y_test)))
    return ExtractionOutcome(surrogate, len(probes), acc, mapping)
