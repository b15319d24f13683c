"""Third-party verification of a released relay model.

The verifier assembles the checkpoints, checks main-task accuracy, then
walks the watermark chain from the cached client activations onwards and
scores every link. It never sees raw training data or the label mapping.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dp import DigestMismatch, DpActivationBatch, clip_l1
from .labelspace import LabelMap, demask
from .nn import Segment, ShapeError, segment_forward
from .pipeline import anchor_activation
from .watermark import WatermarkLink

log = logging.getLogger(__name__)

SUCCESS = "Success"
FAIL = "Fail"


@dataclass
class AssembledModel:
    """Client encoder, l1 clip at the cut, then the trainer segments in order."""

    client: Segment
    trainers: list
    clip_radius: float

    def logits(self, x) -> np.ndarray:
        h, _ = segment_forward(self.client, x)
        h = clip_l1(h, self.clip_radius)
        return self.relay(h)

    def relay(self, cut_activations) -> np.ndarray:
        h = np.asarray(cut_activations, dtype=np.float64)
        for seg in self.trainers:
            h, _ = segment_forward(seg, h)
        return h

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    @property
    def n_pseudo(self) -> int:
        return self.trainers[-1].n_out


def assemble(client_ckpt: Segment, trainer_ckpts, clip_radius: float = 1.0) -> AssembledModel:
    if client_ckpt is None or not trainer_ckpts or any(t is None for t in trainer_ckpts):
        raise ValueError("missing checkpoint")
    prev = client_ckpt.n_out
    for i, seg in enumerate(trainer_ckpts, start=1):
        if seg.n_in != prev:
            raise ShapeError(f"trainer {i} expects width {seg.n_in} but receives {prev}")
        prev = seg.n_out
    return AssembledModel(client_ckpt, list(trainer_ckpts), float(clip_radius))


def pseudo_test_targets(y_true, label_map: LabelMap) -> np.ndarray:
    """Per test sample, the pseudo ids that count as correct (built by the data client).

    Handing the verifier this boolean matrix lets it score pseudo-space
    predictions without learning which true class a pseudo id stands for.
    """
    y = np.asarray(y_true, dtype=np.int64)
    inv = np.asarray(label_map.inverse)
    return inv[None, :] == y[:, None]


@dataclass
class GateResult:
    passed: bool
    accuracy: float
    space: str  # "demasked" or "pseudo"


def accuracy_gate(model: AssembledModel, x_test, threshold: float, *, y_test=None,
                  label_map: LabelMap | None = None, accepted=None) -> GateResult:
    """Main-task accuracy check; fails when accuracy is below ``threshold``.

    With ``label_map`` and ``y_test`` (the data client opted in) accuracy is
    demasked. Otherwise ``accepted`` from :func:`pseudo_test_targets` marks
    which pseudo predictions are right for each test sample.
    """
    pred = model.predict(x_test)
    if label_map is not None:
        if y_test is None:
            raise ValueError("demasked evaluation needs true test labels")
        acc = float(np.mean(demask(pred, label_map) == np.asarray(y_test)))
        space = "demasked"
    elif accepted is not None:
        ok = np.asarray(accepted, dtype=bool)
        if ok.shape != (len(pred), model.n_pseudo):
            raise ShapeError(f"accepted matrix {ok.shape} does not match predictions")
        acc = float(np.mean(ok[np.arange(len(pred)), pred]))
        space = "pseudo"
    else:
        raise ValueError("need either a label map or pseudo test targets")
    return GateResult(acc >= threshold, acc, space)


@dataclass
class LinkResult:
    i: int
    eta: float
    passed: bool


@dataclass
class VerificationReport:
    overall: str
    fail_stage: str  # "none", "cache", "accuracy" or "link <i>"
    acc_main: float | None
    per_link: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.overall == SUCCESS

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        return cls(d["overall"], d["fail_stage"], d["acc_main"],
                   [LinkResult(**p) for p in d["per_link"]])

    def table(self) -> str:
        acc = "n/a" if self.acc_main is None else f"{self.acc_main:.4f}"
        lines = [f"overall: {self.overall}   fail stage: {self.fail_stage}   accuracy: {acc}",
                 f"{'link':>4}  {'eta':>8}  pass"]
        lines += [f"{p.i:>4}  {p.eta:>8.4f}  {'yes' if p.passed else 'no'}" for p in self.per_link]
        return "\n".join(lines)


def verify_chain(checkpoints, dp_cache: DpActivationBatch, nonces, identities, eta_goal: float = 0.95,
                 bits: int = 512, m: int | None = None, acc_main: float | None = None,
                 timings: list | None = None) -> VerificationReport:
    """Regenerate and score every link in order, stopping at the first failure.

    Per-link wall time in milliseconds is appended to ``timings`` if given;
    it is kept out of the report so that reports stay reproducible.
    """
    m = 4 * bits if m is None else m
    try:
        dp_cache.verify()
    except DigestMismatch:
        return VerificationReport(FAIL, "cache", acc_main)
    if not (len(checkpoints) == len(nonces) == len(identities)):
        raise ValueError("need one nonce and identity per checkpoint")
    segments = [seg if seg.frozen else seg.copy().freeze() for seg in checkpoints]
    per_link = []
    anchor = dp_cache.values
    for i in range(1, len(segments) + 1):
        t0 = time.perf_counter()
        if i > 1:
            anchor = anchor_activation(1, segments[i - 2:], anchor)
        seg = segments[i - 1]
        if m > seg.param_count:
            per_link.append(LinkResult(i, 0.0, False))
            return VerificationReport(FAIL, f"link {i}", acc_main, per_link)
        ident = identities[i - 1]
        ident = ident.encode() if isinstance(ident, str) else bytes(ident)
        link = WatermarkLink.derive(i, int(nonces[i - 1]), ident, anchor, seg.param_count, bits, m)
        eta = link.score(seg)
        passed = eta >= eta_goal
        per_link.append(LinkResult(i, eta, passed))
        if timings is not None:
            timings.append((time.perf_counter() - t0) * 1e3)
        log.debug("link %d: eta=%.4f", i, eta)
        if not passed:
            return VerificationReport(FAIL, f"link {i}", acc_main, per_link)
    return VerificationReport(SUCCESS, "none", acc_main, per_link)


def verify(model: AssembledModel, dp_cache: DpActivationBatch, nonces, identities, x_test,
           threshold: float, eta_goal: float = 0.95, bits: int = 512, m: int | None = None,
           **gate_kwargs) -> VerificationReport:
    """Accuracy gate first; only an eligible model has its chain checked."""
    gate = accuracy_gate(model, x_test, threshold, **gate_kwargs)
    if not gate.passed:
        return VerificationReport(FAIL, "accuracy", gate.accuracy)
    return verify_chain(model.trainers, dp_cache, nonces, identities, eta_goal, bits, m, gate.accuracy)


def manifest(nonces, identities, bits: int, m: int, eta_goal: float, etas=None) -> dict:
    """Public verification inputs; marks, keys and positions are always recomputed."""
    etas = etas or [None] * len(nonces)
    return {
        "bits": bits, "m": m, "eta_goal": eta_goal,
        "links": [{"i": i, "nonce": int(n), "identity": ident if isinstance(ident, str) else ident.decode(),
                   "eta": e} for i, (n, ident, e) in enumerate(zip(nonces, identities, etas), start=1)],
    }
