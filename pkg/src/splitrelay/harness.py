"""End-to-end experiment orchestration, persistence and reporting."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .data import Dataset, make_blobs
from .dp import DpParams, load_cache, protect, save_cache
from .labelspace import build_label_map, demasked_accuracy, expand_dataset, factors_for_gamma
from .pipeline import encode_released, negotiate, pretrain_client, relay_forward, run_training
from .plan import EmbedConfig, ExperimentPlan, Seeds
from .serialization import load_segment, save_segment
from .attacks.clustering import kmeans_auto
from .verifier import FAIL, VerificationReport, accuracy_gate, assemble, manifest, pseudo_test_targets, verify_chain
from .watermark import derive_nonces, embed_chain

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_COLUMNS = {
    1: ["schema_version", "run_id", "epsilon", "gamma", "bits", "n_trainers", "epochs",
        "train_seconds", "embed_ms", "verify_ms", "acc_baseline", "acc_protected",
        "acc_pre_embed", "eta_min", "etas", "verification", "cluster_perfect_accuracy"],
}

_widths = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2}
_seed = {"type": "integer", "minimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "q": {"type": "integer", "minimum": 2},
                "dim": {"type": "integer", "minimum": 1},
                "per_class": {"type": "integer", "minimum": 2},
                "test_per_class": {"type": "integer", "minimum": 1},
                "spread": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "client_widths": _widths,
        "trainer_widths": {"type": "array", "items": _widths, "minItems": 1},
        "client_pretrain_epochs": {"type": "integer", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "epsilon": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "inf"}]},
        "clip_radius": {"type": "number", "exclusiveMinimum": 0},
        "gamma": {"type": "number", "minimum": 1},
        "g": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "augment_sigma": {"type": "number", "minimum": 0},
        "early_stop": {"type": "boolean"},
        "watermark": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "bits": {"type": "integer", "minimum": 1},
                "lam": {"type": "number", "minimum": 0},
                "eta_goal": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_rounds": {"type": "integer", "minimum": 1},
                "embed_lr": {"type": "number", "exclusiveMinimum": 0},
                "selected": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "verifier": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "eta_goal": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "accuracy_threshold": {"type": "number", "minimum": 0},
                "demasked": {"type": "boolean"},
            },
        },
        "seeds": {
            "type": "object", "additionalProperties": False,
            "properties": {f.name: _seed for f in dataclasses.fields(Seeds)},
        },
        "identities": {"type": "array", "items": {"type": "string"}},
        "baseline": {"type": "boolean"},
        "attacks": {"type": "array", "items": {"enum": ["cluster"]}},
    },
}

DEFAULT_CONFIG = {
    "data": {"q": 4, "dim": 64, "per_class": 200, "test_per_class": 100, "spread": 0.1},
    "client_widths": [64, 16],
    "trainer_widths": [[16, 64, 16], [16, 64, 16], [16, 128, 8]],
    "client_pretrain_epochs": 10,
    "epochs": 30,
    "lr": 0.05,
    "momentum": 0.9,
    "batch_size": 64,
    "epsilon": 5.0,
    "clip_radius": 1.0,
    "gamma": 2.0,
    "augment_sigma": 0.05,
    "early_stop": False,
    "watermark": {"bits": 512, "lam": 0.02, "eta_goal": 0.99, "max_rounds": 200, "embed_lr": 0.05},
    "verifier": {"eta_goal": 0.95, "accuracy_threshold": 0.9, "demasked": False},
    "seeds": dataclasses.asdict(Seeds()),
    "baseline": True,
    "attacks": [],
}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def load_config(source=None, seed: int | None = None) -> dict:
    """Validate a config (path, dict or None for defaults) and fill in defaults.

    ``seed`` replaces every per-role seed with ``seed`` plus a fixed offset,
    so one flag re-seeds the whole run while roles stay independent.
    """
    if source is None:
        user = {}
    elif isinstance(source, dict):
        user = source
    else:
        user = json.loads(Path(source).read_text())
    jsonschema.validate(user, CONFIG_SCHEMA)
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed is not None:
        names = [f.name for f in dataclasses.fields(Seeds)]
        cfg["seeds"] = {name: seed * 100 + k for k, name in enumerate(names)}
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    return cfg


def plan_from_config(cfg: dict) -> ExperimentPlan:
    q = cfg["data"]["q"]
    g = tuple(cfg["g"]) if "g" in cfg else tuple(factors_for_gamma(q, cfg["gamma"]))
    widths = [list(w) for w in cfg["trainer_widths"]]
    if widths[-1][-1] != sum(g):
        raise ValueError(f"last trainer emits {widths[-1][-1]} classes but the label map has {sum(g)}")
    eps = math.inf if cfg["epsilon"] == "inf" else float(cfg["epsilon"])
    return ExperimentPlan(
        client_widths=tuple(cfg["client_widths"]),
        trainer_widths=tuple(tuple(w) for w in widths),
        epochs=cfg["epochs"], lr=cfg["lr"], momentum=cfg["momentum"], batch_size=cfg["batch_size"],
        dp=DpParams(eps, cfg["clip_radius"]), q=q, g=g,
        wm=EmbedConfig(**cfg["watermark"]), seeds=Seeds(**cfg["seeds"]),
        client_pretrain_epochs=cfg["client_pretrain_epochs"], augment_sigma=cfg["augment_sigma"],
        early_stop=cfg["early_stop"], identities=tuple(cfg["identities"]) if "identities" in cfg else None,
    )


def with_gamma(cfg: dict, gamma: float) -> dict:
    """Config copy at another expansion ratio; the last trainer's output follows."""
    out = json.loads(json.dumps(cfg))
    out.pop("g", None)
    out["gamma"] = gamma
    out["trainer_widths"][-1][-1] = sum(factors_for_gamma(out["data"]["q"], gamma))
    return out


def run_id(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    run_id: str
    plan: dict
    train_seconds: float
    embed_ms: list
    verify_ms: list
    acc_baseline: float | None
    acc_protected: float
    acc_pre_embed: float
    etas: list
    verification: dict
    attacks: dict = field(default_factory=dict)
    epoch_digests: list = field(default_factory=list, repr=False)

    def metrics_row(self) -> dict:
        return {
            "schema_version": METRICS_VERSION,
            "run_id": self.run_id,
            "epsilon": self.plan["epsilon"],
            "gamma": self.plan["gamma"],
            "bits": self.plan["watermark"]["bits"],
            "n_trainers": len(self.plan["trainer_widths"]),
            "epochs": self.plan["epochs"],
            "train_seconds": f"{self.train_seconds:.4f}",
            "embed_ms": ";".join(f"{t:.2f}" for t in self.embed_ms),
            "verify_ms": ";".join(f"{t:.2f}" for t in self.verify_ms),
            "acc_baseline": "" if self.acc_baseline is None else f"{self.acc_baseline:.4f}",
            "acc_protected": f"{self.acc_protected:.4f}",
            "acc_pre_embed": f"{self.acc_pre_embed:.4f}",
            "eta_min": f"{min(self.etas):.4f}" if self.etas else "",
            "etas": ";".join(f"{e:.4f}" for e in self.etas),
            "verification": self.verification.get("overall", ""),
            "cluster_perfect_accuracy": self.attacks.get("cluster_perfect_accuracy", ""),
        }


@dataclass
class Prepared:
    """Everything the data client holds after release, plus the trained segments."""

    cfg: dict
    plan: ExperimentPlan
    data: Dataset
    label_map: object
    expanded: object
    client: object
    cache: object


def prepare(cfg: dict) -> Prepared:
    """Data, client pre-training, label expansion and the one-shot DP release."""
    plan = plan_from_config(cfg)
    d = cfg["data"]
    data = make_blobs(d["q"], d["dim"], d["per_class"], d["test_per_class"], d["spread"], plan.seeds.data)
    client = pretrain_client(plan, data.x_train, data.y_train)
    label_map = build_label_map(plan.q, plan.g, plan.seeds.labelmap)
    expanded = expand_dataset(data.x_train, data.y_train, label_map, plan.augment_sigma, plan.seeds.augment)
    cache = protect(client, expanded, plan.dp, plan.seeds.noise)
    return Prepared(cfg, plan, data, label_map, expanded, client, cache)


def _test_accuracy(prep: Prepared, segments) -> float:
    cut = encode_released(prep.client, prep.data.x_test, prep.plan.dp.clip_radius)
    pred = relay_forward(segments, cut).argmax(axis=1)
    return demasked_accuracy(pred, prep.data.y_test, prep.label_map)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


def baseline_accuracy(cfg: dict, transport: str = "inproc") -> float:
    """Same run without protection: no noise and one pseudo class per class."""
    base = with_gamma(cfg, 1.0)
    base["epsilon"] = "inf"
    prep = prepare(base)
    result = run_training(prep.plan, prep.cache, prep.expanded.labels, transport=transport)
    return _test_accuracy(prep, result.segments)


def run_experiment(config=None, out_dir=None, transport: str = "inproc", seed: int | None = None) -> RunRecord:
    """expand, protect, negotiate, train, embed the chain, verify; persist artifacts."""
    cfg = load_config(config, seed)
    rid = run_id(cfg)
    prep = _stage("prepare", prepare, cfg)
    plan = prep.plan
    _stage("negotiate", negotiate, plan)

    t0 = time.perf_counter()
    result = _stage("train", run_training, plan, prep.cache, prep.expanded.labels, transport=transport)
    train_seconds = time.perf_counter() - t0
    segments = result.segments
    acc_pre = _test_accuracy(prep, segments)

    nonces = derive_nonces(plan.seeds.nonces, plan.n)
    identities = [plan.identity(i) for i in range(1, plan.n + 1)]
    results = _stage("embed", embed_chain, segments, prep.cache, prep.expanded.labels, nonces,
                     identities, plan.wm, plan.batch_size, plan.seeds.batches)
    embed_ms = [r.seconds * 1e3 for r in results]
    acc_post = _test_accuracy(prep, segments)

    vcfg = cfg["verifier"]
    model = assemble(prep.client, segments, plan.dp.clip_radius)
    if vcfg["demasked"]:
        gate = accuracy_gate(model, prep.data.x_test, vcfg["accuracy_threshold"],
                             y_test=prep.data.y_test, label_map=prep.label_map)
    else:
        gate = accuracy_gate(model, prep.data.x_test, vcfg["accuracy_threshold"],
                             accepted=pseudo_test_targets(prep.data.y_test, prep.label_map))
    verify_ms, etas = [], []
    if gate.passed:
        report = verify_chain(segments, prep.cache, nonces, identities, vcfg["eta_goal"],
                              plan.wm.bits, plan.wm.M, gate.accuracy, timings=verify_ms)
        etas = [p.eta for p in report.per_link]
    else:
        report = VerificationReport(FAIL, "accuracy", gate.accuracy)

    attacks = {}
    if "cluster" in cfg["attacks"]:
        true_groups = np.asarray(prep.label_map.inverse)[prep.expanded.labels]
        out = kmeans_auto(prep.cache.values, range(2, 9), seed=plan.seeds.attack, true_groups=true_groups)
        attacks["cluster_perfect_accuracy"] = f"{out.perfect_accuracy:.4f}"
        attacks["cluster_k_found"] = out.k_found

    acc_base = baseline_accuracy(cfg, transport) if cfg["baseline"] else None
    record = RunRecord(rid, cfg, train_seconds, embed_ms, verify_ms, acc_base, acc_post, acc_pre,
                       etas, report.to_dict(), attacks, result.epoch_digests)
    if out_dir is not None:
        persist(record, prep, segments, nonces, identities, Path(out_dir))
    return record


def persist(record: RunRecord, prep: Prepared, segments, nonces, identities, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_segment(prep.client, out / "client.clwc")
    for i, seg in enumerate(segments, start=1):
        save_segment(seg, out / f"trainer{i}.clwc")
    save_cache(prep.cache, out / "cache.cldp")
    plan = prep.plan
    (out / "manifest.json").write_text(json.dumps(
        manifest(nonces, [i.decode() for i in identities], plan.wm.bits, plan.wm.M,
                 prep.cfg["verifier"]["eta_goal"], record.etas or None), indent=2))
    (out / "config.json").write_text(json.dumps(record.plan, indent=2, sort_keys=True))
    (out / "report.json").write_text(json.dumps(record.verification, indent=2, sort_keys=True))
    write_metrics([record], out / "metrics.csv")


def load_run(out_dir):
    """Checkpoints, cache and manifest as persisted by :func:`run_experiment`."""
    out = Path(out_dir)
    man = json.loads((out / "manifest.json").read_text())
    trainers = [load_segment(out / f"trainer{link['i']}.clwc") for link in man["links"]]
    return load_segment(out / "client.clwc"), trainers, load_cache(out / "cache.cldp"), man


def verify_from_files(cache_path, checkpoint_paths, manifest_path):
    man = json.loads(Path(manifest_path).read_text())
    cache = load_cache(cache_path, check=False)
    segments = [load_segment(p) for p in checkpoint_paths]
    links = sorted(man["links"], key=lambda l: l["i"])
    return verify_chain(segments, cache, [l["nonce"] for l in links], [l["identity"] for l in links],
                        man["eta_goal"], man["bits"], man["m"])


SWEEP_AXES = ("epsilon", "gamma", "B")


def sweep(config, axis: str, values, transport: str = "inproc", out_dir=None) -> list:
    """One run per value along ``axis``; everything else held at the config."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    base = load_config(config)
    records = []
    for v in values:
        if axis == "epsilon":
            cfg = dict(base, epsilon=v if v == "inf" else float(v))
        elif axis == "gamma":
            cfg = with_gamma(base, float(v))
        else:
            cfg = json.loads(json.dumps(base))
            cfg["watermark"]["bits"] = int(v)
        cfg = load_config(cfg)
        sub = None if out_dir is None else Path(out_dir) / f"{axis}-{v}"
        records.append(run_experiment(cfg, sub, transport))
    if out_dir is not None:
        write_metrics(records, Path(out_dir) / f"sweep-{axis}.csv")
    return records


def metrics_csv(records, version: int = METRICS_VERSION) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS[version], lineterminator="\n")
    writer.writeheader()
    for r in records:
        row = r.metrics_row() if isinstance(r, RunRecord) else r
        writer.writerow({k: row.get(k, "") for k in METRICS_COLUMNS[version]})
    return buf.getvalue()


def write_metrics(records, path) -> None:
    Path(path).write_text(metrics_csv(records))


def read_metrics(path) -> list:
    """Rows of a metrics CSV written by this or any earlier schema version."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        v = int(row.get("schema_version") or 1)
        if v > METRICS_VERSION:
            raise ValueError(f"metrics schema v{v} is newer than supported v{METRICS_VERSION}")
        for col in METRICS_COLUMNS[METRICS_VERSION]:
            row.setdefault(col, "")
    return rows


def report(records, columns=None):
    """Render records (RunRecords or metric rows) as CSV text and an aligned table."""
    columns = columns or METRICS_COLUMNS[METRICS_VERSION]
    rows = [r.metrics_row() if isinstance(r, RunRecord) else r for r in records]
    cells = [[str(row.get(c, "")) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[j]) for r in cells]) for j, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return metrics_csv(rows), "\n".join(line.rstrip() for line in lines)
