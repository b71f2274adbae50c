"""Experiment configs, pipelines, sweeps and report files.

A config is an INI-style file (``[section]`` headers, ``key = value`` lines;
values are Python literals or bare strings) or the equivalent nested JSON.
Sections: data, sampling, model, train, transfer, eval, export, sweep.
"""

from __future__ import annotations

import ast
import configparser
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    ChannelStats,
    DataError,
    PairingRule,
    WellRecord,
    geographic_labels,
    interval_label,
    load_wells,
    sample_pairs,
    stack_values,
    standardize,
    tile_intervals,
)
from .eval import accuracy, cluster_and_score, pr_auc, roc_auc
from .losses import classification_aux_loss
from .models import Model, ModelSpec, load_model, save_model
from .params import Adam, ParameterSet, backward
from .synthetic import make_formation
from .training import METHODS, TrainConfig, TrainingAborted, fit, spec_for
from .transfer import SourceAnchor, TransferConfig, transfer_fit, transfer_train_config

logger = logging.getLogger(__name__)

COMMANDS = ("pretrain", "transfer", "reverse", "sweep", "export", "eval")
LABEL_TARGETS = ("well", "formation", "class", "formation_class", "geographical", "rock_type")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class RunAborted(RuntimeError):
    """Training hit a non-finite value; the partial report was written."""

    def __init__(self, message: str, report: "MetricsReport"):
        super().__init__(message)
        self.report = report


# -- config sections -------------------------------------------------------------


def _synthetic_target_defaults() -> dict:
    return {"seed": 1, "prefix": "T", "formation": "synthetic_target", "offset_shift": 0.25}


@dataclass
class DataSection:
    source: str = "synthetic"
    target: str | None = None
    schema: dict = field(default_factory=dict)
    source_formation: str | None = None
    target_formation: str | None = None
    synthetic: dict = field(default_factory=dict)
    target_synthetic: dict = field(default_factory=_synthetic_target_defaults)
    test_wells: int = 10
    split_seed: int = 0


@dataclass
class SamplingSection:
    interval_length: int = 100
    pairing: str = "well_linking"
    close_param: float | None = None
    samples_per_epoch: int = 256
    batch_size: int = 32


@dataclass
class ModelSection:
    encoder_kind: str = "recurrent"
    embedding_dim: int = 16
    hidden_size: int = 32
    conv_channels: int = 16
    kernel_size: int = 5
    decoder_hidden: int = 64
    discriminator_hidden: int = 16
    ar_horizon: int = 3


@dataclass
class TrainSection:
    method: str = "vae"
    epochs: int = 35
    lr: float | None = None
    optimizer: str = "adam"
    margin: float = 1.0
    kl_weight: float = 1.0
    adversarial_weight: float = 1.0
    auxiliaries: tuple = ()
    aux_classification: float = 0.1
    aux_autoregressive: float = 0.1
    augment: tuple = ()
    noise_sigma: float = 0.05
    mask_p: float = 0.1
    hard_negatives: bool = True
    lr_milestones: tuple = ()
    lr_decay: float = 0.1


@dataclass
class TransferSection:
    method: str = "fine_tune"
    anchor: str | None = None
    train_method: str | None = None
    epochs: int = 15
    lr: float | None = None
    lam: float = 1.0
    alpha: float = 1.0
    delta_layers: tuple = ()
    eta: float = 0.001
    k: int = 1
    freeze: str = "none"
    wells_used: int | None = None


@dataclass
class EvalSection:
    labels: tuple = ("formation_class",)
    algorithms: tuple = ("gmm", "kmeans", "agglomerative:ward")
    k: int | None = None
    stride: int | None = None
    restarts: int = 1
    geo_k: int = 2
    pairs: int = 256
    classifier: bool = False
    checkpoint: str | None = None
    dataset: str = "source"
    split: str = "validation"


@dataclass
class ExportSection:
    checkpoint: str | None = None
    dataset: str = "source"
    split: str = "all"
    wells: tuple = ()
    stride: int | None = None


@dataclass
class SweepSection:
    command: str = "pretrain"
    axes: dict = field(default_factory=dict)


SECTIONS = {
    "data": DataSection,
    "sampling": SamplingSection,
    "model": ModelSection,
    "train": TrainSection,
    "transfer": TransferSection,
    "eval": EvalSection,
    "export": ExportSection,
    "sweep": SweepSection,
}

_PATH_FIELDS = (("data", "source"), ("data", "target"), ("transfer", "anchor"), ("eval", "checkpoint"),
                ("export", "checkpoint"))


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    eval: EvalSection = field(default_factory=EvalSection)
    export: ExportSection = field(default_factory=ExportSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- construction ------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str | None = None, check_files: bool = True) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping of sections")
        sections = {}
        for name, values in raw.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            if not isinstance(values, dict):
                raise ConfigError(f"section [{name}] must be a mapping")
            sections[name] = _build_section(name, values)
        cfg = cls(**sections)
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        cfg.validate(check_files=check_files)
        return cfg

    def _resolve_paths(self, base: Path) -> None:
        for sec, key in _PATH_FIELDS:
            value = getattr(getattr(self, sec), key)
            if value and not (sec == "data" and value == "synthetic") and not Path(value).is_absolute():
                setattr(getattr(self, sec), key, str((base / value).resolve()))

    def validate(self, check_files: bool = True) -> None:
        try:
            self.model_spec()
            self.pairing_rule().validate(self.sampling.interval_length)
            self.train_config()
            if self.transfer.method:
                self.transfer_config()
                if self.transfer.train_method and self.transfer.train_method not in METHODS:
                    raise ValueError(f"unknown transfer.train_method {self.transfer.train_method!r}")
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.eval.labels) - set(LABEL_TARGETS)
        if unknown:
            raise ConfigError(f"unknown eval label targets {sorted(unknown)}")
        for sec in ("eval", "export"):
            if getattr(self, sec).dataset not in ("source", "target"):
                raise ConfigError(f"{sec}.dataset must be 'source' or 'target'")
        if self.eval.split not in ("train", "validation", "all") or self.export.split not in ("train", "validation", "all"):
            raise ConfigError("split must be one of train, validation, all")
        if self.sweep.command not in COMMANDS or self.sweep.command == "sweep":
            raise ConfigError(f"sweep.command must be one of {[c for c in COMMANDS if c != 'sweep']}")
        for axis, values in self.sweep.axes.items():
            sec, _, key = axis.partition(".")
            if sec not in SECTIONS or sec == "sweep" or key not in {f.name for f in fields(SECTIONS[sec])}:
                raise ConfigError(f"unknown sweep axis {axis!r}")
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"sweep axis {axis!r} needs a non-empty list of values")
        if self.data.test_wells < 1:
            raise ConfigError("data.test_wells must be >= 1")
        if check_files:
            for sec, key in _PATH_FIELDS:
                value = getattr(getattr(self, sec), key)
                if value and not (sec == "data" and value == "synthetic"):
                    if not Path(value).exists():
                        raise ConfigError(f"{sec}.{key}: file not found: {value}")

    # -- derived objects ---------------------------------------------------------

    def model_spec(self) -> ModelSpec:
        return ModelSpec(interval_length=self.sampling.interval_length, **asdict(self.model))

    def pairing_rule(self) -> PairingRule:
        return PairingRule(self.sampling.pairing, self.sampling.close_param)

    def train_config(self, method: str | None = None, **overrides) -> TrainConfig:
        kw = asdict(self.train)
        kw["augment"] = tuple(kw["augment"])
        kw["lr_milestones"] = tuple(kw["lr_milestones"])
        kw["auxiliaries"] = tuple(kw["auxiliaries"])
        kw.update(
            samples_per_epoch=self.sampling.samples_per_epoch,
            batch_size=self.sampling.batch_size,
            pairing=self.pairing_rule(),
        )
        if method is not None and method != kw["method"]:
            kw["method"] = method
            kw["lr"] = None
        kw.update(overrides)
        return TrainConfig(**kw)

    def transfer_config(self) -> TransferConfig:
        t = self.transfer
        return TransferConfig(method=t.method, lam=t.lam, alpha=t.alpha, delta_layers=tuple(t.delta_layers),
                              eta=t.eta, k=t.k, freeze=t.freeze)

    def transfer_train_config(self) -> TrainConfig:
        t = self.transfer
        base = self.train_config(method=t.train_method or self.train.method)
        kw = {f.name: getattr(base, f.name) for f in fields(base) if f.name not in ("method", "epochs", "lr")}
        return transfer_train_config(base.method, epochs=t.epochs, lr=t.lr, **kw)

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return _plain({name: asdict(getattr(self, name)) for name in SECTIONS})

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        raw = self.to_dict()
        for dotted, value in overrides.items():
            sec, _, key = dotted.partition(".")
            raw[sec][key] = value
        return ExperimentConfig.from_dict(raw, check_files=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build_section(name: str, values: dict):
    cls = SECTIONS[name]
    known = {f.name: f for f in fields(cls)}
    if name == "sweep":
        command = values.get("command", "pretrain")
        axes = dict(values.get("axes", {}))
        for key, val in values.items():
            if key not in ("command", "axes"):
                axes[key] = val
        return SweepSection(command=command, axes={k: list(v) if isinstance(v, (list, tuple)) else v
                                                   for k, v in axes.items()})
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(val, (list, tuple, str)):
            val = (val,) if isinstance(val, str) else tuple(val)
        elif isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"[{name}] {key} must be true/false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"[{name}] {key} must be a number, got {val!r}")
            if isinstance(default, int) and isinstance(val, float) and not val.is_integer():
                raise ConfigError(f"[{name}] {key} must be an integer, got {val!r}")
            val = type(default)(val)
        kwargs[key] = val
    return cls(**kwargs)


def _literal(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def parse_config_text(text: str, fmt: str = "ini") -> dict:
    if fmt == "json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return {sec: {k: _literal(v) for k, v in parser.items(sec)} for sec in parser.sections()}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    fmt = "json" if path.suffix.lower() == ".json" else "ini"
    raw = parse_config_text(path.read_text(), fmt)
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


# -- seeds -----------------------------------------------------------------------


def child_seed(master: int, index: int) -> int:
    """Seed of child ``index``; depends only on (master, index)."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(index),))
    return int(ss.generate_state(1)[0])


# -- data preparation ------------------------------------------------------------


def load_formation(cfg: ExperimentConfig, which: str = "source") -> list[WellRecord]:
    d = cfg.data
    if which == "source":
        src, formation, synth = d.source, d.source_formation, d.synthetic
    else:
        src, formation, synth = d.target, d.target_formation, d.target_synthetic
        if src is None:
            raise ConfigError("data.target is not set")
    if src == "synthetic":
        wells = make_formation(**synth)
    else:
        wells = load_wells(src, d.schema)
    if formation is not None:
        wells = [w for w in wells if w.formation == formation]
    if not wells:
        raise DataError(f"no wells in {which} data")
    return wells


def n_test_wells(n: int, test_wells: int = 10) -> int:
    """Hold out ``test_wells`` when at least as many remain for training, else ceil(25%)."""
    if n - test_wells >= test_wells:
        return test_wells
    return max(1, math.ceil(0.25 * n))


def split_wells(wells: Sequence[WellRecord], test_wells: int = 10, seed: int = 0):
    """Per-formation train/validation split; train keeps its shuffled order."""
    by_formation: dict[str, list[WellRecord]] = {}
    for w in sorted(wells, key=lambda w: w.well_id):
        by_formation.setdefault(w.formation, []).append(w)
    train, val = [], []
    for i, name in enumerate(sorted(by_formation)):
        group = by_formation[name]
        if len(group) < 2:
            raise DataError(f"formation {name!r} has fewer than 2 wells")
        order = np.random.default_rng(np.random.SeedSequence([int(seed), i])).permutation(len(group))
        n_test = n_test_wells(len(group), test_wells)
        val.extend(sorted((group[j] for j in order[:n_test]), key=lambda w: w.well_id))
        train.extend(group[j] for j in order[n_test:])
    return train, val


@dataclass
class Prepared:
    train: list[WellRecord]
    val: list[WellRecord]
    stats: ChannelStats


def prepare(cfg: ExperimentConfig, which: str, stats: ChannelStats | None = None,
            wells_used: int | None = None) -> Prepared:
    wells = load_formation(cfg, which)
    train, val = split_wells(wells, cfg.data.test_wells, cfg.data.split_seed)
    if wells_used is not None:
        if wells_used < 1 or wells_used > len(train):
            raise DataError(f"wells_used={wells_used} but {len(train)} training wells are available")
        train = train[:wells_used]
    train_std, fitted = standardize(train, stats)
    val_std, _ = standardize(val, fitted)
    return Prepared(train_std, val_std, fitted)


def stats_path(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".stats")


def save_stats(stats: ChannelStats, path) -> None:
    Path(path).write_text(f"mean = {[float(v) for v in stats.mean]!r}\nstd = {[float(v) for v in stats.std]!r}\n")


def load_stats(path) -> ChannelStats | None:
    path = Path(path)
    if not path.exists():
        return None
    vals = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip():
            vals[key.strip()] = np.array(ast.literal_eval(value.strip()), dtype=float)
    return ChannelStats(vals["mean"], vals["std"])


def class_index(wells: Sequence[WellRecord]) -> dict[str, int] | None:
    names = sorted({w.class_label for w in wells if w.class_label is not None})
    if len(names) < 2:
        return None
    idx = {n: i for i, n in enumerate(names)}
    return {w.well_id: idx.get(w.class_label, 0) for w in wells}


# -- reports ---------------------------------------------------------------------

REPORT_COLUMNS = ("run_id", "config_hash", "seed", "stage", "split", "label", "algo", "metric", "value")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class MetricsReport:
    run_id: str
    command: str
    config_hash: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    status: str = "ok"
    wall_clock: float = 0.0

    def add_rows(self, rows: Sequence[dict]) -> None:
        self.rows.extend(rows)

    def add_history(self, stage: str, history: Sequence[dict]) -> None:
        self.history.extend({"stage": stage, **row} for row in history)

    def value(self, stage: str, label: str, algo: str, metric: str, split: str = "validation") -> float:
        for r in self.rows:
            if (r["stage"], r["split"], r["label"], r["algo"], r["metric"]) == (stage, split, label, algo, metric):
                return r["value"]
        raise KeyError((stage, split, label, algo, metric))

    def report_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([self.run_id, self.config_hash, self.seed] + [_fmt(r[c]) for c in REPORT_COLUMNS[3:]])
        return buf.getvalue()

    def history_csv(self) -> str:
        keys = sorted({k for row in self.history for k in row} - {"stage", "epoch"})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run_id", "stage", "epoch"] + keys)
        for row in self.history:
            w.writerow([self.run_id, row["stage"], row["epoch"]] + [_fmt(row[k]) if k in row else "" for k in keys])
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [
            f"run        {self.run_id}",
            f"command    {self.command}",
            f"status     {self.status}",
            f"config     {self.config_hash}",
            f"seed       {self.seed}",
            f"checkpoint {self.checkpoint or '-'}",
        ]
        stages = {}
        for row in self.history:
            stages.setdefault(row["stage"], []).append(row)
        for stage, rows in stages.items():
            last = rows[-1]
            loss = last.get("loss")
            loss_txt = f" final loss {loss:.6g}" if isinstance(loss, float) else ""
            lines.append(f"history    {stage}: {last['epoch']} epochs{loss_txt}")
        if self.rows:
            lines.append("")
            lines.append(f"{'stage':<22} {'split':<10} {'label':<18} {'algo':<22} {'metric':<18} value")
            for r in self.rows:
                lines.append(f"{r['stage']:<22} {r['split']:<10} {r['label']:<18} {r['algo']:<22} "
                             f"{r['metric']:<18} {r['value']:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.report_csv())
        (out / "history.csv").write_text(self.history_csv())
        (out / "summary.txt").write_text(self.summary_text())
        # wall-clock is kept apart so the report files stay byte-reproducible
        (out / "timing.txt").write_text(f"wall_clock_seconds = {self.wall_clock:.3f}\n")


def _new_report(cfg: ExperimentConfig, command: str, seed: int) -> MetricsReport:
    h = cfg.config_hash()
    return MetricsReport(run_id=f"{command}-{h[:10]}-{seed}", command=command, config_hash=h, seed=int(seed))


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")


# -- evaluation ------------------------------------------------------------------


def linear_probe(z_train: np.ndarray, y_train: np.ndarray, n_classes: int, seed: int = 0,
                 steps: int = 200, lr: float = 0.05):
    """Softmax regression on fixed embeddings; returns a predict function."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    params.add("probe.w", 0.01 * rng.standard_normal((z_train.shape[1], n_classes)))
    params.add("probe.b", np.zeros(n_classes))
    mu, sd = z_train.mean(axis=0), z_train.std(axis=0) + 1e-8
    x = Tensor((z_train - mu) / sd)
    opt = Adam(params, lr)
    for _ in range(steps):
        probs = ad.softmax(ad.linear(x, params["probe.w"], params["probe.b"]))
        loss = classification_aux_loss(probs, y_train)
        opt.step(backward(loss.total, params))
    w, b = params["probe.w"].data, params["probe.b"].data
    return lambda z: np.argmax(((z - mu) / sd) @ w + b, axis=1)


def _row(stage, split, label, algo, metric, value) -> dict:
    return {"stage": stage, "split": split, "label": label, "algo": algo, "metric": metric, "value": float(value)}


def evaluate(model: Model, wells: Sequence[WellRecord], cfg: ExperimentConfig, seed: int, stage: str,
             split: str = "validation", train_wells: Sequence[WellRecord] | None = None) -> list[dict]:
    """Clustering, pair and probe metrics of ``model`` on ``wells``."""
    e = cfg.eval
    l = model.spec.interval_length
    rows: list[dict] = []
    tiles = tile_intervals(wells, l, e.stride or l)
    if not tiles:
        warnings.warn(f"{stage}: no intervals of length {l} to evaluate")
        return rows
    by_id = {w.well_id: w for w in wells}
    z = model.encode(stack_values(tiles))
    for target in e.labels:
        geo = geographic_labels(wells, e.geo_k, seed) if target == "geographical" else None
        truth = [interval_label(t, by_id[t.well_id], target, geo) for t in tiles]
        if len(set(truth)) < 2:
            logger.warning("%s: label target %s has a single value; skipped", stage, target)
            continue
        for algo in e.algorithms:
            scores = cluster_and_score(z, truth, algo, k=e.k, seed=seed)
            rows += [_row(stage, split, target, algo, m, v) for m, v in scores.items()]
            if e.restarts > 1 and not algo.startswith("agglomerative"):
                # best-of-restarts by ARI, reported next to the single-seed row
                runs = [cluster_and_score(z, truth, algo, k=e.k, seed=seed + r) for r in range(e.restarts)]
                best = max(runs, key=lambda s: s["ari"])
                rows += [_row(stage, split, target, f"{algo}@best{e.restarts}", m, v) for m, v in best.items()]
        if e.classifier and train_wells:
            rows += _probe_rows(model, train_wells, tiles, z, by_id, target, geo, cfg, seed, stage, split)
    if e.pairs > 0:
        rows += _pair_rows(model, wells, cfg, seed, stage, split)
    return rows


def _probe_rows(model, train_wells, tiles, z, by_id, target, geo, cfg, seed, stage, split):
    l = model.spec.interval_length
    tr_tiles = tile_intervals(train_wells, l, cfg.eval.stride or l)
    if target in ("well", "geographical"):
        return []  # labels are not shared between train and validation wells
    tr_by = {w.well_id: w for w in train_wells}
    y_tr = [interval_label(t, tr_by[t.well_id], target) for t in tr_tiles]
    y_val = [interval_label(t, by_id[t.well_id], target) for t in tiles]
    classes = sorted(set(y_tr))
    if len(classes) < 2:
        return []
    idx = {c: i for i, c in enumerate(classes)}
    predict = linear_probe(model.encode(stack_values(tr_tiles)), np.array([idx[y] for y in y_tr]), len(classes), seed)
    pred = predict(z)
    truth = np.array([idx.get(y, -1) for y in y_val])
    return [_row(stage, split, target, "linear_probe", "accuracy", accuracy(truth, pred))]


def _pair_rows(model, wells, cfg, seed, stage, split):
    l = model.spec.interval_length
    rule = cfg.pairing_rule()
    try:
        pairs = sample_pairs(wells, l, rule, cfg.eval.pairs, seed)
    except DataError as exc:
        logger.warning("%s: pair evaluation skipped (%s)", stage, exc)
        return []
    y = np.array([p.label for p in pairs])
    if len(set(y.tolist())) < 2:
        return []
    xa = stack_values([p.a for p in pairs])
    xb = stack_values([p.b for p in pairs])
    label = f"pairs:{rule.mode}"
    rows = []
    if model.spec.has("similarity"):
        scores = model.similarity(xa, xb)
        rows.append(_row(stage, split, label, "similarity", "accuracy", accuracy(y, (scores >= 0.5).astype(int))))
        algo = "similarity"
    else:
        scores = -np.linalg.norm(model.encode(xa) - model.encode(xb), axis=1)
        algo = "neg_distance"
    rows.append(_row(stage, split, label, algo, "roc_auc", roc_auc(y, scores)))
    rows.append(_row(stage, split, label, algo, "pr_auc", pr_auc(y, scores)))
    return rows


# -- pipelines -------------------------------------------------------------------


def _fit_or_abort(report: MetricsReport, out: Path, stage: str, t0: float, func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except TrainingAborted as exc:
        report.add_history(stage, exc.history)
        report.status = f"aborted: {exc}"
        report.wall_clock = time.perf_counter() - t0
        report.write(out)
        raise RunAborted(str(exc), report) from exc


def pretrain(cfg: ExperimentConfig, seed: int = 0, out_dir=".") -> tuple[Model, MetricsReport]:
    """Train the configured self-supervised model on the source wells."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    _write_config(cfg, out)
    report = _new_report(cfg, "pretrain", seed)
    data = prepare(cfg, "source")
    tcfg = cfg.train_config()
    class_of = class_index(data.train) if tcfg.uses_classification else None
    n_classes = max(class_of.values()) + 1 if class_of else 2
    model = Model(spec_for(tcfg, cfg.model_spec(), n_classes), seed=seed)
    history = _fit_or_abort(report, out, "pretrain", t0, fit, model, data.train, tcfg, seed=seed, class_of=class_of)
    report.add_history("pretrain", history)
    ckpt = out / "model.llck"
    save_model(model, ckpt)
    save_stats(data.stats, stats_path(ckpt))
    report.checkpoint = ckpt.name
    report.add_rows(evaluate(model, data.val, cfg, seed, "pretrain", train_wells=data.train))
    report.wall_clock = time.perf_counter() - t0
    report.write(out)
    return model, report


def _anchor(cfg: ExperimentConfig, seed: int, out: Path, report: MetricsReport, t0: float):
    """Anchor from ``transfer.anchor`` or, when unset, from a pretraining stage in ``out/source``."""
    if cfg.transfer.anchor:
        model = load_model(cfg.transfer.anchor)
        stats = load_stats(stats_path(cfg.transfer.anchor))
        return SourceAnchor.from_model(model), stats
    try:
        model, src_report = pretrain(cfg, seed, out / "source")
    except RunAborted as exc:
        report.add_history("pretrain", [h for h in exc.report.history])
        report.status = f"aborted: {exc}"
        report.wall_clock = time.perf_counter() - t0
        report.write(out)
        raise RunAborted(str(exc), report) from exc
    report.add_history("pretrain", [{k: v for k, v in h.items() if k != "stage"} for h in src_report.history])
    report.add_rows(src_report.rows)
    return SourceAnchor.from_model(model), load_stats(out / "source" / "model.stats")


def transfer(cfg: ExperimentConfig, seed: int = 0, out_dir=".", reverse: bool = False) -> tuple[Model, MetricsReport]:
    """Source anchor -> target training -> target (and optionally source) evaluation."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    _write_config(cfg, out)
    report = _new_report(cfg, "reverse" if reverse else "transfer", seed)
    anchor, src_stats = _anchor(cfg, seed, out, report, t0)
    tcfg = cfg.transfer_config()
    train_cfg = cfg.transfer_train_config()
    target = prepare(cfg, "target", wells_used=cfg.transfer.wells_used)
    class_of = class_index(target.train) if train_cfg.uses_classification else None
    stage = f"transfer:{tcfg.method}"
    model, history = _fit_or_abort(report, out, stage, t0, transfer_fit, target.train, anchor, tcfg, train_cfg,
                                   seed=seed, class_of=class_of)
    report.add_history(stage, history)
    ckpt = out / "model.llck"
    save_model(model, ckpt)
    save_stats(target.stats, stats_path(ckpt))
    report.checkpoint = ckpt.name
    report.add_rows(evaluate(model, target.val, cfg, seed, stage, train_wells=target.train))
    if reverse:
        report.add_rows(reverse_rows(cfg, anchor, model, src_stats, seed))
    report.wall_clock = time.perf_counter() - t0
    report.write(out)
    return model, report


def reverse_rows(cfg: ExperimentConfig, anchor: SourceAnchor, model: Model, src_stats, seed: int) -> list[dict]:
    """Score anchor and transferred model on the held-out source wells, plus retention."""
    source = prepare(cfg, "source", stats=src_stats)
    pre = evaluate(anchor.model(), source.val, cfg, seed, "source:pre", train_wells=source.train)
    post = evaluate(model, source.val, cfg, seed, "source:post", train_wells=source.train)
    before = {(r["label"], r["algo"], r["metric"]): r["value"] for r in pre}
    retention = []
    for r in post:
        key = (r["label"], r["algo"], r["metric"])
        if key in before and before[key] != 0:
            retention.append(_row("source:retention", r["split"], r["label"], r["algo"], r["metric"],
                                  r["value"] / before[key]))
    return pre + post + retention


def reverse_validate(cfg: ExperimentConfig, seed: int = 0, out_dir=".") -> tuple[Model, MetricsReport]:
    return transfer(cfg, seed, out_dir, reverse=True)


def _selection(cfg: ExperimentConfig, dataset: str, split: str, stats: ChannelStats | None, wells_filter=()):
    data = prepare(cfg, dataset, stats=stats)
    chosen = {"train": data.train, "validation": data.val, "all": data.train + data.val}[split]
    if wells_filter:
        keep = set(wells_filter)
        chosen = [w for w in chosen if w.well_id in keep]
    return sorted(chosen, key=lambda w: w.well_id), data


def evaluate_checkpoint(cfg: ExperimentConfig, seed: int = 0, out_dir=".") -> MetricsReport:
    t0 = time.perf_counter()
    out = Path(out_dir)
    if not cfg.eval.checkpoint:
        raise ConfigError("eval.checkpoint is not set")
    _write_config(cfg, out)
    report = _new_report(cfg, "eval", seed)
    model = load_model(cfg.eval.checkpoint)
    wells, data = _selection(cfg, cfg.eval.dataset, cfg.eval.split, load_stats(stats_path(cfg.eval.checkpoint)))
    report.checkpoint = Path(cfg.eval.checkpoint).name
    report.add_rows(evaluate(model, wells, cfg, seed, "eval", split=cfg.eval.split, train_wells=data.train))
    report.wall_clock = time.perf_counter() - t0
    report.write(out)
    return report


def export_embeddings(cfg: ExperimentConfig, seed: int = 0, out_dir=".") -> MetricsReport:
    """Write ``embeddings.csv``: well_id, start_depth, labels, then one column per embedding dim."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    x = cfg.export
    if not x.checkpoint:
        raise ConfigError("export.checkpoint is not set")
    _write_config(cfg, out)
    report = _new_report(cfg, "export", seed)
    model = load_model(x.checkpoint)
    wells, _ = _selection(cfg, x.dataset, x.split, load_stats(stats_path(x.checkpoint)), x.wells)
    l = model.spec.interval_length
    tiles = tile_intervals(wells, l, x.stride or l)
    write_embeddings(out / "embeddings.csv", model, tiles, {w.well_id: w for w in wells})
    report.checkpoint = Path(x.checkpoint).name
    report.add_rows([_row("export", x.split, "-", "-", "n_intervals", len(tiles))])
    report.wall_clock = time.perf_counter() - t0
    report.write(out)
    return report


def write_embeddings(path, model: Model, tiles, by_id: dict[str, WellRecord]) -> None:
    d = model.spec.embedding_dim
    header = ["well_id", "start_depth", "formation", "class", "rock_type"] + [f"z{i}" for i in range(d)]
    tiles = sorted(tiles, key=lambda t: (t.well_id, t.start_depth))
    z = model.encode(stack_values(tiles)) if tiles else np.zeros((0, d))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for t, row in zip(tiles, z):
        well = by_id[t.well_id]
        rock = interval_label(t, well, "rock_type") if well.rock_type is not None else ""
        w.writerow([t.well_id, repr(float(t.start_depth)), well.formation, well.class_label or "", rock]
                   + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


# -- sweeps ----------------------------------------------------------------------


def _grid(axes: dict) -> list[dict]:
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def _run_child(args) -> MetricsReport:
    cfg_dict, command, seed, out = args
    cfg = ExperimentConfig.from_dict(cfg_dict, check_files=False)
    return run_command(command, cfg, seed, out)


def sweep(cfg: ExperimentConfig, seed: int = 0, out_dir=".", workers: int | None = None) -> MetricsReport:
    """One child run per grid point of the sweep axes, with seeds derived from ``seed``."""
    t0 = time.perf_counter()
    out = Path(out_dir)
    _write_config(cfg, out)
    grid = _grid(cfg.sweep.axes) if cfg.sweep.axes else [{}]
    jobs = []
    for i, point in enumerate(grid):
        try:
            child = cfg.with_overrides(point)
        except ConfigError as exc:
            raise ConfigError(f"grid point {i} {point}: {exc}") from exc
        jobs.append((child.to_dict(), cfg.sweep.command, child_seed(seed, i), str(out / "runs" / f"{i:04d}")))
    workers = workers or int(os.environ.get("LOGLEARN_THREADS", "1") or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            children = list(pool.map(_run_child, jobs))
    else:
        children = [_run_child(job) for job in jobs]
    report = _new_report(cfg, "sweep", seed)
    for child in children:
        report.add_rows([{**r, "stage": f"{child.run_id}/{r['stage']}"} for r in child.rows])
    summary = sweep_summary(cfg, grid, jobs, children)
    (out / "summary.csv").write_text(summary[0])
    (out / "plot.csv").write_text(summary[1])
    report.wall_clock = time.perf_counter() - t0
    report.write(out)
    return report


def _metric_key(r: dict) -> str:
    return f"{r['stage']}/{r['label']}/{r['algo']}/{r['metric']}"


def sweep_summary(cfg: ExperimentConfig, grid, jobs, children) -> tuple[str, str]:
    """Summary CSV (one row per grid point) and long-form plot CSV (axis, x, series, y)."""
    axes = list(cfg.sweep.axes)
    keys = sorted({_metric_key(r) for c in children for r in c.rows})
    extra = ["coincides_well_linking"] if "sampling.close_param" in axes else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index"] + axes + ["seed", "config_hash", "run_id"] + extra + keys)
    plot = io.StringIO()
    pw = csv.writer(plot, lineterminator="\n")
    pw.writerow(["axis", "x", "series", "y"])
    for i, (point, job, child) in enumerate(zip(grid, jobs, children)):
        values = {_metric_key(r): r["value"] for r in child.rows}
        row = [i] + [_fmt(point[a]) for a in axes] + [job[2], child.config_hash, child.run_id]
        if extra:
            child_cfg = ExperimentConfig.from_dict(job[0], check_files=False)
            row.append(int(close_linking_coincides(child_cfg, job[2])))
        w.writerow(row + [_fmt(values[k]) if k in values else "" for k in keys])
        for a in axes:
            for k in keys:
                if k in values:
                    pw.writerow([a, _fmt(point[a]), k, _fmt(values[k])])
    return buf.getvalue(), plot.getvalue()


def close_linking_coincides(cfg: ExperimentConfig, seed: int) -> bool:
    """True iff close-linking pair labels equal well-linking labels on the same sampled pairs."""
    if cfg.sampling.pairing != "close_well_linking":
        return True
    data = prepare(cfg, "source")
    l, n = cfg.sampling.interval_length, cfg.sampling.samples_per_epoch
    close = sample_pairs(data.train, l, cfg.pairing_rule(), n, seed)
    well = sample_pairs(data.train, l, PairingRule("well_linking"), n, seed)
    return [(p.a.well_id, p.a.start_depth, p.b.well_id, p.b.start_depth, p.label) for p in close] == \
           [(p.a.well_id, p.a.start_depth, p.b.well_id, p.b.start_depth, p.label) for p in well]


# -- dispatch --------------------------------------------------------------------


def run_command(command: str, cfg: ExperimentConfig, seed: int = 0, out_dir=".") -> MetricsReport:
    if command == "pretrain":
        return pretrain(cfg, seed, out_dir)[1]
    if command == "transfer":
        return transfer(cfg, seed, out_dir)[1]
    if command == "reverse":
        return reverse_validate(cfg, seed, out_dir)[1]
    if command == "sweep":
        return sweep(cfg, seed, out_dir)
    if command == "export":
        return export_embeddings(cfg, seed, out_dir)
    if command == "eval":
        return evaluate_checkpoint(cfg, seed, out_dir)
    raise ConfigError(f"unknown command {command!r}")
