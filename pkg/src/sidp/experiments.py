"""Experiment configs, runs, metrics files, variance demo and reports."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .accountant import calibrate_z
from .data import Corpus, Dataset, load_corpus, load_public_batch
from .layers import Sequential, build_model
from .noisy import RngStream, noisy_train
from .optim import DpTrainConfig, ParamState, dp_train, dpsgd_step, evaluate, save_release, sidpsgd_step

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OPTIMIZERS = ("sgd", "noisy", "dpsgd", "sidpsgd", "sidpsgd-bn")
CSV_COLUMNS = ("run_id", "seed", "epoch", "train_loss", "test_accuracy", "test_accuracy_se",
               "epsilon", "converged", "reason", "wall_clock_s")


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


# section of each config field in the INI file
_SECTIONS = {
    "schema": "meta", "name": "meta",
    "arch": "model", "hidden": "model", "norm": "model", "norm_output": "model", "norm_eps": "model",
    "optimizer": "train", "update": "train", "lr": "train", "momentum": "train",
    "batch_size": "train", "epochs": "train", "sigma": "train", "min_accuracy": "train",
    "lot_size": "privacy", "clip_norm": "privacy", "delta": "privacy", "z": "privacy",
    "epsilon": "privacy",
    "data_dir": "data", "public_dir": "data", "public_size": "data", "public_seed": "data",
    "train_limit": "data", "test_limit": "data",
    "seeds": "run", "out": "run", "save_release": "run",
    "sweep_param": "sweep", "sweep_values": "sweep",
}


@dataclass
class ExperimentConfig:
    schema: int = SCHEMA_VERSION
    name: str = "run"
    arch: str = "mlp"
    hidden: tuple[int, ...] = (300, 100)
    norm: str = "layer"
    norm_output: bool = False
    norm_eps: float = 1e-5
    optimizer: str = "sidpsgd"
    update: str = "sgd"  # minibatch rule for sgd/noisy: sgd | adam
    lr: float = 0.1
    momentum: float = 0.0
    batch_size: int = 128
    epochs: int = 5
    sigma: float = 0.0
    min_accuracy: float = 0.5
    lot_size: int = 256
    clip_norm: float = 1.0
    delta: float = 1e-5
    z: float | None = None
    epsilon: float | None = None
    data_dir: str = "data/mnist"
    public_dir: str | None = None
    public_size: int = 30
    public_seed: int = 0
    train_limit: int | None = None
    test_limit: int | None = None
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    save_release: bool = False
    sweep_param: str | None = None
    sweep_values: tuple[float, ...] = ()

    def validate(self) -> "ExperimentConfig":
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"config schema {self.schema} unsupported (want {SCHEMA_VERSION})")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.norm not in ("none", "layer", "batch"):
            raise ConfigError("norm must be none, layer or batch")
        if self.optimizer == "sidpsgd-bn" and self.norm != "batch":
            raise ConfigError("sidpsgd-bn needs a model with batch norm")
        if self.optimizer in ("dpsgd", "sidpsgd") and self.norm == "batch":
            raise ConfigError("per-sample gradients under batch norm need sidpsgd-bn")
        if self.optimizer == "sidpsgd-bn" and self.public_size < 2:
            raise ConfigError("public batch needs at least 2 points")
        if self.optimizer in ("dpsgd", "sidpsgd", "sidpsgd-bn"):
            if (self.z is None) == (self.epsilon is None):
                raise ConfigError("give exactly one of privacy.z or privacy.epsilon")
        if self.epochs < 0 or self.lr <= 0 or self.sigma < 0:
            raise ConfigError("epochs, lr and sigma must be nonnegative (lr positive)")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.sweep_param is not None and self.sweep_param not in _SECTIONS:
            raise ConfigError(f"cannot sweep unknown field {self.sweep_param!r}")
        return self

    @property
    def is_private(self) -> bool:
        return self.optimizer in ("dpsgd", "sidpsgd", "sidpsgd-bn")

    # -- serialization ------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for f in fields(self):
            section = _SECTIONS[f.name]
            if not cp.has_section(section):
                cp.add_section(section)
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ", ".join(_fmt(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            else:
                value = _fmt(value)
            cp.set(section, f.name, value)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kwargs: dict[str, Any] = {}
        types = {f.name: f for f in fields(cls)}
        for section in cp.sections():
            for key, raw in cp.items(section):
                if key not in types:
                    raise ConfigError(f"unknown key {section}.{key}")
                if _SECTIONS[key] != section:
                    raise ConfigError(f"key {key} belongs in section [{_SECTIONS[key]}]")
                kwargs[key] = _parse(key, raw)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_INT_FIELDS = {"schema", "batch_size", "epochs", "lot_size", "public_size", "public_seed",
               "train_limit", "test_limit"}
_FLOAT_FIELDS = {"norm_eps", "lr", "momentum", "sigma", "min_accuracy", "clip_norm", "delta",
                 "z", "epsilon"}
_BOOL_FIELDS = {"norm_output", "save_release"}


def _parse(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_FIELDS:
            return int(raw)
        if key in _FLOAT_FIELDS:
            return float(raw)
        if key in _BOOL_FIELDS:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if key in ("hidden", "seeds"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key == "sweep_values":
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


# ---------------------------------------------------------------------------
# running


@dataclass
class MetricsRecord:
    run_id: str
    seed: int | str
    epoch: int
    train_loss: float
    test_accuracy: float
    test_accuracy_se: float | None
    epsilon: float
    converged: str
    reason: str
    wall_clock_s: float


@dataclass
class RunSummary:
    run_id: str
    config: ExperimentConfig
    records: list[MetricsRecord]
    final_accuracies: list[float]
    converged: list[bool]
    reasons: list[str]
    epsilon: float
    z: float | None
    csv_path: Path | None = None
    json_path: Path | None = None
    releases: list[str] = field(default_factory=list)
    # clipping audit over all private steps of all seeds
    steps: int = 0
    audited_steps: int = 0
    max_clipped_norm: float = 0.0

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.final_accuracies))

    @property
    def se_accuracy(self) -> float:
        a = np.asarray(self.final_accuracies)
        return float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0

    @property
    def median_accuracy(self) -> float:
        return float(np.median(self.final_accuracies))

    @property
    def all_converged(self) -> bool:
        return all(self.converged)


def run_id_for(cfg: ExperimentConfig) -> str:
    key = {"noisy": f"sigma{cfg.sigma:g}", "sgd": "nonprivate"}.get(cfg.optimizer)
    if key is None:
        key = f"eps{cfg.epsilon:g}" if cfg.epsilon is not None else f"z{cfg.z:g}"
    return f"{cfg.name}-{cfg.optimizer}-{key}"


def _corpus(cfg: ExperimentConfig) -> Corpus:
    corpus = load_corpus(cfg.data_dir, cfg.public_dir)
    train, test = corpus.train, corpus.test
    if cfg.train_limit:
        train = train.subset(slice(0, cfg.train_limit))
    if cfg.test_limit:
        test = test.subset(slice(0, cfg.test_limit))
    return Corpus(train, test, corpus.public_pool, corpus.public_source)


def _model(cfg: ExperimentConfig, train: Dataset) -> Sequential:
    norm = None if cfg.norm == "none" else cfg.norm
    classes = max(train.num_classes, 2)
    if cfg.arch == "mlp":
        n_in = int(np.prod(train.images.shape[1:]))
        return build_model("mlp", norm, n_in=n_in, hidden=cfg.hidden, n_out=classes,
                           eps=cfg.norm_eps, norm_output=cfg.norm_output)
    return build_model(cfg.arch, norm, n_out=classes, eps=cfg.norm_eps)


def dp_config(cfg: ExperimentConfig, n: int) -> DpTrainConfig:
    per_epoch = max(1, round(n / cfg.lot_size))
    steps = cfg.epochs * per_epoch
    if cfg.z is not None:
        z = cfg.z
    else:
        z = calibrate_z(cfg.epsilon, cfg.delta, cfg.lot_size / n, max(steps, 1))
    return DpTrainConfig(lr=cfg.lr, lot_size=cfg.lot_size, n=n, steps=steps, z=z,
                         clip_norm=cfg.clip_norm, delta=cfg.delta)


def run_experiment(cfg: ExperimentConfig, out_dir=None, corpus: Corpus | None = None) -> RunSummary:
    """Train every seed, write ``<run_id>.csv`` and ``<run_id>.json`` into ``out_dir``."""
    cfg.validate()
    corpus = corpus or _corpus(cfg)
    train, test = corpus.train, corpus.test
    run_id = run_id_for(cfg)
    records: list[MetricsRecord] = []
    finals, converged, reasons, losses, releases = [], [], [], [], []
    audit = {"steps": 0, "audited": 0, "max_norm": 0.0}
    eps_final, z_used = math.inf, None
    out = Path(out_dir if out_dir is not None else cfg.out)
    public = None
    if cfg.optimizer == "sidpsgd-bn":
        if corpus.public_pool is None:
            raise ConfigError("no public data available")
        if not corpus.public_source.startswith("external"):
            log.warning("public batch comes from the same corpus as the private data (%s)",
                        corpus.public_source)
        public = load_public_batch(corpus.public_pool, cfg.public_size, cfg.public_seed, train)
    t0 = time.perf_counter()

    for seed in cfg.seeds:
        model = _model(cfg, train)
        rng = RngStream(seed)
        start = time.perf_counter()

        def emit(epoch, loss, acc, eps):
            records.append(MetricsRecord(run_id, seed, epoch, loss, acc, None, eps, "1", "",
                                         time.perf_counter() - start))

        if cfg.is_private:
            dcfg = dp_config(cfg, len(train))
            z_used = dcfg.z
            res = dp_train(model, train, test, dcfg, rng, method=cfg.optimizer, public=public,
                           on_epoch=lambda r: emit(r.epoch, r.train_loss, r.test_accuracy, r.epsilon))
            final = res.final_accuracy if res.history else evaluate(model, res.released_params(), test, public)
            eps_final = res.history[-1].epsilon if res.history else 0.0
            audit["steps"] += res.steps
            audit["audited"] += len(res.audits)
            audit["max_norm"] = max([audit["max_norm"]] + [a.max_norm for a in res.audits])
            if cfg.save_release:
                out.mkdir(parents=True, exist_ok=True)
                path = out / f"{run_id}-seed{seed}.release.zip"
                save_release(path, model, res.theta, eps_final, public)
                releases.append(str(path))
        else:
            sigma = cfg.sigma if cfg.optimizer == "noisy" else 0.0
            res = noisy_train(model, train, test, sigma, cfg.epochs, rng,
                              batch_size=cfg.batch_size, optimizer=cfg.update, lr=cfg.lr,
                              momentum=cfg.momentum, min_accuracy=cfg.min_accuracy)
            for rec in res.history:
                emit(rec.epoch, rec.train_loss, rec.test_accuracy, math.inf)
            final = res.final_accuracy if res.history else evaluate(model, res.eval_params, test)
        if not res.converged and records and records[-1].seed == seed:
            records[-1].converged, records[-1].reason = "0", res.reason or ""
        finals.append(float(final))
        converged.append(bool(res.converged))
        reasons.append(res.reason or "")
        losses.append(records[-1].train_loss if records and records[-1].seed == seed else math.nan)

    summary = RunSummary(run_id, cfg, records, finals, converged, reasons, eps_final, z_used,
                         releases=releases, steps=audit["steps"], audited_steps=audit["audited"],
                         max_clipped_norm=audit["max_norm"])
    records.append(MetricsRecord(
        run_id, "summary", cfg.epochs, float(np.mean(losses)), summary.mean_accuracy,
        summary.se_accuracy, eps_final, f"{sum(converged)}/{len(converged)}",
        ";".join(r for r in reasons if r), time.perf_counter() - t0))
    summary.csv_path, summary.json_path = write_metrics(summary, out)
    return summary


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf"
        return f"{v:.10g}"
    return str(v)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.chmod(tmp, 0o644)
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_metrics(summary: RunSummary, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in summary.records:
        w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])
    csv_path = out_dir / f"{summary.run_id}.csv"
    _atomic_write(csv_path, buf.getvalue())
    cfg = summary.config
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "run_id": summary.run_id,
        "model": f"{cfg.arch}:{cfg.norm}" + (":out" if cfg.norm_output else ""),
        "optimizer": cfg.optimizer,
        "sigma": cfg.sigma if cfg.optimizer == "noisy" else None,
        "epsilon_target": cfg.epsilon,
        "epsilon": None if math.isinf(summary.epsilon) else summary.epsilon,
        "z": summary.z,
        "seeds": list(cfg.seeds),
        "epochs": cfg.epochs,
        "final_accuracy": summary.final_accuracies,
        "mean_accuracy": summary.mean_accuracy,
        "se_accuracy": summary.se_accuracy,
        "median_accuracy": summary.median_accuracy,
        "converged": summary.converged,
        "reasons": summary.reasons,
        "releases": summary.releases,
        "clip_audit": {"steps": summary.steps, "audited": summary.audited_steps,
                       "max_norm": summary.max_clipped_norm},
        "config": cfg.to_ini(),
    }
    json_path = out_dir / f"{summary.run_id}.json"
    _atomic_write(json_path, json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def sweep(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> list[RunSummary]:
    """Run the base config once per value of ``cfg.sweep_param``.

    With ``jobs > 1`` runs go to a thread pool; each run owns its RNG streams
    and writes its own files, so results do not depend on scheduling.
    """
    if cfg.sweep_param is None:
        return [run_experiment(cfg, out_dir)]
    corpus = _corpus(cfg)
    current = getattr(cfg, cfg.sweep_param)
    cast = int if isinstance(current, int) and not isinstance(current, bool) else float
    subs = [replace(cfg, **{cfg.sweep_param: cast(v), "sweep_param": None, "sweep_values": ()})
            for v in cfg.sweep_values]
    for sub in subs:
        sub.validate()
    if jobs <= 1:
        return [run_experiment(sub, out_dir, corpus) for sub in subs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda sub: run_experiment(sub, out_dir, corpus), subs))


# ---------------------------------------------------------------------------
# variance demo


@dataclass
class VarianceTable:
    steps: list[int]
    dpsgd: list[float]
    sidpsgd: list[float]
    unit: float  # (eta C z / L)^2
    slope: float
    intercept: float
    r2: float

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.steps, self.dpsgd, self.sidpsgd))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "var_dpsgd", "var_sidpsgd", "unit"))
        for t, a, b in self.rows():
            w.writerow((t, _cell(a), _cell(b), _cell(self.unit)))
        return buf.getvalue()


def variance_demo(steps: int, trials: int, lr: float = 0.1, clip_norm: float = 1.0,
                  z: float = 1.0, lot_size: int = 256, seed: int = 0) -> VarianceTable:
    """Per-step Var(theta_t - theta_0) under zero gradients for both update rules.

    Each coordinate of a ``trials``-dimensional parameter vector is an
    independent trial, so one run gives the Monte-Carlo estimate directly.
    """
    cfg = DpTrainConfig(lr=lr, lot_size=lot_size, n=max(lot_size, 1), steps=steps, z=z,
                        clip_norm=clip_norm)
    theta0 = np.zeros(trials)
    zero = [np.zeros(trials)]
    table = {"dpsgd": [], "sidpsgd": []}
    for name, rule, stream in (("dpsgd", dpsgd_step, 0), ("sidpsgd", sidpsgd_step, 1)):
        rng = RngStream(seed, (7, stream))
        state = ParamState.initial(theta0)
        for _ in range(steps):
            state, _ = rule(state, zero, cfg, rng)
            table[name].append(float(np.var(state.theta - theta0)))
    t = np.arange(1, steps + 1, dtype=float)
    d = np.asarray(table["dpsgd"])
    if steps >= 2 and np.ptp(d) > 0:
        slope, intercept = np.polyfit(t, d, 1)
        resid = d - (slope * t + intercept)
        r2 = 1.0 - resid @ resid / ((d - d.mean()) @ (d - d.mean()))
    else:
        slope, intercept, r2 = (d[0] if steps else 0.0), 0.0, float("nan")
    unit = (lr * clip_norm * z / lot_size) ** 2
    return VarianceTable(list(range(1, steps + 1)), table["dpsgd"], table["sidpsgd"], unit,
                         float(slope), float(intercept), float(r2))


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    columns: list[str]
    rows: list[list[str]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        table = [self.columns] + self.rows
        widths = [max(len(r[i]) for r in table) for i in range(len(self.columns))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _sidecar_for(path: Path) -> dict:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise SchemaError(f"{path}: unexpected metrics columns {header}")
        path = path.with_suffix(".json")
    data = json.loads(path.read_text())
    if data.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {data.get('schema_version')} "
                          f"!= {SCHEMA_VERSION}")
    return data


def emit_report(paths: Sequence) -> Report:
    """Table of final accuracies, rows keyed by (model, optimizer), columns by eps or sigma."""
    if not paths:
        raise ValueError("no metrics files given")
    cells: dict[tuple[str, str], dict[str, str]] = {}
    keys: list[str] = []
    for p in paths:
        d = _sidecar_for(p)
        if d["optimizer"] == "noisy":
            key = f"sigma={d['sigma']:g}"
        elif d["optimizer"] == "sgd":
            key = "eps=inf"
        else:
            target = d.get("epsilon_target")
            key = f"eps={target:g}" if target is not None else f"z={d['z']:g}"
        if key not in keys:
            keys.append(key)
        n_conv = sum(d["converged"])
        if n_conv == 0:
            text = "no-convergence"
        else:
            text = f"{100 * d['mean_accuracy']:.2f} ± {100 * d['se_accuracy']:.2f}"
            if n_conv < len(d["converged"]):
                text += f" ({n_conv}/{len(d['converged'])} conv)"
        cells.setdefault((d["model"], d["optimizer"]), {})[key] = text
    rows = [[model, opt] + [row.get(k, "-") for k in keys]
            for (model, opt), row in cells.items()]
    return Report(["model", "optimizer"] + keys, rows)
