"""Experiment runner: config files, seeded runs, metric logs, curves and sweeps."""
import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import datanoise, models
from .augment import DEFAULT_TRANSFORM_SET, TRANSFORMS, AugmentationPolicy
from .cotrain import ALGORITHMS, TrainConfig, Trainer
from .errors import ComatchError, ConfigurationError, DataIOError, NumericalError
from .plots import render_figure

OUTPUT_ROOT_ENV = "COMATCH_OUTPUT_ROOT"
METRICS_VERSION = 1
METRICS_COLUMNS = ("epoch", "test_acc", "test_acc_f", "test_acc_g", "label_precision",
                   "mean_total_loss", "mean_selected_loss", "rate", "lr", "wall_ms")


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = ""
    # data
    dataset: str = "synth"
    data_dir: str = ""
    synth_classes: int = 4
    synth_train_per_class: int = 1000
    synth_test_per_class: int = 250
    synth_side: int = 16
    synth_channels: int = 3
    synth_noise_std: float = 0.25
    synth_seed: int = 1
    # label noise
    noise_model: str = "symmetric"
    noise_rate: float = 0.5
    noise_seed: int = 0
    # training
    algorithm: str = "co_matching"
    lam: float = 0.65
    tau: float = -1.0
    tau_scale: float = 1.0
    t_k: int = 10
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.001
    lr_decay_start: int = 24
    pseudo_label: str = "hard"
    seed: int = 0
    model: str = "mlp"
    mlp_hidden: str = "256"
    # augmentation; "auto" gives weak/strong for co_matching and none otherwise
    aug_f: str = "auto"
    aug_g: str = "auto"
    aug_pad: int = -1
    aug_m: int = 2
    aug_transforms: str = ",".join(DEFAULT_TRANSFORM_SET)
    # output
    eval_every: int = 1
    checkpoint: bool = True
    log_wall_time: bool = False

    @property
    def effective_tau(self):
        return self.tau if self.tau >= 0 else self.tau_scale * (self.noise_rate if self.noise_model != "none" else 0.0)

    def train_config(self):
        return TrainConfig(
            algorithm=self.algorithm, lam=self.lam, tau=self.effective_tau, t_k=self.t_k, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, lr_decay_start=self.lr_decay_start,
            pseudo_label_mode=self.pseudo_label, seed=self.seed,
        )

    def policies(self, image_side):
        pad = self.aug_pad if self.aug_pad >= 0 else max(1, image_side // 8)
        two = self.algorithm == "co_matching"
        kind_f = self.aug_f if self.aug_f != "auto" else ("weak" if two else "none")
        kind_g = self.aug_g if self.aug_g != "auto" else ("strong" if two else kind_f)
        transforms = tuple(t.strip() for t in self.aug_transforms.split(",") if t.strip())
        return {
            "f": AugmentationPolicy(kind_f, transforms, self.aug_m, pad=pad),
            "g": AugmentationPolicy(kind_g, transforms, self.aug_m, pad=pad),
        }

    def hidden_dims(self):
        try:
            return [int(h) for h in self.mlp_hidden.split(",") if h.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"mlp_hidden must be a comma separated list of ints: {exc}") from exc

    def validate(self):
        if not self.run_id or any(c in self.run_id for c in "/\\"):
            raise ConfigurationError("run_id must be a non-empty name without path separators")
        if self.dataset not in ("synth", "cifar10"):
            raise ConfigurationError(f"dataset must be synth or cifar10, got {self.dataset!r}")
        if self.dataset == "cifar10" and not self.data_dir:
            raise ConfigurationError("dataset cifar10 needs data_dir")
        if self.noise_model not in ("none", "symmetric", "asymmetric"):
            raise ConfigurationError(f"noise_model must be none, symmetric or asymmetric, got {self.noise_model!r}")
        if not 0 <= self.noise_rate < 1:
            raise ConfigurationError("noise_rate must lie in [0, 1)")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {', '.join(ALGORITHMS)}")
        if self.model not in ("mlp", "cnn7"):
            raise ConfigurationError("model must be mlp or cnn7")
        if self.model == "cnn7" and (self.dataset == "synth" and (self.synth_side != 32 or self.synth_channels != 3)):
            raise ConfigurationError("cnn7 needs 3x32x32 inputs")
        if self.tau < 0 and not 0 < self.tau_scale <= 1:
            raise ConfigurationError("tau_scale must lie in (0, 1]")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be at least 1")
        for key in ("aug_f", "aug_g"):
            if getattr(self, key) not in ("auto", "none", "weak", "strong"):
                raise ConfigurationError(f"{key} must be auto, none, weak or strong")
        for name in self.aug_transforms.split(","):
            if name.strip() and name.strip() not in TRANSFORMS:
                raise ConfigurationError(f"unknown transform {name.strip()!r} in aug_transforms")
        if self.dataset == "synth" and (self.synth_classes < 2 or self.synth_train_per_class < 1):
            raise ConfigurationError("synthetic data needs at least 2 classes and 1 sample per class")
        self.hidden_dims()
        try:
            self.train_config().validate()
            self.policies(32)
        except ComatchError as exc:
            raise ConfigurationError(str(exc)) from exc
        return self


# Config-file keys differ from attribute names only for lambda (a python keyword).
_KEY_ALIASES = {"lambda": "lam"}
_ATTR_KEYS = {v: k for k, v in _KEY_ALIASES.items()}
_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _convert(name, raw):
    kind = _FIELDS[name].type
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{_ATTR_KEYS.get(name, name)}: expected {kind}, got {raw!r}") from exc
    return raw


def parse_config(text):
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _KEY_ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[name] = _convert(name, raw)
    return ExperimentConfig(**values)


def format_config(config):
    lines = [f"# comatch experiment config, metrics schema v{METRICS_VERSION}"]
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{_ATTR_KEYS.get(f.name, f.name)} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def set_value(config, key, value):
    """Copy of ``config`` with one key (config-file spelling) replaced."""
    name = _KEY_ALIASES.get(key, key)
    if name not in _FIELDS:
        raise ConfigurationError(f"unknown parameter {key!r}")
    if isinstance(value, float) and value.is_integer() and _FIELDS[name].type in ("int", int):
        value = int(value)
    return replace(config, **{name: _convert(name, str(value))})


# ------------------------------------------------------------------ data


def load_data(config):
    """(noisy train set, clean test set, transition matrix or None)."""
    if config.dataset == "synth":
        train = datanoise.synth_blobs(config.synth_classes, config.synth_train_per_class, config.synth_side,
                                      config.synth_seed, config.synth_channels, config.synth_noise_std)
        test = datanoise.synth_blobs(config.synth_classes, config.synth_test_per_class, config.synth_side,
                                     config.synth_seed + 1_000_003, config.synth_channels, config.synth_noise_std,
                                     split="test")
    else:
        train, test = datanoise.load_cifar10(config.data_dir)
    q = None
    if config.noise_model != "none":
        q = datanoise.build_transition_matrix(config.noise_model, config.noise_rate, train.class_count)
        train = datanoise.corrupt_labels(train, q, config.noise_seed)
    return train, test, q


def network_builder(config, train_set):
    shape = train_set.images.shape[1:]
    classes = train_set.class_count
    seeds = {"f": 2 * config.seed, "g": 2 * config.seed + 1}

    def build(key):
        seed = [seeds[key], 0xC0FFEE]
        if config.model == "cnn7":
            return models.build_cnn7(classes, seed)
        return models.build_mlp(int(np.prod(shape)), config.hidden_dims(), classes, seed, input_shape=shape)

    return build


# ---------------------------------------------------------------- metrics


def _cell(v, digits=6):
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return f"{v:.{digits}f}"


def format_row(m):
    return [str(m["epoch"]), _cell(m["test_acc"]), _cell(m["test_acc_f"]), _cell(m["test_acc_g"]),
            _cell(m["label_precision"]), _cell(m["mean_total_loss"]), _cell(m["mean_selected_loss"]),
            _cell(m["rate"]), f"{m['lr']:.8g}", "" if m.get("wall_ms") is None else str(int(m["wall_ms"]))]


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            r[k] = None if v == "" else (int(v) if k == "epoch" else float(v))
    return rows


def summarize(rows):
    accs = [r["test_acc"] for r in rows if r["test_acc"] is not None]
    precs = [r["label_precision"] for r in rows if r["label_precision"] is not None]
    if not accs:
        return {}
    return {
        "epochs": len(rows),
        "final_test_acc": accs[-1],
        "peak_test_acc": max(accs),
        "peak_epoch": rows[[r["test_acc"] for r in rows].index(max(accs))]["epoch"],
        "last10_mean_test_acc": float(np.mean(accs[-10:])),
        "final_label_precision": precs[-1] if precs else None,
    }


def curves_figure(rows, title=""):
    acc_series = [("test acc (mean)", "test_acc"), ("net f", "test_acc_f")]
    if any(r.get("test_acc_g") is not None for r in rows):
        acc_series.append(("net g", "test_acc_g"))
    return render_figure([
        {"rows": rows, "series": acc_series, "title": title, "y_label": "test accuracy", "y_range": (0.0, 1.0)},
        {"rows": rows, "series": [("label precision", "label_precision")], "y_label": "label precision",
         "y_range": (0.0, 1.0)},
    ])


# ------------------------------------------------------------------- runs


def output_root(config):
    if config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_experiment(config, progress=None):
    """Train, evaluate every ``eval_every`` epochs and write the run directory.

    Returns the run directory path. Artifacts: ``config.snapshot``,
    ``metrics.csv``, ``curves.svg``, ``summary.json``, ``status.txt`` and,
    if enabled, ``checkpoints/final.ckpt``. On a numerical failure the rows
    written so far stay in ``metrics.csv`` and ``status.txt`` records the
    failure before the error propagates.
    """
    config.validate()
    run_dir = output_root(config) / config.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(format_config(config))
    (run_dir / "status.txt").write_text("running\n")

    train, test, _ = load_data(config)
    trainer = Trainer(config.train_config(), train, test, network_builder(config, train),
                      config.policies(train.images.shape[-1]))
    timings = []
    rows = []
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        try:
            for epoch in range(config.epochs):
                t0 = time.perf_counter()
                evaluate = (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs
                m = trainer.run_epoch(epoch, evaluate=evaluate)
                wall = (time.perf_counter() - t0) * 1000.0
                timings.append(wall)
                m["wall_ms"] = wall if config.log_wall_time else None
                writer.writerow(format_row(m))
                fh.flush()
                rows.append(read_row(m))
                if progress:
                    progress(m)
        except NumericalError as exc:
            fh.flush()
            (run_dir / "status.txt").write_text(f"failed: {exc.category}: {exc} (after {len(rows)} epochs)\n")
            raise

    (run_dir / "curves.svg").write_text(curves_figure(rows, config.run_id))
    summary = summarize(rows)
    summary["run_id"] = config.run_id
    summary["algorithm"] = config.algorithm
    summary["lambda"] = config.lam
    summary["tau"] = config.effective_tau
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (run_dir / "timing.json").write_text(json.dumps({"epoch_wall_ms": [round(t, 3) for t in timings]}) + "\n")
    if config.checkpoint:
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        arrays = {}
        for key, net in trainer.state.networks.items():
            for name, arr in net.state_dict().items():
                arrays[f"{key}.{name}"] = arr
        models.save_checkpoint(run_dir / "checkpoints" / "final.ckpt", arrays)
    (run_dir / "status.txt").write_text("completed\n")
    return run_dir


def read_row(m):
    """Metrics dict as it reads back from the CSV (rounded like the file)."""
    out = {}
    for col, cell in zip(METRICS_COLUMNS, format_row(m)):
        out[col] = None if cell == "" else (int(cell) if col == "epoch" else float(cell))
    return out


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    parameter: str
    value: float
    run_id: str
    run_dir: str = ""
    status: str = "completed"
    summary: dict = None


def _sweep_member(args):
    config, param, value = args
    cfg = set_value(config, param, value)
    cfg = replace(cfg, run_id=f"{config.run_id}-{param}-{value:g}")
    try:
        run_dir = run_experiment(cfg)
    except ComatchError as exc:
        return SweepResult(param, value, cfg.run_id, status=f"failed: {exc.category}: {exc}")
    rows = read_metrics(run_dir / "metrics.csv")
    return SweepResult(param, value, cfg.run_id, str(run_dir), "completed", summarize(rows))


def sweep(config, parameter, values, jobs=1):
    """One run per value; writes ``<run_id>-sweep-<param>.csv`` and ``.svg`` under the output root.

    A failing member is reported and does not stop the others.
    """
    values = [float(v) for v in values]
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    set_value(config, parameter, values[0]).validate()
    tasks = [(config, parameter, v) for v in sorted(values)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_member, tasks))
    else:
        results = [_sweep_member(t) for t in tasks]

    root = output_root(config)
    root.mkdir(parents=True, exist_ok=True)
    base = f"{config.run_id}-sweep-{parameter}"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("run_id", parameter) + METRICS_COLUMNS)
    combined = {}
    series = []
    for res in results:
        if res.status != "completed":
            continue
        rows = read_metrics(Path(res.run_dir) / "metrics.csv")
        col = f"{parameter}={res.value:g}"
        series.append((col, col))
        for r in rows:
            writer.writerow([res.run_id, f"{res.value:g}"] + [_csv_cell(r[c]) for c in METRICS_COLUMNS])
            combined.setdefault(r["epoch"], {"epoch": r["epoch"]})[col] = r["test_acc"]
    (root / f"{base}.csv").write_text(buf.getvalue())
    report_rows = [combined[k] for k in sorted(combined)]
    if report_rows:
        fig = render_figure([{"rows": report_rows, "series": series, "title": base,
                              "y_label": "test accuracy", "y_range": (0.0, 1.0)}])
        (root / f"{base}.svg").write_text(fig)
    report = {"parameter": parameter, "runs": [res.__dict__ for res in results]}
    (root / f"{base}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return results


def _csv_cell(v):
    if v is None:
        return ""
    return str(v) if isinstance(v, int) else f"{v:.6f}"
