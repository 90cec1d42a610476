"""Experiment configuration files: parsing, validation and resolution.

A config is a YAML mapping.  Hyperparameter keys inside ``shared`` and each
``methods`` entry use the short names of published hyperparameter tables
(``lr``, ``alpha``, ``beta``, ``lambda``, ``lambda_fp``, ``lambda_fp_repl``,
``eps``, ``bs``, ``eps_pretr``) so such tables transcribe directly::

    name: split_cifar10_class_il
    protocol: class_il
    seeds: [0]
    benchmark: {dataset: cifar10, num_tasks: 5, resolution: 32}
    pretrain: {dataset: cifar100}
    model: {arch: resnet18}
    shared: {eps: 50, bs: 32, eps_pretr: 200}
    methods:
      - {method: twf, buffer: 500, lr: 0.03, alpha: 0.3, beta: 0.9, lambda: 0.1,
         lambda_fp: 0.005, lambda_fp_repl: 0.1}

``lambda`` is the diversity weight for ``twf`` and the EwC strength for
``oewc`` and ``derpp_ewc``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import ARCHITECTURES
from .benchmark import DATA_ROOT_ENV, DATASETS
from .errors import ConfigError
from .losses import LossWeights
from .trainer import BUFFER_METHODS, METHODS, TrainerConfig

PROTOCOLS = ("class_il", "task_il")

# key -> (type check, description); ranges are checked separately
_TOP_KEYS = {"name", "protocol", "seeds", "output", "data_root", "benchmark", "pretrain",
             "model", "shared", "methods", "analysis"}
_BENCHMARK_KEYS = {"dataset", "num_tasks", "resolution", "shuffle_classes", "augment", "validation"}
_PRETRAIN_KEYS = {"dataset", "lr", "bs", "augment", "momentum", "wd"}
_MODEL_KEYS = {"arch", "nf", "widths"}
_ANALYSIS_KEYS = {"drift", "probe_size", "k", "probe_test_size"}
_HYPER_KEYS = {
    "eps", "bs", "minibatch", "eps_pretr", "lr", "lr_decay", "lr_decay_steps", "momentum", "wd",
    "alpha", "beta", "lambda", "lambda_fp", "lambda_fp_repl", "aux_temperature", "temperature",
    "gamma", "tau", "margin", "refresh_margins", "pretrain_rehearsal_fraction",
    "fisher_batches", "fisher_bs", "aux_masks",
}
_METHOD_KEYS = _HYPER_KEYS | {"method", "buffer", "label", "init"}
_NON_NEGATIVE = ("alpha", "beta", "lambda", "lambda_fp", "lambda_fp_repl", "wd", "momentum")
_POSITIVE_INT = ("eps", "bs", "minibatch", "fisher_batches", "fisher_bs")


@dataclass
class RunSpec:
    """One training run of an experiment: a method at one buffer size."""

    label: str
    method: str
    buffer: int
    init: str                    # "pretrained" or "random"
    eps_pretr: int
    trainer: dict                # TrainerConfig keyword arguments, seed excluded

    def trainer_config(self, seed):
        return TrainerConfig(seed=seed, **copy.deepcopy(self.trainer))

    def fingerprint(self):
        return hashlib.sha256(json.dumps(
            {"label": self.label, "method": self.method, "buffer": self.buffer, "init": self.init,
             "eps_pretr": self.eps_pretr, "trainer": _jsonable(self.trainer)},
            sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    name: str
    protocol: str
    seeds: list
    output: str
    data_root: str | None
    benchmark: dict
    pretrain: dict
    model: dict
    runs: list
    analysis: dict = field(default_factory=dict)
    source_path: str | None = None

    def run(self, label):
        for r in self.runs:
            if r.label == label:
                return r
        raise KeyError(label)

    def resolved_data_root(self):
        return os.environ.get(DATA_ROOT_ENV) or self.data_root

    def plan(self):
        """Human-readable description of what ``run`` would execute."""
        lines = [f"experiment {self.name} ({self.protocol}) -> {self.output}",
                 f"  benchmark {self.benchmark['dataset']} x{self.benchmark['num_tasks']} tasks "
                 f"@{self.benchmark['resolution']}px; pretrain {self.pretrain['dataset']}; "
                 f"model {self.model['arch']}",
                 f"  seeds {self.seeds}"]
        for r in self.runs:
            t = r.trainer
            lines.append(f"  run {r.label}: method={r.method} buffer={r.buffer} init={r.init} "
                         f"eps={t['epochs_per_task']} bs={t['batch_size']} lr={t['lr']}")
        if self.analysis.get("drift"):
            lines.append(f"  drift analysis on {self.analysis['drift']}")
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, LossWeights):
        return dict(vars(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# loading

def load_raw(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def validate_config(path):
    """Diagnostics for the config at ``path``; an empty list means it is runnable.

    Every diagnostic starts with a dotted locator such as
    ``methods[2].pretrain_rehearsal_fraction``.
    """
    try:
        raw = load_raw(path)
    except (OSError, yaml.YAMLError, ConfigError) as exc:
        return [f"<file>: cannot read config: {exc}"]
    return validate_raw(raw)


def validate_raw(raw):
    diags = []

    def bad(loc, msg):
        diags.append(f"{loc}: {msg}")

    _unknown(raw, _TOP_KEYS, "", bad)
    for key in ("name", "benchmark", "pretrain", "model", "methods"):
        if key not in raw:
            bad(key, "missing required key")
    if raw.get("protocol", "class_il") not in PROTOCOLS:
        bad("protocol", f"{raw.get('protocol')!r} must be one of {', '.join(PROTOCOLS)}")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        bad("seeds", "must be a non-empty list of non-negative integers")

    bench = raw.get("benchmark") or {}
    if not isinstance(bench, dict):
        bad("benchmark", "must be a mapping")
        bench = {}
    _unknown(bench, _BENCHMARK_KEYS, "benchmark.", bad)
    ds = bench.get("dataset")
    if "benchmark" in raw and ds not in DATASETS:
        bad("benchmark.dataset", f"unknown dataset {ds!r}; expected one of {', '.join(sorted(DATASETS))}")
    nt = bench.get("num_tasks")
    if "benchmark" in raw and (not isinstance(nt, int) or nt <= 0):
        bad("benchmark.num_tasks", "must be a positive integer")
    elif ds in DATASETS and isinstance(nt, int) and DATASETS[ds].num_classes % nt:
        bad("benchmark.num_tasks", f"{DATASETS[ds].num_classes} classes do not split into {nt} tasks")
    val = bench.get("validation")
    if val is not None and not (isinstance(val, float) and 0.0 < val < 1.0):
        bad("benchmark.validation", f"{val!r} must be a fraction in (0,1)")
    res = bench.get("resolution", 32)
    if not isinstance(res, int) or res <= 0:
        bad("benchmark.resolution", "must be a positive integer")

    pre = raw.get("pretrain") or {}
    if not isinstance(pre, dict):
        bad("pretrain", "must be a mapping")
        pre = {}
    _unknown(pre, _PRETRAIN_KEYS, "pretrain.", bad)
    if "pretrain" in raw and pre.get("dataset") not in DATASETS:
        bad("pretrain.dataset", f"unknown dataset {pre.get('dataset')!r}; expected one of "
                                f"{', '.join(sorted(DATASETS))}")
    elif ds in DATASETS and DATASETS[pre["dataset"]].channels != DATASETS[ds].channels:
        bad("pretrain.dataset", "channel count differs from the benchmark dataset")
    for key in ("lr", "bs"):
        if key in pre and not _positive(pre[key]):
            bad(f"pretrain.{key}", "must be positive")

    model = raw.get("model") or {}
    if not isinstance(model, dict):
        bad("model", "must be a mapping")
        model = {}
    _unknown(model, _MODEL_KEYS, "model.", bad)
    if "model" in raw and model.get("arch") not in ARCHITECTURES:
        bad("model.arch", f"unknown architecture {model.get('arch')!r}; expected one of "
                          f"{', '.join(sorted(ARCHITECTURES))}")

    shared = raw.get("shared") or {}
    if not isinstance(shared, dict):
        bad("shared", "must be a mapping")
        shared = {}
    _unknown(shared, _HYPER_KEYS, "shared.", bad)
    _check_hyper(shared, "shared.", bad)

    methods = raw.get("methods")
    labels = []
    if "methods" in raw:
        if not isinstance(methods, list) or not methods:
            bad("methods", "must be a non-empty list")
            methods = []
        for i, entry in enumerate(methods):
            loc = f"methods[{i}]."
            if not isinstance(entry, dict):
                bad(f"methods[{i}]", "must be a mapping")
                continue
            _unknown(entry, _METHOD_KEYS, loc, bad)
            merged = {**shared, **entry}
            name = merged.get("method")
            if name not in METHODS:
                bad(loc + "method", f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")
            _check_hyper(entry, loc, bad)
            buf = merged.get("buffer", 0)
            if not isinstance(buf, int) or buf < 0:
                bad(loc + "buffer", "must be a non-negative integer")
            elif name in ("er", "derpp", "derpp_ewc") and buf == 0:
                bad(loc + "buffer", f"{name} needs a positive buffer")
            elif name in METHODS and name not in BUFFER_METHODS and buf:
                bad(loc + "buffer", f"{name} does not use a buffer")
            frac = merged.get("pretrain_rehearsal_fraction", 0.0)
            if isinstance(frac, (int, float)) and 0 < frac <= 1 and name not in ("er", "derpp", "derpp_ewc"):
                bad(loc + "pretrain_rehearsal_fraction", "only er, derpp and derpp_ewc rehearse pretraining data")
            if merged.get("init", "pretrained") not in ("pretrained", "random"):
                bad(loc + "init", "must be 'pretrained' or 'random'")
            if "eps" not in merged:
                bad(loc + "eps", "missing (set it here or under shared)")
            if "lr" not in merged:
                bad(loc + "lr", "missing (set it here or under shared)")
            labels.append(entry.get("label") or _default_label(name, buf))
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        if dupes:
            bad("methods", f"duplicate run labels {dupes}; add distinct 'label' keys")

    analysis = raw.get("analysis") or {}
    if not isinstance(analysis, dict):
        bad("analysis", "must be a mapping")
        analysis = {}
    _unknown(analysis, _ANALYSIS_KEYS, "analysis.", bad)
    for label in analysis.get("drift", []) or []:
        if label not in labels:
            bad("analysis.drift", f"run label {label!r} is not defined under methods")
    for key in ("probe_size", "k", "probe_test_size"):
        if key in analysis and (not isinstance(analysis[key], int) or analysis[key] <= 0):
            bad(f"analysis.{key}", "must be a positive integer")
    return diags


def _unknown(block, allowed, prefix, bad):
    for key in block:
        if key not in allowed:
            bad(prefix + str(key), f"unknown key; expected one of {', '.join(sorted(allowed))}")


def _positive(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0


def _check_hyper(block, prefix, bad):
    for key in _NON_NEGATIVE:
        if key in block and not (isinstance(block[key], (int, float)) and block[key] >= 0):
            bad(prefix + key, f"{block[key]!r} must be a non-negative number")
    for key in _POSITIVE_INT:
        if key in block and not (isinstance(block[key], int) and block[key] > 0):
            bad(prefix + key, f"{block[key]!r} must be a positive integer")
    if "eps_pretr" in block and not (isinstance(block["eps_pretr"], int) and block["eps_pretr"] >= 0):
        bad(prefix + "eps_pretr", "must be a non-negative integer")
    for key in ("lr", "temperature", "aux_temperature", "tau"):
        if key in block and not _positive(block[key]):
            bad(prefix + key, f"{block[key]!r} must be positive")
    if "pretrain_rehearsal_fraction" in block:
        frac = block["pretrain_rehearsal_fraction"]
        if not isinstance(frac, (int, float)) or not 0.0 <= frac <= 1.0:
            bad(prefix + "pretrain_rehearsal_fraction", f"{frac!r} out of range [0,1]")
    if "gamma" in block and not (isinstance(block["gamma"], (int, float)) and 0 <= block["gamma"] <= 1):
        bad(prefix + "gamma", f"{block['gamma']!r} out of range [0,1]")
    if "lr_decay" in block:
        d = block["lr_decay"]
        if not (d in ("no", None, False) or (isinstance(d, (int, float)) and 0 < d <= 1)):
            bad(prefix + "lr_decay", f"{d!r} must be 'no' or a factor in (0,1]")
    if "lr_decay_steps" in block:
        steps = block["lr_decay_steps"]
        if not isinstance(steps, list) or not all(isinstance(s, int) and s > 0 for s in steps):
            bad(prefix + "lr_decay_steps", "must be a list of positive epoch indices")
    if "aux_masks" in block and block["aux_masks"] not in ("soft", "hard"):
        bad(prefix + "aux_masks", "must be 'soft' or 'hard'")
    if "margin" in block and block["margin"] not in ("negative_mean", "zero"):
        bad(prefix + "margin", "must be 'negative_mean' or 'zero'")


def _default_label(method, buffer):
    return f"{method}_b{buffer}" if buffer else str(method)


# ---------------------------------------------------------------------------
# resolution

def load_config(path, output=None):
    """Parse and validate ``path``; raises ConfigError listing every diagnostic."""
    diags = validate_config(path)
    if diags:
        raise ConfigError("invalid config:\n  " + "\n  ".join(diags))
    cfg = config_from_raw(load_raw(path), output)
    cfg.source_path = str(path)
    return cfg


def config_from_raw(raw, output=None):
    diags = validate_raw(raw)
    if diags:
        raise ConfigError("invalid config:\n  " + "\n  ".join(diags))
    shared = raw.get("shared") or {}
    runs = []
    for entry in raw["methods"]:
        merged = {**shared, **entry}
        runs.append(_run_spec(merged, entry.get("label")))
    bench = {"resolution": 32, "shuffle_classes": False, "augment": True, "validation": None,
             **raw["benchmark"]}
    pre = {"lr": 0.1, "bs": 64, "augment": True, "momentum": 0.9, "wd": 5e-4, **raw["pretrain"]}
    analysis = {"drift": [], "probe_size": 2000, "probe_test_size": 1000, "k": 10,
                **(raw.get("analysis") or {})}
    return ExperimentConfig(
        name=raw["name"], protocol=raw.get("protocol", "class_il"),
        seeds=list(raw.get("seeds", [0])),
        output=str(output or raw.get("output") or Path("runs") / raw["name"]),
        data_root=raw.get("data_root"), benchmark=bench, pretrain=pre, model=dict(raw["model"]),
        runs=runs, analysis=analysis)


def _run_spec(m, label):
    method = m["method"]
    buffer = m.get("buffer", 0)
    lam = m.get("lambda", 0.0)
    weights = {
        "alpha": m.get("alpha", 0.0), "beta": m.get("beta", 0.0),
        "lambda_aux": lam if method == "twf" else 0.0,
        "lambda_fp": m.get("lambda_fp", 0.0), "lambda_fp_replay": m.get("lambda_fp_repl", 0.0),
        "temperature_aux": m.get("aux_temperature", 1.0),
        "ewc_lambda": lam if method in ("oewc", "derpp_ewc") else 0.0,
    }
    decay = m.get("lr_decay", "no")
    trainer = {
        "method": method,
        "epochs_per_task": m["eps"],
        "batch_size": m.get("bs", 32),
        "replay_batch_size": m.get("minibatch", m.get("bs", 32)),
        "lr": m["lr"],
        "momentum": m.get("momentum", 0.0),
        "weight_decay": m.get("wd", 0.0),
        "lr_decay": 1.0 if decay in ("no", None, False) else float(decay),
        "lr_decay_steps": list(m.get("lr_decay_steps", [])),
        "weights": LossWeights(**weights),
        "buffer_size": buffer,
        "pretrain_rehearsal_fraction": float(m.get("pretrain_rehearsal_fraction", 0.0)),
        "gumbel_temperature": m.get("temperature", 1.0),
        "margin_mode": m.get("margin", "negative_mean"),
        "aux_masks": m.get("aux_masks", "soft"),
        "refresh_margins": bool(m.get("refresh_margins", False)),
        "oewc_gamma": m.get("gamma", 1.0),
        "lwf_alpha": m.get("alpha", 0.0) if method == "lwf" else 0.0,
        "lwf_tau": m.get("tau", 2.0),
        "fisher_batches": m.get("fisher_batches", 10),
        "fisher_batch_size": m.get("fisher_bs", 32),
    }
    # validate eagerly so bad combinations surface at load time
    TrainerConfig(seed=0, **copy.deepcopy(trainer))
    return RunSpec(label or _default_label(method, buffer), method, buffer,
                   m.get("init", "pretrained"), int(m.get("eps_pretr", 0)), trainer)


# ---------------------------------------------------------------------------
# shipped configs

def shipped_config_dir():
    return Path(__file__).resolve().parent / "configs"


def shipped_configs():
    return sorted(shipped_config_dir().glob("*.yaml"))


def shipped_config(name):
    path = shipped_config_dir() / (name if name.endswith(".yaml") else name + ".yaml")
    if not path.exists():
        raise ConfigError(f"no shipped config {name!r}; available: "
                          f"{', '.join(p.stem for p in shipped_configs())}")
    return path
