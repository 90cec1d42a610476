"""Experiment orchestration: pretrain, continual training, evaluation, drift analysis, reports.

Artifacts for an experiment live under its output directory::

    pretrain_cache/<key>.pt           pretrained backbones, shared by every run
    manifest/                         task split index lists
    seed_<s>/<label>/metrics.json     deterministic metrics for one run
    seed_<s>/<label>/timing.json      wall-clock timestamps (kept apart from metrics)
    seed_<s>/<label>/log.jsonl        per-step loss terms
    seed_<s>/<label>/checkpoint.pt    model, gates, buffer, config and seed
    seed_<s>/<label>/DONE | FAILED    completion or failure marker
    report/                           results table, aggregate and per-seed JSON, drift plot
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
import traceback
from pathlib import Path

import numpy as np
import torch

from .analysis import drift_report, emit_report
from .backbone import (
    SiblingPair,
    build_backbone,
    clone_frozen,
    load_checkpoint,
    pretrain_supervised,
    save_checkpoint,
)
from .benchmark import build_split_benchmark, dataset_info, load_pretrain_dataset
from .trainer import run_continual

log = logging.getLogger(__name__)

DONE = "DONE"
FAILED = "FAILED"
FF_CONVENTION = "max over t in {i..T-2} (untrained-task accuracies excluded)"


class Workspace:
    """Lazily loaded datasets and pretrained backbones for one experiment."""

    def __init__(self, cfg, output=None):
        self.cfg = cfg
        self.out = Path(output or cfg.output)
        self._stream = None
        self._pretrain = None

    # data -----------------------------------------------------------------
    @property
    def stream(self):
        if self._stream is None:
            b = self.cfg.benchmark
            self._stream = build_split_benchmark(
                b["dataset"], b["num_tasks"], 0, resolution=b["resolution"],
                data_root=self.cfg.resolved_data_root(), shuffle_classes=b["shuffle_classes"],
                augment=b["augment"], validation=b["validation"])
            self._stream.pretrain = self.pretrain
        return self._stream

    @property
    def pretrain(self):
        if self._pretrain is None:
            self._pretrain = load_pretrain_dataset(
                self.cfg.pretrain["dataset"], self.cfg.benchmark["resolution"],
                data_root=self.cfg.resolved_data_root())
        return self._pretrain

    # models ---------------------------------------------------------------
    def _build(self, num_classes):
        m = self.cfg.model
        kwargs = {k: (tuple(v) if k == "widths" else v) for k, v in m.items() if k != "arch"}
        info = dataset_info(self.cfg.benchmark["dataset"])
        return build_backbone(m["arch"], num_classes, info.channels,
                              self.cfg.benchmark["resolution"], **kwargs)

    def pretrain_key(self, eps_pretr, seed):
        p = self.cfg.pretrain
        key = {"dataset": p["dataset"], "arch": self.cfg.model, "epochs": eps_pretr, "seed": seed,
               "lr": p["lr"], "bs": p["bs"], "momentum": p["momentum"], "wd": p["wd"],
               "augment": p["augment"], "resolution": self.cfg.benchmark["resolution"]}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def pretrained_backbone(self, eps_pretr, seed):
        """Backbone with the pretraining head, trained (or loaded from the cache)."""
        cache = self.out / "pretrain_cache" / f"{self.pretrain_key(eps_pretr, seed)}.pt"
        if cache.exists():
            model, _ = load_checkpoint(cache)
            return model
        torch.manual_seed(seed)
        model = self._build(self.pretrain.num_classes)
        p = self.cfg.pretrain
        # same augmentation policy as the continual stream
        augment = self.stream.augment if p["augment"] else None
        state = pretrain_supervised(model, self.pretrain.train, eps_pretr, lr=p["lr"],
                                    batch_size=p["bs"], momentum=p["momentum"],
                                    weight_decay=p["wd"], augment=augment, seed=seed)
        model.load_state_dict(state)
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cache, model, self.cfg.model["arch"], p["dataset"],
                        extra={"epochs": eps_pretr, "seed": seed})
        return model

    def make_pair(self, run, seed):
        """Student/sibling pair for ``run``: pretrained weights or a seeded random init."""
        if run.init == "random":
            torch.manual_seed(seed)
            base = self._build(self.pretrain.num_classes)
        else:
            base = self.pretrained_backbone(run.eps_pretr, seed)
        sibling = clone_frozen(base)
        student = copy.deepcopy(base)
        torch.manual_seed(seed)
        student.replace_classifier(self.stream.num_classes)
        return SiblingPair(student, sibling)

    # paths ----------------------------------------------------------------
    def run_dir(self, seed, label):
        return self.out / f"seed_{seed}" / label


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def is_complete(run_dir, fingerprint):
    marker = Path(run_dir) / DONE
    return marker.exists() and marker.read_text().strip() == fingerprint


def pretrain_stage(cfg, seeds=None, output=None):
    """Fill the pretraining cache for every (epochs, seed) the experiment needs."""
    ws = Workspace(cfg, output)
    done = []
    for seed in seeds or cfg.seeds:
        for eps in sorted({r.eps_pretr for r in cfg.runs if r.init == "pretrained"}):
            ws.pretrained_backbone(eps, seed)
            done.append((eps, seed))
    return done


def train_stage(cfg, seeds=None, output=None, resume=False, labels=None):
    """Train and evaluate every run for every seed; returns the metric records written."""
    ws = Workspace(cfg, output)
    ws.out.mkdir(parents=True, exist_ok=True)
    ws.stream.write_manifest(ws.out / "manifest")
    drift_labels = set(cfg.analysis.get("drift") or [])
    records = []
    for seed in seeds or cfg.seeds:
        for run in cfg.runs:
            if labels is not None and run.label not in labels:
                continue
            rdir = ws.run_dir(seed, run.label)
            fp = run.fingerprint()
            if resume and is_complete(rdir, fp):
                log.info("skipping completed run %s seed %d", run.label, seed)
                records.append(json.loads((rdir / "metrics.json").read_text()))
                continue
            records.append(_train_one(ws, run, seed, rdir, fp, run.label in drift_labels))
    return records


def _train_one(ws, run, seed, rdir, fingerprint, keep_snapshots):
    rdir.mkdir(parents=True, exist_ok=True)
    for marker in (DONE, FAILED):
        (rdir / marker).unlink(missing_ok=True)
    started = time.time()
    try:
        pair = ws.make_pair(run, seed)
        init_state = copy.deepcopy(pair.student.state_dict())
        config = run.trainer_config(seed)
        result = run_continual(ws.stream, pair, config, pretrain=ws.pretrain,
                               log_path=rdir / "log.jsonl", keep_snapshots=keep_snapshots)
        metrics = {
            "experiment": ws.cfg.name, "label": run.label, "method": run.method,
            "buffer": run.buffer if run.buffer else None, "seed": seed, "init": run.init,
            "fingerprint": fingerprint, "ff_convention": FF_CONVENTION,
            "sibling_unchanged": result.sibling_checksum_before == result.sibling_checksum_after,
            **result.metrics(),
        }
        _dump(rdir / "metrics.json", metrics)
        learner = result.learner
        torch.save({
            "model": result.model.state_dict(),
            "gates": learner.gates.state_dict() if hasattr(learner, "gates") else None,
            "buffer": learner.buffer.state_dict() if learner.buffer is not None else None,
            "config": _config_dict(config), "seed": seed, "label": run.label,
        }, rdir / "checkpoint.pt")
        if keep_snapshots:
            torch.save([init_state] + result.snapshots, rdir / "snapshots.pt")
        _dump(rdir / "timing.json", {"started": started, "finished": time.time(),
                                     "seconds": time.time() - started})
        (rdir / DONE).write_text(fingerprint + "\n")
        return metrics
    except Exception:
        (rdir / FAILED).write_text(traceback.format_exc())
        raise


def _config_dict(config):
    out = {}
    for k, v in vars(config).items():
        out[k] = dict(vars(v)) if hasattr(v, "__dataclass_fields__") else v
    return out


def probe_set(pretrain, size, test_size, seed):
    """Deterministic pretraining probe ``(train_x, train_y, test_x, test_y)``."""
    rng = np.random.default_rng(seed)
    train = pretrain.train
    test = pretrain.test if pretrain.test is not None else pretrain.train
    tr_idx = np.sort(rng.permutation(len(train))[:size])
    te_idx = np.sort(rng.permutation(len(test))[:test_size])
    trx, tr_y = train.batch(tr_idx)
    tex, te_y = test.batch(te_idx)
    return trx, tr_y, tex, te_y


def analyze_stage(cfg, seeds=None, output=None):
    """Drift rows for every run listed under ``analysis.drift``; keyed ``label/seed<s>``."""
    ws = Workspace(cfg, output)
    a = cfg.analysis
    drift = {}
    for seed in seeds or cfg.seeds:
        probe = probe_set(ws.pretrain, a["probe_size"], a["probe_test_size"], seed)
        for label in a.get("drift") or []:
            rdir = ws.run_dir(seed, label)
            snaps = torch.load(rdir / "snapshots.pt", weights_only=False)
            models = []
            for state in snaps:
                m = ws._build(ws.stream.num_classes)
                m.load_state_dict(state)
                models.append(m)
            names = ["init"] + [f"task{t}" for t in range(len(models) - 1)]
            rows = drift_report(list(zip(names, models)), models[0], probe, k=a["k"])
            _dump(rdir / "drift.json", rows)
            drift[f"{label}/seed{seed}"] = rows
    return drift


def collect_records(out_dir):
    """Flatten every completed run's metrics into report records (one per protocol)."""
    records = []
    for path in sorted(Path(out_dir).glob("seed_*/*/metrics.json")):
        if not (path.parent / DONE).exists():
            continue
        m = json.loads(path.read_text())
        row = m["label"] if not m["label"].startswith(f"{m['method']}_b") else m["method"]
        for protocol in ("class_il", "task_il"):
            records.append({"method": row, "protocol": protocol, "buffer": m["buffer"],
                            "seed": m["seed"], "faa": m[protocol]["faa"], "ff": m[protocol]["ff"]})
    return records


def report_stage(out_dir, drift=None):
    out_dir = Path(out_dir)
    records = collect_records(out_dir)
    if not records:
        raise FileNotFoundError(f"no completed runs under {out_dir}")
    if drift is None:
        drift = {}
        for path in sorted(out_dir.glob("seed_*/*/drift.json")):
            seed = path.parent.parent.name.removeprefix("seed_")
            drift[f"{path.parent.name}/seed{seed}"] = json.loads(path.read_text())
    return emit_report(records, out_dir / "report", drift or None)


def run_experiment(cfg, seeds=None, output=None, resume=False):
    """Full pipeline; returns the report directory."""
    out = Path(output or cfg.output)
    pretrain_stage(cfg, seeds, out)
    train_stage(cfg, seeds, out, resume=resume)
    drift = analyze_stage(cfg, seeds, out) if cfg.analysis.get("drift") else None
    return report_stage(out, drift)
