"""Accuracy metrics, representation drift and report emission."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class AccuracyMatrix:
    """Entries ``a[i][t]``: accuracy on task i after training task t, defined for t >= i."""

    def __init__(self, num_tasks):
        self.num_tasks = num_tasks
        self._a = np.full((num_tasks, num_tasks), np.nan)

    def set(self, task, after, value):
        if after < task:
            raise IndexError(f"a[{task}][{after}] lies in the undefined region (t < i)")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._a[task, after] = value

    def get(self, task, after):
        if after < task:
            raise IndexError(f"a[{task}][{after}] is undefined")
        return self._a[task, after]

    def record_column(self, after, accuracies):
        for i, acc in enumerate(accuracies[: after + 1]):
            self.set(i, after, acc)

    def column(self, after):
        return self._a[: after + 1, after].copy()

    def is_complete(self):
        return not np.isnan(self._a[np.triu_indices(self.num_tasks)]).any()

    def final_complete(self):
        return not np.isnan(self._a[:, -1]).any()

    def to_list(self):
        return [[None if np.isnan(v) or t < i else float(v) for t, v in enumerate(row)]
                for i, row in enumerate(self._a)]

    @classmethod
    def from_list(cls, rows):
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for t, v in enumerate(row):
                if v is not None and t >= i:
                    m.set(i, t, v)
        return m

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and np.array_equal(self._a, other._a, equal_nan=True)

    def __repr__(self):
        return f"AccuracyMatrix({self.to_list()})"


def faa(matrix):
    """Mean accuracy over all tasks after the final task."""
    if not matrix.final_complete():
        raise ValueError("accuracy matrix has no complete final column")
    return float(np.mean(matrix.column(matrix.num_tasks - 1)))


def ff(matrix):
    """Final forgetting; the max ranges over t in {i, ..., T-2}."""
    T = matrix.num_tasks
    if T < 2:
        raise ValueError("forgetting is undefined for a single task")
    if not matrix.is_complete():
        raise ValueError("accuracy matrix is incomplete")
    a = matrix._a
    drops = [np.max(a[i, i:T - 1] - a[i, T - 1]) for i in range(T - 1)]
    return float(np.sum(drops) / (T - 1))


def linear_cka(X, Y):
    """Linear CKA ``|X'Y|_F^2 / (|X'X|_F |Y'Y|_F)`` on column-centred features."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError("X and Y must be (n, d) matrices with the same n")
    if len(X) < 2:
        raise ValueError("CKA needs at least two examples")
    X = X - X.mean(0)
    Y = Y - Y.mean(0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        raise ValueError("CKA is undefined for zero-variance features")
    value = np.linalg.norm(X.T @ Y) ** 2 / (xx * yy)
    # guard the upper bound against last-ulp rounding
    return float(min(value, 1.0))


def knn_probe(train_feats, train_labels, test_feats, test_labels, k=10):
    """Accuracy of a Euclidean k-nearest-neighbour majority vote."""
    from sklearn.neighbors import KNeighborsClassifier

    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(train_feats):
        raise ValueError(f"k={k} exceeds the {len(train_feats)} training points")
    clf = KNeighborsClassifier(n_neighbors=k, algorithm="brute", metric="euclidean")
    clf.fit(np.asarray(train_feats, dtype=np.float64), np.asarray(train_labels))
    pred = clf.predict(np.asarray(test_feats, dtype=np.float64))
    return float(np.mean(pred == np.asarray(test_labels)))


# ---------------------------------------------------------------------------
# drift

@torch.no_grad()
def pooled_taps(model, x, batch_size=256):
    """Globally average-pooled stage outputs (ReLU of each tap), one (n, c) array per layer.

    The rectified output is what the next stage consumes; the pre-activation
    of a conv-BN stage is affine in its input, so pooling it would give
    near rank-one features for the first stage.
    """
    was_training = model.training
    model.eval()
    chunks = None
    for start in range(0, len(x), batch_size):
        _, taps = model.forward_with_taps(x[start:start + batch_size])
        pooled = [F.adaptive_avg_pool2d(F.relu(t), 1).flatten(1).numpy() for t in taps]
        chunks = [[p] for p in pooled] if chunks is None else [c + [p] for c, p in zip(chunks, pooled)]
    model.train(was_training)
    return [np.concatenate(c).astype(np.float64) for c in chunks]


def drift_report(checkpoints, init_model, probe, k=10, labels=None):
    """Per-checkpoint, per-layer ``1 - CKA`` against ``init_model`` and kNN accuracy.

    ``checkpoints`` is a list of models (or ``(name, model)`` pairs) sharing
    ``init_model``'s architecture; ``probe`` is ``(train_x, train_y, test_x,
    test_y)`` drawn from the pretraining data.  Returns a list of row dicts.
    """
    train_x, train_y, test_x, test_y = probe
    init_shapes = init_model.tap_shapes()
    ref = pooled_taps(init_model, train_x)
    rows = []
    for pos, entry in enumerate(checkpoints):
        name, model = entry if isinstance(entry, tuple) else ((labels or {}).get(pos, pos), entry)
        if model.tap_shapes() != init_shapes:
            raise ValueError(f"checkpoint {name} has a different architecture")
        cur_train = pooled_taps(model, train_x)
        cur_test = pooled_taps(model, test_x)
        for layer, (r, c, ct) in enumerate(zip(ref, cur_train, cur_test)):
            rows.append({
                "checkpoint": name,
                "layer": layer + 1,
                "one_minus_cka": 1.0 - linear_cka(r, c),
                "knn_accuracy": knn_probe(c, train_y.numpy(), ct, test_y.numpy(), k),
            })
    return rows


def plot_drift(rows_by_run, path):
    """Drift plot: one panel per metric, one line per (run, layer)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for run, rows in rows_by_run.items():
        layers = sorted({r["layer"] for r in rows})
        for layer in layers:
            pts = [r for r in rows if r["layer"] == layer]
            xs = list(range(len(pts)))
            axes[0].plot(xs, [p["one_minus_cka"] for p in pts], marker="o", label=f"{run} L{layer}")
            axes[1].plot(xs, [p["knn_accuracy"] for p in pts], marker="o", label=f"{run} L{layer}")
    axes[0].set_title("1 - CKA to initialisation")
    axes[1].set_title("kNN accuracy on pretraining data")
    for ax in axes:
        ax.set_xlabel("task")
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# reports

def _cell(faa_value, ff_value):
    faa_txt = f"{100 * faa_value:.2f}"
    ff_txt = "-" if ff_value is None else f"{100 * ff_value:.2f}"
    return f"{faa_txt} ({ff_txt})"


def aggregate(records):
    """Mean FAA/FF per (method, protocol, buffer) over seeds."""
    groups = defaultdict(list)
    for r in records:
        groups[(r["method"], r["protocol"], r["buffer"])].append(r)
    out = []
    for (method, protocol, buffer), rs in groups.items():
        ffs = [r["ff"] for r in rs if r["ff"] is not None]
        out.append({
            "method": method, "protocol": protocol, "buffer": buffer,
            "seeds": sorted(r["seed"] for r in rs),
            "faa": float(np.mean([r["faa"] for r in rs])),
            "ff": float(np.mean(ffs)) if len(ffs) == len(rs) else None,
        })
    return out


def emit_report(records, out_dir, drift=None):
    """Write results.csv (methods x protocol/buffer cells), results.json and per_seed.json.

    ``records`` are dicts with keys method, protocol, buffer, seed, faa, ff
    (ff may be None).  ``drift`` optionally maps run names to drift rows and
    produces drift.json plus drift.png.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(records)
    columns = sorted({(a["protocol"], a["buffer"]) for a in agg},
                     key=lambda c: (c[0] != "class_il", c[0], -1 if c[1] is None else c[1]))
    methods = list(dict.fromkeys(a["method"] for a in agg))
    lookup = {(a["method"], a["protocol"], a["buffer"]): a for a in agg}
    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [f"{p} buf={'-' if b is None else b}" for p, b in columns])
        for m in methods:
            row = [m]
            for p, b in columns:
                a = lookup.get((m, p, b))
                row.append("" if a is None else _cell(a["faa"], a["ff"]))
            writer.writerow(row)
    (out_dir / "results.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    (out_dir / "per_seed.json").write_text(json.dumps(records, indent=2, sort_keys=True))
    if drift:
        (out_dir / "drift.json").write_text(json.dumps(drift, indent=2, sort_keys=True))
        plot_drift(drift, out_dir / "drift.png")
    return out_dir
