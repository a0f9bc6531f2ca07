"""Bin-level evaluation shared by classification and regression models."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .data import SampleSet, SegmentationScheme, assign_bin
from .errors import StructuralError

# Test accuracies reported for the MIMIC-III dataset. Reference only: the
# synthetic corpus cannot reproduce them.
REFERENCE_ACCURACY = {
    "classification": {
        "hph": {"alexnet": 0.45, "resnet18": 0.44, "resnet34": 0.45, "resnet50": 0.44},
        "even4": {"alexnet": 0.36, "resnet18": 0.36, "resnet34": 0.37, "resnet50": 0.36},
        "dgk": {"alexnet": 0.24, "resnet18": 0.24, "resnet34": 0.25, "resnet50": 0.23},
        "even10": {"alexnet": 0.16, "resnet18": 0.15, "resnet34": 0.16, "resnet50": 0.16},
    },
    "regression": {
        "hph": {"alexnet": 0.42, "resnet18": 0.46, "resnet34": 0.45, "resnet50": 0.45},
        "even4": {"alexnet": 0.36, "resnet18": 0.36, "resnet34": 0.37, "resnet50": 0.38},
        "dgk": {"alexnet": 0.25, "resnet18": 0.25, "resnet34": 0.25, "resnet50": 0.25},
        "even10": {"alexnet": 0.14, "resnet18": 0.16, "resnet34": 0.16, "resnet50": 0.16},
    },
}

GRID_COLUMNS = ("scheme", "architecture", "task", "split", "n", "accuracy",
                "mean_abs_bin_distance")


def outputs_to_bins(outputs, task, scheme: SegmentationScheme):
    outputs = np.asarray(outputs)
    if task == "classification":
        if outputs.ndim != 2 or outputs.shape[1] != scheme.n_bins:
            raise StructuralError(
                f"classification outputs of width {outputs.shape[-1]} do not match "
                f"{scheme.n_bins}-bin scheme {scheme.name!r}"
            )
        return np.argmax(outputs, axis=1).astype(np.int64)
    return np.asarray(assign_bin(outputs.reshape(-1), scheme), dtype=np.int64).reshape(-1)


def predict_bins(model, samples, scheme: SegmentationScheme, batch_size=256):
    """Bin index per sample: argmax for classification, clamped interval lookup for regression.

    ``model`` may be a :class:`~ppgbp.nn.Model` or a checkpoint.
    """
    if hasattr(model, "to_model"):
        model = model.to_model()
    if model.task == "classification" and model.n_outputs != scheme.n_bins:
        raise StructuralError(
            f"checkpoint head has {model.n_outputs} outputs but scheme {scheme.name!r} "
            f"has {scheme.n_bins} bins"
        )
    x = samples.ppg if isinstance(samples, SampleSet) else np.asarray(samples)
    return outputs_to_bins(model.predict(x, batch_size), model.task, scheme)


def accuracy(pred, true):
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(pred == true))


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth bins, columns predicted bins."""

    raw: np.ndarray
    normalized: np.ndarray
    empty_rows: list

    @property
    def n_bins(self):
        return self.raw.shape[0]

    def accuracy(self):
        return float(np.trace(self.raw) / self.raw.sum())


def confusion_matrix(pred, true, n_bins) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    for name, v in (("predicted", pred), ("true", true)):
        if v.size and (v.min() < 0 or v.max() >= n_bins):
            raise ValueError(f"{name} bin index outside [0, {n_bins})")
    raw = np.zeros((n_bins, n_bins), dtype=np.int64)
    np.add.at(raw, (true, pred), 1)
    totals = raw.sum(axis=1, keepdims=True)
    norm = np.divide(raw, totals, out=np.zeros((n_bins, n_bins)), where=totals > 0)
    return ConfusionMatrix(raw, norm, [int(i) for i in np.flatnonzero(totals[:, 0] == 0)])


def mean_abs_bin_distance(pred, true):
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(true))))


@dataclass
class EvalReport:
    scheme: str
    architecture: str
    task: str
    split: str
    n_samples: int
    accuracy: float
    confusion: ConfusionMatrix
    mean_abs_bin_distance: float
    run_id: str = ""
    extra: dict = field(default_factory=dict)

    def row(self):
        return {"scheme": self.scheme, "architecture": self.architecture, "task": self.task,
                "split": self.split, "n": self.n_samples, "accuracy": self.accuracy,
                "mean_abs_bin_distance": self.mean_abs_bin_distance}


def evaluate_bins(pred, true, scheme: SegmentationScheme, architecture="", task="", split="test",
                  run_id=""):
    cm = confusion_matrix(pred, true, scheme.n_bins)
    return EvalReport(scheme.name, architecture, task, split, int(len(true)), accuracy(pred, true),
                      cm, mean_abs_bin_distance(pred, true), run_id)


def evaluate_model(model, samples: SampleSet, scheme: SegmentationScheme, split="test", run_id=""):
    if hasattr(model, "to_model"):
        model = model.to_model()
    pred = predict_bins(model, samples, scheme)
    true = assign_bin(samples.sbp, scheme)
    return evaluate_bins(pred, np.asarray(true), scheme, model.config.name, model.task, split,
                         run_id)


# ---------------------------------------------------------------------------
# Aggregation and serialization
# ---------------------------------------------------------------------------


def mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def aggregate_report(reports, personalization=()):
    """Summaries for a set of runs.

    ``personalization`` holds ``(scheme, architecture, task, pre_acc, post_acc)``
    tuples, one per personalized subject. Returns a dict with ``grid``
    (scheme/architecture/task -> mean accuracy), ``personalization``
    (per scheme/architecture/task mean and std before/after) and
    ``by_scheme`` (accuracy averaged over architectures).
    """
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate_report needs at least one report")
    edges_by_scheme = {}
    for r in reports:
        n_bins = r.confusion.n_bins
        if edges_by_scheme.setdefault(r.scheme, n_bins) != n_bins:
            raise ValueError(f"inconsistent bin counts for scheme {r.scheme!r}")

    cells = {}
    for r in reports:
        cells.setdefault((r.scheme, r.architecture, r.task), []).append(r.accuracy)
    grid = {k: mean_std(v)[0] for k, v in sorted(cells.items())}

    per_pair = {}
    for scheme, arch, task, pre, post in personalization:
        per_pair.setdefault((scheme, arch, task), []).append((pre, post))
    perso = {}
    for key, pairs in sorted(per_pair.items()):
        pre_m, pre_s = mean_std([p for p, _ in pairs])
        post_m, post_s = mean_std([q for _, q in pairs])
        perso[key] = {"n": len(pairs), "pre_mean": pre_m, "pre_std": pre_s,
                      "post_mean": post_m, "post_std": post_s}

    by_scheme = {}
    for (scheme, _, task), acc in grid.items():
        by_scheme.setdefault((scheme, task), []).append(acc)
    by_scheme = {k: dict(zip(("mean", "std"), mean_std(v))) for k, v in sorted(by_scheme.items())}
    return {"grid": grid, "personalization": perso, "by_scheme": by_scheme}


def grid_csv(reports):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=GRID_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.row()
        row["accuracy"] = f"{row['accuracy']:.6f}"
        row["mean_abs_bin_distance"] = f"{row['mean_abs_bin_distance']:.6f}"
        w.writerow(row)
    return buf.getvalue()


def read_grid_csv(text, confusions=None):
    """Parse rows written by :func:`grid_csv` back into lightweight reports."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        n_bins = None
        if confusions is not None:
            n_bins = confusions.get(row["scheme"])
        cm = ConfusionMatrix(np.zeros((n_bins or 1, n_bins or 1)), np.zeros((n_bins or 1,) * 2), [])
        out.append(EvalReport(row["scheme"], row["architecture"], row["task"], row["split"],
                              int(row["n"]), float(row["accuracy"]), cm,
                              float(row["mean_abs_bin_distance"])))
    return out


def confusion_csv(report: EvalReport, normalized=True):
    """One CSV block: a comment header naming the run, then one line per true bin."""
    cm = report.confusion.normalized if normalized else report.confusion.raw
    kind = "row-normalized" if normalized else "raw"
    lines = [f"# run={report.run_id or 'run'} scheme={report.scheme} {kind} "
             f"rows=ground_truth cols=predicted empty_rows={report.confusion.empty_rows}"]
    for row in cm:
        lines.append(",".join(f"{v:.6f}" if normalized else str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def summary_csv(summary):
    lines = ["section,scheme,architecture,task,n,pre_mean,pre_std,post_mean,post_std,accuracy"]
    for (scheme, arch, task), acc in summary["grid"].items():
        lines.append(f"grid,{scheme},{arch},{task},,,,,,{acc:.6f}")
    for (scheme, arch, task), s in summary["personalization"].items():
        lines.append(f"personalization,{scheme},{arch},{task},{s['n']},{s['pre_mean']:.6f},"
                     f"{s['pre_std']:.6f},{s['post_mean']:.6f},{s['post_std']:.6f},")
    for (scheme, task), s in summary["by_scheme"].items():
        lines.append(f"scheme_mean,{scheme},all,{task},,,,,,{s['mean']:.6f}")
    return "\n".join(lines) + "\n"


def plot_spec(summary):
    """Plot description (JSON-able) for the grid and the personalization bars."""
    schemes = sorted({k[0] for k in summary["grid"]})
    return {
        "figures": [
            {"type": "grouped_bar", "title": "test accuracy by segmentation",
             "x": schemes,
             "series": [{"label": f"{arch}/{task}",
                         "y": [summary["grid"].get((s, arch, task)) for s in schemes]}
                        for arch, task in sorted({k[1:] for k in summary["grid"]})]},
            {"type": "bar_with_error", "title": "personalization before/after",
             "groups": [{"key": list(k), **v} for k, v in summary["personalization"].items()]},
        ]
    }
