"""AUC, partial AUC, domain-split harmonic means, multi-trial reports and score ensembles."""

from __future__ import annotations

import json
import logging
import os.path
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from sklearn import metrics

from .backend import ScoreRecord
from .errors import DataError
from .utils import ensure_dir

logger = logging.getLogger(__name__)

EVAL_DOMAINS = ("source", "target", "mixed")
METRICS = ("auc", "pauc")


def _labels_and_scores(scores_normal, scores_anomaly):
    if len(scores_normal) == 0 or len(scores_anomaly) == 0:
        raise DataError("AUC needs at least one normal and one anomalous score")
    y_true = np.concatenate([np.zeros(len(scores_normal)), np.ones(len(scores_anomaly))])
    y_score = np.concatenate([np.asarray(scores_normal, float), np.asarray(scores_anomaly, float)])
    return y_true, y_score


def auc(scores_normal, scores_anomaly):
    """Probability that an anomalous clip scores above a normal one (ties count half)."""
    y_true, y_score = _labels_and_scores(scores_normal, scores_anomaly)
    return float(metrics.roc_auc_score(y_true, y_score))


def pauc(scores_normal, scores_anomaly, p=0.1):
    """Area under the ROC curve for false-positive rates in [0, p], divided by p."""
    if not 0.0 < p <= 1.0:
        raise DataError(f"pAUC needs 0 < p <= 1, got {p}")
    if p == 1.0:
        return auc(scores_normal, scores_anomaly)
    y_true, y_score = _labels_and_scores(scores_normal, scores_anomaly)
    fpr, tpr, _ = metrics.roc_curve(y_true, y_score, drop_intermediate=False)
    stop = np.searchsorted(fpr, p, side="right")
    tpr_at_p = np.interp(p, fpr[stop - 1 : stop + 1], tpr[stop - 1 : stop + 1])
    fpr = np.append(fpr[:stop], p)
    tpr = np.append(tpr[:stop], tpr_at_p)
    return float(metrics.auc(fpr, tpr) / p)


def harmonic_mean(values):
    """n / sum(1 / v) of strictly positive values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("harmonic mean of an empty list")
    if np.any(values <= 0):
        raise DataError("harmonic mean needs strictly positive values")
    return float(len(values) / np.sum(1.0 / values))


def aggregate(values):
    """Harmonic mean that treats any zero value as a zero result."""
    if any(v == 0 for v in values):
        return 0.0
    return harmonic_mean(values)


@dataclass
class EvalReport:
    """Harmonic means over machines per (domain, metric), plus the per-machine values."""

    dataset: str
    split: str
    cells: dict
    per_machine: dict
    metadata: dict = field(default_factory=dict)

    def rows(self):
        """One dict per report cell."""
        return [
            {
                "dataset": self.dataset,
                "split": self.split,
                "domain": domain,
                "metric": metric,
                "value": self.cells[(domain, metric)],
            }
            for domain in EVAL_DOMAINS
            for metric in METRICS
            if (domain, metric) in self.cells
        ]


def machine_metrics(records, max_fpr):
    """AUC and pAUC per domain of one machine; domain normals against all anomalies."""
    anomalies = [r.score for r in records if r.condition == "anomaly"]
    normals = {
        d: [r.score for r in records if r.condition == "normal" and r.domain == d]
        for d in ("source", "target")
    }
    normals["mixed"] = normals["source"] + normals["target"]
    values = {}
    for domain in EVAL_DOMAINS:
        if not normals[domain]:
            continue
        values[domain] = {
            "auc": auc(normals[domain], anomalies),
            "pauc": pauc(normals[domain], anomalies, max_fpr),
        }
    return values


def evaluate(records, dataset="synthetic", split="dev", max_fpr=0.1, metadata=None):
    """Evaluate the scores of one run."""
    by_machine = defaultdict(list)
    for r in records:
        if r.condition not in ("normal", "anomaly"):
            raise DataError(f"Clip {r.clip_path} has no known condition")
        by_machine[r.machine_key].append(r)

    per_machine = {}
    for machine_key in sorted(by_machine):
        machine_records = by_machine[machine_key]
        if not any(r.condition == "anomaly" for r in machine_records):
            logger.warning("Excluding machine %s: no anomalous clips", machine_key)
            continue
        if not any(r.condition == "normal" for r in machine_records):
            logger.warning("Excluding machine %s: no normal clips", machine_key)
            continue
        per_machine[machine_key] = machine_metrics(machine_records, max_fpr)
    if not per_machine:
        raise DataError("No machine has both normal and anomalous clips")

    cells = {}
    for domain in EVAL_DOMAINS:
        for metric in METRICS:
            values = [m[domain][metric] for m in per_machine.values() if domain in m]
            if values:
                cells[(domain, metric)] = aggregate(values)
    return EvalReport(dataset, split, cells, per_machine, dict(metadata or {}))


def aggregate_trials(reports):
    """Mean and standard deviation of every cell over independent trials.

    Each cell also lists the seeds of the trials whose metadata names one.
    """
    seeds = sorted({r.metadata["seed"] for r in reports if r.metadata.get("seed") is not None})
    grouped = defaultdict(list)
    for report in reports:
        for row in report.rows():
            grouped[(row["dataset"], row["split"], row["domain"], row["metric"])].append(
                row["value"]
            )
    return [
        {
            "dataset": dataset,
            "split": split,
            "domain": domain,
            "metric": metric,
            "value": float(np.mean(values)),
            "stddev": float(np.std(values)),
            "n_trials": len(values),
            "seeds": seeds,
        }
        for (dataset, split, domain, metric), values in grouped.items()
    ]


def format_cell(auc_mean, auc_std, pauc_mean, pauc_std):
    """Render ``AUC / pAUC`` in percent as ``71.3±0.6 / 56.1±0.8``."""
    return (
        f"{100 * auc_mean:.1f}±{100 * auc_std:.1f} / {100 * pauc_mean:.1f}±{100 * pauc_std:.1f}"
    )


def render_table(cells_by_system):
    """Render aggregated cells of several systems as a comparison table."""
    systems = list(cells_by_system)
    lookup = {}
    row_keys = []
    for system, cells in cells_by_system.items():
        for c in cells:
            row = (c["dataset"], c["split"], c["domain"])
            if row not in row_keys:
                row_keys.append(row)
            lookup[(system, *row, c["metric"])] = (c["value"], c["stddev"])
    order = {d: i for i, d in enumerate(EVAL_DOMAINS)}
    row_keys.sort(key=lambda r: (r[0], r[1], order[r[2]]))

    header = ["dataset", "split", "domain"] + [f"{s} (AUC / pAUC)" for s in systems]
    lines = [header]
    for row in row_keys:
        line = list(row)
        for system in systems:
            a = lookup.get((system, *row, "auc"))
            p = lookup.get((system, *row, "pauc"))
            line.append(format_cell(*a, *p) if a and p else "-")
        lines.append(line)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
        for line in lines
    )


def write_report(cells_by_system, out_dir, name="report"):
    """Write the text table and one JSON object per cell."""
    ensure_dir(out_dir)
    with open(os.path.join(out_dir, name + ".txt"), "w", encoding="utf-8") as f:
        f.write(render_table(cells_by_system) + "\n")
    with open(os.path.join(out_dir, name + ".jsonl"), "w", encoding="utf-8") as f:
        for system, cells in cells_by_system.items():
            for cell in cells:
                f.write(json.dumps({"system": system, **cell}, sort_keys=True) + "\n")


def ensemble_scores(runs):
    """Mean score per clip over runs that cover exactly the same clips."""
    if not runs:
        raise DataError("Nothing to ensemble")
    by_clip = [{r.clip_path: r for r in run} for run in runs]
    reference = set(by_clip[0])
    for i, run in enumerate(by_clip[1:], start=1):
        if set(run) != reference:
            diff = sorted(reference ^ set(run))
            raise DataError(f"Run {i} covers different clips: {', '.join(diff)}")
    merged = []
    for clip_path in sorted(reference):
        first = by_clip[0][clip_path]
        mean = float(np.mean([run[clip_path].score for run in by_clip]))
        merged.append(
            ScoreRecord(
                first.clip_path,
                first.machine_type,
                first.machine_id,
                first.domain,
                first.condition,
                mean,
            )
        )
    return merged
