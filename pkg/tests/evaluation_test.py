"""Tests for AUC, pAUC, reports and score ensembles."""

import json
import os.path

import numpy as np
import pytest

from asdssl import evaluation
from asdssl.backend import ScoreRecord
from asdssl.errors import DataError


def brute_force_auc(normal, anomaly):
    """Fraction of (anomaly, normal) pairs ranked correctly, ties count half."""
    total = 0.0
    for a in anomaly:
        for n in normal:
            total += 1.0 if a > n else 0.5 if a == n else 0.0
    return total / (len(normal) * len(anomaly))


def brute_force_pauc(normal, anomaly, p):
    """Trapezoidal area of the explicit ROC curve over FPR in [0, p], divided by p."""
    thresholds = sorted(set(normal) | set(anomaly), reverse=True)
    points = [(0.0, 0.0)]
    for t in thresholds:
        fpr = sum(n >= t for n in normal) / len(normal)
        tpr = sum(a >= t for a in anomaly) / len(anomaly)
        points.append((fpr, tpr))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return area / p


def records_for(machine, normal, anomaly, domains=("source", "target")):
    """Score records of one machine; normals alternate between the given domains."""
    out = [
        ScoreRecord(
            f"{machine}/n{i}.wav", machine, "section_00", domains[i % len(domains)], "normal", s
        )
        for i, s in enumerate(normal)
    ]
    out += [
        ScoreRecord(f"{machine}/a{i}.wav", machine, "section_00", "source", "anomaly", s)
        for i, s in enumerate(anomaly)
    ]
    return out


class AucTest:
    """Test the AUC and the partial AUC."""

    @staticmethod
    def test_hand_values():
        """Perfect separation, a brute-forced example and all ties."""
        assert evaluation.auc([0.1], [0.9]) == 1.0
        assert evaluation.auc([0.2, 0.4], [0.3, 0.5]) == 0.75
        assert evaluation.auc([0.5] * 3, [0.5] * 4) == 0.5

    @staticmethod
    def test_oracles():
        """AUC and pAUC equal brute-force oracles on random small instances."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            n_normal, n_anomaly = rng.integers(1, 26, size=2)
            normal = list(np.round(rng.random(n_normal), 1))
            anomaly = list(np.round(rng.random(n_anomaly) + 0.2, 1))
            assert evaluation.auc(normal, anomaly) == pytest.approx(
                brute_force_auc(normal, anomaly), abs=1e-12
            )
            assert evaluation.pauc(normal, anomaly, 0.1) == pytest.approx(
                brute_force_pauc(normal, anomaly, 0.1), abs=1e-12
            )
            assert evaluation.pauc(normal, anomaly, 1.0) == evaluation.auc(normal, anomaly)

    @staticmethod
    def test_perfect_pauc():
        """Perfect separation gives pAUC 1 for any p."""
        for p in (0.05, 0.1, 0.5):
            assert evaluation.pauc([0.1, 0.2, 0.3], [0.8, 0.9], p) == pytest.approx(1.0)

    @staticmethod
    def test_monotone_transform():
        """AUC only depends on the ranking."""
        rng = np.random.default_rng(1)
        normal, anomaly = rng.random(20), rng.random(15) + 0.3
        assert evaluation.auc(np.exp(3 * normal), np.exp(3 * anomaly)) == pytest.approx(
            evaluation.auc(normal, anomaly)
        )

    @staticmethod
    def test_invalid_input():
        """Empty lists and invalid p are rejected."""
        with pytest.raises(DataError):
            evaluation.auc([], [0.1])
        with pytest.raises(DataError):
            evaluation.pauc([0.1], [0.2], 0.0)


def test_harmonic_mean():
    """n / sum(1 / v)."""
    assert evaluation.harmonic_mean([0.6, 0.3]) == 0.4
    assert evaluation.harmonic_mean([0.7]) == pytest.approx(0.7)
    assert evaluation.harmonic_mean([1, 1, 1]) == 1
    with pytest.raises(DataError):
        evaluation.harmonic_mean([0.5, 0.0])
    assert evaluation.aggregate([0.5, 0.0]) == 0.0


class EvaluateTest:
    """Test evaluating score files."""

    @staticmethod
    def test_perfect_machine():
        """A perfectly separating machine gives 1.0 in every cell."""
        report = evaluation.evaluate(records_for("fan", [0.1, 0.2, 0.3, 0.4], [0.8, 0.9]))
        assert set(report.cells) == {
            (d, m) for d in ("source", "target", "mixed") for m in ("auc", "pauc")
        }
        assert all(v == 1.0 for v in report.cells.values())
        assert len(report.rows()) == 6

    @staticmethod
    def test_harmonic_mean_over_machines():
        """Two machines with AUC 0.6 and 0.3 give 0.4."""
        fan = records_for("fan", [0.0, 0.2, 0.4, 0.6, 0.8], [0.5], domains=("source",))
        pump_normals = [0.1, 0.2, 0.3, 0.8, 0.9, 0.95, 0.99, 1.0, 1.1, 1.2]
        pump = records_for("pump", pump_normals, [0.5], domains=("source",))
        report = evaluation.evaluate(fan + pump)
        assert report.per_machine["fan/section_00"]["source"]["auc"] == pytest.approx(0.6)
        assert report.per_machine["pump/section_00"]["source"]["auc"] == pytest.approx(0.3)
        assert report.cells[("source", "auc")] == pytest.approx(0.4)
        assert ("target", "auc") not in report.cells

    @staticmethod
    def test_properties_on_random_scores():
        """Cells lie in [0, 1], the harmonic mean stays below the arithmetic mean."""
        rng = np.random.default_rng(2)
        records = []
        for machine in ("fan", "pump", "valve"):
            records += records_for(machine, list(rng.random(12)), list(rng.random(6) + 0.1))
        report = evaluation.evaluate(records)
        for (domain, metric), value in report.cells.items():
            assert 0.0 <= value <= 1.0
            values = [m[domain][metric] for m in report.per_machine.values()]
            assert value <= np.mean(values) + 1e-12
        shuffled = [records[i] for i in rng.permutation(len(records))]
        assert evaluation.evaluate(shuffled).cells == report.cells

    @staticmethod
    def test_machines_without_anomalies_are_excluded(caplog):
        """Machines without anomalous clips are skipped with a warning."""
        records = records_for("fan", [0.1, 0.2], [0.9]) + records_for("pump", [0.1, 0.2], [])
        report = evaluation.evaluate(records)
        assert list(report.per_machine) == ["fan/section_00"]
        assert "pump/section_00" in caplog.text

    @staticmethod
    def test_unknown_condition():
        """Every clip needs a known condition."""
        records = records_for("fan", [0.1], [0.9])
        records.append(ScoreRecord("fan/x.wav", "fan", "section_00", "unknown", "unknown", 0.5))
        with pytest.raises(DataError):
            evaluation.evaluate(records)


class TrialsTest:
    """Test aggregating trials and rendering reports."""

    @staticmethod
    def test_mean_and_std():
        """Cells are averaged over trials with their standard deviation."""
        reports = [
            evaluation.EvalReport("dev", "d", {("mixed", "auc"): v, ("mixed", "pauc"): v / 2}, {})
            for v in (0.7, 0.8, 0.9)
        ]
        cells = {(c["domain"], c["metric"]): c for c in evaluation.aggregate_trials(reports)}
        assert cells[("mixed", "auc")]["value"] == pytest.approx(0.8)
        assert cells[("mixed", "auc")]["stddev"] == pytest.approx(np.std([0.7, 0.8, 0.9]))
        assert cells[("mixed", "pauc")]["n_trials"] == 3
        assert cells[("mixed", "auc")]["seeds"] == []

    @staticmethod
    def test_seeds_from_metadata():
        """Aggregated cells name the seeds of the trials."""
        reports = [
            evaluation.EvalReport(
                "dev", "d", {("mixed", "auc"): 0.5}, {}, {"seed": seed, "config_fingerprint": "f"}
            )
            for seed in (4, 2, 3)
        ]
        cell = evaluation.aggregate_trials(reports)[0]
        assert cell["seeds"] == [2, 3, 4]

    @staticmethod
    def test_format_cell():
        """Cells render in percent with one decimal."""
        assert evaluation.format_cell(0.713, 0.006, 0.561, 0.008) == "71.3±0.6 / 56.1±0.8"

    @staticmethod
    def test_report_files(temp_dir):
        """The report is written as a text table and as one JSON object per cell."""
        cell = {"dataset": "synthetic", "split": "dev", "domain": "mixed", "n_trials": 5}
        cells = {
            "baseline": [
                {**cell, "metric": "auc", "value": 0.713, "stddev": 0.006},
                {**cell, "metric": "pauc", "value": 0.561, "stddev": 0.008},
            ],
        }
        evaluation.write_report(cells, temp_dir)
        with open(os.path.join(temp_dir, "report.txt"), encoding="utf-8") as f:
            text = f.read()
        assert "71.3±0.6 / 56.1±0.8" in text
        with open(os.path.join(temp_dir, "report.jsonl"), encoding="utf-8") as f:
            rows = [json.loads(line) for line in f]
        assert rows[0]["system"] == "baseline"
        assert set(rows[0]) == {"system", "metric", "value", "stddev", *cell}


class EnsembleTest:
    """Test averaging the scores of several runs."""

    @staticmethod
    def test_mean():
        """Every clip gets the mean of its scores."""
        a = records_for("fan", [0.2], [0.6])
        b = records_for("fan", [0.4], [0.8])
        merged_a = {r.clip_path: r.score for r in a}
        merged = {r.clip_path: r.score for r in evaluation.ensemble_scores([a, b])}
        assert merged["fan/n0.wav"] == pytest.approx(0.3)
        assert merged["fan/a0.wav"] == pytest.approx(0.7)
        same = evaluation.ensemble_scores([a] * 5)
        assert [r.clip_path for r in same] == sorted(r.clip_path for r in a)
        for r in same:
            assert r.score == pytest.approx(merged_a[r.clip_path])

    @staticmethod
    def test_order_independent():
        """The row order of the inputs does not matter."""
        a = records_for("fan", [0.2, 0.3], [0.6])
        b = records_for("fan", [0.4, 0.1], [0.8])
        assert evaluation.ensemble_scores([a, b]) == evaluation.ensemble_scores([a, b[::-1]])

    @staticmethod
    def test_mismatch():
        """Runs over different clips cannot be combined."""
        a = records_for("fan", [0.2], [0.6])
        b = records_for("fan", [0.2, 0.3], [0.6])
        with pytest.raises(DataError, match="fan/n1.wav"):
            evaluation.ensemble_scores([a, b])
