"""Anomaly scoring by cosine distance to k-means centers and target-domain references."""

from __future__ import annotations

import csv
import logging
import os.path
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from .errors import DataError
from .utils import ensure_dir

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ("clip_path", "machine_type", "machine_id", "domain", "condition", "score")


def normalize_rows(x):
    """Scale every row to unit length (zero rows stay zero)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@dataclass
class MachineReferences:
    """Reference rows of one machine."""

    source_means: np.ndarray
    target_refs: np.ndarray

    @property
    def rows(self):
        """All reference rows."""
        return np.concatenate([self.source_means, self.target_refs], axis=0)


@dataclass
class BackendModel:
    """Fitted references per machine key."""

    machines: dict

    def __contains__(self, machine_key):
        """Check whether a machine was fitted."""
        return machine_key in self.machines


def spherical_kmeans(x, k, seed):
    """k-means on length-normalized rows, centers re-normalized after convergence."""
    km = KMeans(n_clusters=k, n_init=10, max_iter=100, random_state=seed)
    km.fit(normalize_rows(x))
    return normalize_rows(km.cluster_centers_)


def fit_backend(embeddings, k=16, seed=0, permissive=False):
    """Fit per machine: k means of the source embeddings, all target embeddings as references."""
    source = defaultdict(list)
    target = defaultdict(list)
    for record in embeddings:
        meta = record.meta
        if meta.split != "train":
            continue
        (source if meta.domain == "source" else target)[meta.machine_key].append(record.vector)

    machines = {}
    for machine_key in sorted(set(source) | set(target)):
        x = np.asarray(source.get(machine_key, []))
        n_clusters = k
        if len(x) < k:
            if not permissive or len(x) == 0:
                raise DataError(
                    f"Machine {machine_key} has {len(x)} source training embeddings, need {k}"
                )
            logger.warning("Reducing k from %d to %d for machine %s", k, len(x), machine_key)
            n_clusters = len(x)
        refs = target.get(machine_key, [])
        dim = x.shape[1]
        machines[machine_key] = MachineReferences(
            spherical_kmeans(x, n_clusters, seed),
            normalize_rows(refs) if refs else np.zeros((0, dim)),
        )
    if not machines:
        raise DataError("No training embeddings to fit the backend on")
    return BackendModel(machines)


def cosine_distances(e, rows):
    """1 - cos(e, r) for every reference row r."""
    return 1.0 - normalize_rows(rows) @ normalize_rows(e)[0]


def anomaly_score(backend, record):
    """Smallest cosine distance to the machine's means and target references."""
    machine_key = record.meta.machine_key
    if machine_key not in backend:
        raise DataError(f"Unknown machine {machine_key}")
    distances = cosine_distances(record.vector, backend.machines[machine_key].rows)
    return float(np.clip(distances.min(), 0.0, 2.0))


@dataclass(frozen=True)
class ScoreRecord:
    """Anomaly score of one test clip."""

    clip_path: str
    machine_type: str
    machine_id: str
    domain: str
    condition: str
    score: float

    @property
    def machine_key(self):
        """Key used to group clips of one physical machine."""
        return f"{self.machine_type}/{self.machine_id}"


def write_scores(records, path):
    """Write one CSV row per scored clip."""
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, "w", encoding="utf-8", newline="") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(SCORE_COLUMNS)
        for r in records:
            writer.writerow(
                [r.clip_path, r.machine_type, r.machine_id, r.domain, r.condition, repr(r.score)]
            )


def read_scores(path):
    """Read a score file."""
    if not os.path.exists(path):
        raise DataError(f"Score file does not exist: {path}")
    with open(path, encoding="utf-8", newline="") as csv_file:
        reader = csv.DictReader(csv_file)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"Score file {path} lacks columns: {', '.join(sorted(missing))}")
        try:
            return [
                ScoreRecord(**{**{c: row[c] for c in SCORE_COLUMNS}, "score": float(row["score"])})
                for row in reader
            ]
        except ValueError as exc:
            raise DataError(f"Error while parsing {path}: {exc}") from exc
