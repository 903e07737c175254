"""Self-supervised transforms: mixup, statistics exchange and feature exchange.

Every transform that is enabled triples the label space: an item whose transform was
not applied keeps its label in the first block, an applied transform splits the label
mass evenly between the second block (own label) and the third block (partner label).
Applying StatEx and FeatEx one after the other nests the blocks, giving 9N classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DataError
from .features import FeatureBundle

STATEX_EPSILON = 1e-8
STATEX_AXES = ("time", "frequency", "both")


@dataclass(frozen=True)
class SslConfig:
    """Probabilities and switches of the self-supervised transforms."""

    p_mixup: float = 0.5
    p_statex: float = 0.5
    p_featex: float = 0.5
    statex: bool = True
    featex: bool = True
    mixup_lambda_law: str = "uniform01"
    statex_axis: str = "time"
    use_class_labels_in_ssl: bool = True
    seed: int = 0

    def __post_init__(self):
        """Validate probabilities and enums."""
        for name in ("p_mixup", "p_statex", "p_featex"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {getattr(self, name)}")
        if self.mixup_lambda_law != "uniform01":
            raise ConfigError(f"Unknown mixup lambda law {self.mixup_lambda_law!r}")
        if self.statex_axis not in STATEX_AXES:
            raise ConfigError(f"Unknown StatEx axis {self.statex_axis!r}")

    @property
    def label_multiplier(self):
        """Number of label blocks produced by the enabled transforms."""
        return 3 ** (int(self.statex) + int(self.featex))


@dataclass
class PairedBatch:
    """A training batch after mixup and StatEx, plus the FeatEx pairing plan."""

    spectrum: np.ndarray
    spectrogram: np.ndarray
    spectrogram_ssl: np.ndarray
    lam: np.ndarray
    mixup_partner: np.ndarray
    statex_partner: np.ndarray
    featex_partner: np.ndarray
    applied_mixup: np.ndarray
    applied_statex: np.ndarray
    applied_featex: np.ndarray
    y_regular: np.ndarray
    y_ssl: np.ndarray

    def __len__(self):
        """Batch size."""
        return len(self.lam)


def mixup_pair(x1, x2, y1, y2, lam):
    """Interpolate both representations and the labels with the same coefficient."""
    if x1.spectrum.shape != x2.spectrum.shape or x1.spectrogram.shape != x2.spectrogram.shape:
        raise DataError("mixup needs feature bundles of identical shapes")
    if np.shape(y1) != np.shape(y2):
        raise DataError("mixup needs labels of identical length")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mixup coefficient must be in [0, 1], got {lam}")
    mixed = FeatureBundle(
        lam * x1.spectrum + (1.0 - lam) * x2.spectrum,
        lam * x1.spectrogram + (1.0 - lam) * x2.spectrogram,
    )
    return mixed, lam * np.asarray(y1) + (1.0 - lam) * np.asarray(y2)


def statex(x1, x2, axis="time"):
    """Give ``x1`` the first- and second-order statistics of ``x2`` along ``axis``.

    Arrays are (..., T, F). Along time, mean and population std are taken per frequency
    bin; along frequency, per time frame.
    """
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise DataError(f"StatEx needs identical shapes, got {x1.shape} and {x2.shape}")
    if axis == "time":
        reduce = -2
    elif axis == "frequency":
        reduce = -1
    else:
        raise ConfigError(f"Unknown StatEx axis {axis!r}")
    mu1 = x1.mean(axis=reduce, keepdims=True)
    mu2 = x2.mean(axis=reduce, keepdims=True)
    sigma1 = np.maximum(x1.std(axis=reduce, keepdims=True), STATEX_EPSILON)
    sigma2 = x2.std(axis=reduce, keepdims=True)
    return (x1 - mu1) / sigma1 * sigma2 + mu2


def extend_label(y_a, y_b, applied):
    """Triple a label: ``(y_a, 0, 0)`` if not applied, else ``(0, y_a / 2, y_b / 2)``.

    Works on single vectors or on batches (rows) with one flag per row.
    """
    y_a = np.asarray(y_a)
    y_b = np.asarray(y_b)
    if y_a.shape != y_b.shape:
        raise DataError(f"Label length mismatch: {y_a.shape} and {y_b.shape}")
    applied = np.asarray(applied, dtype=bool)[..., None]
    zeros = np.zeros_like(y_a)
    kept = np.concatenate([y_a, zeros, zeros], axis=-1)
    exchanged = np.concatenate([zeros, 0.5 * y_a, 0.5 * y_b], axis=-1)
    return np.where(applied, exchanged, kept)


def collapse_blocks(y, n_blocks):
    """Replace the classes inside every label block by a single pseudo-class."""
    y = np.asarray(y)
    return y.reshape(*y.shape[:-1], n_blocks, y.shape[-1] // n_blocks).sum(axis=-1)


def featex_combine(e1, e2):
    """Join the first half of ``e1`` with the second half of ``e2``.

    ``e1`` and ``e2`` are ``(half1, half2)`` pairs of tensors (single or batched).
    """
    (e1_1, e1_2), (e2_1, e2_2) = e1, e2
    dims = {e1_1.shape[-1], e1_2.shape[-1], e2_1.shape[-1], e2_2.shape[-1]}
    if len(dims) != 1:
        raise DataError(f"FeatEx needs halves of identical dimension, got {sorted(dims)}")
    return torch.cat([torch.as_tensor(e1_1), torch.as_tensor(e2_2)], dim=-1)


def featex_batch(half1, half2, partner, applied):
    """Batched FeatEx: rows with ``applied`` take the second half of their partner."""
    partner = torch.as_tensor(partner, dtype=torch.long, device=half2.device)
    applied = torch.as_tensor(applied, dtype=torch.bool, device=half2.device)
    exchanged = featex_combine((half1, half2), (half1[partner], half2[partner]))
    kept = torch.cat([half1, half2], dim=-1)
    return torch.where(applied[:, None], exchanged, kept)


def compose_ssl_batch(batch, labels, cfg, rng):
    """Apply mixup, StatEx and plan FeatEx for one batch, building both label sets.

    ``batch`` is a FeatureBundle of stacked arrays, ``labels`` one N-dim label per row.
    Every draw is independent per item and every transform uses a fresh permutation.
    """
    n = len(labels)
    if n < 2:
        raise DataError(f"SSL batches need at least two items, got {n}")
    labels = np.asarray(labels, dtype=np.float32)
    spectrum = np.asarray(batch.spectrum, dtype=np.float32)
    spectrogram = np.asarray(batch.spectrogram, dtype=np.float32)

    applied_mixup = rng.random(n) < cfg.p_mixup
    lam = np.where(applied_mixup, rng.uniform(0.0, 1.0, n), 1.0).astype(np.float32)
    mixup_partner = rng.permutation(n)
    spectrum = lam[:, None] * spectrum + (1 - lam[:, None]) * spectrum[mixup_partner]
    lam3 = lam[:, None, None]
    spectrogram = lam3 * spectrogram + (1 - lam3) * spectrogram[mixup_partner]
    y_regular = lam[:, None] * labels + (1 - lam[:, None]) * labels[mixup_partner]

    identity = np.arange(n)
    no = np.zeros(n, dtype=bool)
    spectrogram_ssl = spectrogram
    y_ssl = y_regular
    statex_partner, applied_statex = identity, no
    if cfg.statex:
        applied_statex = rng.random(n) < cfg.p_statex
        statex_partner = rng.permutation(n)
        partner_sgram = spectrogram[statex_partner]
        exchanged = statex(spectrogram, partner_sgram, "time")
        if cfg.statex_axis != "time":
            along_frequency = statex(spectrogram, partner_sgram, "frequency")
            use_frequency = np.full(n, cfg.statex_axis == "frequency")
            if cfg.statex_axis == "both":
                use_frequency = rng.random(n) < 0.5
            exchanged = np.where(use_frequency[:, None, None], along_frequency, exchanged)
        spectrogram_ssl = np.where(
            applied_statex[:, None, None], exchanged, spectrogram
        ).astype(np.float32)
        y_ssl = extend_label(y_ssl, y_ssl[statex_partner], applied_statex)

    featex_partner, applied_featex = identity, no
    if cfg.featex:
        applied_featex = rng.random(n) < cfg.p_featex
        featex_partner = rng.permutation(n)
        y_ssl = extend_label(y_ssl, y_ssl[featex_partner], applied_featex)

    if not cfg.use_class_labels_in_ssl:
        y_ssl = collapse_blocks(y_ssl, cfg.label_multiplier)

    return PairedBatch(
        spectrum=spectrum.astype(np.float32),
        spectrogram=spectrogram.astype(np.float32),
        spectrogram_ssl=spectrogram_ssl,
        lam=lam,
        mixup_partner=mixup_partner,
        statex_partner=statex_partner,
        featex_partner=featex_partner,
        applied_mixup=applied_mixup,
        applied_statex=applied_statex,
        applied_featex=applied_featex,
        y_regular=y_regular.astype(np.float32),
        y_ssl=y_ssl.astype(np.float32),
    )
