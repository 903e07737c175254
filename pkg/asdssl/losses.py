"""Sub-cluster AdaCos heads and the combined regular + self-supervised loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError

SCALE_BOUNDS = (1.0, 64.0)


@dataclass(frozen=True)
class HeadConfig:
    """One angular-margin head.

    ``frozen_blocks`` leading blocks of ``block_size`` classes keep their centers fixed
    even when the centers are trainable.
    """

    n_classes: int
    n_subclusters: int = 16
    centers_trainable: bool = False
    scale_mode: str = "adaptive"
    fixed_scale: float = 16.0
    embedding_dim: int = 256
    frozen_blocks: int = 0
    block_size: int = 0
    seed: int = 0

    def __post_init__(self):
        """Validate counts and the scale mode."""
        if self.n_classes < 1 or self.n_subclusters < 1:
            raise ConfigError("A head needs at least one class and one sub-cluster")
        if self.scale_mode not in ("adaptive", "fixed"):
            raise ConfigError(f"Unknown scale mode {self.scale_mode!r}")
        if self.fixed_scale <= 0:
            raise ConfigError("fixed_scale must be positive")

    @property
    def n_centers(self):
        """Total number of sub-cluster centers."""
        return self.n_classes * self.n_subclusters


def initial_scale(n_centers):
    """AdaCos starting scale sqrt(2) * ln(C - 1), kept inside the scale bounds."""
    if n_centers <= 2:
        return SCALE_BOUNDS[0]
    return min(max(math.sqrt(2.0) * math.log(n_centers - 1), SCALE_BOUNDS[0]), SCALE_BOUNDS[1])


class CenterBank(nn.Module):
    """Unit-norm sub-cluster centers; row ``c * n_subclusters + k`` is sub-cluster k of class c."""

    def __init__(self, cfg):
        """Draw random centers from the head's seed."""
        super().__init__()
        self.cfg = cfg
        generator = torch.Generator().manual_seed(cfg.seed)
        centers = F.normalize(torch.randn(cfg.n_centers, cfg.embedding_dim, generator=generator))
        frozen_rows = cfg.frozen_blocks * cfg.block_size * cfg.n_subclusters
        trainable_rows = torch.arange(cfg.n_centers) >= frozen_rows
        self.register_buffer("trainable_rows", trainable_rows, persistent=False)
        if cfg.centers_trainable:
            self.centers = nn.Parameter(centers)
            if frozen_rows:
                self.centers.register_hook(lambda grad: grad * self.trainable_rows[:, None])
        else:
            self.register_buffer("centers", centers)

    @property
    def trainable(self):
        """Whether the optimizer may move any center."""
        return isinstance(self.centers, nn.Parameter)

    def renormalize(self):
        """Project trainable rows back onto the unit sphere after an update."""
        if not self.trainable:
            return
        with torch.no_grad():
            rows = self.trainable_rows
            self.centers[rows] = F.normalize(self.centers[rows])


def cosine_logits(embeddings, bank):
    """Cosine similarity of every embedding to every center."""
    if not torch.all(torch.isfinite(embeddings)):
        raise NumericError("Embeddings contain non-finite values")
    centers = bank.centers.to(embeddings.dtype)
    return F.normalize(embeddings, dim=-1) @ F.normalize(centers, dim=-1).T


def head_log_probabilities(embeddings, bank, scale):
    """Log class probabilities: softmax over all sub-cluster logits, summed per class."""
    if not scale > 0:
        raise NumericError(f"Scale must be positive, got {scale}")
    logits = scale * cosine_logits(embeddings, bank)
    log_p = torch.log_softmax(logits, dim=-1)
    k = bank.cfg.n_subclusters
    return torch.logsumexp(log_p.reshape(*log_p.shape[:-1], -1, k), dim=-1)


def head_probabilities(embeddings, bank, scale):
    """Class probabilities of a batch of embeddings."""
    return torch.exp(head_log_probabilities(embeddings, bank, scale))


def adaptive_scale_update(scale, cosines, labels, n_subclusters):
    """One AdaCos step: s = ln(B_avg) / cos(min(pi/4, median target angle)).

    B_avg is the batch mean of the summed non-target terms exp(s * cos). Degenerate
    batches (no non-target centers, non-finite results) keep the current scale.
    """
    with torch.no_grad():
        cosines = cosines.detach().to(torch.float64)
        labels = labels.detach().to(torch.float64)
        target = (labels > 0).repeat_interleave(n_subclusters, dim=-1)
        masked = torch.where(target, torch.full_like(cosines, -math.inf), scale * cosines)
        log_b = torch.logsumexp(masked, dim=-1)
        log_b = log_b[torch.isfinite(log_b)]
        if log_b.numel() == 0:
            return float(scale)
        log_b_avg = torch.logsumexp(log_b, dim=0) - math.log(log_b.numel())

        theta = torch.acos(cosines.clamp(-1.0 + 1e-7, 1.0 - 1e-7))
        nearest = theta.reshape(*theta.shape[:-1], -1, n_subclusters).min(dim=-1).values
        theta_target = (labels * nearest).sum(dim=-1) / labels.sum(dim=-1).clamp_min(1e-12)
        theta_med = torch.median(theta_target).item()
        new_scale = log_b_avg.item() / math.cos(min(math.pi / 4, theta_med))
    if not math.isfinite(new_scale):
        return float(scale)
    return min(max(new_scale, SCALE_BOUNDS[0]), SCALE_BOUNDS[1])


class AdaCosHead(nn.Module):
    """A center bank plus its (adaptive or fixed) cosine scale."""

    def __init__(self, cfg):
        """Create the centers and the starting scale."""
        super().__init__()
        self.cfg = cfg
        self.bank = CenterBank(cfg)
        start = initial_scale(cfg.n_centers) if cfg.scale_mode == "adaptive" else cfg.fixed_scale
        self.register_buffer("scale", torch.tensor(float(start), dtype=torch.float64))

    @property
    def n_classes(self):
        """Number of classes of this head."""
        return self.cfg.n_classes

    def forward(self, embeddings, labels=None):
        """Log class probabilities; in training mode the adaptive scale follows the batch."""
        if self.training and labels is not None and self.cfg.scale_mode == "adaptive":
            cosines = cosine_logits(embeddings.detach(), self.bank)
            new_scale = adaptive_scale_update(
                self.scale.item(), cosines, labels, self.cfg.n_subclusters
            )
            self.scale.fill_(new_scale)
        return head_log_probabilities(embeddings, self.bank, self.scale.item())


def cross_entropy(log_p, y):
    """Mean over the batch of -sum(y * ln p) for soft labels."""
    y = y.to(log_p.dtype)
    terms = torch.where(y > 0, y * log_p, torch.zeros_like(log_p))
    return -terms.sum(dim=-1).mean()


def loss_terms(emb_reg, y_reg, emb_ssl, y_ssl, heads):
    """Cross-entropy of each configured head; ``heads`` maps "regular"/"ssl" to a head or None."""
    terms = {}
    for name, emb, y in (("regular", emb_reg, y_reg), ("ssl", emb_ssl, y_ssl)):
        head = heads.get(name)
        if head is None:
            continue
        y = torch.as_tensor(y)
        if y.shape[-1] != head.n_classes:
            raise DataError(f"{name} labels have {y.shape[-1]} classes, head has {head.n_classes}")
        terms[name] = cross_entropy(head(emb, y), y)
    return terms


def total_loss(emb_reg, y_reg, emb_ssl, y_ssl, heads):
    """Equally weighted sum of the regular and the self-supervised loss."""
    terms = loss_terms(emb_reg, y_reg, emb_ssl, y_ssl, heads)
    if not terms:
        raise ConfigError("At least one head is required")
    return sum(terms.values())
