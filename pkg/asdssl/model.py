"""Two convolutional sub-networks whose embeddings are concatenated."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .augment import featex_batch
from .dataio import ClipMeta
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ModelConfig:
    """Sizes of both branches. Normalization layers carry no affine parameters."""

    embedding_dim: int = 128
    spectrum_bins: int = 4096
    spectrogram_frames: int = 48
    frequency_bins: int = 513
    spectrum_channels: tuple = (16, 32, 64)
    spectrum_kernels: tuple = (64, 16, 8)
    spectrum_strides: tuple = (8, 4, 4)
    spectrum_pool: int = 8
    spectrogram_channels: tuple = (16, 32, 32, 64)
    hidden_dim: int = 128
    use_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        """Validate the channel plans."""
        if self.use_bias:
            raise ConfigError("Bias terms are not supported in any layer")
        if self.embedding_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("embedding_dim and hidden_dim must be positive")
        plans = (self.spectrum_channels, self.spectrum_kernels, self.spectrum_strides)
        if len({len(p) for p in plans}) != 1 or not self.spectrum_channels:
            raise ConfigError("Spectrum channels, kernels and strides must have equal length")
        if not self.spectrogram_channels:
            raise ConfigError("The spectrogram branch needs at least one block")


@dataclass
class EmbeddingRecord:
    """Embedding halves of one clip and the clip they came from."""

    half1: np.ndarray
    half2: np.ndarray
    meta: ClipMeta | None = None

    @property
    def vector(self):
        """The concatenated 2D-dimensional embedding."""
        return np.concatenate([self.half1, self.half2])


class SpectrumBranch(nn.Module):
    """1-D convolutions over the full-clip magnitude spectrum."""

    def __init__(self, cfg):
        """Create the layers."""
        super().__init__()
        layers = [nn.BatchNorm1d(1, affine=False)]
        prev = 1
        for channels, kernel, stride in zip(
            cfg.spectrum_channels, cfg.spectrum_kernels, cfg.spectrum_strides
        ):
            layers += [
                nn.Conv1d(prev, channels, kernel, stride=stride, padding=kernel // 2, bias=False),
                nn.BatchNorm1d(channels, affine=False),
                nn.ReLU(),
            ]
            prev = channels
        layers += [nn.AdaptiveMaxPool1d(cfg.spectrum_pool), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Linear(prev * cfg.spectrum_pool, cfg.hidden_dim, bias=False),
            nn.BatchNorm1d(cfg.hidden_dim, affine=False),
            nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.embedding_dim, bias=False),
        )

    def forward(self, x):
        """Map (batch, bins) to (batch, D)."""
        return self.head(self.features(x.unsqueeze(1)))


class SpectrogramBranch(nn.Module):
    """2-D convolutions with stride-2 downsampling over the spectrogram."""

    def __init__(self, cfg):
        """Create the layers."""
        super().__init__()
        layers = [nn.BatchNorm2d(1, affine=False)]
        prev = 1
        for channels in cfg.spectrogram_channels:
            layers += [
                nn.Conv2d(prev, channels, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(channels, affine=False),
                nn.ReLU(),
            ]
            prev = channels
        layers += [nn.AdaptiveMaxPool2d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Linear(prev, cfg.hidden_dim, bias=False),
            nn.BatchNorm1d(cfg.hidden_dim, affine=False),
            nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.embedding_dim, bias=False),
        )

    def forward(self, x):
        """Map (batch, frames, bins) to (batch, D)."""
        return self.head(self.features(x.unsqueeze(1)))


class EmbeddingModel(nn.Module):
    """Spectrum branch and spectrogram branch, one half of the embedding each."""

    def __init__(self, cfg):
        """Create both branches."""
        super().__init__()
        self.cfg = cfg
        self.spectrum_branch = SpectrumBranch(cfg)
        self.spectrogram_branch = SpectrogramBranch(cfg)

    def check_shapes(self, spectrum, spectrogram):
        """Raise if the inputs do not match the configured feature sizes."""
        cfg = self.cfg
        if tuple(spectrum.shape[1:]) != (cfg.spectrum_bins,):
            raise DataError(f"Spectrum shape {tuple(spectrum.shape)} != (*, {cfg.spectrum_bins})")
        expected = (cfg.spectrogram_frames, cfg.frequency_bins)
        if tuple(spectrogram.shape[1:]) != expected:
            raise DataError(f"Spectrogram shape {tuple(spectrogram.shape)} != (*, {expected})")

    def forward(self, spectrum, spectrogram):
        """Return both embedding halves for a batch."""
        self.check_shapes(spectrum, spectrogram)
        return self.spectrum_branch(spectrum), self.spectrogram_branch(spectrogram)


def init_model(cfg):
    """Create a model whose parameters depend only on ``cfg.seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return EmbeddingModel(cfg)


def as_batch(features):
    """Stack a FeatureBundle (single clip or batch) into float tensors with a batch axis."""
    spectrum = torch.as_tensor(np.asarray(features.spectrum), dtype=torch.float32)
    spectrogram = torch.as_tensor(np.asarray(features.spectrogram), dtype=torch.float32)
    if spectrum.dim() == 1:
        spectrum, spectrogram = spectrum.unsqueeze(0), spectrogram.unsqueeze(0)
    return spectrum, spectrogram


def embed(model, features, metas=None):
    """Embed one clip or a batch of clips with the frozen model."""
    model.eval()
    spectrum, spectrogram = as_batch(features)
    with torch.no_grad():
        half1, half2 = model(spectrum, spectrogram)
    half1, half2 = half1.numpy(), half2.numpy()
    metas = metas if metas is not None else [None] * len(half1)
    return [EmbeddingRecord(h1, h2, meta) for h1, h2, meta in zip(half1, half2, metas)]


def forward_train(model, paired, ssl_path=True):
    """Embed the regular (mixup) path and the SSL (mixup, StatEx, FeatEx) path.

    With ``ssl_path=False`` the second pass is skipped and None is returned for it.
    """
    spectrum = torch.as_tensor(paired.spectrum, dtype=torch.float32)
    half1, half2 = model(spectrum, torch.as_tensor(paired.spectrogram, dtype=torch.float32))
    regular = torch.cat([half1, half2], dim=-1)
    if not ssl_path:
        return regular, None
    spectrogram_ssl = torch.as_tensor(paired.spectrogram_ssl, dtype=torch.float32)
    ssl_half1, ssl_half2 = model(spectrum, spectrogram_ssl)
    ssl = featex_batch(ssl_half1, ssl_half2, paired.featex_partner, paired.applied_featex)
    return regular, ssl
