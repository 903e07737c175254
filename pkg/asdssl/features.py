"""Full-clip magnitude spectrum and temporal-mean-normalized magnitude spectrogram."""

from __future__ import annotations

import hashlib
import os.path
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, signal

from .dataio import load_waveform
from .errors import ConfigError, DataError, NumericError
from .utils import ensure_dir, hash_dict

CACHE_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    """Parameters of both input representations."""

    sample_rate: int = 16000
    stft_window: int = 1024
    stft_hop: int = 512
    window_fn: str = "hann"
    spectrogram_frames: int = 48
    spectrum_bins: int = 4096
    crop_mode: str = "center"
    temporal_mean_normalization: bool = True
    cache_dir: str | None = None

    def __post_init__(self):
        """Validate the STFT geometry."""
        if self.stft_hop < 1 or self.stft_hop > self.stft_window:
            raise ConfigError("stft_hop must be in [1, stft_window]")
        if self.spectrogram_frames < 2:
            raise ConfigError("spectrogram_frames must be at least 2")
        if self.spectrum_bins < 2:
            raise ConfigError("spectrum_bins must be at least 2")
        if self.window_fn != "hann":
            raise ConfigError(f"Unsupported window function {self.window_fn!r}")
        if self.crop_mode not in ("random", "center"):
            raise ConfigError(f"Unknown crop mode {self.crop_mode!r}")

    @property
    def frequency_bins(self):
        """Number of STFT bins per frame."""
        return self.stft_window // 2 + 1

    @property
    def fingerprint(self):
        """Hash of everything that changes the extracted features."""
        d = asdict(self)
        del d["cache_dir"], d["crop_mode"]
        return hash_dict(d)


@dataclass
class FeatureBundle:
    """The two per-clip input representations."""

    spectrum: np.ndarray
    spectrogram: np.ndarray


@dataclass
class ClipFeatures:
    """Uncropped features of one clip, cropped into bundles on demand."""

    spectrum: np.ndarray
    frames: np.ndarray


def check_waveform(waveform, min_length):
    """Reject waveforms that are too short or contain non-finite samples."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise DataError("Expected a mono waveform")
    if len(waveform) < min_length:
        raise DataError(f"Waveform too short: {len(waveform)} < {min_length} samples")
    if not np.all(np.isfinite(waveform)):
        raise NumericError("Waveform contains non-finite samples")
    return waveform


def frame_magnitudes(waveform, cfg):
    """Magnitude STFT of all complete frames, shape (frames, stft_window // 2 + 1)."""
    waveform = check_waveform(waveform, cfg.stft_window)
    window = signal.get_window(cfg.window_fn, cfg.stft_window)
    frames = sliding_window_view(waveform, cfg.stft_window)[:: cfg.stft_hop]
    return np.abs(fft.rfft(frames * window, axis=-1))


def crop_frames(frames, n_frames, crop_mode="center", rng=None):
    """Crop (or zero-pad at the end) a spectrogram to exactly ``n_frames`` frames."""
    available = frames.shape[0]
    if available < n_frames:
        pad = np.zeros((n_frames - available, frames.shape[1]), dtype=frames.dtype)
        return np.concatenate([frames, pad], axis=0)
    if crop_mode == "random":
        if rng is None:
            raise ConfigError("Random cropping needs a random generator")
        start = int(rng.integers(0, available - n_frames + 1))
    else:
        start = (available - n_frames) // 2
    return frames[start : start + n_frames]


def stft_magnitude(waveform, cfg, rng=None):
    """Magnitude spectrogram with exactly ``cfg.spectrogram_frames`` frames."""
    frames = frame_magnitudes(waveform, cfg)
    return crop_frames(frames, cfg.spectrogram_frames, cfg.crop_mode, rng)


def temporal_mean_normalize(spec):
    """Subtract the temporal mean of every frequency bin."""
    spec = np.asarray(spec)
    return spec - spec.mean(axis=-2, keepdims=True)


def full_spectrum(waveform, cfg):
    """Magnitude DFT of the whole windowed clip, truncated to ``cfg.spectrum_bins`` bins."""
    waveform = check_waveform(waveform, 2 * cfg.spectrum_bins - 2)
    window = signal.get_window(cfg.window_fn, len(waveform))
    return np.abs(fft.rfft(waveform * window))[: cfg.spectrum_bins]


def bundle_from_clip(clip, cfg, rng=None):
    """Crop the spectrogram of precomputed clip features into a FeatureBundle."""
    spectrogram = crop_frames(clip.frames, cfg.spectrogram_frames, cfg.crop_mode, rng)
    if cfg.temporal_mean_normalization:
        spectrogram = temporal_mean_normalize(spectrogram)
    return FeatureBundle(clip.spectrum.astype(np.float32), spectrogram.astype(np.float32))


def extract_features(waveform, cfg, rng=None):
    """Compute the FeatureBundle of one waveform."""
    clip = ClipFeatures(full_spectrum(waveform, cfg), frame_magnitudes(waveform, cfg))
    return bundle_from_clip(clip, cfg, rng)


def cache_path(cfg, clip_path):
    """Cache file of one clip for one feature configuration."""
    key = hashlib.sha1(f"{cfg.fingerprint}:{clip_path}".encode("utf-8")).hexdigest()
    return os.path.join(cfg.cache_dir, key + ".npz")


def save_clip_features(path, clip):
    """Write a cache record: format version plus both arrays (shapes are implied)."""
    np.savez(path, version=np.array(CACHE_VERSION), spectrum=clip.spectrum, frames=clip.frames)


def load_clip_features(path):
    """Read a cache record, None if its version is outdated."""
    with np.load(path) as record:
        if int(record["version"]) != CACHE_VERSION:
            return None
        return ClipFeatures(record["spectrum"], record["frames"])


def compute_clip_features(path, cfg):
    """Read a clip and compute its uncropped features, using the cache if configured."""
    cached = cache_path(cfg, path) if cfg.cache_dir else None
    if cached and os.path.exists(cached):
        clip = load_clip_features(cached)
        if clip is not None:
            return clip
    waveform, sample_rate = load_waveform(path)
    if sample_rate != cfg.sample_rate:
        raise DataError(f"{path}: sample rate {sample_rate} != configured {cfg.sample_rate}")
    clip = ClipFeatures(
        full_spectrum(waveform, cfg).astype(np.float32),
        frame_magnitudes(waveform, cfg).astype(np.float32),
    )
    if cached:
        ensure_dir(cfg.cache_dir)
        save_clip_features(cached, clip)
    return clip
