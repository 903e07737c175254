"""Training loop, checkpoints and scoring of a corpus with a trained model."""

from __future__ import annotations

import json
import logging
import os.path
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import dataio
from .augment import SslConfig, compose_ssl_batch
from .backend import ScoreRecord, anomaly_score, fit_backend, write_scores
from .config import PRESETS
from .errors import ConfigError, DataError, NumericError
from .features import FeatureBundle, FeatureConfig, bundle_from_clip, compute_clip_features
from .losses import AdaCosHead, HeadConfig, loss_terms
from .model import ModelConfig, embed, forward_train, init_model
from .utils import ensure_dir, hash_dict, seed_everything

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    """Everything a training run depends on, resolved from a config dict."""

    preset: str
    seed: int
    data: dict
    features: FeatureConfig
    ssl: SslConfig
    model: dict
    heads: dict
    epochs: int
    batch_size: int
    optimizer: str
    learning_rate: float
    backend: dict
    eval: dict
    raw: dict

    @classmethod
    def from_dict(cls, config, seed=None):
        """Build a run from a resolved config (see ``config.Config``).

        Raises:
            ConfigError: For unknown presets, missing or unknown keys and values of the
                wrong type.
        """
        config = json.loads(json.dumps(config))
        if seed is not None:
            config["seed"] = seed
        if config.get("seed") is None:
            config["seed"] = 0
        try:
            run = cls.from_checked_dict(config)
            run.model_config()
            int(run.backend["k"])
        except ConfigError:
            raise
        except KeyError as exc:
            raise ConfigError(f"Missing configuration key {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid configuration: {exc}") from exc
        return run

    @classmethod
    def from_checked_dict(cls, config):
        """Build a run; raw ``KeyError``, ``TypeError`` and ``ValueError`` pass through."""
        if config["preset"] not in PRESETS:
            raise ConfigError(f"Unknown preset {config['preset']!r}")
        train = config["train"]
        if train["optimizer"] != "adam":
            raise ConfigError(f"Unsupported optimizer {train['optimizer']!r}")
        if int(train["epochs"]) < 1 or int(train["batch_size"]) < 2:
            raise ConfigError("Training needs at least one epoch and batches of two clips")
        if not (config["heads"]["regular"] or config["heads"]["ssl"]):
            raise ConfigError("At least one of the regular and the SSL head must be enabled")
        return cls(
            preset=config["preset"],
            seed=int(config["seed"]),
            data=config["data"],
            features=FeatureConfig(**config["features"]),
            ssl=SslConfig(**config["ssl"], seed=int(config["seed"])),
            model=config["model"],
            heads=config["heads"],
            epochs=int(train["epochs"]),
            batch_size=int(train["batch_size"]),
            optimizer=train["optimizer"],
            learning_rate=float(train["learning_rate"]),
            backend=config["backend"],
            eval=config["eval"],
            raw=config,
        )

    @property
    def fingerprint(self):
        """Hash of the resolved config including the seed."""
        return hash_dict(self.raw)

    def model_config(self):
        """Model sizes matching the feature configuration."""
        m = self.model
        return ModelConfig(
            embedding_dim=int(m["embedding_dim"]),
            spectrum_bins=self.features.spectrum_bins,
            spectrogram_frames=self.features.spectrogram_frames,
            frequency_bins=self.features.frequency_bins,
            spectrum_channels=tuple(m["spectrum_channels"]),
            spectrogram_channels=tuple(m["spectrogram_channels"]),
            hidden_dim=int(m["hidden_dim"]),
            use_bias=bool(m["use_bias"]),
            seed=self.seed,
        )

    def head_configs(self, n_classes):
        """Configs of the regular head (N classes) and the SSL head, None where disabled."""
        h = self.heads
        common = {
            "n_subclusters": int(h["n_subclusters"]),
            "scale_mode": h["scale_mode"],
            "fixed_scale": float(h["fixed_scale"]),
            "embedding_dim": 2 * int(self.model["embedding_dim"]),
        }
        regular = None
        if h["regular"]:
            regular = HeadConfig(n_classes, centers_trainable=False, seed=self.seed + 1, **common)
        ssl = None
        if h["ssl"]:
            blocks = self.ssl.label_multiplier
            with_classes = self.ssl.use_class_labels_in_ssl
            if h["ssl_frozen_blocks"] not in ("none", "original"):
                raise ConfigError(f"Unknown ssl_frozen_blocks {h['ssl_frozen_blocks']!r}")
            frozen = int(h["ssl_frozen_blocks"] == "original")
            ssl = HeadConfig(
                blocks * n_classes if with_classes else blocks,
                centers_trainable=bool(h["ssl_centers_trainable"]),
                frozen_blocks=frozen,
                block_size=n_classes if with_classes else 1,
                seed=self.seed + 2,
                **common,
            )
        return {"regular": regular, "ssl": ssl}


def build_heads(run, n_classes):
    """Instantiate the configured heads."""
    return {
        name: AdaCosHead(cfg) if cfg is not None else None
        for name, cfg in run.head_configs(n_classes).items()
    }


def load_clips(root, metas, feature_cfg):
    """Compute the uncropped features of every clip."""
    return [compute_clip_features(os.path.join(root, m.clip_path), feature_cfg) for m in metas]


def stack_bundles(bundles):
    """Stack FeatureBundles into one batched FeatureBundle."""
    return FeatureBundle(
        np.stack([b.spectrum for b in bundles]), np.stack([b.spectrogram for b in bundles])
    )


@dataclass
class TrainResult:
    """Trained model and everything needed to save or score with it."""

    run: RunConfig
    model: torch.nn.Module
    heads: dict
    label_space: dataio.LabelSpace
    log: list


def train(run, data_root, out_dir=None):
    """Train a model on the training clips of a corpus.

    Writes ``model.pt`` and ``train_log.jsonl`` to ``out_dir`` when given.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    rng = seed_everything(run.seed)
    metas = [m for m in dataio.load_corpus(data_root, run.data["layout"]) if m.split == "train"]
    if len(metas) < 2:
        raise DataError(f"Training needs at least two training clips, {data_root} has {len(metas)}")
    space = dataio.build_label_space(metas)
    labels = np.stack([dataio.one_hot(m, space) for m in metas])
    clips = load_clips(data_root, metas, run.features)
    logger.info("Training %s on %d clips, %d classes", run.preset, len(clips), space.n)

    model = init_model(run.model_config())
    heads = build_heads(run, space.n)
    active = {name: head for name, head in heads.items() if head is not None}
    params = list(model.parameters())
    for head in active.values():
        params += [p for p in head.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=run.learning_rate)
    crop_cfg = replace(run.features, crop_mode="random")

    model.train()
    for head in active.values():
        head.train()
    log = []
    for epoch in range(1, run.epochs + 1):
        started = time.monotonic()
        sums = {name: 0.0 for name in active}
        steps = 0
        order = rng.permutation(len(clips))
        for start in range(0, len(order), run.batch_size):
            idx = order[start : start + run.batch_size]
            if len(idx) < 2:
                continue
            batch = stack_bundles([bundle_from_clip(clips[i], crop_cfg, rng) for i in idx])
            paired = compose_ssl_batch(batch, labels[idx], run.ssl, rng)
            emb_reg, emb_ssl = forward_train(model, paired, ssl_path="ssl" in active)
            terms = loss_terms(emb_reg, paired.y_regular, emb_ssl, paired.y_ssl, heads)
            loss = sum(terms.values())
            if not torch.isfinite(loss):
                parts = ", ".join(f"{k}={v.item()}" for k, v in terms.items())
                raise NumericError(f"Non-finite loss in epoch {epoch}, step {steps}: {parts}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for head in active.values():
                head.bank.renormalize()
            for name, value in terms.items():
                sums[name] += value.item()
            steps += 1
        record = {
            "epoch": epoch,
            "loss_regular": sums["regular"] / steps if "regular" in sums else None,
            "loss_ssl": sums["ssl"] / steps if "ssl" in sums else None,
            "scale_regular": heads["regular"].scale.item() if heads["regular"] else None,
            "scale_ssl": heads["ssl"].scale.item() if heads["ssl"] else None,
            "wall_time": time.monotonic() - started,
        }
        record["loss"] = sum(v for k, v in record.items() if k.startswith("loss_") and v)
        log.append(record)
        logger.info("Epoch %d: loss %.4f", epoch, record["loss"])

    result = TrainResult(run, model, heads, space, log)
    if out_dir:
        ensure_dir(out_dir)
        save_checkpoint(result, os.path.join(out_dir, "model.pt"))
        with open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8") as f:
            for record in log:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    return result


def save_checkpoint(result, path):
    """Store config echo, parameters of model and heads, and the label space."""
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": result.run.raw,
            "fingerprint": result.run.fingerprint,
            "label_space": list(result.label_space.classes),
            "label_space_fingerprint": hash_dict({"classes": result.label_space.classes}),
            "model": result.model.state_dict(),
            "heads": {
                name: head.state_dict() for name, head in result.heads.items() if head is not None
            },
        },
        path,
    )


def load_checkpoint(path):
    """Restore a TrainResult (without log) from ``save_checkpoint`` output."""
    if not os.path.exists(path):
        raise DataError(f"Checkpoint does not exist: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"Unsupported checkpoint version {state.get('version')} in {path}")
    run = RunConfig.from_dict(state["config"])
    space = dataio.LabelSpace(list(state["label_space"]))
    model = init_model(run.model_config())
    model.load_state_dict(state["model"])
    heads = build_heads(run, space.n)
    for name, head_state in state["heads"].items():
        heads[name].load_state_dict(head_state)
    model.eval()
    return TrainResult(run, model, heads, space, [])


def embed_clips(model, data_root, metas, feature_cfg, batch_size=64):
    """Center-crop embeddings of clips, one EmbeddingRecord per meta."""
    cfg = replace(feature_cfg, crop_mode="center")
    records = []
    for start in range(0, len(metas), batch_size):
        chunk = metas[start : start + batch_size]
        clips = load_clips(data_root, chunk, cfg)
        batch = stack_bundles([bundle_from_clip(c, cfg) for c in clips])
        records += embed(model, batch, chunk)
    return records


def score_corpus(result, data_root, out_path=None, k=None, permissive=None):
    """Fit the backend on training embeddings and score every test clip."""
    run = result.run
    k = int(run.backend["k"] if k is None else k)
    permissive = bool(run.backend["permissive"] if permissive is None else permissive)
    metas = dataio.load_corpus(data_root, run.data["layout"])
    train_metas = [m for m in metas if m.split == "train"]
    backend = fit_backend(
        embed_clips(result.model, data_root, train_metas, run.features), k, run.seed, permissive
    )

    test_metas = []
    for meta in (m for m in metas if m.split == "test"):
        if meta.machine_key not in backend:
            logger.warning("Skipping %s: machine %s is unknown", meta.clip_path, meta.machine_key)
            continue
        test_metas.append(meta)
    scores = [
        ScoreRecord(
            r.meta.clip_path,
            r.meta.machine_type,
            r.meta.machine_id,
            r.meta.domain,
            r.meta.condition,
            anomaly_score(backend, r),
        )
        for r in embed_clips(result.model, data_root, test_metas, run.features)
    ]
    if out_path:
        write_scores(scores, out_path)
    return scores
