"""Tests for training runs, checkpoints and scoring."""

import json
import math
import os.path
import shutil

import numpy as np
import pytest
import torch

from asdssl import augment, backend, dataio, evaluation, features, train
from asdssl.config import PRESETS, Config
from asdssl.errors import ConfigError, DataError
from asdssl.losses import loss_terms
from asdssl.model import forward_train, init_model

# The small corpus: 2 machines with one attribute value per domain, 8 test clips each.
N_CLASSES = 4
N_TEST_CLIPS = 16


def small_run(config_path, preset="proposed", seed=0, **overrides):
    """Resolve the shrunken config for a preset."""
    config = Config(config_path, {"preset": preset, **overrides}).config
    return train.RunConfig.from_dict(config, seed=seed)


class RunConfigTest:
    """Test resolving runs from configs."""

    @staticmethod
    @pytest.mark.parametrize(
        "preset,regular,ssl",
        [
            ("baseline", N_CLASSES, None),
            ("statex", None, 3 * N_CLASSES),
            ("featex", None, 3 * N_CLASSES),
            ("regular-statex", N_CLASSES, 3 * N_CLASSES),
            ("regular-featex", N_CLASSES, 3 * N_CLASSES),
            ("proposed", N_CLASSES, 9 * N_CLASSES),
            ("ablation-no-class-labels", N_CLASSES, 9),
            ("ablation-frozen-centers", N_CLASSES, 9 * N_CLASSES),
            ("ablation-no-tmn-full-statex", N_CLASSES, 9 * N_CLASSES),
        ],
    )
    def test_head_dimensions(preset, regular, ssl):
        """Presets give N regular classes, 3N with one transform and 9N with both."""
        run = train.RunConfig.from_dict(Config(None, {"preset": preset}).config)
        heads = run.head_configs(N_CLASSES)
        assert (heads["regular"].n_classes if heads["regular"] else None) == regular
        assert (heads["ssl"].n_classes if heads["ssl"] else None) == ssl
        for head in heads.values():
            if head is not None:
                assert head.embedding_dim == 2 * run.model["embedding_dim"]

    @staticmethod
    def test_center_trainability():
        """Regular centers are fixed; SSL centers train unless the ablation freezes them."""
        heads = train.RunConfig.from_dict(Config().config).head_configs(N_CLASSES)
        assert not heads["regular"].centers_trainable
        assert heads["ssl"].centers_trainable
        frozen = Config(None, {"preset": "ablation-frozen-centers"}).config
        ssl = train.RunConfig.from_dict(frozen).head_configs(N_CLASSES)["ssl"]
        assert not ssl.centers_trainable

    @staticmethod
    def test_frozen_original_block():
        """The alternative frozen-centers reading freezes the first block of N classes."""
        config = Config(None, {"heads.ssl_frozen_blocks": "original"}).config
        ssl = train.RunConfig.from_dict(config).head_configs(N_CLASSES)["ssl"]
        assert (ssl.frozen_blocks, ssl.block_size) == (1, N_CLASSES)
        config = Config(None, {"heads.ssl_frozen_blocks": "some"}).config
        with pytest.raises(ConfigError):
            train.RunConfig.from_dict(config).head_configs(N_CLASSES)

    @staticmethod
    def test_seed_changes_fingerprint():
        """The seed is part of the run identity."""
        config = Config().config
        a = train.RunConfig.from_dict(config, seed=1)
        b = train.RunConfig.from_dict(config, seed=2)
        assert a.fingerprint != b.fingerprint
        assert a.fingerprint == train.RunConfig.from_dict(config, seed=1).fingerprint
        assert train.RunConfig.from_dict(config).seed == 0

    @staticmethod
    @pytest.mark.parametrize(
        "overrides",
        [
            {"train.optimizer": "sgd"},
            {"train.epochs": 0},
            {"train.batch_size": 1},
            {"heads.regular": False, "heads.ssl": False},
            {"ssl.bogus": 1},
            {"train.epochs": "x"},
            {"model.embedding_dim": "wide"},
            {"backend.k": [2]},
        ],
    )
    def test_invalid(overrides):
        """Unsupported optimizers, empty runs, runs without heads and bad values are rejected."""
        with pytest.raises(ConfigError):
            train.RunConfig.from_dict(Config(None, overrides).config)

    @staticmethod
    def test_missing_section():
        """A config without a train section is a usage error, not a KeyError."""
        config = Config().config
        del config["train"]
        with pytest.raises(ConfigError, match="Missing configuration key 'train'"):
            train.RunConfig.from_dict(config)


def test_loss_at_initialization(small_corpus, small_config_path):
    """Untrained models start near ln(number of classes)."""
    metas = [m for m in dataio.load_corpus(small_corpus) if m.split == "train"]
    space = dataio.build_label_space(metas)
    assert space.n == N_CLASSES
    labels = np.stack([dataio.one_hot(m, space) for m in metas])
    losses = []
    for seed in range(5):
        run = small_run(small_config_path, "baseline", seed=seed)
        clips = train.load_clips(small_corpus, metas, run.features)
        batch = train.stack_bundles([features.bundle_from_clip(c, run.features) for c in clips])
        paired = augment.compose_ssl_batch(batch, labels, run.ssl, np.random.default_rng(seed))
        model = init_model(run.model_config())
        heads = train.build_heads(run, space.n)
        heads["regular"].eval()
        with torch.no_grad():
            emb_reg, _ = forward_train(model, paired, ssl_path=False)
            losses.append(loss_terms(emb_reg, paired.y_regular, None, None, heads)["regular"])
    assert np.mean([v.item() for v in losses]) == pytest.approx(math.log(N_CLASSES), rel=0.2)


class TrainTest:
    """Test end-to-end training on the small synthetic corpus."""

    @staticmethod
    def test_outputs(small_corpus, small_config_path, temp_dir):
        """A run writes a checkpoint and one log record per epoch."""
        run = small_run(small_config_path, "proposed", **{"train.epochs": 2})
        result = train.train(run, small_corpus, temp_dir)
        assert os.path.exists(os.path.join(temp_dir, "model.pt"))
        with open(os.path.join(temp_dir, "train_log.jsonl"), encoding="utf-8") as f:
            log = [json.loads(line) for line in f]
        assert log == result.log
        assert [r["epoch"] for r in log] == [1, 2]
        for record in log:
            assert math.isfinite(record["loss"])
            assert record["loss"] == pytest.approx(record["loss_regular"] + record["loss_ssl"])
            assert 1.0 <= record["scale_ssl"] <= 64.0

    @staticmethod
    def test_deterministic(small_corpus, small_config_path):
        """The same seed gives bitwise identical parameters."""
        run = small_run(small_config_path, "proposed")
        a = train.train(run, small_corpus)
        b = train.train(run, small_corpus)
        state_a, state_b = a.model.state_dict(), b.model.state_dict()
        assert state_a.keys() == state_b.keys()
        for key, value in state_a.items():
            assert torch.equal(value, state_b[key]), key
        assert torch.equal(a.heads["ssl"].bank.centers, b.heads["ssl"].bank.centers)
        assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]

    @staticmethod
    def test_regular_centers_stay_fixed(small_corpus, small_config_path):
        """Only trainable centers move, and they stay on the unit sphere."""
        run = small_run(small_config_path, "proposed")
        fresh = train.build_heads(run, N_CLASSES)
        result = train.train(run, small_corpus)
        assert torch.equal(result.heads["regular"].bank.centers, fresh["regular"].bank.centers)
        centers = result.heads["ssl"].bank.centers.detach()
        assert not torch.equal(centers, fresh["ssl"].bank.centers)
        np.testing.assert_allclose(centers.norm(dim=1).numpy(), 1.0, rtol=1e-5)

    @staticmethod
    def test_too_few_training_clips(small_corpus, small_config_path, temp_dir):
        """A corpus with a single training clip cannot fill a batch."""
        metas = dataio.load_corpus(small_corpus)
        first = next(m for m in metas if m.split == "train")
        kept = [first] + [m for m in metas if m.split == "test"]
        dataio.write_manifest(kept, os.path.join(temp_dir, "manifest.csv"))
        with pytest.raises(DataError, match="at least two training clips"):
            train.train(small_run(small_config_path, "baseline"), temp_dir)

    @staticmethod
    @pytest.mark.parametrize(
        "preset",
        ["ablation-no-class-labels", "ablation-frozen-centers", "ablation-no-tmn-full-statex"],
    )
    def test_ablations(preset, small_corpus, small_config_path, temp_dir):
        """Every ablation trains, scores and evaluates end to end."""
        result = train.train(small_run(small_config_path, preset), small_corpus)
        scores = train.score_corpus(result, small_corpus, os.path.join(temp_dir, "scores.csv"))
        report = evaluation.evaluate(scores)
        assert ("mixed", "auc") in report.cells
        assert all(0.0 <= v <= 1.0 for v in report.cells.values())


class CheckpointTest:
    """Test saving, loading and scoring with checkpoints."""

    @staticmethod
    def test_load_and_score(small_corpus, small_config_path, temp_dir):
        """A loaded checkpoint scores exactly like the trained model."""
        run = small_run(small_config_path, "proposed")
        result = train.train(run, small_corpus, temp_dir)
        direct = train.score_corpus(result, small_corpus)
        loaded = train.load_checkpoint(os.path.join(temp_dir, "model.pt"))
        assert loaded.run.fingerprint == run.fingerprint
        assert loaded.label_space.classes == result.label_space.classes
        path = os.path.join(temp_dir, "scores.csv")
        scores = train.score_corpus(loaded, small_corpus, path)
        assert len(scores) == N_TEST_CLIPS
        assert scores == direct
        assert train.score_corpus(loaded, small_corpus) == scores
        assert all(0.0 <= r.score <= 2.0 for r in scores)

    @staticmethod
    def test_missing_or_foreign_checkpoint(temp_dir):
        """Missing files and unknown versions are data errors."""
        with pytest.raises(DataError, match="does not exist"):
            train.load_checkpoint(os.path.join(temp_dir, "model.pt"))
        path = os.path.join(temp_dir, "old.pt")
        torch.save({"version": 0}, path)
        with pytest.raises(DataError, match="version"):
            train.load_checkpoint(path)

    @staticmethod
    def test_unknown_machines_are_skipped(small_corpus, small_config_path, temp_dir, caplog):
        """Test clips of machines without training clips are skipped with a warning."""
        result = train.train(small_run(small_config_path, "baseline"), small_corpus)
        corpus = os.path.join(temp_dir, "corpus")
        metas = dataio.load_corpus(small_corpus)
        kept = [m for m in metas if not (m.machine_type == "synth01" and m.split == "train")]
        for meta in kept:
            src = os.path.join(small_corpus, meta.clip_path)
            dst = os.path.join(corpus, meta.clip_path)
            os.makedirs(os.path.dirname(dst), exist_ok=True)
            shutil.copyfile(src, dst)
        dataio.write_manifest(kept, os.path.join(corpus, "manifest.csv"))
        scores = train.score_corpus(result, corpus)
        assert {r.machine_type for r in scores} == {"synth00"}
        assert "synth01/section_00 is unknown" in caplog.text


@pytest.mark.slow
def test_full_synthetic_run(temp_dir):
    """Full-size corpus: the proposed system detects anomalies and keeps up with the baseline."""
    corpus = os.path.join(temp_dir, "corpus")
    dataio.generate_synthetic_corpus(dataio.SynthConfig(seed=0), corpus)
    mixed = {}
    for preset in ("baseline", "proposed"):
        assert preset in PRESETS
        config = Config(None, {"preset": preset}).config
        aucs = []
        for seed in range(3):
            result = train.train(train.RunConfig.from_dict(config, seed=seed), corpus)
            smoothed = np.convolve([r["loss"] for r in result.log], np.ones(5) / 5, "valid")
            assert smoothed[-1] < smoothed[0]
            scores = train.score_corpus(result, corpus)
            report = evaluation.evaluate(scores)
            aucs.append(report.cells[("mixed", "auc")])
        mixed[preset] = np.mean(aucs)
    assert mixed["proposed"] >= 0.85
    assert mixed["proposed"] >= mixed["baseline"] - 0.02

    # Training clips of the source domain sit closer to the references than anomalies.
    run = result.run
    metas = [m for m in dataio.load_corpus(corpus) if m.split == "train" and m.domain == "source"]
    embeddings = train.embed_clips(result.model, corpus, metas, run.features)
    reference = backend.fit_backend(embeddings, run.backend["k"], run.seed)
    train_mean = np.mean([backend.anomaly_score(reference, e) for e in embeddings])
    anomaly_mean = np.mean([r.score for r in scores if r.condition == "anomaly"])
    assert train_mean < anomaly_mean
