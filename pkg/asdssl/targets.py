"""Build targets of an experiment matrix: corpus, trainings, score files and the report."""

import logging
import os.path
from dataclasses import asdict

from . import dataio, evaluation, resolver, train
from .backend import read_scores
from .utils import ensure_dir, hash_dict, write_json

logger = logging.getLogger(__name__)


class CorpusTarget(resolver.Target):
    """Generate the synthetic corpus the matrix trains on."""

    def __init__(self, runner, synth_cfg, out_dir):
        """Create a new corpus target."""
        resolver.Target.__init__(self, runner)
        self.synth_cfg = synth_cfg
        self.out_dir = out_dir

    @property
    def fingerprint(self):
        """Hash of the synthetic corpus parameters."""
        return hash_dict(asdict(self.synth_cfg))

    def build(self):
        """Render all clips and the manifest."""
        logger.info("Generating the synthetic corpus in %s", self.out_dir)
        dataio.generate_synthetic_corpus(self.synth_cfg, self.out_dir)


class TrainTarget(resolver.Target):
    """Train one preset for one trial."""

    def __init__(self, runner, preset, trial):
        """Create a new training target."""
        resolver.Target.__init__(self, runner)
        self.preset = preset
        self.trial = trial
        self.run = runner.run_config(preset, trial)
        self.out_dir = os.path.join(runner.out_dir, preset, f"trial-{trial}")

    def dependencies(self):
        """Return dependencies for this build target."""
        corpus = self.runner.corpus_target()
        return [corpus] if corpus else []

    @property
    def fingerprint(self):
        """Hash of the run config and of the corpus it trains on."""
        return hash_dict({"run": self.run.fingerprint, "corpus": self.runner.corpus_fingerprint()})

    def build(self):
        """Train and store checkpoint, log and config echo."""
        logger.info("Training %s trial %d in %s", self.preset, self.trial, self.out_dir)
        ensure_dir(self.out_dir)
        write_json(os.path.join(self.out_dir, "config.json"), self.run.raw)
        train.train(self.run, self.runner.data_root, self.out_dir)

    def __repr__(self):
        """Return a string representation of this target."""
        return f"{self.__class__.__name__}({self.preset}, {self.trial})"


class ScoreTarget(resolver.Target):
    """Score the test clips with one trained model."""

    fingerprint_file = ".asd-score-hash"

    def __init__(self, runner, preset, trial):
        """Create a new score target."""
        resolver.Target.__init__(self, runner)
        self.training = TrainTarget(runner, preset, trial)
        self.out_dir = self.training.out_dir

    def dependencies(self):
        """Return dependencies for this build target."""
        return [self.training]

    @property
    def fingerprint(self):
        """Scores only depend on the trained model."""
        return self.training.fingerprint

    @property
    def scores_path(self):
        """Location of the score file."""
        return os.path.join(self.out_dir, "scores.csv")

    def build(self):
        """Fit the backend and score every test clip."""
        result = train.load_checkpoint(os.path.join(self.out_dir, "model.pt"))
        train.score_corpus(result, self.runner.data_root, self.scores_path)

    def __repr__(self):
        """Return a string representation of this target."""
        return f"{self.__class__.__name__}({self.training.preset}, {self.training.trial})"


class ReportTarget(resolver.Target):
    """Evaluate every score file and render the comparison table."""

    def __init__(self, runner, presets, trials):
        """Create a new report target."""
        resolver.Target.__init__(self, runner)
        self.scores = {
            preset: [ScoreTarget(runner, preset, trial) for trial in range(trials)]
            for preset in presets
        }

    def dependencies(self):
        """Return dependencies for this build target."""
        return [target for targets in self.scores.values() for target in targets]

    def build(self):
        """Aggregate the trials of every preset into mean and standard deviation."""
        data = self.runner.config.config["data"]
        max_fpr = self.runner.config.config["eval"]["max_fpr"]
        cells = {}
        for preset, targets in self.scores.items():
            reports = [
                evaluation.evaluate(
                    read_scores(t.scores_path),
                    data["dataset"],
                    data["split"],
                    max_fpr,
                    {
                        "preset": preset,
                        "trial": t.training.trial,
                        "seed": t.training.run.seed,
                        "config_fingerprint": t.training.run.fingerprint,
                    },
                )
                for t in targets
            ]
            cells[preset] = evaluation.aggregate_trials(reports)
        evaluation.write_report(cells, self.runner.out_dir)
        logger.info("Wrote the report to %s", self.runner.out_dir)
        print(evaluation.render_table(cells))
