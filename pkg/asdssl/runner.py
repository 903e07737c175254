"""CLI handling and top-level execution."""

import json
import logging
import os
import os.path
import sys
from argparse import ArgumentParser

from . import dataio, evaluation, resolver, train
from .backend import read_scores, write_scores
from .config import PRESETS, Config
from .errors import AsdError, ConfigError, DataError
from .targets import CorpusTarget, ReportTarget
from .utils import ensure_dir, hash_dict, resolve_seed, write_json

logger = logging.getLogger(__name__)

COMMANDS = ["synth", "train", "score", "evaluate", "ensemble", "run-matrix"]


def parse_assignment(text):
    """Parse ``section.key=value``; the value is JSON if it parses, else a string."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"Expected section.key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except ValueError:
        return key, value


def score_metadata(path):
    """Seed and config fingerprint from the config echo next to a score file, if any."""
    echo = os.path.join(os.path.dirname(os.path.abspath(path)), "config.json")
    if not os.path.exists(echo):
        return {}
    try:
        with open(echo, encoding="utf-8") as f:
            config = json.load(f)
    except ValueError as exc:
        raise DataError(f"Error while reading {echo}: {exc}") from exc
    return {"seed": config.get("seed"), "config_fingerprint": hash_dict(config)}


class CommandParser(ArgumentParser):
    """Parse the command line arguments."""

    def __init__(self):
        """Create a new parser instance."""
        defaults = {
            "ASD_OUT": "asd-out",
            "ASD_CONFIG": None,
            "ASD_CACHE_DIR": None,
        }
        for var in defaults:
            if var in os.environ:
                defaults[var] = os.environ[var]

        ArgumentParser.__init__(
            self,
            prog="asd",
            usage="%(prog)s command [options]",
            description="Self-supervised anomalous sound detection: train, score and evaluate.",
        )
        self.add_argument(
            "command",
            metavar="command",
            type=str,
            choices=COMMANDS,
            help="Command to run. Possible commands are: " + ", ".join(COMMANDS),
        )

        output_group = self.add_argument_group("Output options")
        output_group.add_argument(
            "-v",
            "--verbose",
            dest="verbose",
            action="store_true",
            help="Log progress (default: false)",
            default=False,
        )
        output_group.add_argument(
            "--debug",
            dest="debug",
            action="store_true",
            help="Enable debug logging (default: false)",
            default=False,
        )
        output_group.add_argument(
            "--out",
            dest="out",
            type=str,
            default=defaults["ASD_OUT"],
            help=f"Directory for all outputs. (default: {defaults['ASD_OUT']})",
        )

        actions_group = self.add_argument_group("Actions")
        actions_group.add_argument(
            "-r",
            "--rebuild",
            dest="rebuild",
            action="store_true",
            help="Rebuild all targets of run-matrix even if their outputs are up to date.",
        )
        actions_group.add_argument(
            "-n",
            "--dry-run",
            dest="dry_run",
            action="store_true",
            help="Show the list of targets that run-matrix would build and exit.",
        )

        run_group = self.add_argument_group("Run options")
        run_group.add_argument(
            "--config",
            dest="config",
            type=str,
            default=defaults["ASD_CONFIG"],
            help="Config file (.json, or .yaml with the yaml extra).",
        )
        run_group.add_argument(
            "--seed",
            dest="seed",
            type=int,
            default=None,
            help="Random seed. (default: config seed, else $ASD_SEED, else 0)",
        )
        run_group.add_argument(
            "--data",
            dest="data",
            type=str,
            default=None,
            help="Corpus directory (with manifest.csv or the DCASE layout).",
        )
        run_group.add_argument(
            "--preset",
            dest="preset",
            type=str,
            choices=list(PRESETS),
            default=None,
            help="System variant to train. (default: proposed)",
        )
        run_group.add_argument(
            "--presets",
            dest="presets",
            type=str,
            default="baseline,proposed",
            help="Comma separated presets for run-matrix. (default: baseline,proposed)",
        )
        run_group.add_argument(
            "--trials",
            dest="trials",
            type=int,
            default=None,
            help="Independent trials per preset for run-matrix. (default: 5)",
        )
        run_group.add_argument(
            "--machines",
            dest="machines",
            type=int,
            default=None,
            help="Number of pseudo-machines of a synthetic corpus. (default: 3)",
        )
        run_group.add_argument(
            "--checkpoint",
            dest="checkpoint",
            type=str,
            default=None,
            help="Checkpoint to score with. (default: [out]/model.pt)",
        )
        run_group.add_argument(
            "--scores",
            dest="scores",
            type=str,
            action="append",
            default=[],
            help="Score file to evaluate or ensemble. Repeat for several runs.",
        )
        run_group.add_argument(
            "--name",
            dest="name",
            type=str,
            default="system",
            help="System name in the evaluation report. (default: system)",
        )
        run_group.add_argument(
            "--set",
            dest="assignments",
            type=str,
            action="append",
            default=[],
            metavar="section.key=value",
            help="Override a config value, e.g. train.epochs=1. The value is parsed as JSON.",
        )
        self.cache_dir = defaults["ASD_CACHE_DIR"]

    def parse_args(self, args=None, namespace=None):
        """Parse the arguments."""
        options = ArgumentParser.parse_args(self, args, namespace)
        overrides = {
            "preset": options.preset,
            "seed": options.seed,
            "data.root": options.data,
            "synth.n_machines": options.machines,
            "eval.trials": options.trials,
            "features.cache_dir": self.cache_dir,
        }
        for assignment in options.assignments:
            key, value = parse_assignment(assignment)
            overrides[key] = value
        options.overrides = overrides
        options.presets = [p.strip() for p in options.presets.split(",") if p.strip()]
        return options


class Runner:
    """Coordinate the execution of commands."""

    def __init__(self, argv=None):
        """Create a new runner."""
        self.options = CommandParser().parse_args(argv)
        self.commands = {
            "synth": self.run_synth,
            "train": self.run_train,
            "score": self.run_score,
            "evaluate": self.run_evaluate,
            "ensemble": self.run_ensemble,
            "run-matrix": self.run_matrix,
        }
        self.config = None
        self._corpus_target = None

    @property
    def out_dir(self):
        """Directory for all outputs."""
        return self.options.out

    @property
    def data_root(self):
        """Corpus directory, given or generated by run-matrix."""
        root = self.config.config["data"]["root"]
        if root:
            return root
        if self.options.command == "run-matrix":
            return os.path.join(self.out_dir, "corpus")
        raise ConfigError(f"{self.options.command} needs a corpus, pass --data")

    def setup_logging(self):
        """Map the output options onto log levels."""
        level = logging.WARNING
        if self.options.verbose:
            level = logging.INFO
        if self.options.debug:
            level = logging.DEBUG
        logging.basicConfig(
            level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
        )

    def parse_config(self):
        """Read the config file, apply flags and resolve the seed."""
        self.config = Config(self.options.config, self.options.overrides)
        self.config.config["seed"] = resolve_seed(self.config.config["seed"])

    def echo_config(self):
        """Write the resolved config to the output directory."""
        ensure_dir(self.out_dir)
        write_json(os.path.join(self.out_dir, "config.json"), self.config.config)

    def run_config(self, preset=None, trial=0):
        """Resolved run for a preset, with the trial added to the seed."""
        if preset is None or preset == self.config.config["preset"]:
            config = self.config.config
        else:
            overrides = dict(self.options.overrides, preset=preset)
            config = Config(self.options.config, overrides).config
        return train.RunConfig.from_dict(config, seed=self.config.config["seed"] + trial)

    def synth_config(self):
        """Synthetic corpus parameters."""
        config = self.config.config
        try:
            return dataio.SynthConfig(**config["synth"], seed=config["seed"])
        except TypeError as exc:
            raise ConfigError(f"Invalid synth configuration: {exc}") from exc

    def corpus_target(self):
        """Target generating the synthetic corpus, None when --data is given."""
        if self.config.config["data"]["root"]:
            return None
        if self._corpus_target is None:
            self._corpus_target = CorpusTarget(self, self.synth_config(), self.data_root)
        return self._corpus_target

    def corpus_fingerprint(self):
        """Identity of the corpus: its synthesis parameters or its path."""
        corpus = self.corpus_target()
        return corpus.fingerprint if corpus else os.path.abspath(self.data_root)

    def run(self):
        """Execute the selected command."""
        self.setup_logging()
        self.parse_config()
        logger.debug("Running %s with seed %d", self.options.command, self.config.config["seed"])
        self.commands[self.options.command]()

    def run_synth(self):
        """Generate a synthetic corpus."""
        self.echo_config()
        dataio.generate_synthetic_corpus(self.synth_config(), self.out_dir)

    def run_train(self):
        """Train the configured preset."""
        self.echo_config()
        train.train(self.run_config(), self.data_root, self.out_dir)

    def run_score(self):
        """Score the test clips of a corpus with a trained model."""
        self.echo_config()
        checkpoint = self.options.checkpoint or os.path.join(self.out_dir, "model.pt")
        backend = self.config.config["backend"]
        train.score_corpus(
            train.load_checkpoint(checkpoint),
            self.data_root,
            os.path.join(self.out_dir, "scores.csv"),
            backend["k"],
            backend["permissive"],
        )

    def require_scores(self):
        """Score files passed with --scores."""
        if not self.options.scores:
            raise ConfigError(f"{self.options.command} needs at least one --scores file")
        return [read_scores(path) for path in self.options.scores]

    def run_evaluate(self):
        """Evaluate score files; several files are treated as independent trials."""
        self.echo_config()
        data = self.config.config["data"]
        max_fpr = self.config.config["eval"]["max_fpr"]
        reports = [
            evaluation.evaluate(
                records,
                data["dataset"],
                data["split"],
                max_fpr,
                {"scores": p, **score_metadata(p)},
            )
            for p, records in zip(self.options.scores, self.require_scores())
        ]
        cells = {self.options.name: evaluation.aggregate_trials(reports)}
        evaluation.write_report(cells, self.out_dir)
        print(evaluation.render_table(cells))

    def run_ensemble(self):
        """Average the scores of several runs."""
        self.echo_config()
        merged = evaluation.ensemble_scores(self.require_scores())
        write_scores(merged, os.path.join(self.out_dir, "scores.csv"))

    def run_matrix(self):
        """Train, score and evaluate presets over several trials."""
        unknown = [p for p in self.options.presets if p not in PRESETS]
        if unknown or not self.options.presets:
            raise ConfigError(f"Unknown presets: {', '.join(unknown) or '(none)'}")
        trials = int(self.config.config["eval"]["trials"])
        if trials < 1:
            raise ConfigError("run-matrix needs at least one trial")
        if not self.options.dry_run:
            self.echo_config()
        r = resolver.Resolver(self.options)
        r.resolve([ReportTarget(self, self.options.presets, trials)])
        r.execute()


def main(argv=None):
    """Entry point for the CLI."""
    try:
        Runner(argv).run()
    except AsdError as exc:
        message = " ".join(str(exc).split())
        print(f"asd: error: {exc.category}: {message}", file=sys.stderr)
        return exc.exit_code
    return 0
