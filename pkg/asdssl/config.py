"""Read run configuration files, merge defaults and resolve system presets."""

import collections
import json
import os.path
from copy import deepcopy
from functools import partial

from .errors import ConfigError
from .utils import hash_dict


def add_defaults(config, defaults):
    """Recursively merge defaults into a config dictionary."""
    queue = [(config, defaults)]

    while len(queue) > 0:
        c, d = queue.pop(0)
        for k in d.keys():
            if k in c:
                if isinstance(c[k], dict) and isinstance(d[k], dict):
                    queue.append((c[k], d[k]))
            else:
                c[k] = deepcopy(d[k])


parsers = {".json": partial(json.load, object_pairs_hook=collections.OrderedDict)}

# Optionally load support for yaml config files.
try:
    import ruamel.yaml

    yaml = ruamel.yaml.YAML(typ="safe", pure=True)
    parsers[".yaml"] = yaml.load
    parsers[".yml"] = yaml.load
except ImportError:
    pass


def get_parser(path):
    """Get a config file parser based on the file extension."""
    _, ext = os.path.splitext(str(path))
    if ext not in parsers:
        raise ConfigError(f"Unsupported config file type: {path}")
    return parsers[ext]


DEFAULTS = {
    "preset": "proposed",
    "seed": None,
    "data": {"root": None, "layout": "synthetic", "dataset": "synthetic", "split": "dev"},
    "synth": {
        "n_machines": 3,
        "clips_per_machine_source": 200,
        "clips_per_machine_target": 10,
        "clips_per_machine_test": 100,
        "clip_seconds": 2.0,
        "sample_rate": 16000,
        "anomaly_fraction_test": 0.5,
    },
    "features": {
        "sample_rate": 16000,
        "stft_window": 1024,
        "stft_hop": 512,
        "window_fn": "hann",
        "spectrogram_frames": 48,
        "spectrum_bins": 4096,
        "temporal_mean_normalization": True,
        "cache_dir": None,
    },
    "ssl": {
        "p_mixup": 0.5,
        "p_statex": 0.5,
        "p_featex": 0.5,
        "statex": True,
        "featex": True,
        "mixup_lambda_law": "uniform01",
        "statex_axis": "time",
        "use_class_labels_in_ssl": True,
    },
    "model": {
        "embedding_dim": 128,
        "spectrum_channels": [16, 32, 64],
        "spectrogram_channels": [16, 32, 32, 64],
        "hidden_dim": 128,
        "use_bias": False,
    },
    "heads": {
        "regular": True,
        "ssl": True,
        "n_subclusters": 16,
        "scale_mode": "adaptive",
        "fixed_scale": 16.0,
        "ssl_centers_trainable": True,
        "ssl_frozen_blocks": "none",
    },
    "train": {
        "epochs": 10,
        "batch_size": 64,
        "optimizer": "adam",
        "learning_rate": 1e-3,
    },
    "backend": {"k": 16, "permissive": True},
    "eval": {"max_fpr": 0.1, "trials": 5},
}

PRESETS = {
    "baseline": {
        "ssl": {
            "p_mixup": 1.0,
            "p_statex": 0.0,
            "p_featex": 0.0,
            "statex": False,
            "featex": False,
        },
        "heads": {"regular": True, "ssl": False},
    },
    "statex": {
        "ssl": {"p_mixup": 0.5, "statex": True, "featex": False},
        "heads": {"regular": False, "ssl": True},
    },
    "featex": {
        "ssl": {"p_mixup": 0.5, "statex": False, "featex": True},
        "heads": {"regular": False, "ssl": True},
    },
    "regular-statex": {
        "ssl": {"p_mixup": 0.5, "statex": True, "featex": False},
        "heads": {"regular": True, "ssl": True},
    },
    "regular-featex": {
        "ssl": {"p_mixup": 0.5, "statex": False, "featex": True},
        "heads": {"regular": True, "ssl": True},
    },
    "proposed": {
        "ssl": {"p_mixup": 0.5, "statex": True, "featex": True},
        "heads": {"regular": True, "ssl": True},
    },
}
PRESETS["ablation-no-class-labels"] = deepcopy(PRESETS["proposed"])
PRESETS["ablation-no-class-labels"]["ssl"]["use_class_labels_in_ssl"] = False
PRESETS["ablation-frozen-centers"] = deepcopy(PRESETS["proposed"])
PRESETS["ablation-frozen-centers"]["heads"]["ssl_centers_trainable"] = False
PRESETS["ablation-no-tmn-full-statex"] = deepcopy(PRESETS["proposed"])
PRESETS["ablation-no-tmn-full-statex"]["ssl"]["statex_axis"] = "both"
PRESETS["ablation-no-tmn-full-statex"]["features"] = {"temporal_mean_normalization": False}


def set_path(config, dotted, value):
    """Set a value in a nested dict using a dotted key like ``train.epochs``."""
    *parents, leaf = dotted.split(".")
    node = config
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


class Config:
    """Run configuration read from a file and its includes."""

    def __init__(self, path=None, overrides=None):
        """Read the config file (if any), apply overrides, preset and defaults."""
        self.path = path
        data = self.read_config() if path else collections.OrderedDict()
        for dotted, value in (overrides or {}).items():
            if value is not None:
                set_path(data, dotted, value)
        add_defaults(data, {"preset": DEFAULTS["preset"]})
        preset = data["preset"]
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}, choose one of: {', '.join(PRESETS)}")
        add_defaults(data, PRESETS[preset])
        add_defaults(data, DEFAULTS)
        self.config = json.loads(json.dumps(data))

    def read_config(self):
        """Read the config and the files it includes."""
        files = [self.path]
        data = collections.OrderedDict()
        while len(files) > 0:
            path = files.pop(0)
            new_data = self.read_file(path)
            if "includes" in new_data:
                includes = new_data["includes"]
                del new_data["includes"]
                rel_to = os.path.dirname(path)
                for inc in includes:
                    files.append(inc if os.path.isabs(inc) else os.path.join(rel_to, inc))
            add_defaults(data, new_data)
        return data

    def read_file(self, path):
        """Read config from a file."""
        parser = get_parser(path)
        try:
            with open(path, encoding="utf-8") as configfile:
                return parser(configfile)
        except OSError as exc:
            raise ConfigError(f"Error while reading {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"Error while parsing {path}: {exc}") from exc

    @property
    def fingerprint(self):
        """Hash of the fully resolved config."""
        return hash_dict(self.config)

    def section(self, name):
        """Return a copy of one config section."""
        return deepcopy(self.config[name])
