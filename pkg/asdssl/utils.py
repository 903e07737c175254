"""Utility functions."""

import hashlib
import json
import os
import os.path

import numpy as np
import torch


def ensure_dir(path):
    """Create a directory and all its parents."""
    os.makedirs(path, exist_ok=True)
    return path


def hash_dict(the_dict):
    """Generate a stable fingerprint for a JSON-serializable dict."""
    json_dump = json.dumps(the_dict, sort_keys=True)
    return hashlib.sha1(json_dump.encode("utf-8")).hexdigest()


def resolve_seed(seed=None, default=0):
    """Pick the explicit seed, else ASD_SEED from the environment, else the default."""
    if seed is not None:
        return int(seed)
    if "ASD_SEED" in os.environ:
        return int(os.environ["ASD_SEED"])
    return default


def seed_everything(seed):
    """Seed numpy's legacy global state and torch, return a fresh numpy generator."""
    np.random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def write_json(path, data):
    """Write a dict as indented JSON."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_fingerprint(path):
    """Read a fingerprint file written next to a build output, None if missing."""
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as f:
        return f.read().strip()


def write_fingerprint(path, fingerprint):
    """Record the fingerprint an output was built with."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(fingerprint)
