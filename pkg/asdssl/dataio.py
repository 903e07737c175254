"""Ingest DCASE-style corpora, build the class label space and generate synthetic corpora."""

from __future__ import annotations

import csv
import logging
import os
import os.path
import re
from dataclasses import dataclass, field, replace

import numpy as np
import soundfile as sf
from scipy import signal

from .errors import DataError
from .utils import ensure_dir

logger = logging.getLogger(__name__)

LAYOUTS = ("dcase2022", "dcase2023", "synthetic")
DOMAINS = ("source", "target")
SPLITS = ("train", "test")
CONDITIONS = ("normal", "anomaly", "unknown")
MANIFEST_COLUMNS = (
    "clip_path",
    "machine_type",
    "machine_id",
    "domain",
    "split",
    "condition",
    "attributes",
)

synthetic_machine_pattern = re.compile(r"synth\d{2,}")


@dataclass(frozen=True)
class ClipMeta:
    """Parsed identity of one recording."""

    machine_type: str
    machine_id: str
    domain: str
    split: str
    condition: str
    attributes: tuple = ()
    clip_path: str = ""
    index: str = "0000"

    @property
    def machine_key(self):
        """Key used to group clips of one physical machine."""
        return f"{self.machine_type}/{self.machine_id}"

    @property
    def class_key(self):
        """Combination of machine type, machine ID and canonical attribute string."""
        return f"{self.machine_key}/{canonical_attributes(self.attributes)}"

    def attribute_string(self):
        """Serialize the ordered attributes for the manifest."""
        return ";".join(f"{k}={v}" for k, v in self.attributes)


def canonical_attributes(attributes):
    """Sort key=value tokens so that the class key is independent of their order."""
    return ";".join(sorted(f"{k}={v}" for k, v in attributes))


def parse_attribute_string(text):
    """Parse the manifest form ``k=v;k2=v2`` back into an ordered tuple."""
    if not text:
        return ()
    pairs = []
    for token in text.split(";"):
        key, sep, value = token.partition("=")
        if not sep:
            raise DataError(f"Malformed attribute token {token!r}")
        pairs.append((key, value))
    return tuple(pairs)


def parse_clip_path(path, layout):
    """Parse ``<machine>/<split>/section_<SS>_<domain>_<split>_<condition>_<index>[_k_v]*.wav``.

    Unlabeled evaluation clips (``section_<SS>_<index>.wav`` in the test split) get
    domain and condition ``unknown``.
    """
    if layout not in LAYOUTS:
        raise DataError(f"Unknown layout {layout!r}, expected one of {', '.join(LAYOUTS)}")
    parts = str(path).replace("\\", "/").split("/")
    if len(parts) < 3:
        raise DataError(f"Malformed clip path {path!r}: expected <machine>/<split>/<file>.wav")
    machine_type, dir_split, filename = parts[-3], parts[-2], parts[-1]
    if dir_split not in SPLITS:
        raise DataError(f"Malformed clip path {path!r}: split directory {dir_split!r}")
    if layout == "synthetic" and not synthetic_machine_pattern.fullmatch(machine_type):
        raise DataError(f"Malformed clip path {path!r}: machine type {machine_type!r}")
    stem, ext = os.path.splitext(filename)
    if ext.lower() != ".wav":
        raise DataError(f"Malformed clip path {path!r}: extension {ext!r}")

    tokens = stem.split("_")
    if len(tokens) < 3 or tokens[0] != "section" or not re.fullmatch(r"\d{2}", tokens[1]):
        raise DataError(f"Malformed clip path {path!r}: section component")
    machine_id = f"section_{tokens[1]}"

    if len(tokens) == 3 and dir_split == "test":
        if not tokens[2].isdigit():
            raise DataError(f"Malformed clip path {path!r}: index {tokens[2]!r}")
        return ClipMeta(
            machine_type, machine_id, "unknown", "test", "unknown", (), str(path), tokens[2]
        )

    if len(tokens) < 6:
        raise DataError(f"Malformed clip path {path!r}: too few components")
    domain, split, condition, index = tokens[2:6]
    if domain not in DOMAINS:
        raise DataError(f"Malformed clip path {path!r}: domain {domain!r}")
    if split != dir_split:
        raise DataError(f"Malformed clip path {path!r}: split {split!r} in {dir_split!r}")
    if condition not in ("normal", "anomaly"):
        raise DataError(f"Malformed clip path {path!r}: condition {condition!r}")
    if split == "train" and condition != "normal":
        raise DataError(f"Malformed clip path {path!r}: training clips must be normal")
    if not index.isdigit():
        raise DataError(f"Malformed clip path {path!r}: index {index!r}")

    rest = tokens[6:]
    if len(rest) % 2 == 1:
        if layout != "dcase2023":
            raise DataError(f"Malformed clip path {path!r}: attribute {rest[-1]!r} has no value")
        rest = rest + [""]
    attributes = tuple(zip(rest[0::2], rest[1::2]))
    return ClipMeta(
        machine_type, machine_id, domain, split, condition, attributes, str(path), index
    )


def render_clip_path(meta):
    """Render the relative path of a clip from its meta information."""
    sec = meta.machine_id.split("_", 1)[1]
    if meta.condition == "unknown":
        name = f"section_{sec}_{meta.index}"
    else:
        name = f"section_{sec}_{meta.domain}_{meta.split}_{meta.condition}_{meta.index}"
    for key, value in meta.attributes:
        name += f"_{key}_{value}" if value != "" else f"_{key}"
    return f"{meta.machine_type}/{meta.split}/{name}.wav"


@dataclass
class LabelSpace:
    """Ordered class keys of the auxiliary classification task."""

    classes: list
    index_of: dict = field(init=False, repr=False)

    def __post_init__(self):
        """Build the reverse index."""
        if len(set(self.classes)) != len(self.classes):
            raise DataError("Class keys must be unique")
        self.index_of = {key: i for i, key in enumerate(self.classes)}

    @property
    def n(self):
        """Number of classes."""
        return len(self.classes)

    def lookup(self, meta):
        """Return the class index of a clip, falling back to its machine prefix."""
        if meta.class_key in self.index_of:
            return self.index_of[meta.class_key]
        prefix = meta.machine_key + "/"
        for i, key in enumerate(self.classes):
            if key.startswith(prefix):
                return i
        raise DataError(f"Unknown class {meta.class_key!r} and no class for {meta.machine_key!r}")


def build_label_space(metas):
    """Use all combinations of machine type, machine ID and attributes as classes."""
    metas = list(metas)
    if not metas:
        raise DataError("Cannot build a label space from an empty set of clips")
    for meta in metas:
        if meta.split != "train":
            raise DataError(f"Label space clips must be from the train split: {meta.clip_path}")
    return LabelSpace(sorted({meta.class_key for meta in metas}))


def one_hot(meta, space):
    """Categorical label vector of one clip."""
    y = np.zeros(space.n, dtype=np.float32)
    y[space.lookup(meta)] = 1.0
    return y


def write_manifest(metas, path):
    """Write one CSV row per clip."""
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, "w", encoding="utf-8", newline="") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for meta in metas:
            writer.writerow(
                {
                    "clip_path": meta.clip_path,
                    "machine_type": meta.machine_type,
                    "machine_id": meta.machine_id,
                    "domain": meta.domain,
                    "split": meta.split,
                    "condition": meta.condition,
                    "attributes": meta.attribute_string(),
                }
            )


def read_manifest(path):
    """Read a manifest back into ClipMeta records (clip paths relative to the manifest)."""
    if not os.path.exists(path):
        raise DataError(f"Manifest file does not exist: {path}")
    metas = []
    with open(path, encoding="utf-8", newline="") as csv_file:
        reader = csv.DictReader(csv_file)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"Manifest {path} lacks columns: {', '.join(sorted(missing))}")
        for row in reader:
            stem = os.path.splitext(os.path.basename(row["clip_path"]))[0]
            tokens = stem.split("_")
            position = 2 if row["condition"] == "unknown" else 5
            if len(tokens) <= position or not tokens[position].isdigit():
                raise DataError(f"Malformed clip path {row['clip_path']!r} in manifest {path}")
            index = tokens[position]
            metas.append(
                ClipMeta(
                    machine_type=row["machine_type"],
                    machine_id=row["machine_id"],
                    domain=row["domain"],
                    split=row["split"],
                    condition=row["condition"],
                    attributes=parse_attribute_string(row["attributes"]),
                    clip_path=row["clip_path"],
                    index=index,
                )
            )
    return metas


def scan_corpus(root, layout):
    """Parse every ``*.wav`` below a DCASE-style root into ClipMeta records."""
    metas = []
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            if not name.lower().endswith(".wav"):
                continue
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            metas.append(parse_clip_path(rel, layout))
    if not metas:
        raise DataError(f"No wav files found below {root}")
    return sorted(metas, key=lambda m: m.clip_path)


def load_corpus(root, layout="synthetic"):
    """Load the manifest of a corpus, or scan the directory when there is none."""
    manifest = os.path.join(root, "manifest.csv")
    if os.path.exists(manifest):
        return read_manifest(manifest)
    return scan_corpus(root, layout)


def load_waveform(path):
    """Read a mono PCM WAV file as float64 samples."""
    try:
        data, sample_rate = sf.read(path, dtype="float64", always_2d=False)
    except (RuntimeError, OSError) as exc:
        raise DataError(f"Error while reading {path}: {exc}") from exc
    if data.ndim != 1:
        raise DataError(f"Only mono audio is supported: {path}")
    return data, sample_rate


@dataclass
class SynthConfig:
    """Size and sound of a synthetic stand-in corpus."""

    n_machines: int = 3
    clips_per_machine_source: int = 200
    clips_per_machine_target: int = 10
    clips_per_machine_test: int = 100
    clip_seconds: float = 2.0
    sample_rate: int = 16000
    anomaly_fraction_test: float = 0.5
    seed: int = 0

    def __post_init__(self):
        """Validate counts and ratios."""
        counts = (
            self.n_machines,
            self.clips_per_machine_source,
            self.clips_per_machine_target,
            self.clips_per_machine_test,
        )
        if min(counts) < 1:
            raise DataError("Synthetic corpus counts must be at least 1")
        if not 0.0 <= self.anomaly_fraction_test <= 1.0:
            raise DataError("anomaly_fraction_test must be in [0, 1]")


# Attribute value per domain; the target domain also gets a different noise color.
domain_attributes = {"source": (("vel", "12"),), "target": (("vel", "6"),)}
domain_noise_bands = {"source": (50.0, 3000.0), "target": (800.0, 6000.0)}


MIN_FUNDAMENTAL = 200.0
MAX_FUNDAMENTAL = 600.0


def fundamental(machine, n_machines=3):
    """Fundamental frequency of a pseudo-machine in Hz.

    Machines are 200 Hz apart, closer when there are more than three, so that every
    fundamental lies in [200, 600] Hz. The detuned third harmonic then stays below 2 kHz,
    the range of the default full-clip spectrum.
    """
    if not 0 <= machine < n_machines:
        raise DataError(f"Machine {machine} out of range for {n_machines} machines")
    spacing = MAX_FUNDAMENTAL - MIN_FUNDAMENTAL
    if n_machines > 1:
        spacing = min(MIN_FUNDAMENTAL, spacing / (n_machines - 1))
    return MIN_FUNDAMENTAL + spacing * machine


def pink_noise(rng, n_samples):
    """Approximate 1/f noise by filtering white noise."""
    b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
    a = [1.0, -2.494956002, 2.017265875, -0.522189400]
    white = rng.standard_normal(n_samples + 2048)
    return signal.lfilter(b, a, white)[2048:]


def synthesize_clip(machine, domain, anomaly, cfg, rng):
    """Render one clip: a machine tone stack over band-limited pink noise."""
    n = int(round(cfg.clip_seconds * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    f0 = fundamental(machine, cfg.n_machines)
    amplitudes = [0.3, 0.2, 0.1]
    dropped = None
    if anomaly:
        if rng.random() < 0.5:
            f0 *= 1.03
        else:
            dropped = int(rng.integers(1, 3))
    tone = np.zeros(n)
    for h, amp in enumerate(amplitudes):
        if h == dropped:
            continue
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp *= rng.uniform(0.9, 1.1)
        tone += amp * np.sin(2.0 * np.pi * f0 * (h + 1) * t + phase)

    low, high = domain_noise_bands[domain]
    high = min(high, 0.45 * cfg.sample_rate)
    sos = signal.butter(4, [low, high], btype="bandpass", fs=cfg.sample_rate, output="sos")
    noise = signal.sosfilt(sos, pink_noise(rng, n))
    noise *= 0.2 / (np.std(noise) + 1e-12)
    clip = tone + noise
    return (0.9 * clip / np.max(np.abs(clip))).astype(np.float64)


def synthetic_plan(cfg):
    """List the ClipMeta of every clip of a synthetic corpus."""
    metas = []
    for m in range(cfg.n_machines):
        machine_type = f"synth{m:02d}"
        train_counts = {
            "source": cfg.clips_per_machine_source,
            "target": cfg.clips_per_machine_target,
        }
        index = 0
        for domain in DOMAINS:
            for _ in range(train_counts[domain]):
                metas.append(
                    ClipMeta(
                        machine_type,
                        "section_00",
                        domain,
                        "train",
                        "normal",
                        domain_attributes[domain],
                        index=f"{index:04d}",
                    )
                )
                index += 1
        n_anomalies = int(round(cfg.anomaly_fraction_test * cfg.clips_per_machine_test))
        for i in range(cfg.clips_per_machine_test):
            domain = DOMAINS[i % 2]
            condition = "anomaly" if i < n_anomalies else "normal"
            metas.append(
                ClipMeta(
                    machine_type,
                    "section_00",
                    domain,
                    "test",
                    condition,
                    domain_attributes[domain],
                    index=f"{i:04d}",
                )
            )
    return [replace(meta, clip_path=render_clip_path(meta)) for meta in metas]


def generate_synthetic_corpus(cfg, out_dir):
    """Write a deterministic synthetic corpus and its manifest below ``out_dir``."""
    metas = synthetic_plan(cfg)
    for meta in metas:
        machine = int(meta.machine_type[len("synth") :])
        kind = (SPLITS.index(meta.split), DOMAINS.index(meta.domain))
        rng = np.random.default_rng([cfg.seed, machine, *kind, int(meta.index)])
        clip = synthesize_clip(machine, meta.domain, meta.condition == "anomaly", cfg, rng)
        path = os.path.join(out_dir, meta.clip_path)
        try:
            ensure_dir(os.path.dirname(path))
            sf.write(path, clip, cfg.sample_rate, subtype="PCM_16")
        except (RuntimeError, OSError) as exc:
            raise DataError(f"Error while writing {path}: {exc}") from exc
    write_manifest(metas, os.path.join(out_dir, "manifest.csv"))
    logger.info("Wrote %d synthetic clips to %s", len(metas), out_dir)
    return metas
