"""Synthetic motion-text corpus: dataset model, on-disk format, normalization stats.

Motion payloads are raw little-endian float32, row-major frames x dim. The
manifest is a JSON file describing every sample. The synthetic generator
produces motions as deterministic functions of a discrete attribute tuple
(action shape, amplitude, speed, direction, repetition count) plus small
seeded noise, with 1-3 templated texts naming the attributes.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_VERSION = "1"
STD_FLOOR = 1e-6

# Attribute grammar. Every factor has >= 3 values so chance retrieval is low.
SHAPES = ("wave", "circle", "jump", "stretch", "spin")
SHAPE_VERBS = {"wave": "waves", "circle": "circles", "jump": "jumps",
               "stretch": "stretches", "spin": "spins"}
AMPLITUDES = {"slightly": 0.5, "moderately": 1.0, "widely": 1.6}
SPEEDS = {"slowly": 1.0, "steadily": 2.0, "quickly": 4.0}
DIRECTIONS = ("left", "right", "forward", "backward")
REPETITIONS = {2: "twice", 3: "three times", 4: "four times", 5: "five times"}

# Channel layout of the closed-form trajectory (before the mixing block).
OSC_CHANNEL = 0          # amplitude * cos(2*pi*reps*t): 2*reps zero crossings
SPEED_CHANNEL = 1
DIRECTION_CHANNELS = (2, 3)
SHAPE_CHANNEL_BASE = 4   # one channel per shape, constant level
LEVEL_CHANNEL = 9
OSC_VELOCITY_CHANNEL = 10    # frequency-scaled, like joint velocities
SPEED_VELOCITY_CHANNEL = 11
BASE_CHANNELS = 12
MIN_DIM = BASE_CHANNELS

TEMPLATES = (
    "a figure {verb} {amp} and {speed} {reps} to the {dir}",
    "the person {verb} {reps} to the {dir} {amp} and {speed}",
    "someone {speed} and {amp} {verb} {reps} toward the {dir}",
)


class DatasetError(Exception):
    """Raised when a manifest or motion payload violates the format."""


class MissingMotionFileError(DatasetError):
    pass


class MotionSizeError(DatasetError):
    pass


class NonFiniteMotionError(DatasetError):
    pass


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


class Vocab:
    """Word-level vocabulary over whitespace-split, lowercased corpus text."""

    PAD, CLS, EOS, UNK = 0, 1, 2, 3
    _SPECIALS = ("[pad]", "[cls]", "[eos]", "[unk]")

    def __init__(self, words: list[str]):
        self.words = list(words)
        self._index = {w: i + len(self._SPECIALS) for i, w in enumerate(self.words)}

    @classmethod
    def from_texts(cls, texts: list[str]) -> "Vocab":
        seen = set()
        for t in texts:
            seen.update(normalize_text(t).split())
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.words) + len(self._SPECIALS)

    def encode(self, text: str) -> list[int]:
        return [self._index.get(w, self.UNK) for w in normalize_text(text).split()]

    def decode(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if i < len(self._SPECIALS):
                continue
            out.append(self.words[i - len(self._SPECIALS)])
        return " ".join(out)

    def to_dict(self) -> dict:
        return {"words": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["words"]))


@dataclass
class MotionSequence:
    """A frames x dim real-valued motion feature matrix."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise DatasetError(f"motion must be a non-empty 2-D matrix, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteMotionError("motion contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class FeatureStats:
    """Per-dimension mean/std of the corpus; std floored at STD_FLOOR."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if (self.std <= 0).any():
            raise ValueError("std entries must be strictly positive")


@dataclass
class Sample:
    id: str
    motion: np.ndarray
    texts: list[str]
    attributes: dict | None = None


@dataclass
class Dataset:
    dim: int
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def all_texts(self) -> list[str]:
        return [t for s in self.samples for t in s.texts]


@dataclass
class SynthConfig:
    """Configuration of the parametric corpus generator."""

    num_samples: int = 256
    dim: int = 16
    length_range: tuple[int, int] = (64, 96)
    length_step: int = 16
    max_texts_per_sample: int = 3
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.length_range
        if lo > hi or lo < 1:
            raise ValueError(f"invalid length_range {self.length_range}")
        if self.length_step < 1:
            raise ValueError("length_step must be >= 1")
        if self.dim < MIN_DIM:
            raise ValueError(f"dim must be >= {MIN_DIM}")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")
        if self.max_texts_per_sample < 1 or self.max_texts_per_sample > len(TEMPLATES):
            raise ValueError("max_texts_per_sample must be between 1 and the template count")

    def lengths(self) -> list[int]:
        lo, hi = self.length_range
        return list(range(lo, hi + 1, self.length_step))


def attribute_words(attrs: dict) -> set[str]:
    """Words that every caption of this attribute tuple must contain."""
    words = {SHAPE_VERBS[attrs["shape"]], attrs["amplitude"], attrs["speed"], attrs["direction"]}
    words.update(REPETITIONS[attrs["repetitions"]].split())
    return words


def attribute_key(attrs: dict) -> tuple:
    return (attrs["shape"], attrs["amplitude"], attrs["speed"],
            attrs["direction"], attrs["repetitions"])


def attribute_texts(attrs: dict, template_indices: list[int]) -> list[str]:
    fields = {
        "verb": SHAPE_VERBS[attrs["shape"]],
        "amp": attrs["amplitude"],
        "speed": attrs["speed"],
        "reps": REPETITIONS[attrs["repetitions"]],
        "dir": attrs["direction"],
    }
    return [TEMPLATES[i].format(**fields) for i in template_indices]


def attribute_trajectory(attrs: dict, frames: int, dim: int, mixing: np.ndarray | None = None) -> np.ndarray:
    """Noise-free closed-form trajectory for an attribute tuple.

    Channel 0 carries ``amplitude * cos(2*pi*reps*t)`` and therefore crosses
    zero exactly ``2*reps`` times; the remaining base channels encode speed,
    direction, shape, and amplitude level. Channels past the base block are a
    fixed linear mixture of the base block (zero when ``mixing`` is None).
    """
    t = np.arange(frames, dtype=np.float64) / frames
    base = np.zeros((frames, BASE_CHANNELS), dtype=np.float64)
    amp = AMPLITUDES[attrs["amplitude"]]
    reps = attrs["repetitions"]
    speed = SPEEDS[attrs["speed"]]
    base[:, OSC_CHANNEL] = amp * np.cos(2.0 * np.pi * reps * t)
    base[:, SPEED_CHANNEL] = 0.8 * np.sin(2.0 * np.pi * speed * t)
    drift = 0.9 * t
    d = attrs["direction"]
    if d == "left":
        base[:, DIRECTION_CHANNELS[0]] = -drift
    elif d == "right":
        base[:, DIRECTION_CHANNELS[0]] = drift
    elif d == "forward":
        base[:, DIRECTION_CHANNELS[1]] = drift
    else:
        base[:, DIRECTION_CHANNELS[1]] = -drift
    base[:, SHAPE_CHANNEL_BASE + SHAPES.index(attrs["shape"])] = 0.9
    base[:, LEVEL_CHANNEL] = 0.6 * amp
    base[:, OSC_VELOCITY_CHANNEL] = -0.15 * reps * np.sin(2.0 * np.pi * reps * t)
    base[:, SPEED_VELOCITY_CHANNEL] = 0.12 * speed * np.cos(2.0 * np.pi * speed * t)
    out = np.zeros((frames, dim), dtype=np.float64)
    out[:, :BASE_CHANNELS] = base
    if dim > BASE_CHANNELS and mixing is not None:
        out[:, BASE_CHANNELS:] = base @ mixing
    return out.astype(np.float32)


def _mixing_matrix(dim: int) -> np.ndarray | None:
    # fixed constant of the corpus format (not of the sampling seed), so corpora
    # generated with different seeds share one channel semantics
    if dim <= BASE_CHANNELS:
        return None
    rng = np.random.Generator(np.random.PCG64(0xA11CE))
    return (0.4 * rng.standard_normal((BASE_CHANNELS, dim - BASE_CHANNELS))).astype(np.float64)


def sample_attributes(rng: np.random.Generator) -> dict:
    return {
        "shape": SHAPES[rng.integers(len(SHAPES))],
        "amplitude": list(AMPLITUDES)[rng.integers(len(AMPLITUDES))],
        "speed": list(SPEEDS)[rng.integers(len(SPEEDS))],
        "direction": DIRECTIONS[rng.integers(len(DIRECTIONS))],
        "repetitions": list(REPETITIONS)[rng.integers(len(REPETITIONS))],
    }


def synth_generate(config: SynthConfig) -> Dataset:
    """Generate a corpus; a pure function of (config, seed)."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    mixing = _mixing_matrix(config.dim)
    lengths = config.lengths()
    samples = []
    for i in range(config.num_samples):
        attrs = sample_attributes(rng)
        frames = int(lengths[rng.integers(0, len(lengths))])
        clean = attribute_trajectory(attrs, frames, config.dim, mixing)
        noise = rng.normal(0.0, config.noise_std, size=clean.shape)
        motion = (clean.astype(np.float64) + noise).astype(np.float32)
        n_texts = int(rng.integers(1, config.max_texts_per_sample + 1))
        template_ids = list(rng.choice(len(TEMPLATES), size=n_texts, replace=False))
        texts = attribute_texts(attrs, sorted(int(j) for j in template_ids))
        samples.append(Sample(id=f"s{i:05d}", motion=motion, texts=texts, attributes=attrs))
    return Dataset(dim=config.dim, samples=samples)


def write_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write motions as raw float32 payloads plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for s in dataset.samples:
        fname = f"{s.id}.f32"
        data = np.ascontiguousarray(s.motion, dtype="<f4")
        (out / fname).write_bytes(data.tobytes())
        rec = {"id": s.id, "motion_file": fname, "num_frames": int(s.motion.shape[0]),
               "texts": list(s.texts)}
        if s.attributes is not None:
            rec["attributes"] = dict(s.attributes)
        records.append(rec)
    manifest = {"version": MANIFEST_VERSION, "dim": dataset.dim, "samples": records}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load and validate a dataset; every sample is checked eagerly."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    dim = int(manifest["dim"])
    base = manifest_path.parent
    samples = []
    seen_ids = set()
    for rec in manifest["samples"]:
        sid = rec["id"]
        if sid in seen_ids:
            raise DatasetError(f"duplicate sample id {sid!r}")
        seen_ids.add(sid)
        path = base / rec["motion_file"]
        if not path.exists():
            raise MissingMotionFileError(f"sample {sid!r}: missing motion file {path}")
        num_frames = int(rec["num_frames"])
        expected = 4 * num_frames * dim
        actual = path.stat().st_size
        if actual != expected:
            raise MotionSizeError(
                f"sample {sid!r}: motion file has {actual} bytes, expected {expected} "
                f"({num_frames} frames x {dim} dims)")
        data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(num_frames, dim)
        if not np.isfinite(data).all():
            raise NonFiniteMotionError(f"sample {sid!r}: motion contains non-finite values")
        samples.append(Sample(id=sid, motion=np.array(data, dtype=np.float32),
                              texts=list(rec["texts"]), attributes=rec.get("attributes")))
    return Dataset(dim=dim, samples=samples)


def compute_stats(dataset: Dataset) -> FeatureStats:
    """Pooled per-dimension mean/std over all frames (population std, floored)."""
    if len(dataset) == 0:
        raise DatasetError("cannot compute stats of an empty dataset")
    pooled = np.concatenate([s.motion for s in dataset.samples], axis=0).astype(np.float64)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0, ddof=0)
    return FeatureStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def normalize(motion: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return ((motion - stats.mean) / stats.std).astype(np.float32)


def denormalize(motion: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return (motion * stats.std + stats.mean).astype(np.float32)
