"""On-disk formats, the synthetic generator, and subsampling protocols.

Binary layouts (all little-endian):

  features  <prefix>.tesf   magic "TESF" | version u32 | n u64 | d u64 | n*d float32 row-major
  labels    <prefix>.tesl   magic "TESL" | version u32 | n u64 | C u64 | n u32 labels
  names     <prefix>.names  UTF-8, one class name per line, line k = class k

A proxy file is a features file with one row per class plus a companion
names file.  Features are stored as 32-bit floats and promoted to 64-bit
in memory.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError
from .ndcore import as_matrix
from .rng import SAMPLE_STREAM, SYNTH_STREAM, SplitMix64

FEATURE_MAGIC = b"TESF"
LABEL_MAGIC = b"TESL"
FORMAT_VERSION = 1


@dataclass
class FeatureDataset:
    """Frozen embedding matrix with integer labels and class names."""

    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    split: str = "full"

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.size != self.features.shape[0]:
            raise ShapeError(
                f"{self.labels.size} labels for {self.features.shape[0]} feature rows"
            )
        c = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ShapeError(f"labels out of range for {c} classes")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def take(self, idx: np.ndarray, split: str | None = None) -> "FeatureDataset":
        return FeatureDataset(
            self.features[idx].copy(),
            self.labels[idx].copy(),
            list(self.class_names),
            split=self.split if split is None else split,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class TextProxySet:
    """Text-encoder proxy columns (d_z x C) with their class names."""

    z: np.ndarray
    class_names: list[str]
    prompt_template: str = ""
    encoder: str = ""

    def __post_init__(self):
        self.z = as_matrix(self.z, "Z")
        if self.z.shape[1] != len(self.class_names):
            raise ShapeError(
                f"{self.z.shape[1]} proxy columns for {len(self.class_names)} class names"
            )
        norms = np.linalg.norm(self.z, axis=0)
        if np.any(norms <= 1e-12):
            raise ShapeError("degenerate (near-zero) proxy column")


# --- low-level file IO ------------------------------------------------------


def write_matrix(path, m: np.ndarray) -> None:
    """Write a float matrix in the TESF layout (32-bit payload)."""
    m = as_matrix(m, "matrix")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    """Read a TESF matrix, promoting the payload to float64."""
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic {blob[:4]!r} in {path}", offset=0)
    if len(blob) < 24:
        raise FormatError(f"truncated feature header in {path}", offset=len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported feature version {version}", offset=4)
    n, d = struct.unpack_from("<QQ", blob, 8)
    expected = 24 + 4 * n * d
    if len(blob) != expected:
        raise FormatError(
            f"feature payload has {len(blob) - 24} bytes, expected {4 * n * d}",
            offset=min(len(blob), expected),
        )
    payload = np.frombuffer(blob, dtype="<f4", count=n * d, offset=24)
    return payload.astype(np.float64).reshape(n, d)


def write_labels(path, labels: np.ndarray, n_classes: int) -> None:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError(f"labels out of range for {n_classes} classes")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQ", labels.size, n_classes))
        fh.write(labels.astype("<u4").tobytes())


def read_labels(path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if blob[:4] != LABEL_MAGIC:
        raise FormatError(f"bad label magic {blob[:4]!r} in {path}", offset=0)
    if len(blob) < 24:
        raise FormatError(f"truncated label header in {path}", offset=len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported label version {version}", offset=4)
    n, c = struct.unpack_from("<QQ", blob, 8)
    expected = 24 + 4 * n
    if len(blob) != expected:
        raise FormatError(
            f"label payload has {len(blob) - 24} bytes, expected {4 * n}",
            offset=min(len(blob), expected),
        )
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=24).astype(np.int64)
    bad = np.nonzero(labels >= c)[0]
    if bad.size:
        raise FormatError(
            f"label {labels[bad[0]]} >= class count {c}", offset=24 + 4 * int(bad[0])
        )
    return labels, int(c)


def write_names(path, names: list[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def read_names(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines()]


# --- dataset-level IO -------------------------------------------------------


def dataset_paths(prefix) -> tuple[Path, Path, Path]:
    # Plain concatenation: prefixes may legitimately contain dots.
    base = str(prefix)
    return Path(base + ".tesf"), Path(base + ".tesl"), Path(base + ".names")


def write_features(prefix, ds: FeatureDataset) -> None:
    """Write the .tesf/.tesl/.names trio for a dataset prefix."""
    fpath, lpath, npath = dataset_paths(prefix)
    write_matrix(fpath, ds.features)
    write_labels(lpath, ds.labels, ds.n_classes)
    write_names(npath, ds.class_names)


def read_features(prefix, split: str = "full") -> FeatureDataset:
    """Read a dataset trio written by write_features."""
    fpath, lpath, npath = dataset_paths(prefix)
    features = read_matrix(fpath)
    labels, c = read_labels(lpath)
    names = read_names(npath)
    if len(names) != c:
        raise FormatError(f"{len(names)} class names for {c} classes in {npath}")
    if labels.size != features.shape[0]:
        raise FormatError(
            f"{labels.size} labels for {features.shape[0]} feature rows ({prefix})"
        )
    return FeatureDataset(features, labels, names, split=split)


def write_proxies(prefix, proxies: TextProxySet) -> None:
    """Write proxies as a TESF file (one row per class) plus names and metadata."""
    base = str(prefix)
    write_matrix(base + ".tesf", proxies.z.T)
    write_names(base + ".names", proxies.class_names)
    meta = {"prompt_template": proxies.prompt_template, "encoder": proxies.encoder}
    Path(base + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_proxies(prefix) -> TextProxySet:
    base = str(prefix)
    rows = read_matrix(base + ".tesf")
    names = read_names(base + ".names")
    if rows.shape[0] != len(names):
        raise FormatError(f"{rows.shape[0]} proxy rows for {len(names)} class names")
    meta_path = Path(base + ".meta.json")
    template, encoder = "", ""
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        template = meta.get("prompt_template", "")
        encoder = meta.get("encoder", "")
    return TextProxySet(rows.T, names, prompt_template=template, encoder=encoder)


# --- synthetic data ---------------------------------------------------------


def synth_generate(
    seed: int, n_classes: int, dim: int, n_per_class: int, margin: float
) -> tuple[FeatureDataset, np.ndarray]:
    """Gaussian clusters around orthonormal class directions.

    Every example is margin * proxy_c plus unit-variance isotropic noise;
    returns the dataset and the ground-truth proxy matrix (dim x C).
    """
    if n_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {n_classes}")
    if dim < n_classes:
        raise ParameterError(f"dim {dim} < class count {n_classes}")
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    rng = SplitMix64.stream(seed, SYNTH_STREAM)
    # Orthonormalize a random Gaussian matrix; numpy QR is deterministic.
    q, r = np.linalg.qr(rng.normals((dim, n_classes)))
    proxies = q * np.sign(np.diag(r))[None, :]
    n = n_classes * n_per_class
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.normals((n, dim))
    features = margin * proxies.T[labels] + noise
    names = [f"class_{k}" for k in range(n_classes)]
    return FeatureDataset(features, labels, names, split="full"), proxies


def make_noisy_text_proxies(
    truth: np.ndarray, seed: int, noise: float = 0.05, encoder: str = "synthetic"
) -> TextProxySet:
    """Text proxies as noisy unit-normalized copies of ground-truth directions."""
    truth = as_matrix(truth, "truth")
    rng = SplitMix64.stream(seed, SYNTH_STREAM + 7)
    z = truth + noise * rng.normals(truth.shape)
    z = z / np.linalg.norm(z, axis=0, keepdims=True)
    names = [f"class_{k}" for k in range(truth.shape[1])]
    return TextProxySet(z, names, prompt_template="", encoder=encoder)


# --- subsampling protocols --------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def few_shot_subsample(
    ds: FeatureDataset, fraction: float = 0.1, min_per_class: int = 10, seed: int = 0
) -> FeatureDataset:
    """Per-class fraction sample with a floor of min_per_class examples.

    Keeps max(round(fraction * n_c), min(min_per_class, n_c)) examples of
    each class, sampled uniformly without replacement.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0,1], got {fraction}")
    rng = SplitMix64.stream(seed, SAMPLE_STREAM)
    keep: list[np.ndarray] = []
    for c in range(ds.n_classes):
        idx = np.nonzero(ds.labels == c)[0]
        if idx.size == 0:
            continue
        want = max(_round_half_up(fraction * idx.size), min(min_per_class, idx.size))
        want = min(want, idx.size)
        keep.append(idx[rng.sample_without_replacement(idx.size, want)])
    order = np.sort(np.concatenate(keep)) if keep else np.empty(0, dtype=np.int64)
    return ds.take(order, split=f"{ds.split}-fewshot")


def long_tail_subsample(ds: FeatureDataset, imbalance_ratio: float, seed: int = 0) -> FeatureDataset:
    """Exponential long-tail profile: class k keeps n_max * ratio^(-k/(C-1)).

    Requires a balanced input; the profile is undefined otherwise.
    """
    if imbalance_ratio < 1.0:
        raise ParameterError(f"imbalance ratio must be >= 1, got {imbalance_ratio}")
    counts = ds.class_counts()
    if counts.size == 0 or counts.min() != counts.max():
        raise ParameterError(f"long-tail profile needs a balanced input, counts={counts.tolist()}")
    n_max = int(counts[0])
    c = ds.n_classes
    rng = SplitMix64.stream(seed, SAMPLE_STREAM + 1)
    keep: list[np.ndarray] = []
    for k in range(c):
        frac = imbalance_ratio ** (-k / (c - 1)) if c > 1 else 1.0
        want = max(1, _round_half_up(n_max * frac))
        idx = np.nonzero(ds.labels == k)[0]
        keep.append(idx[rng.sample_without_replacement(idx.size, want)])
    order = np.sort(np.concatenate(keep))
    return ds.take(order, split=f"{ds.split}-longtail")


def long_tail_counts(n_max: int, n_classes: int, imbalance_ratio: float) -> list[int]:
    """Closed-form per-class counts of the exponential long-tail profile."""
    if n_classes == 1:
        return [n_max]
    return [
        max(1, _round_half_up(n_max * imbalance_ratio ** (-k / (n_classes - 1))))
        for k in range(n_classes)
    ]


def split(ds: FeatureDataset, val_fraction: float, seed: int = 0):
    """Stratified train/validation split; disjoint, union = input."""
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError(f"val_fraction must be in (0,1), got {val_fraction}")
    rng = SplitMix64.stream(seed, SAMPLE_STREAM + 2)
    val_idx: list[np.ndarray] = []
    train_idx: list[np.ndarray] = []
    for c in range(ds.n_classes):
        idx = np.nonzero(ds.labels == c)[0]
        if idx.size == 0:
            continue
        if idx.size == 1:
            warnings.warn(f"class {c} has a single example; keeping it in train")
            train_idx.append(idx)
            continue
        n_val = min(_round_half_up(val_fraction * idx.size), idx.size - 1)
        chosen = rng.sample_without_replacement(idx.size, n_val)
        mask = np.zeros(idx.size, dtype=bool)
        mask[chosen] = True
        val_idx.append(idx[mask])
        train_idx.append(idx[~mask])
    train_order = np.sort(np.concatenate(train_idx)) if train_idx else np.empty(0, np.int64)
    val_order = np.sort(np.concatenate(val_idx)) if val_idx else np.empty(0, np.int64)
    return ds.take(train_order, split="train"), ds.take(val_order, split="val")
