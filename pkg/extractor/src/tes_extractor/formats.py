"""Standalone writers for the TESF/TESL/name binary formats.

The byte layout is the interface contract with the training package, so
it is implemented here independently rather than imported:

  features  magic "TESF" | version u32 LE | n u64 LE | d u64 LE | n*d float32 LE row-major
  labels    magic "TESL" | version u32 LE | n u64 LE | C u64 LE | n x u32 LE
  names     UTF-8 text, one class name per line, line k = class k
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def write_features_file(path, features: np.ndarray) -> None:
    m = np.ascontiguousarray(features, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(b"TESF")
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def write_labels_file(path, labels, n_classes: int) -> None:
    arr = np.asarray(labels, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"labels out of range for {n_classes} classes")
    with open(path, "wb") as fh:
        fh.write(b"TESL")
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQ", arr.size, n_classes))
        fh.write(arr.astype("<u4").tobytes())


def write_names_file(path, names: list[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def write_dataset(prefix, features: np.ndarray, labels, names: list[str]) -> list[Path]:
    """Write the features/labels/names trio for one dataset prefix."""
    base = str(prefix)
    paths = [Path(base + ".tesf"), Path(base + ".tesl"), Path(base + ".names")]
    write_features_file(paths[0], features)
    write_labels_file(paths[1], labels, len(names))
    write_names_file(paths[2], names)
    return paths


def write_proxies(prefix, proxies: np.ndarray, names: list[str]) -> list[Path]:
    """Proxies are a features file with one row per class, plus names."""
    if proxies.shape[0] != len(names):
        raise ValueError(f"{proxies.shape[0]} proxy rows for {len(names)} names")
    base = str(prefix)
    paths = [Path(base + ".tesf"), Path(base + ".names")]
    write_features_file(paths[0], proxies)
    write_names_file(paths[1], names)
    return paths
