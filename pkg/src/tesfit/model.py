"""Parameter containers and forward passes.

Three trainable groups: a feature adapter standing in for the tunable
backbone, the vision classifier (one proxy column per class), and an
optional projection component mapping vision features into the text
embedding space.  Each group exposes flat-vector access so the optimizer,
snapshots, and the bound verifiers all see one consistent layout.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRowError, FormatError, ShapeError
from .ndcore import ZERO_NORM_TOL, as_matrix
from .rng import SplitMix64

SNAPSHOT_MAGIC = b"TESM"
SNAPSHOT_VERSION = 1

ADAPTER = "adapter"
CLASSIFIER = "classifier"
HEAD = "head"


class VisionClassifier:
    """Linear classifier W of shape (d, C), one proxy column per class."""

    def __init__(self, w: np.ndarray):
        self.w = as_matrix(w, "W")

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w.shape[1]

    @classmethod
    def gaussian(cls, dim: int, n_classes: int, rng: SplitMix64, std: float = 0.01):
        return cls(std * rng.normals((dim, n_classes)))

    def flat(self) -> np.ndarray:
        return self.w.ravel().copy()

    def set_flat(self, v: np.ndarray) -> None:
        self.w = v.reshape(self.w.shape).astype(np.float64).copy()

    def copy(self) -> "VisionClassifier":
        return VisionClassifier(self.w.copy())


class FeatureAdapter:
    """Affine map x -> x A + b; identity-initialized when square."""

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = as_matrix(a, "A")
        self.b = np.asarray(b, dtype=np.float64).ravel().copy()
        if self.b.shape[0] != self.a.shape[1]:
            raise ShapeError(f"bias length {self.b.shape[0]} != output dim {self.a.shape[1]}")

    @classmethod
    def identity(cls, d_raw: int, d: int | None = None) -> "FeatureAdapter":
        d = d_raw if d is None else d
        return cls(np.eye(d_raw, d), np.zeros(d))

    @classmethod
    def from_flat(cls, v: np.ndarray, d_raw: int, d: int) -> "FeatureAdapter":
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != d_raw * d + d:
            raise ShapeError(f"flat adapter vector has {v.size} entries, expected {d_raw * d + d}")
        return cls(v[: d_raw * d].reshape(d_raw, d), v[d_raw * d :])

    def forward(self, x_raw: np.ndarray) -> np.ndarray:
        x_raw = as_matrix(x_raw, "X_raw")
        if x_raw.shape[1] != self.a.shape[0]:
            raise ShapeError(f"input dim {x_raw.shape[1]} != adapter input dim {self.a.shape[0]}")
        return x_raw @ self.a + self.b

    def backward(self, x_raw: np.ndarray, d_out: np.ndarray) -> dict[str, np.ndarray]:
        return {"a": x_raw.T @ d_out, "b": d_out.sum(axis=0)}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.b])

    def set_flat(self, v: np.ndarray) -> None:
        na = self.a.size
        self.a = v[:na].reshape(self.a.shape).astype(np.float64).copy()
        self.b = v[na:].astype(np.float64).copy()

    def copy(self) -> "FeatureAdapter":
        return FeatureAdapter(self.a.copy(), self.b.copy())


class ProjectionHead:
    """Two-layer ReLU MLP with unit-normalized output rows."""

    def __init__(self, l1: np.ndarray, b1: np.ndarray, l2: np.ndarray, b2: np.ndarray):
        self.l1 = as_matrix(l1, "layer1")
        self.b1 = np.asarray(b1, dtype=np.float64).ravel().copy()
        self.l2 = as_matrix(l2, "layer2")
        self.b2 = np.asarray(b2, dtype=np.float64).ravel().copy()
        if self.l1.shape[1] != self.l2.shape[0]:
            raise ShapeError("hidden dims of layer1/layer2 disagree")

    @classmethod
    def init(cls, d: int, d_z: int, rng: SplitMix64, hidden: int | None = None):
        # Hidden width defaults to the feature dim; scaled Gaussian init.
        h = d if hidden is None else hidden
        l1 = rng.normals((d, h)) / np.sqrt(d)
        l2 = rng.normals((h, d_z)) / np.sqrt(h)
        return cls(l1, np.zeros(h), l2, np.zeros(d_z))

    @classmethod
    def identity(cls, d: int, d_z: int, shift: float = 10.0) -> "ProjectionHead":
        """Head that computes normalize(x[:d_z]) exactly on its linear region.

        Layer one shifts every coordinate by a constant large enough to
        keep the ReLU inactive for typical inputs; layer two undoes the
        shift and crops to the output width.  Mirrors keeping a
        pretrained alignment map as the projection init.
        """
        l1 = np.eye(d, d)
        b1 = shift * np.ones(d)
        l2 = np.eye(d, d_z)
        b2 = -shift * np.ones(d_z)
        return cls(l1, b1, l2, b2)

    def forward(self, x: np.ndarray, want_cache: bool = False):
        x = as_matrix(x, "X")
        if x.shape[1] != self.l1.shape[0]:
            raise ShapeError(f"input dim {x.shape[1]} != head input dim {self.l1.shape[0]}")
        a1 = x @ self.l1 + self.b1
        r = np.maximum(a1, 0.0)
        a2 = r @ self.l2 + self.b2
        norms = np.linalg.norm(a2, axis=1)
        bad = np.nonzero(norms <= ZERO_NORM_TOL)[0]
        if bad.size:
            raise DegenerateRowError(f"row {int(bad[0])} collapses to zero before normalization")
        out = a2 / norms[:, None]
        if not want_cache:
            return out
        return out, (x, a1, r, norms, out)

    def backward(self, cache, d_out: np.ndarray):
        """Backprop through normalize -> linear -> relu -> linear.

        Returns (param grads dict, gradient w.r.t. the head input).
        """
        x, a1, r, norms, out = cache
        # d/da2 of a2/|a2|: (g - (g.u) u) / |a2| with u the unit row.
        inner = (d_out * out).sum(axis=1, keepdims=True)
        d_a2 = (d_out - inner * out) / norms[:, None]
        d_l2 = r.T @ d_a2
        d_b2 = d_a2.sum(axis=0)
        d_r = d_a2 @ self.l2.T
        d_a1 = d_r * (a1 > 0.0)
        d_l1 = x.T @ d_a1
        d_b1 = d_a1.sum(axis=0)
        d_x = d_a1 @ self.l1.T
        return {"l1": d_l1, "b1": d_b1, "l2": d_l2, "b2": d_b2}, d_x

    def flat(self) -> np.ndarray:
        return np.concatenate([self.l1.ravel(), self.b1, self.l2.ravel(), self.b2])

    def set_flat(self, v: np.ndarray) -> None:
        sizes = [self.l1.size, self.b1.size, self.l2.size, self.b2.size]
        parts = np.split(v, np.cumsum(sizes)[:-1])
        self.l1 = parts[0].reshape(self.l1.shape).astype(np.float64).copy()
        self.b1 = parts[1].astype(np.float64).copy()
        self.l2 = parts[2].reshape(self.l2.shape).astype(np.float64).copy()
        self.b2 = parts[3].astype(np.float64).copy()

    def grads_flat(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate(
            [grads["l1"].ravel(), grads["b1"], grads["l2"].ravel(), grads["b2"]]
        )

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.l1.copy(), self.b1.copy(), self.l2.copy(), self.b2.copy())


class LinearAligner:
    """Bias-free linear map d -> d_z applied to classifier proxies.

    Initialized as a (truncated) identity so that at start h(W) simply
    embeds/crops W into the text dimension.
    """

    def __init__(self, m: np.ndarray):
        self.m = as_matrix(m, "aligner")

    @classmethod
    def identity(cls, d: int, d_z: int) -> "LinearAligner":
        return cls(np.eye(d_z, d))

    def flat(self) -> np.ndarray:
        return self.m.ravel().copy()

    def set_flat(self, v: np.ndarray) -> None:
        self.m = v.reshape(self.m.shape).astype(np.float64).copy()

    def copy(self) -> "LinearAligner":
        return LinearAligner(self.m.copy())


# --- forward operations ----------------------------------------------------


def classifier_logits(x: np.ndarray, clf: VisionClassifier) -> np.ndarray:
    """Logits X W; the vision classifier applies no temperature."""
    x = as_matrix(x, "X")
    if x.shape[1] != clf.dim:
        raise ShapeError(f"feature dim {x.shape[1]} != classifier dim {clf.dim}")
    return x @ clf.w


def project(x: np.ndarray, head: ProjectionHead) -> np.ndarray:
    """Unit-normalized projection of features into the text space."""
    return head.forward(x)


def adapt(x_raw: np.ndarray, adapter: FeatureAdapter) -> np.ndarray:
    """Affine feature adaptation X_raw A + b."""
    return adapter.forward(x_raw)


# --- model container and snapshots ----------------------------------------


@dataclass
class TesModel:
    """Bundle of the trainable groups present in a run."""

    classifier: VisionClassifier
    adapter: FeatureAdapter | None = None
    head: ProjectionHead | LinearAligner | None = None

    def features(self, x_raw: np.ndarray) -> np.ndarray:
        return self.adapter.forward(x_raw) if self.adapter is not None else as_matrix(x_raw)

    def groups(self) -> dict[str, object]:
        out: dict[str, object] = {}
        if self.adapter is not None:
            out[ADAPTER] = self.adapter
        out[CLASSIFIER] = self.classifier
        if self.head is not None:
            out[HEAD] = self.head
        return out

    def get_flat(self, group: str) -> np.ndarray:
        return self.groups()[group].flat()

    def set_flat(self, group: str, v: np.ndarray) -> None:
        self.groups()[group].set_flat(np.asarray(v, dtype=np.float64))

    def snapshot(self, stage: str) -> "ModelSnapshot":
        return ModelSnapshot(
            stage=stage, groups={name: comp.flat() for name, comp in self.groups().items()}
        )

    def load_snapshot(self, snap: "ModelSnapshot") -> None:
        mine = self.groups()
        if set(mine) != set(snap.groups):
            raise ShapeError(f"snapshot groups {sorted(snap.groups)} != model groups {sorted(mine)}")
        for name, comp in mine.items():
            comp.set_flat(snap.groups[name])

    def copy(self) -> "TesModel":
        return TesModel(
            classifier=self.classifier.copy(),
            adapter=self.adapter.copy() if self.adapter is not None else None,
            head=self.head.copy() if self.head is not None else None,
        )

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        """Inference path: adapter then classifier; the head is discarded."""
        return np.argmax(classifier_logits(self.features(x_raw), self.classifier), axis=1)


@dataclass
class ModelSnapshot:
    """Flat copies of every parameter group plus a stage tag."""

    stage: str
    groups: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(SNAPSHOT_MAGIC)
        buf.write(struct.pack("<I", SNAPSHOT_VERSION))
        entries = [(f"!stage/{self.stage}", np.empty(0))]
        entries += list(self.groups.items())
        for name, vec in entries:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            vec = np.asarray(vec, dtype="<f8").ravel()
            buf.write(struct.pack("<Q", vec.size))
            buf.write(vec.tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> "ModelSnapshot":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelSnapshot":
        if blob[:4] != SNAPSHOT_MAGIC:
            raise FormatError(f"bad snapshot magic {blob[:4]!r}", offset=0)
        if len(blob) < 8:
            raise FormatError("truncated snapshot header", offset=len(blob))
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}", offset=4)
        pos = 8
        stage = ""
        groups: dict[str, np.ndarray] = {}
        while pos < len(blob):
            if pos + 4 > len(blob):
                raise FormatError("truncated group name length", offset=pos)
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + nlen > len(blob):
                raise FormatError("truncated group name", offset=pos)
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            if pos + 8 > len(blob):
                raise FormatError("truncated element count", offset=pos)
            (count,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            nbytes = count * 8
            if pos + nbytes > len(blob):
                raise FormatError("truncated group payload", offset=pos)
            vec = np.frombuffer(blob[pos : pos + nbytes], dtype="<f8").astype(np.float64)
            pos += nbytes
            if name.startswith("!stage/"):
                stage = name[len("!stage/") :]
            else:
                groups[name] = vec
        return cls(stage=stage, groups=groups)


def parameter_distance(a: ModelSnapshot, b: ModelSnapshot, group: str = "all") -> float:
    """Frobenius norm of the parameter difference restricted to a group."""
    if set(a.groups) != set(b.groups):
        raise ShapeError(f"snapshot groups differ: {sorted(a.groups)} vs {sorted(b.groups)}")
    names = list(a.groups) if group == "all" else [group]
    total = 0.0
    for name in names:
        if name not in a.groups:
            raise ShapeError(f"group {name!r} absent from snapshots")
        va, vb = a.groups[name], b.groups[name]
        if va.shape != vb.shape:
            raise ShapeError(f"group {name!r} sizes differ: {va.size} vs {vb.size}")
        total += float(np.sum((va - vb) ** 2))
    return float(np.sqrt(total))


def rebuild_for_inference(snap: ModelSnapshot, d_raw: int) -> TesModel:
    """Reconstruct the inference path (adapter + classifier) from a snapshot.

    The head is intentionally not rebuilt: it plays no role at inference.
    """
    adapter = None
    d = d_raw
    if ADAPTER in snap.groups:
        count = snap.groups[ADAPTER].size
        if count % (d_raw + 1) != 0:
            raise FormatError(f"adapter group size {count} inconsistent with input dim {d_raw}")
        d = count // (d_raw + 1)
        adapter = FeatureAdapter.from_flat(snap.groups[ADAPTER], d_raw, d)
    if CLASSIFIER not in snap.groups:
        raise FormatError("snapshot lacks a classifier group")
    wflat = snap.groups[CLASSIFIER]
    if wflat.size % d != 0:
        raise FormatError(f"classifier group size {wflat.size} not divisible by dim {d}")
    clf = VisionClassifier(wflat.reshape(d, wflat.size // d))
    return TesModel(classifier=clf, adapter=adapter)
