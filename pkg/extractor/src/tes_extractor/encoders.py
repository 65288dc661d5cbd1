"""Encoder and dataset registries.

Heavy dependencies (torch, torchvision, transformers) are imported
lazily so the package installs and the stub pipeline runs without them.
Every encoder works in eval mode without gradients and is deterministic
for a fixed input order.
"""
from __future__ import annotations

import hashlib

import numpy as np


class EncoderUnavailable(RuntimeError):
    """Weights or libraries for the requested encoder cannot be loaded."""


def _require(module: str):
    import importlib

    try:
        return importlib.import_module(module)
    except ImportError as exc:
        raise EncoderUnavailable(
            f"{module} is required for this encoder (pip install 'tes-extractor[encoders]')"
        ) from exc


class StubEncoder:
    """Deterministic hash-based encoder for pipeline tests and smoke runs.

    Images and texts are mapped to unit vectors derived from a BLAKE2
    digest of their bytes; no semantic alignment is implied.
    """

    def __init__(self, dim: int = 16):
        self.name = f"stub{dim}"
        self.dim = dim
        self.layer = "hash"

    def _embed(self, payload: bytes) -> np.ndarray:
        out = np.empty(self.dim, dtype=np.float64)
        for i in range(self.dim):
            digest = hashlib.blake2b(payload, digest_size=8, salt=i.to_bytes(8, "little"))
            out[i] = int.from_bytes(digest.digest(), "little") / 2**64 - 0.5
        return out / np.linalg.norm(out)

    def encode_images(self, batch) -> np.ndarray:
        rows = []
        for img in batch:
            arr = np.asarray(img, dtype=np.float32)
            rows.append(self._embed(arr.tobytes()))
        return np.stack(rows)

    def encode_texts(self, texts) -> np.ndarray:
        return np.stack([self._embed(t.encode("utf-8")) for t in texts])


class ClipEncoder:
    """CLIP dual encoder via transformers (ViT-B/32 by default)."""

    def __init__(self, device: str = "cpu", model_name: str = "openai/clip-vit-base-patch32"):
        torch = _require("torch")
        transformers = _require("transformers")
        try:
            self.model = transformers.CLIPModel.from_pretrained(model_name)
            self.processor = transformers.CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderUnavailable(f"cannot load CLIP weights {model_name}: {exc}") from exc
        self.torch = torch
        self.device = device
        self.model.eval().to(device)
        self.name = model_name
        self.dim = self.model.config.projection_dim
        self.layer = "joint-embedding projection"

    def encode_images(self, batch) -> np.ndarray:
        inputs = self.processor(images=list(batch), return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            feats = self.model.get_image_features(**inputs)
        return feats.cpu().numpy().astype(np.float64)

    def encode_texts(self, texts) -> np.ndarray:
        inputs = self.processor(text=list(texts), return_tensors="pt", padding=True,
                                truncation=True).to(self.device)
        with self.torch.no_grad():
            feats = self.model.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float64)


class TorchvisionEncoder:
    """Pooled penultimate activations of a torchvision classification model."""

    _BUILDERS = {
        "resnet18": ("resnet18", "ResNet18_Weights"),
        "resnet50": ("resnet50", "ResNet50_Weights"),
        "vit-b32": ("vit_b_32", "ViT_B_32_Weights"),
    }

    def __init__(self, arch: str, device: str = "cpu"):
        torch = _require("torch")
        models = _require("torchvision.models")
        builder_name, weights_name = self._BUILDERS[arch]
        try:
            weights = getattr(models, weights_name).DEFAULT
            model = getattr(models, builder_name)(weights=weights)
        except Exception as exc:
            raise EncoderUnavailable(f"cannot load {arch} weights: {exc}") from exc
        if arch.startswith("resnet"):
            self.dim = model.fc.in_features
            model.fc = torch.nn.Identity()
        else:
            self.dim = model.heads.head.in_features
            model.heads = torch.nn.Identity()
        self.torch = torch
        self.model = model.eval().to(device)
        self.transform = weights.transforms()
        self.device = device
        self.name = arch
        self.layer = "pooled penultimate"

    def encode_images(self, batch) -> np.ndarray:
        tensors = self.torch.stack([self.transform(img) for img in batch]).to(self.device)
        with self.torch.no_grad():
            feats = self.model(tensors)
        return feats.cpu().numpy().astype(np.float64)

    def encode_texts(self, texts):
        raise EncoderUnavailable(f"{self.name} is a vision-only encoder")


class BertEncoder:
    """BERT text encoder; CLS pooling by default, mean pooling optional."""

    def __init__(self, device: str = "cpu", pooling: str = "cls",
                 model_name: str = "bert-base-uncased"):
        if pooling not in ("cls", "mean"):
            raise ValueError(f"pooling must be cls or mean, got {pooling!r}")
        torch = _require("torch")
        transformers = _require("transformers")
        try:
            self.tokenizer = transformers.AutoTokenizer.from_pretrained(model_name)
            self.model = transformers.AutoModel.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderUnavailable(f"cannot load BERT weights {model_name}: {exc}") from exc
        self.torch = torch
        self.device = device
        self.model.eval().to(device)
        self.pooling = pooling
        self.name = model_name
        self.dim = self.model.config.hidden_size
        self.layer = f"{pooling} pooling"

    def encode_images(self, batch):
        raise EncoderUnavailable(f"{self.name} is a text-only encoder")

    def encode_texts(self, texts) -> np.ndarray:
        inputs = self.tokenizer(list(texts), return_tensors="pt", padding=True,
                                truncation=True).to(self.device)
        with self.torch.no_grad():
            out = self.model(**inputs).last_hidden_state
        if self.pooling == "cls":
            feats = out[:, 0]
        else:
            mask = inputs["attention_mask"].unsqueeze(-1)
            feats = (out * mask).sum(dim=1) / mask.sum(dim=1)
        return feats.cpu().numpy().astype(np.float64)


def load_encoder(name: str, device: str = "cpu", **kwargs):
    if name.startswith("stub"):
        dim = int(name[4:]) if len(name) > 4 else 16
        return StubEncoder(dim)
    if name.startswith("clip"):
        return ClipEncoder(device=device, **kwargs)
    if name in TorchvisionEncoder._BUILDERS:
        return TorchvisionEncoder(name, device=device)
    if name.startswith("bert"):
        return BertEncoder(device=device, **kwargs)
    raise ValueError(f"unknown encoder {name!r}")


# --- datasets ----------------------------------------------------------------


def _synthetic_rgb(shape: str, seed: int = 0):
    """Tiny deterministic image set: class-tinted noise, 'CxN' per class."""
    c, n = (int(v) for v in shape.split("x"))
    rng = np.random.default_rng(seed)
    tints = rng.integers(0, 256, size=(c, 3))
    images, labels = [], []
    for k in range(c):
        for _ in range(n):
            noise = rng.integers(0, 64, size=(32, 32, 3))
            img = np.clip(tints[k][None, None, :] * 0.75 + noise, 0, 255).astype(np.uint8)
            images.append(img)
            labels.append(k)
    names = [f"tint_{k}" for k in range(c)]
    return list(zip(images, labels)), names


def load_dataset(name: str, root: str = "datasets"):
    """Return (sequence of (image, label), class_names) in a fixed order."""
    if name.startswith("synthetic-rgb:"):
        return _synthetic_rgb(name.split(":", 1)[1])
    if name in ("cifar10-train", "cifar10-test"):
        datasets = _require("torchvision.datasets")
        try:
            ds = datasets.CIFAR10(root=root, train=name.endswith("train"), download=True)
        except Exception as exc:
            raise EncoderUnavailable(f"cannot obtain CIFAR-10: {exc}") from exc
        return ds, list(ds.classes)
    if name.startswith("imagefolder:"):
        datasets = _require("torchvision.datasets")
        ds = datasets.ImageFolder(name.split(":", 1)[1])
        return ds, list(ds.classes)
    raise ValueError(f"unknown dataset {name!r}")
