"""Extraction pipelines: dataset -> TESF/TESL files, class names -> proxy file."""
from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .encoders import load_dataset, load_encoder
from .formats import write_dataset, write_proxies
from .jobs import ENSEMBLE_TEMPLATES, ExtractionJob, fill_template, validate_template


def _write_manifest(prefix: str, payload: dict) -> Path:
    path = Path(str(prefix) + ".manifest.json")
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def extract_image_features(job: ExtractionJob) -> dict:
    """One feature row per image, fixed dataset order, plus aligned labels.

    The encoder runs in eval mode without augmentation, so repeated runs
    produce bit-identical files.
    """
    samples, class_names = load_dataset(job.dataset, root=job.extra.get("root", "datasets"))
    encoder = load_encoder(job.encoder, device=job.device,
                           **job.extra.get("encoder_args", {}))
    features: list[np.ndarray] = []
    labels: list[int] = []
    batch: list = []
    for image, label in samples:
        batch.append(image)
        labels.append(int(label))
        if len(batch) == job.batch_size:
            features.append(encoder.encode_images(batch))
            batch = []
    if batch:
        features.append(encoder.encode_images(batch))
    if not features:
        raise ValueError(f"dataset {job.dataset!r} is empty")
    matrix = np.concatenate(features).astype(np.float32)
    write_dataset(job.output_prefix, matrix, np.asarray(labels), class_names)
    manifest = {
        "kind": "image-features",
        "dataset": job.dataset,
        "encoder": encoder.name,
        "layer": encoder.layer,
        "n": int(matrix.shape[0]),
        "dim": int(matrix.shape[1]),
        "n_classes": len(class_names),
        "batch_size": job.batch_size,
        "device": job.device,
    }
    _write_manifest(job.output_prefix, manifest)
    return manifest


def extract_text_proxies(
    job: ExtractionJob, class_names: list[str], ensemble: bool = False
) -> dict:
    """One proxy row per class from the prompt template(s).

    Ensemble mode normalizes per-prompt embeddings, averages them per
    class, and normalizes again after averaging.
    """
    if not class_names:
        raise ValueError("class name list is empty")
    if len(set(class_names)) != len(class_names):
        warnings.warn("duplicate class names produce duplicate proxy rows")
    validate_template(job.prompt_template)
    encoder = load_encoder(job.encoder, device=job.device,
                           **job.extra.get("encoder_args", {}))
    templates = list(ENSEMBLE_TEMPLATES) if ensemble else [job.prompt_template]
    per_template = []
    for template in templates:
        prompts = [fill_template(template, name, job.category) for name in class_names]
        emb = encoder.encode_texts(prompts)
        if ensemble:
            emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        per_template.append(emb)
    proxies = np.mean(per_template, axis=0)
    if ensemble:
        proxies = proxies / np.linalg.norm(proxies, axis=1, keepdims=True)
    write_proxies(job.output_prefix, proxies.astype(np.float32), class_names)
    meta = {"prompt_template": job.prompt_template if not ensemble else "|".join(templates),
            "encoder": encoder.name}
    Path(str(job.output_prefix) + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    manifest = {
        "kind": "text-proxies",
        "encoder": encoder.name,
        "layer": encoder.layer,
        "ensemble": ensemble,
        "templates": templates,
        "n_classes": len(class_names),
        "dim": int(proxies.shape[1]),
        "pooling": getattr(encoder, "pooling", None),
    }
    _write_manifest(job.output_prefix, manifest)
    return manifest
