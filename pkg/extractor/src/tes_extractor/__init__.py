"""Dump frozen image embeddings and class-name text proxies from
pretrained encoders into the binary formats the training package reads."""

from .encoders import EncoderUnavailable, load_dataset, load_encoder
from .extract import extract_image_features, extract_text_proxies
from .jobs import (
    DEFAULT_TEMPLATE,
    ENSEMBLE_TEMPLATES,
    ExtractionJob,
    fill_template,
    normalize_class_name,
    validate_template,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_TEMPLATE",
    "ENSEMBLE_TEMPLATES",
    "EncoderUnavailable",
    "ExtractionJob",
    "extract_image_features",
    "extract_text_proxies",
    "fill_template",
    "load_dataset",
    "load_encoder",
    "normalize_class_name",
    "validate_template",
]
