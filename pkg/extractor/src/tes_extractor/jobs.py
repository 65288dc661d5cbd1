"""Extraction job description and prompt templating."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_TEMPLATE = "a photo of a {}"
FINE_GRAINED_TEMPLATE = "a photo of a {}, a type of {category}"

# the prompt ensemble used for zero-shot style proxy averaging
ENSEMBLE_TEMPLATES = (
    "a photo of a {}",
    "a blurry photo of a {}",
    "a photo of many {}",
    "a low resolution photo of a {}",
    "a cropped photo of a {}",
    "a bright photo of a {}",
    "a photo of the {}",
)


def validate_template(template: str) -> str:
    """A template must contain exactly one class-name slot {}.

    An optional {category} slot is allowed for fine-grained datasets.
    """
    stripped = template.replace("{category}", "")
    slots = re.findall(r"\{\}", stripped)
    if len(slots) != 1:
        raise ValueError(
            f"template must contain exactly one class-name slot {{}}, got {template!r}"
        )
    return template


def normalize_class_name(name: str) -> str:
    """Underscores and repeated whitespace become single spaces."""
    return " ".join(name.replace("_", " ").split())


def fill_template(template: str, class_name: str, category: str = "") -> str:
    text = template.replace("{category}", category) if "{category}" in template else template
    return text.format(normalize_class_name(class_name))


@dataclass
class ExtractionJob:
    """What to extract, with what, and where to put it."""

    dataset: str
    encoder: str
    output_prefix: str
    prompt_template: str = DEFAULT_TEMPLATE
    category: str = ""
    batch_size: int = 64
    device: str = "cpu"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_template(self.prompt_template)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        Path(self.output_prefix).parent.mkdir(parents=True, exist_ok=True)
