"""Cross-resolution re-identification toolkit (Python front end)."""

import json

from . import _rain
from ._rain import (
    CheckpointMismatch,
    ConfigError,
    ProtocolError,
    TrainingAborted,
    adversarial_loss,
    classification_loss,
    cmc,
    distance_matrix,
    downsample_upsample,
    embed,
    mean_ap,
    reconstruction_loss,
    toy_images,
    triplet_loss,
)

__all__ = [
    "CheckpointMismatch",
    "ConfigError",
    "ProtocolError",
    "TrainingAborted",
    "adversarial_loss",
    "classification_loss",
    "cmc",
    "dataset_summary",
    "distance_matrix",
    "downsample_upsample",
    "embed",
    "fingerprint",
    "load_spec",
    "mean_ap",
    "reconstruction_loss",
    "run_experiment",
    "toy_images",
    "triplet_loss",
    "validate_spec",
]


def _text(spec):
    return spec if isinstance(spec, str) else json.dumps(spec)


def validate_spec(spec):
    """Return the experiment spec with defaults filled in; raises ConfigError."""
    return json.loads(_rain.validate_spec(_text(spec)))


def load_spec(path):
    with open(path) as f:
        return validate_spec(f.read())


def fingerprint(doc):
    return _rain.fingerprint(_text(doc))


def dataset_summary(spec):
    return _rain.dataset_summary(_text(spec))


def run_experiment(spec, out_dir="", workers=1, seed=None):
    """Train and evaluate; returns the report as a dict."""
    return json.loads(_rain.run_experiment(_text(spec), out_dir, workers, seed))
