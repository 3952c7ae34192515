"""Detector-agnostic toolkit for expression selection and pseudo-label self-training.

The pieces fit together like this: candidate referential expressions per
category are scored against a few-shot set of verified boxes
(:mod:`grounder.expressions`), the winning expression drives pseudo-label
generation on unlabeled images (:mod:`grounder.pseudolabel`), the labels
finetune a grounding detector behind a wire protocol
(:mod:`grounder.protocol`), and the loop repeats until a stopping rule
fires. Evaluation and reporting live in :mod:`grounder.evaluation` and
:mod:`grounder.reporting`; ``python -m grounder`` exposes the whole pipeline.
"""

from .errors import (
    AdapterError,
    ConfigError,
    DataError,
    GrounderError,
    IntegrityError,
    LineageError,
    ParseError,
    PartialBatchError,
    ProtocolError,
    TransportError,
)
from .geometry import BBox, giou, iou

__version__ = "0.1.0"

__all__ = [
    "AdapterError",
    "BBox",
    "ConfigError",
    "DataError",
    "GrounderError",
    "IntegrityError",
    "LineageError",
    "ParseError",
    "PartialBatchError",
    "ProtocolError",
    "TransportError",
    "__version__",
    "giou",
    "iou",
]
