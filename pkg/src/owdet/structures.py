"""Shared record types passed between detector, matching, and labeling."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Target.source values
ANNOTATED = "annotated"
PSEUDO_BINARY = "pseudo_binary"
PSEUDO_SS = "pseudo_ss"
PSEUDO_TEACHER = "pseudo_teacher"  # previous-class boxes picked from a frozen teacher

# Binary-head label convention: 0 is foreground, 1 is background.
FOREGROUND = 0
BACKGROUND = 1


def sigmoid_np(x):
    """Overflow-safe numpy sigmoid."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Target:
    """One supervision box.

    ``label`` is a 1-based class id; the unknown class is id n+1 where n is
    the current known-class count. ``box`` is (cx, cy, w, h) normalized.
    ``track_id`` links the same physical proposal across augmented views
    for the consistency loss; None means no cross-view identity.
    """

    label: int
    box: np.ndarray
    source: str = ANNOTATED
    track_id: Optional[int] = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)


@dataclass
class Prediction:
    """Numpy view of one query's output, for matching and selection."""

    class_logits: np.ndarray
    binary_logit: float
    box: np.ndarray
    query_feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    index: int = -1

    def __post_init__(self):
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64).reshape(-1)
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
        self.query_feature = np.asarray(self.query_feature, dtype=np.float64).reshape(-1)
        self.binary_logit = float(self.binary_logit)

    @property
    def objectness(self):
        return float(sigmoid_np(np.array(self.binary_logit)))
