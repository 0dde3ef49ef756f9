"""Label volumes ``[T, M, N]`` of class ids, with 255 marking ignored pixels."""

from __future__ import annotations

import numpy as np

IGNORE = 255


def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"label volume must be [T, M, N], got shape {labels.shape}")
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        t, m, n = np.argwhere(bad)[0]
        raise ValueError(f"label {labels[t, m, n]} at (t={t}, m={m}, n={n}) is neither a class "
                         f"id below {num_classes} nor IGNORE ({IGNORE})")
    return labels


def valid_mask(labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels) != IGNORE


def valid_consistent_pairs(labels: np.ndarray) -> np.ndarray:
    """``[T-1, M, N]`` mask of pixels valid at t whose label is unchanged at t+1.

    This is the one predicate behind the loss normaliser and the Cons/ConsW
    denominators. A valid label equal to its successor implies the successor
    is valid too, so pairs touching an IGNORE frame never qualify.
    """
    s = np.asarray(labels)
    if s.ndim != 3 or s.shape[0] < 2:
        raise ValueError(f"need a label volume with T >= 2, got shape {s.shape}")
    return (s[:-1] != IGNORE) & (s[:-1] == s[1:])
