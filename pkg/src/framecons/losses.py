"""Cross entropy plus the frame-to-frame inconsistency penalty.

Predictions are ``[T, M, N, K]`` probability tensors; labels are ``[T, M, N]``
integer volumes (see :mod:`framecons.labels`). Time indices are 0-based and a
pair ``t`` compares frames ``t`` and ``t + 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .labels import IGNORE, valid_consistent_pairs, valid_mask
from .tensor import Tensor

log = logging.getLogger(__name__)

DIFFERENCES = ("Squared", "Absolute")
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_ce: float = 1.0
    lambda_incons: float = 10.0
    difference: str = "Squared"
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_incons < 0:
            raise ValueError("loss weights must be non-negative")
        if self.difference not in DIFFERENCES:
            raise ValueError(f"difference must be one of {DIFFERENCES}, got {self.difference!r}")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValueError("class weights must be strictly positive")


def indicator(condition) -> int:
    return 1 if condition else 0


def psi(s1: int, p1, s2: int, p2) -> int:
    """1 when at least one of the two predictions picks its ground-truth class."""
    return min(indicator(s1 == int(np.argmax(p1))) + indicator(s2 == int(np.argmax(p2))), 1)


def omega_norm(labels: np.ndarray) -> int:
    return int(valid_consistent_pairs(labels).sum())


def omega_vcc(labels: np.ndarray, probs: np.ndarray, t: int, m: int, n: int) -> int:
    s = np.asarray(labels)
    if not 0 <= t < s.shape[0] - 1:
        raise IndexError(f"pair index t={t} outside [0, {s.shape[0] - 2}]")
    s1, s2 = int(s[t, m, n]), int(s[t + 1, m, n])
    if s1 == IGNORE or s1 != s2:
        return 0
    return psi(s1, probs[t, m, n], s2, probs[t + 1, m, n])


def vcc_mask(labels: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Vectorised ``omega_vcc`` over all pairs: bool ``[T-1, M, N]``."""
    s = np.asarray(labels)
    pred = np.asarray(probs).argmax(axis=-1)
    correct = pred == s
    return valid_consistent_pairs(s) & (correct[:-1] | correct[1:])


def _probs(p) -> Tensor:
    p = tn.as_tensor(p)
    if p.ndim != 4:
        raise ValueError(f"predictions must be [T, M, N, K], got shape {p.shape}")
    return p


def cross_entropy(probs, labels: np.ndarray, weights=None) -> Tensor:
    """Mean over valid pixels of ``-w[s] * log(P[s])`` with the log floored at 1e-12."""
    p = _probs(probs)
    s = np.asarray(labels)
    if s.shape != p.shape[:3]:
        raise ValueError(f"labels {s.shape} do not match predictions {p.shape}")
    valid = valid_mask(s)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross entropy is undefined: every pixel is IGNORE")
    if weights is None:
        wmap = valid.astype(float)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (p.shape[3],):
            raise ValueError(f"need {p.shape[3]} class weights, got {w.shape}")
        wmap = np.where(valid, w[np.where(valid, s, 0)], 0.0)
    logp = tn.log_clamped(tn.gather_classes(p, s), LOG_FLOOR)
    return tn.weighted_sum(logp, -wmap / count)


def inconsistency_loss(probs, labels: np.ndarray, difference: str = "Squared",
                       mask: np.ndarray | None = None) -> Tensor:
    """Normalised true-class probability change between consecutive frames.

    Only valid, GT-consistent pixels with at least one correct prediction in
    the pair contribute. The mask is a constant for differentiation; pass
    ``mask`` to pin it (e.g. during finite-difference checks).
    """
    if difference not in DIFFERENCES:
        raise ValueError(f"difference must be one of {DIFFERENCES}, got {difference!r}")
    p = _probs(probs)
    s = np.asarray(labels)
    if s.shape != p.shape[:3]:
        raise ValueError(f"labels {s.shape} do not match predictions {p.shape}")
    norm = omega_norm(s)
    if norm == 0:
        log.warning("no valid GT-consistent pixel pairs; inconsistency loss set to 0")
        return Tensor(0.0)
    if mask is None:
        mask = vcc_mask(s, p.data)
    t_len = p.shape[0]
    true_class = s[:-1]
    now = tn.gather_classes(tn.take(p, 0, t_len - 1), true_class)
    nxt = tn.gather_classes(tn.take(p, 1, t_len), true_class)
    delta = tn.sub(now, nxt)
    d = tn.square(delta) if difference == "Squared" else tn.absolute(delta)
    return tn.weighted_sum(d, mask.astype(float) / norm)


def total_loss(probs, labels: np.ndarray, config: LossConfig,
               mask: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """``lambda_ce * CE + lambda_incons * incons``; also returns both components."""
    ce = cross_entropy(probs, labels, config.class_weights)
    total = tn.scale(ce, config.lambda_ce)
    incons_value = 0.0
    if np.asarray(labels).shape[0] >= 2:
        incons = inconsistency_loss(probs, labels, config.difference, mask)
        incons_value = incons.item()
        if config.lambda_incons != 0:
            total = tn.add(total, tn.scale(incons, config.lambda_incons))
    return total, {"ce": ce.item(), "incons": incons_value}
