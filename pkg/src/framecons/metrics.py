"""mIoU, pixel accuracy and the two temporal-consistency scores (Cons, ConsW)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .labels import IGNORE, valid_consistent_pairs, valid_mask

CONS_MODES = ("raw", "dilated")


def _pred_labels(pred: np.ndarray, labels_shape: tuple[int, ...]) -> np.ndarray:
    """Accept either probabilities ``[T, M, N, K]`` or label maps ``[T, M, N]``."""
    pred = np.asarray(pred)
    if pred.shape == labels_shape:
        return pred
    if pred.ndim == len(labels_shape) + 1 and pred.shape[:-1] == labels_shape:
        return pred.argmax(axis=-1)
    raise ValueError(f"predictions {pred.shape} do not match labels {labels_shape}")


def validity_pair_check(labels: np.ndarray, t: int, m: int, n: int) -> int:
    s = np.asarray(labels)
    if not 0 <= t < s.shape[0] - 1:
        raise IndexError(f"pair index t={t} outside [0, {s.shape[0] - 2}]")
    return int(s[t, m, n] != IGNORE and s[t, m, n] == s[t + 1, m, n])


def confusion_matrix(pred_labels: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts over valid pixels; rows are ground truth, columns prediction."""
    s = np.asarray(labels)
    pred = np.asarray(pred_labels)
    if pred.shape != s.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {s.shape}")
    keep = valid_mask(s)
    idx = s[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class in [0, 1]; NaN for classes absent from both GT and prediction."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def miou_acc(cm: np.ndarray) -> tuple[float, float]:
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix: no valid pixels")
    iou = per_class_iou(cm)
    return 100.0 * float(np.nanmean(iou)), 100.0 * float(np.trace(cm) / total)


def dilate(mask: np.ndarray, size: int = 3, iterations: int = 1) -> np.ndarray:
    if iterations == 0:
        return np.asarray(mask, dtype=bool)
    return ndimage.binary_dilation(mask, structure=np.ones((size, size), bool), iterations=iterations)


def gt_change_masks(labels: np.ndarray, size: int = 3, iterations: int = 1) -> np.ndarray:
    """``[T-1, M, N]``: dilated set of pixels that change label or are invalid."""
    s = np.asarray(labels)
    change = ~valid_consistent_pairs(s)
    return np.stack([dilate(c, size, iterations) for c in change]) if len(change) else change


def consistency_counts(pred_labels: np.ndarray, labels: np.ndarray, mode: str = "raw",
                       dilation_size: int = 3, dilation_iterations: int = 1) -> tuple[int, int, int]:
    """(gt_consistent, pred_consistent, pred_consistent_wrong) pixel-pair counts."""
    if mode not in CONS_MODES:
        raise ValueError(f"consistency mode must be one of {CONS_MODES}, got {mode!r}")
    s = np.asarray(labels)
    pred = np.asarray(pred_labels)
    pool = valid_consistent_pairs(s)
    if mode == "dilated":
        pool = pool & ~gt_change_masks(s, dilation_size, dilation_iterations)
    same = pred[:-1] == pred[1:]
    wrong = pred[:-1] != s[:-1]
    return int(pool.sum()), int((pool & same).sum()), int((pool & same & wrong).sum())


def consistency(pred, labels: np.ndarray, mode: str = "raw") -> tuple[float, float]:
    """(Cons %, ConsW %) over pixel pairs whose ground truth is valid and unchanged."""
    s = np.asarray(labels)
    gt_cons, same, same_wrong = consistency_counts(_pred_labels(pred, s.shape), s, mode)
    if gt_cons == 0:
        raise ValueError("no valid GT-consistent pixel pairs: Cons is undefined")
    return 100.0 * same / gt_cons, 100.0 * same_wrong / gt_cons


def inconsistency_maps(pred, labels: np.ndarray, t: int, dilation_size: int = 3,
                       dilation_iterations: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Binary maps for the pair (t, t+1): prediction flips and dilated GT change."""
    s = np.asarray(labels)
    if not 0 <= t < s.shape[0] - 1:
        raise IndexError(f"pair index t={t} outside [0, {s.shape[0] - 2}]")
    pred = _pred_labels(pred, s.shape)
    flips = pred[t] != pred[t + 1]
    change = ~((s[t] != IGNORE) & (s[t] == s[t + 1]))
    return flips, dilate(change, dilation_size, dilation_iterations)


@dataclass
class EvalReport:
    miou: float
    acc: float
    cons: float
    consw: float
    per_class_iou: list[float]
    valid: int
    gt_consistent: int
    pred_consistent: int
    pred_consistent_wrong: int
    scenes_evaluated: int
    cons_mode: str = "raw"
    gt_mode: str = "dense"

    def as_kv(self) -> dict[str, str]:
        ious = ",".join("nan" if np.isnan(v) else repr(float(v)) for v in self.per_class_iou)
        return {
            "miou": repr(self.miou), "acc": repr(self.acc), "cons": repr(self.cons),
            "consw": repr(self.consw), "per_class_iou": ious, "valid": str(self.valid),
            "gt_consistent": str(self.gt_consistent), "pred_consistent": str(self.pred_consistent),
            "pred_consistent_wrong": str(self.pred_consistent_wrong),
            "scenes_evaluated": str(self.scenes_evaluated), "cons_mode": self.cons_mode,
            "gt_mode": self.gt_mode,
        }

    def to_kv_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_kv().items())

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "EvalReport":
        ious = [float(v) for v in kv["per_class_iou"].split(",")] if kv.get("per_class_iou") else []
        return cls(float(kv["miou"]), float(kv["acc"]), float(kv["cons"]), float(kv["consw"]),
                   ious, int(kv["valid"]), int(kv["gt_consistent"]), int(kv["pred_consistent"]),
                   int(kv["pred_consistent_wrong"]), int(kv["scenes_evaluated"]),
                   kv.get("cons_mode", "raw"), kv.get("gt_mode", "dense"))

    def summary(self, title: str = "evaluation") -> str:
        lines = [
            f"== {title} ==",
            f"scenes evaluated : {self.scenes_evaluated} (GT {self.gt_mode}, Cons {self.cons_mode})",
            f"mIoU  {self.miou:6.2f} %   Acc   {self.acc:6.2f} %",
            f"Cons  {self.cons:6.2f} %   ConsW {self.consw:6.2f} %",
            "per-class IoU    : " + " ".join(
                "  -  " if np.isnan(v) else f"{100 * v:5.1f}" for v in self.per_class_iou),
        ]
        return "\n".join(lines) + "\n"


@dataclass
class MetricAccumulator:
    """Sums confusion matrices and consistency counts over scenes."""

    num_classes: int
    cons_mode: str = "raw"
    gt_mode: str = "dense"
    cm: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    scenes: int = field(init=False, default=0)

    def __post_init__(self):
        if self.cons_mode not in CONS_MODES:
            raise ValueError(f"consistency mode must be one of {CONS_MODES}, got {self.cons_mode!r}")
        self.cm = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.zeros(3, dtype=np.int64)

    def add(self, pred, labels: np.ndarray, temporal_labels: np.ndarray | None = None) -> None:
        """Add one scene. ``temporal_labels`` (default ``labels``) drive Cons/ConsW."""
        s = np.asarray(labels)
        pred_labels = _pred_labels(pred, s.shape)
        self.cm += confusion_matrix(pred_labels, s, self.num_classes)
        tl = s if temporal_labels is None else np.asarray(temporal_labels)
        self.counts += consistency_counts(pred_labels, tl, self.cons_mode)
        self.scenes += 1

    def report(self) -> EvalReport:
        miou, acc = miou_acc(self.cm)
        gt_cons, same, same_wrong = (int(v) for v in self.counts)
        if gt_cons == 0:
            raise ValueError("no valid GT-consistent pixel pairs: Cons is undefined")
        return EvalReport(
            miou=miou, acc=acc, cons=100.0 * same / gt_cons, consw=100.0 * same_wrong / gt_cons,
            per_class_iou=[float(v) for v in per_class_iou(self.cm)],
            valid=int(self.cm.sum()), gt_consistent=gt_cons, pred_consistent=same,
            pred_consistent_wrong=same_wrong, scenes_evaluated=self.scenes,
            cons_mode=self.cons_mode, gt_mode=self.gt_mode,
        )
