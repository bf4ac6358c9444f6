"""Pixelwise classification losses.

All losses are fused ops: forward values are computed directly from arrays
and the analytic gradient is registered on the ambient tape, which keeps the
softmax/log/select chain out of the graph.  Loss values are float64 scalars;
gradients match the logits dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, attach
from .errors import DataError, DimensionError, ParameterError
from .ops import log_softmax_array

VOID_LABEL = 255
WEIGHT_EPS = 1e-5


# ---------------------------------------------------------------------------
# class statistics and weighting

@dataclass(frozen=True)
class ClassStats:
    """Per-class pixel counts over a label collection (void excluded)."""

    counts: np.ndarray

    @staticmethod
    def from_labels(labels_seq, num_classes: int, void: int = VOID_LABEL) -> "ClassStats":
        counts = np.zeros(num_classes, dtype=np.int64)
        for labels in labels_seq:
            flat = np.asarray(labels).reshape(-1)
            valid = flat[flat != void]
            if valid.size and valid.max() >= num_classes:
                raise DataError(f"label id {int(valid.max())} outside the "
                                f"{num_classes}-class space")
            counts += np.bincount(valid, minlength=num_classes)
        return ClassStats(counts)

    @property
    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise DataError("class statistics are empty (all labels void)")
        return self.counts / total

    def weights(self, eps: float = WEIGHT_EPS) -> np.ndarray:
        return wce_weights(self.frequencies, eps=eps)


def wce_weights(frequencies, eps: float = WEIGHT_EPS) -> np.ndarray:
    """Inverse-frequency class weights, normalized and floored.

    For present classes: w_l = max(f_l^-1 / (sum_i f_i^-1 * min_i f_i^-1), eps)
    where sums and minima run over present classes only.  Absent classes get
    the floor weight and are excluded from the normalizer.  Double precision.
    """
    f = np.asarray(frequencies, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionError("wce_weights: frequencies must be a vector")
    if (f < 0).any() or not np.isfinite(f).all():
        raise ParameterError("wce_weights: frequencies must be finite and non-negative")
    present = f > 0
    if not present.any():
        raise ParameterError("wce_weights: at least one class must be present")
    inv = 1.0 / f[present]
    denom = inv.sum() * inv.min()
    w = np.full(f.shape, eps, dtype=np.float64)
    w[present] = np.maximum(inv / denom, eps)
    return w


# ---------------------------------------------------------------------------
# weighted cross-entropy

def _validate_logits_labels(name, logits, labels, num_classes, void):
    if logits.data.ndim != 4:
        raise DimensionError(f"{name}: logits must be (N, L, H, W)")
    n, l, h, w = logits.shape
    if l != num_classes:
        raise DimensionError(f"{name}: logits have {l} channels, expected {num_classes}")
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"{name}: labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != void
    if valid.any() and labels[valid].max() >= num_classes:
        raise DataError(f"{name}: label id {int(labels[valid].max())} outside the "
                        f"{num_classes}-class space")
    return labels, valid


def loss_wce(logits: Tensor, labels, weights, void: int = VOID_LABEL) -> Tensor:
    """Class-weighted cross-entropy over non-void pixels.

    loss = -(1/M) * sum_px w[y_px] * log softmax(logits)[y_px], with M the
    number of non-void pixels.  Void pixels contribute neither loss nor
    gradient.
    """
    weights = np.asarray(weights, dtype=np.float64)
    labels, valid = _validate_logits_labels("loss_wce", logits, labels,
                                            weights.shape[0], void)
    m = int(valid.sum())
    if m == 0:
        raise DataError("loss_wce: batch contains no labeled pixels")
    lab = np.where(valid, labels, 0).astype(np.intp)

    logp = log_softmax_array(logits.data)
    w_px = weights[lab] * valid                      # float64 (N, H, W)
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    loss = -(w_px * picked).sum() / m

    def bwd(g):
        p = np.exp(logp)
        wz = (w_px / m).astype(logits.dtype)         # zero at void pixels
        dz = p * wz[:, None]
        cur = np.take_along_axis(dz, lab[:, None], axis=1)
        np.put_along_axis(dz, lab[:, None], cur - wz[:, None], axis=1)
        return [dz * g]

    return attach(np.float64(loss), [logits], bwd)


def loss_bgc(logits_dense: Tensor, labels_dense, weights_dense,
             logits_sparse: Tensor, labels_sparse, weights_sparse,
             lam: float, void: int = VOID_LABEL) -> Tensor:
    """Balanced two-domain objective: WCE(dense) + lam * WCE(sparse).

    Composed from :func:`loss_wce` on the tape, so the value is exactly
    linear in ``lam`` and gradients flow to both logits.
    """
    if lam < 0:
        raise ParameterError(f"loss_bgc: lam must be >= 0, got {lam}")
    from . import ops
    dense = loss_wce(logits_dense, labels_dense, weights_dense, void=void)
    sparse = loss_wce(logits_sparse, labels_sparse, weights_sparse, void=void)
    return ops.add(dense, ops.scale(sparse, lam))


# ---------------------------------------------------------------------------
# distillation losses

def _validate_teacher_probs(name, logits, probs, tol: float = 1e-4):
    probs = np.asarray(probs)
    if probs.shape != tuple(logits.shape):
        raise DimensionError(f"{name}: teacher probs shape {probs.shape} != "
                             f"{tuple(logits.shape)}")
    if (probs < -tol).any() or (probs > 1 + tol).any():
        raise DataError(f"{name}: teacher probabilities outside [0, 1]")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > tol:
        raise DataError(f"{name}: teacher probabilities do not sum to 1 "
                        f"(worst deviation {np.abs(sums - 1.0).max():.2e})")
    return probs


def distill_ce(student_logits: Tensor, teacher_probs) -> Tensor:
    """Soft-target cross-entropy against a teacher distribution.

    loss = -(1/M) * sum_px sum_l q log softmax(z)_l over all M pixels;
    gradient is (softmax(z) - q) / M.
    """
    q = _validate_teacher_probs("distill_ce", student_logits, teacher_probs)
    n, l, h, w = student_logits.shape
    m = n * h * w
    logp = log_softmax_array(student_logits.data)
    loss = -(q * logp).sum(dtype=np.float64) / m

    def bwd(g):
        p = np.exp(logp)
        return [((p - q) / m).astype(student_logits.dtype) * g]

    return attach(np.float64(loss), [student_logits], bwd)


def distill_wce(student_logits: Tensor, teacher_probs, weights) -> Tensor:
    """Soft-target cross-entropy weighted by the teacher's argmax class.

    Each pixel's contribution is scaled by w[argmax_l q_l]; weights normally
    come from :func:`wce_weights` over teacher argmax frequencies.
    """
    q = _validate_teacher_probs("distill_wce", student_logits, teacher_probs)
    weights = np.asarray(weights, dtype=np.float64)
    n, l, h, w = student_logits.shape
    if weights.shape != (l,):
        raise DimensionError(f"distill_wce: weights shape {weights.shape} != ({l},)")
    m = n * h * w
    w_px = weights[q.argmax(axis=1)]                 # (N, H, W)
    logp = log_softmax_array(student_logits.data)
    loss = -(w_px[:, None] * q * logp).sum(dtype=np.float64) / m

    def bwd(g):
        p = np.exp(logp)
        return [(w_px[:, None] * (p - q) / m).astype(student_logits.dtype) * g]

    return attach(np.float64(loss), [student_logits], bwd)
