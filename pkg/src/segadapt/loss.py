"""Target and source losses with exact gradients w.r.t. the pre-softmax logits.

Target loss per labeled pixel:  -conf * (1 - chi_{c*})^lambda * log(p_{c*}),
where conf is the momentum network's confidence in the pseudo label (treated
as a constant) and chi is the moving class prior. Per map, the loss is the
mean over labeled pixels scaled by `scale`; averaging across maps is the
caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IGNORE, LOG_CLAMP
from .pseudo import PseudoLabelMap


@dataclass
class LossReport:
    value: float
    dlogits: np.ndarray
    labeled: int
    clamped: int


def focal_target_loss(pred: np.ndarray, pseudo: PseudoLabelMap, chi: np.ndarray,
                      focal_lambda: float, scale: float = 1.0,
                      confidence_reg: bool = True) -> LossReport:
    """Focal, confidence-weighted cross-entropy against pseudo labels.

    `pred` is the segmentation network's (K, h, w) softmax map. Pixels labeled
    IGNORE contribute neither loss nor gradient. Disabling `confidence_reg`
    replaces the momentum confidence by 1 and changes nothing else.
    """
    k, h, w = pred.shape
    labels = pseudo.labels
    if labels.shape != (h, w):
        raise ValueError("pseudo label shape mismatch")
    valid = labels != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        return LossReport(0.0, np.zeros_like(pred), 0, 0)

    safe_labels = np.where(valid, labels, 0)
    p_star = np.take_along_axis(pred, safe_labels[None], axis=0)[0]
    clamped = int((valid & (p_star < LOG_CLAMP)).sum())
    p_star = np.maximum(p_star, LOG_CLAMP)

    conf = pseudo.confidence if confidence_reg else np.ones_like(p_star)
    weight = conf * (1.0 - chi[safe_labels]) ** focal_lambda
    pixel_loss = -weight * np.log(p_star)
    value = scale * float(pixel_loss[valid].mean())

    # d/dlogit_k of -w*log softmax_{c*} is w*(p_k - [k == c*]).
    coeff = np.where(valid, weight, 0.0) * (scale / n_valid)
    onehot = np.zeros_like(pred)
    np.put_along_axis(onehot, safe_labels[None], 1.0, axis=0)
    onehot *= valid
    dlogits = coeff[None] * (pred * valid[None] - onehot)
    return LossReport(value, dlogits, n_valid, clamped)


def source_ce_loss(pred: np.ndarray, gt: np.ndarray) -> LossReport:
    """Mean cross-entropy over non-IGNORE pixels of a (K, h, w) map."""
    k, h, w = pred.shape
    if gt.shape != (h, w):
        raise ValueError("ground-truth shape mismatch")
    valid = gt != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        return LossReport(0.0, np.zeros_like(pred), 0, 0)

    safe_labels = np.where(valid, gt, 0)
    p_star = np.take_along_axis(pred, safe_labels[None], axis=0)[0]
    clamped = int((valid & (p_star < LOG_CLAMP)).sum())
    p_star = np.maximum(p_star, LOG_CLAMP)
    value = float(-np.log(p_star)[valid].mean())

    onehot = np.zeros_like(pred)
    np.put_along_axis(onehot, safe_labels[None], 1.0, axis=0)
    onehot *= valid
    dlogits = (pred * valid[None] - onehot) / n_valid
    return LossReport(value, dlogits, n_valid, clamped)
