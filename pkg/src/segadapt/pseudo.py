"""Moving class priors, sample-based thresholds, and pseudo-label extraction.

The momentum network's softmax maps drive three quantities:
  * a per-class prior estimate (mean probability mass per image),
  * its exponential moving average chi with momentum gamma_chi,
  * the threshold  theta_c = zeta * (1 - exp(-chi_c / beta)) * peak_c,
which together select confident pixels as supervision targets. Long-tail
classes (small chi) get lower thresholds; prevalent classes saturate at
zeta * peak.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE


@dataclass
class ClassPriorState:
    chi: np.ndarray
    gamma_chi: float
    beta: float
    zeta: float
    # False switches to the beta -> 0 limit: theta = zeta * peak exactly.
    class_thresholding: bool = True
    history: list = field(default_factory=list)

    @classmethod
    def uniform(cls, num_classes: int, gamma_chi: float, beta: float, zeta: float,
                class_thresholding: bool = True) -> "ClassPriorState":
        return cls(chi=np.full(num_classes, 1.0 / num_classes), gamma_chi=gamma_chi,
                   beta=beta, zeta=zeta, class_thresholding=class_thresholding)


@dataclass
class PseudoLabelMap:
    """Per-pixel class index or IGNORE, with the momentum-net confidence of the pick."""

    labels: np.ndarray
    confidence: np.ndarray


def estimate_prior(probs: np.ndarray) -> np.ndarray:
    """Mean probability mass per class over all pixels of a (K, h, w) map."""
    if probs.ndim != 3:
        raise ValueError(f"expected (K, h, w) map, got shape {probs.shape}")
    return probs.mean(axis=(1, 2))


def update_prior(state: ClassPriorState, observation: np.ndarray) -> ClassPriorState:
    """EMA step chi <- gamma*chi + (1-gamma)*observation; records history."""
    observation = np.asarray(observation, dtype=np.float64)
    if observation.shape != state.chi.shape:
        raise ValueError("observation length mismatch")
    if observation.min() < 0.0 or observation.max() > 1.0:
        raise ValueError("observation entries outside [0, 1]")
    chi = state.gamma_chi * state.chi + (1.0 - state.gamma_chi) * observation
    state.history.append(chi.copy())
    state.chi = chi
    return state


def peak_confidence(probs: np.ndarray) -> np.ndarray:
    """Per-class maximum probability over all pixels of a (K, h, w) map."""
    if probs.ndim != 3:
        raise ValueError(f"expected (K, h, w) map, got shape {probs.shape}")
    return probs.max(axis=(1, 2))


def thresholds(state: ClassPriorState, peak: np.ndarray) -> np.ndarray:
    """theta_c = zeta * (1 - exp(-chi_c / beta)) * peak_c, bounded by zeta * peak_c."""
    peak = np.asarray(peak, dtype=np.float64)
    if peak.min() < 0.0 or peak.max() > 1.0:
        raise ValueError("peak confidences outside [0, 1]")
    if not state.class_thresholding:
        return state.zeta * peak
    return state.zeta * (1.0 - np.exp(-state.chi / state.beta)) * peak


def extract_pseudo_labels(fused_map: np.ndarray, theta: np.ndarray) -> PseudoLabelMap:
    """Argmax labels where the dominant class clears its threshold, IGNORE elsewhere.

    Ties in the argmax resolve to the lowest class index. The confidence field
    carries the dominant-class probability everywhere (unused at IGNORE).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if fused_map.shape[0] != theta.shape[0]:
        raise ValueError("threshold vector length mismatch")
    winner = np.argmax(fused_map, axis=0)
    confidence = np.take_along_axis(fused_map, winner[None], axis=0)[0]
    labels = np.where(confidence > theta[winner], winner, IGNORE)
    return PseudoLabelMap(labels=labels.astype(np.int64), confidence=confidence)
