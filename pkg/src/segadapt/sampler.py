"""Class-prior importance sampling of target images.

A (K x n_images) matrix of per-image class priors, computed once from the
pre-trained network, defines the two-step draw: pick a class uniformly, then
pick an image with probability proportional to that class's prior mass on it.
Images rich in rare classes are therefore revisited more often.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import RngStream

SIDECAR_MAGIC = "segadapt-priors-v1"


@dataclass
class SamplerState:
    chi_matrix: np.ndarray          # (K, n_images)
    weights: np.ndarray             # rows normalized to sum 1 (uniform fallback rows)
    uniform: bool = False           # True disables importance sampling

    @property
    def num_classes(self) -> int:
        return self.chi_matrix.shape[0]

    @property
    def num_images(self) -> int:
        return self.chi_matrix.shape[1]


def build_sampler_state(chi_matrix: np.ndarray, uniform: bool = False) -> SamplerState:
    chi_matrix = np.asarray(chi_matrix, dtype=np.float64)
    if chi_matrix.ndim != 2 or chi_matrix.shape[1] == 0:
        raise ValueError("chi_matrix must be (K, n_images) with n_images >= 1")
    if chi_matrix.min() < 0.0:
        raise ValueError("chi_matrix entries must be >= 0")
    sums = chi_matrix.sum(axis=1, keepdims=True)
    n = chi_matrix.shape[1]
    # Rows with zero mass fall back to uniform draws; unreachable under softmax
    # priors but required for degenerate models.
    weights = np.where(sums > 0.0, chi_matrix / np.where(sums > 0.0, sums, 1.0), 1.0 / n)
    return SamplerState(chi_matrix=chi_matrix, weights=weights, uniform=uniform)


def precompute_priors(predict_fn, images: list, uniform: bool = False) -> SamplerState:
    """One class-prior vector per image via `predict_fn(image) -> (K, h, w)` softmax."""
    if not images:
        raise ValueError("target set is empty")
    columns = [predict_fn(img).mean(axis=(1, 2)) for img in images]
    return build_sampler_state(np.stack(columns, axis=1), uniform=uniform)


def draw(state: SamplerState, stream: RngStream) -> int:
    """Sample one target image index (uniform class, then weighted image)."""
    if state.uniform:
        return stream.integers(0, state.num_images)
    cls = stream.integers(0, state.num_classes)
    u = stream.uniform(0.0, 1.0)
    cdf = np.cumsum(state.weights[cls])
    return int(min(np.searchsorted(cdf, u, side="right"), state.num_images - 1))


def marginal_probabilities(state: SamplerState) -> np.ndarray:
    """Analytic per-image draw probability: (1/K) * sum_c weights[c, l]."""
    return state.weights.mean(axis=0)


def save_priors(path, state: SamplerState) -> None:
    header = {"format": SIDECAR_MAGIC, "num_classes": state.num_classes,
              "num_images": state.num_images, "uniform": state.uniform}
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(state.chi_matrix.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_priors(path) -> SamplerState:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a {SIDECAR_MAGIC} file")
    k, n = header["num_classes"], header["num_images"]
    if len(body) != 8 * k * n:
        raise ValueError(f"{path}: truncated prior matrix")
    matrix = np.frombuffer(body, dtype="<f8").reshape(k, n).copy()
    return build_sampler_state(matrix, uniform=header["uniform"])
