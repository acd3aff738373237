"""Target batch construction and multi-scale fusion of momentum-net predictions.

A target sample expands into the full image plus N random crops, each in a
clean variant (momentum network input) and a photometrically noised variant
(segmentation network input) sharing identical geometry. Crop predictions are
re-projected onto the image canvas and merged with the full-image prediction,
either by per-pixel averaging or by picking the minimum-entropy candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .imaging import (CropSpec, apply_crop, apply_photometric, identity_crop_spec,
                      inverse_project, resize_bilinear, sample_crop_spec,
                      sample_photo_noise)


@dataclass
class TargetBatch:
    original_clean: np.ndarray
    crops_clean: list
    crop_specs: list
    original_noisy: np.ndarray
    crops_noisy: list

    @property
    def clean_inputs(self) -> list:
        return [self.original_clean] + self.crops_clean

    @property
    def noisy_inputs(self) -> list:
        return [self.original_noisy] + self.crops_noisy


@dataclass
class FusedPrediction:
    map: np.ndarray
    coverage: np.ndarray


def build_target_batch(img: np.ndarray, n_crops: int, min_scale: float,
                       input_h: int, input_w: int, stream: RngStream,
                       photometric: bool = True, allow_flip: bool = True) -> TargetBatch:
    """Sample N crop geometries and produce clean/noisy input pairs at (h, w).

    With `photometric` disabled the noisy variants equal the clean ones
    exactly; noise parameters are still drawn to keep the stream layout fixed.
    """
    if n_crops < 0:
        raise ValueError("n_crops must be >= 0")
    img_h, img_w = img.shape[-2:]
    original_clean = resize_bilinear(img, input_h, input_w)

    specs, crops_clean, crops_noisy = [], [], []
    for i in range(n_crops):
        spec = sample_crop_spec(img_h, img_w, min_scale,
                                stream.derive(f"crop={i}"), allow_flip=allow_flip)
        clean = apply_crop(img, spec, input_h, input_w)
        noise = sample_photo_noise(stream.derive(f"noise={i}"))
        specs.append(spec)
        crops_clean.append(clean)
        crops_noisy.append(apply_photometric(clean, noise) if photometric else clean.copy())
    orig_noise = sample_photo_noise(stream.derive("noise=original"))
    original_noisy = (apply_photometric(original_clean, orig_noise)
                      if photometric else original_clean.copy())
    return TargetBatch(original_clean=original_clean, crops_clean=crops_clean,
                       crop_specs=specs, original_noisy=original_noisy,
                       crops_noisy=crops_noisy)


def _entropy(probs: np.ndarray) -> np.ndarray:
    # Shannon entropy per pixel in nats; 0*log(0) contributes 0.
    safe = np.where(probs > 0.0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=0)


def fuse(predictions: list, specs: list, canvas_h: int, canvas_w: int,
         mode: str = "average") -> FusedPrediction:
    """Merge [full-image pred, crop preds...] on the (canvas_h, canvas_w) canvas.

    The full-image prediction covers every pixel, so coverage >= 1. Averaging
    is the arithmetic mean of all covering candidates; min-entropy picks the
    candidate with the smallest Shannon entropy, ties breaking toward the
    earlier candidate (full image first, then crops in sampling order).
    """
    if len(predictions) != len(specs) + 1:
        raise ValueError(f"{len(predictions)} predictions for {len(specs)} crop specs")
    if mode not in ("average", "min_entropy"):
        raise ValueError(f"unknown fusion mode {mode!r}")

    all_specs = [identity_crop_spec(canvas_h, canvas_w)] + list(specs)
    coverage = np.zeros((canvas_h, canvas_w), dtype=np.int64)

    if mode == "average":
        acc = np.zeros((predictions[0].shape[0], canvas_h, canvas_w))
        for pred, spec in zip(predictions, all_specs):
            projected, mask = inverse_project(pred, spec, canvas_h, canvas_w)
            acc += projected
            coverage += mask
        fused = acc / coverage
        return FusedPrediction(map=fused, coverage=coverage)

    best = np.full((canvas_h, canvas_w), np.inf)
    fused = np.zeros((predictions[0].shape[0], canvas_h, canvas_w))
    for pred, spec in zip(predictions, all_specs):
        projected, mask = inverse_project(pred, spec, canvas_h, canvas_w)
        ent = np.where(mask, _entropy(projected), np.inf)
        take = ent < best
        best = np.where(take, ent, best)
        fused = np.where(take[None], projected, fused)
        coverage += mask
    return FusedPrediction(map=fused, coverage=coverage)
