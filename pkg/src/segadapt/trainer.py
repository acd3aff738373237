"""Training phases: source pre-training with adaptive BN, then joint adaptation.

Pre-training alternates source batches (full SGD steps, batch-statistics BN)
with target batches that only refresh the BN running statistics. Adaptation
freezes BN, draws target images via importance sampling, extracts pseudo
labels from fused momentum-network predictions, and accumulates the focal
target gradient with the source cross-entropy gradient into one SGD step per
iteration. The momentum network is updated by EMA every `momentum_period`
iterations and never receives gradients.

All randomness flows through streams derived from (config.seed, structured
path), so two runs with the same config are bit-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import IGNORE, RngStream, RunConfig
from .fusion import TargetBatch, build_target_batch, fuse
from .imaging import (apply_crop, apply_crop_labels, identity_crop_spec, resize_bilinear,
                      sample_crop_spec)
from .loss import focal_target_loss, source_ce_loss
from .model import (BNState, Checkpoint, ModelParams, backward, ema_update, forward,
                    init_bn_state, init_params, save_checkpoint, sgd_step)
from .pseudo import (ClassPriorState, PseudoLabelMap, estimate_prior, extract_pseudo_labels,
                     peak_confidence, thresholds, update_prior)
from .sampler import SamplerState, draw

EVAL_CHUNK = 25


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or activation."""


@dataclass
class TrainerState:
    iteration: int
    phi: ModelParams
    psi: ModelParams
    bn_phi: BNState
    bn_psi: BNState
    velocity: np.ndarray
    prior_state: ClassPriorState
    config: RunConfig


@dataclass
class PretrainResult:
    params: ModelParams
    bn: BNState
    velocity: np.ndarray
    metrics_rows: list
    checkpoint_path: str | None


@dataclass
class AdaptResult:
    state: TrainerState
    metrics_rows: list
    history_rows: list
    checkpoint_phi: str | None
    checkpoint_psi: str | None
    final_miou: float | None


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header: list, rows: list) -> None:
    """Atomic CSV write: comma separator, dot decimal point, header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(cell) for cell in row) + "\n")
    os.replace(tmp, path)


def build_source_batch(records: list, config: RunConfig,
                       stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Random multi-scale source crops with flips, plus matching label crops."""
    images, labels = [], []
    for i in range(config.batch_source):
        s = stream.derive(f"sample={i}")
        rec = records[s.integers(0, len(records))]
        img_h, img_w = rec.image.shape[-2:]
        spec = sample_crop_spec(img_h, img_w, config.min_crop_scale, s.derive("crop"))
        images.append(apply_crop(rec.image, spec, config.input_h, config.input_w))
        labels.append(apply_crop_labels(rec.labels, spec, config.input_h, config.input_w))
    return np.stack(images), np.stack(labels)


def _build_target_stats_batch(records: list, config: RunConfig,
                              stream: RngStream) -> np.ndarray:
    images = []
    for i in range(config.batch_source):
        s = stream.derive(f"sample={i}")
        rec = records[s.integers(0, len(records))]
        images.append(resize_bilinear(rec.image, config.input_h, config.input_w))
    return np.stack(images)


def _source_step(params, bn, batch, labels, mode):
    probs, cache = forward(params, bn, batch, mode)
    b = batch.shape[0]
    dlogits = np.empty_like(probs)
    total = 0.0
    for i in range(b):
        report = source_ce_loss(probs[i], labels[i])
        total += report.value
        dlogits[i] = report.dlogits
    loss = total / b
    grads = backward(cache, dlogits / b)
    return loss, grads


def pretrain_abn(config: RunConfig, source_records: list, target_records: list,
                 out_dir=None) -> PretrainResult:
    """Source-only training with BN statistics adapted on target batches.

    Target batches run forward in train_stats mode only; their loss is ignored
    and model parameters are untouched. An empty target set degenerates to
    plain supervised training.
    """
    if not source_records:
        raise ValueError("source set is empty")
    root = RngStream(config.seed, ("pretrain",))
    params = init_params(config.num_classes, root.derive("init"))
    bn = init_bn_state()
    velocity = np.zeros(params.layout.total)
    rows = []
    ckpt_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt_path = str(Path(out_dir) / "pretrain.ckpt")

    for t in range(1, config.pretrain_iters + 1):
        it = root.derive(f"iter={t}")
        batch, labels = build_source_batch(source_records, config, it.derive("source"))
        try:
            loss, grads = _source_step(params, bn, batch, labels, "train_stats")
        except FloatingPointError as exc:
            raise DivergenceError(f"pretrain iteration {t}: {exc}"
                                  f"{_last_ckpt_note(ckpt_path)}") from exc
        if not np.isfinite(loss):
            raise DivergenceError(f"pretrain iteration {t}: non-finite source loss"
                                  f"{_last_ckpt_note(ckpt_path)}")
        params, velocity = sgd_step(params, grads, velocity, config.lr,
                                    config.sgd_momentum, config.weight_decay)
        if target_records:
            stats_batch = _build_target_stats_batch(target_records, config, it.derive("target"))
            forward(params, bn, stats_batch, "train_stats")
        rows.append((t, loss))
        if ckpt_path and (t % config.checkpoint_period == 0 or t == config.pretrain_iters):
            save_checkpoint(ckpt_path, Checkpoint(
                params=params, bn=bn, velocity=velocity, iteration=t,
                num_classes=config.num_classes, input_h=config.input_h,
                input_w=config.input_w, config_hash=config.config_hash()))
            write_csv(Path(out_dir) / "pretrain_metrics.csv", ["iteration", "source_loss"], rows)
    if out_dir is not None and config.pretrain_iters == 0:
        save_checkpoint(ckpt_path, Checkpoint(
            params=params, bn=bn, velocity=velocity, iteration=0,
            num_classes=config.num_classes, input_h=config.input_h,
            input_w=config.input_w, config_hash=config.config_hash()))
        write_csv(Path(out_dir) / "pretrain_metrics.csv", ["iteration", "source_loss"], rows)
    return PretrainResult(params=params, bn=bn, velocity=velocity,
                          metrics_rows=rows, checkpoint_path=ckpt_path)


def _last_ckpt_note(path) -> str:
    if path and Path(path).exists():
        return f" (last good checkpoint: {path})"
    return ""


def pseudo_to_crop_frame(pseudo: PseudoLabelMap, spec, out_h: int, out_w: int) -> PseudoLabelMap:
    """Project a canvas pseudo-label map into one crop's input frame.

    Labels move by nearest-neighbour (IGNORE propagates); confidences move
    bilinearly.
    """
    labels = apply_crop_labels(pseudo.labels, spec, out_h, out_w)
    conf = apply_crop(pseudo.confidence[None], spec, out_h, out_w)[0]
    return PseudoLabelMap(labels=labels, confidence=conf)


def momentum_predictions(psi: ModelParams, bn_psi: BNState, batch: TargetBatch,
                         multiscale: bool) -> tuple[list, list]:
    """Momentum-network softmax maps for the clean inputs (always eval mode)."""
    inputs = batch.clean_inputs if multiscale else [batch.original_clean]
    probs, _ = forward(psi, bn_psi, np.stack(inputs), "eval")
    specs = batch.crop_specs if multiscale else []
    return [probs[i] for i in range(len(inputs))], specs


def adapt(config: RunConfig, pretrained_params: ModelParams, pretrained_bn: BNState,
          source_records: list, target_records: list, sampler_state: SamplerState | None,
          out_dir=None, val_records: list | None = None) -> AdaptResult:
    """Joint self-supervised target + supervised source training (frozen BN)."""
    if not source_records:
        raise ValueError("source set is empty")
    if not config.source_only and not target_records:
        raise ValueError("target set is empty")
    if not config.source_only and sampler_state is None:
        raise ValueError("adaptation requires a sampler state (precomputed priors)")
    k = config.num_classes
    root = RngStream(config.seed, ("adapt",))
    phi = pretrained_params.copy()
    psi = pretrained_params.copy()
    bn_phi = pretrained_bn.copy()
    bn_psi = pretrained_bn.copy()
    velocity = np.zeros(phi.layout.total)
    prior = ClassPriorState.uniform(k, config.gamma_chi, config.beta, config.zeta,
                                    class_thresholding=config.class_thresholding_enabled)
    t_period = config.effective_momentum_period
    gamma_psi = config.effective_gamma_psi
    lam = config.effective_focal_lambda
    n_crops = config.crops_per_image if not config.ablation.no_aug_consistency else 0

    metrics_rows, history_rows = [], []
    path_phi = path_psi = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        path_phi = str(Path(out_dir) / "adapt_phi.ckpt")
        path_psi = str(Path(out_dir) / "adapt_psi.ckpt")
    final_miou = None

    for t in range(1, config.adapt_iters + 1):
        it = root.derive(f"iter={t}")
        batch, labels = build_source_batch(source_records, config, it.derive("source"))
        try:
            source_loss, grads = _source_step(phi, bn_phi, batch, labels, "frozen")
        except FloatingPointError as exc:
            raise DivergenceError(f"adapt iteration {t}: {exc}{_last_ckpt_note(path_phi)}") from exc

        target_loss = 0.0
        labeled = 0
        total_pixels = 0
        clamped = 0
        observations = []
        theta_log = np.zeros(k)

        if not config.source_only:
            t_inputs, t_pseudo = [], []
            for j in range(config.batch_target_images):
                idx = draw(sampler_state, it.derive(f"sample={j}"))
                rec = target_records[idx]
                canvas_h, canvas_w = rec.image.shape[-2:]
                tb = build_target_batch(rec.image, n_crops, config.min_crop_scale,
                                        config.input_h, config.input_w,
                                        it.derive(f"target={j}"),
                                        photometric=config.photometric_enabled,
                                        allow_flip=config.flipping_enabled)
                preds, specs = momentum_predictions(psi, bn_psi, tb, config.multiscale_enabled)
                fused = fuse(preds, specs, canvas_h, canvas_w, mode=config.effective_fusion_mode)
                observations.append(estimate_prior(fused.map))
                peak = peak_confidence(fused.map)
                theta = thresholds(prior, peak)
                if config.force_threshold >= 0.0:
                    theta = np.full(k, config.force_threshold)
                theta_log += theta / config.batch_target_images
                pl = extract_pseudo_labels(fused.map, theta)

                canvas_identity = identity_crop_spec(canvas_h, canvas_w)
                t_inputs.extend(tb.noisy_inputs)
                t_pseudo.append(pseudo_to_crop_frame(pl, canvas_identity,
                                                     config.input_h, config.input_w))
                t_pseudo.extend(pseudo_to_crop_frame(pl, spec, config.input_h, config.input_w)
                                for spec in tb.crop_specs)

            t_batch = np.stack(t_inputs)
            try:
                t_probs, t_cache = forward(phi, bn_phi, t_batch, "frozen")
            except FloatingPointError as exc:
                raise DivergenceError(f"adapt iteration {t}: {exc}"
                                      f"{_last_ckpt_note(path_phi)}") from exc
            n_inputs = len(t_inputs)
            t_dlogits = np.empty_like(t_probs)
            for i in range(n_inputs):
                report = focal_target_loss(t_probs[i], t_pseudo[i], prior.chi, lam,
                                           scale=config.target_loss_scale,
                                           confidence_reg=config.confidence_reg_enabled)
                target_loss += report.value / n_inputs
                labeled += report.labeled
                clamped += report.clamped
                total_pixels += t_probs[i].shape[1] * t_probs[i].shape[2]
                t_dlogits[i] = report.dlogits
            if labeled > 0:
                # No labeled pixels means an exactly-zero target gradient; skipping
                # the accumulation keeps the source-only trajectory bitwise intact.
                grads = grads + backward(t_cache, t_dlogits / n_inputs)

        if not (np.isfinite(source_loss) and np.isfinite(target_loss)):
            raise DivergenceError(f"adapt iteration {t}: non-finite loss"
                                  f"{_last_ckpt_note(path_phi)}")
        phi, velocity = sgd_step(phi, grads, velocity, config.lr,
                                 config.sgd_momentum, config.weight_decay)
        if observations:
            update_prior(prior, np.mean(observations, axis=0))
        if t % t_period == 0:
            psi = ema_update(psi, phi, gamma_psi)
            bn_psi = bn_phi.copy()

        miou_cell = None
        if val_records and (t % config.eval_period == 0 or t == config.adapt_iters):
            _, miou_cell = evaluate(phi, bn_phi, val_records)
            final_miou = miou_cell
        labeled_fraction = labeled / total_pixels if total_pixels else 0.0
        metrics_rows.append((t, source_loss, target_loss, labeled_fraction, clamped,
                             miou_cell, *prior.chi.tolist()))
        history_rows.append((t, *prior.chi.tolist(), *theta_log.tolist()))

        if out_dir is not None and (t % config.checkpoint_period == 0 or t == config.adapt_iters):
            _write_adapt_outputs(config, out_dir, t, phi, psi, bn_phi, bn_psi, velocity,
                                 metrics_rows, history_rows)

    state = TrainerState(iteration=config.adapt_iters, phi=phi, psi=psi, bn_phi=bn_phi,
                         bn_psi=bn_psi, velocity=velocity, prior_state=prior, config=config)
    if out_dir is not None and config.adapt_iters == 0:
        _write_adapt_outputs(config, out_dir, 0, phi, psi, bn_phi, bn_psi, velocity,
                             metrics_rows, history_rows)
    return AdaptResult(state=state, metrics_rows=metrics_rows, history_rows=history_rows,
                       checkpoint_phi=path_phi, checkpoint_psi=path_psi, final_miou=final_miou)


def _write_adapt_outputs(config, out_dir, t, phi, psi, bn_phi, bn_psi, velocity,
                         metrics_rows, history_rows):
    k = config.num_classes
    out_dir = Path(out_dir)
    chash = config.config_hash()
    save_checkpoint(out_dir / "adapt_phi.ckpt", Checkpoint(
        params=phi, bn=bn_phi, velocity=velocity, iteration=t, num_classes=k,
        input_h=config.input_h, input_w=config.input_w, config_hash=chash))
    save_checkpoint(out_dir / "adapt_psi.ckpt", Checkpoint(
        params=psi, bn=bn_psi, velocity=np.zeros_like(velocity), iteration=t,
        num_classes=k, input_h=config.input_h, input_w=config.input_w, config_hash=chash))
    chi_cols = [f"chi_{c}" for c in range(k)]
    write_csv(out_dir / "adapt_metrics.csv",
              ["iteration", "source_loss", "target_loss", "labeled_fraction",
               "clamp_count", "miou_val", *chi_cols], metrics_rows)
    write_csv(out_dir / "adapt_history.csv",
              ["iteration", *chi_cols, *[f"theta_{c}" for c in range(k)]], history_rows)


def predict_eval(params: ModelParams, bn: BNState, image: np.ndarray) -> np.ndarray:
    """Single-image eval-mode softmax map at the image's native resolution."""
    probs, _ = forward(params, bn, image[None], "eval")
    return probs[0]


def evaluate(params: ModelParams, bn: BNState, records: list,
             num_classes: int | None = None) -> tuple[np.ndarray, float]:
    """Per-class IoU and mIoU over a labeled dataset (single forward pass each).

    Classes absent from both prediction and ground truth are excluded from the
    mean; their IoU entry is NaN. IGNORE ground-truth pixels contribute nothing.
    """
    if not records:
        raise ValueError("evaluation set is empty")
    k = num_classes if num_classes is not None else params.layout.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(records), EVAL_CHUNK):
        chunk = records[start:start + EVAL_CHUNK]
        batch = np.stack([rec.image for rec in chunk])
        probs, _ = forward(params, bn, batch, "eval")
        preds = np.argmax(probs, axis=1)
        for rec, pred in zip(chunk, preds):
            gt = rec.labels
            valid = gt != IGNORE
            idx = k * gt[valid].astype(np.int64) + pred[valid]
            confusion += np.bincount(idx, minlength=k * k).reshape(k, k)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), np.nan)
    present = denom > 0
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou
