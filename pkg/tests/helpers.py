"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import numpy as np

from segadapt.core import RngStream, RunConfig
from segadapt.databench import DatasetRecord, SceneSpec, generate_scene
from segadapt.loss import source_ce_loss
from segadapt.model import backward, forward, init_bn_state, init_params


def make_records(domain: str, seeds, h: int = 64, w: int = 64) -> list:
    out = []
    for s in seeds:
        img, lab = generate_scene(SceneSpec(domain, s), h, w)
        out.append(DatasetRecord(image=img, labels=lab, domain=domain, seed=s, name=str(s)))
    return out


def tiny_config(**overrides) -> RunConfig:
    base = dict(pretrain_iters=4, adapt_iters=4, eval_period=10**9,
                checkpoint_period=10**9, batch_source=2, batch_target_images=1,
                crops_per_image=2, input_h=32, input_w=32, seed=3)
    base.update(overrides)
    return RunConfig(**base).validate()


def random_softmax_map(k: int, h: int, w: int, stream: RngStream) -> np.ndarray:
    logits = stream.normals((k, h, w))
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def fd_gradient_check(params, bn, batch, gt, mode, coords, step=1e-5):
    """Central finite differences of the batch-mean source CE vs analytic backward.

    Returns (analytic, fd) arrays over the requested flat coordinates.
    """
    b = batch.shape[0]

    def loss_value(p):
        probs, _ = forward(p, bn.copy(), batch, mode)
        return sum(source_ce_loss(probs[i], gt[i]).value for i in range(b)) / b

    probs, cache = forward(params, bn.copy(), batch, mode)
    dlogits = np.stack([source_ce_loss(probs[i], gt[i]).dlogits for i in range(b)]) / b
    analytic = backward(cache, dlogits)

    fd = np.empty(len(coords))
    for j, idx in enumerate(coords):
        hi = params.copy()
        hi.flat[idx] += step
        lo = params.copy()
        lo.flat[idx] -= step
        fd[j] = (loss_value(hi) - loss_value(lo)) / (2.0 * step)
    return analytic[list(coords)], fd


def fresh_model(k: int = 6, seed: int = 11):
    stream = RngStream(seed)
    return init_params(k, stream.derive("model")), init_bn_state()
