"""Toy segmentation network with exact hand-derived gradients.

Architecture: conv3x3(3->16) -> BN -> ReLU -> conv3x3(16->16) -> BN -> ReLU
-> conv1x1(16->K) -> per-pixel softmax. All arithmetic is float64. The
internal layout is channels-last for speed; the public interface uses
(B, C, H, W) / (B, K, H, W) arrays.

BN modes: `train_stats` normalizes by batch statistics and updates the
running estimates; `frozen` and `eval` normalize by the running estimates
and never touch them (`eval` skips the backward cache).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import EPS_BN, RngStream

CHANNELS = 16
MODES = ("train_stats", "frozen", "eval")


class ParamLayout:
    """Maps named layers to index ranges in the flat parameter vector."""

    def __init__(self, num_classes: int, channels: int = CHANNELS):
        self.num_classes = num_classes
        self.channels = channels
        c = channels
        self.entries: list[tuple[str, tuple[int, ...]]] = [
            ("conv1_w", (3, 3, 3, c)),
            ("conv1_b", (c,)),
            ("bn1_scale", (c,)),
            ("bn1_shift", (c,)),
            ("conv2_w", (3, 3, c, c)),
            ("conv2_b", (c,)),
            ("bn2_scale", (c,)),
            ("bn2_shift", (c,)),
            ("conv3_w", (c, num_classes)),
            ("conv3_b", (num_classes,)),
        ]
        self.offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        pos = 0
        for name, shape in self.entries:
            self.offsets[name] = (pos, shape)
            pos += int(np.prod(shape))
        self.total = pos

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.entries == other.entries

    def slice_of(self, name: str) -> slice:
        off, shape = self.offsets[name]
        return slice(off, off + int(np.prod(shape)))


@dataclass
class ModelParams:
    layout: ParamLayout
    flat: np.ndarray

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout.offsets[name]
        return self.flat[off:off + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "ModelParams":
        return ModelParams(self.layout, self.flat.copy())


@dataclass
class BNState:
    bn1_mean: np.ndarray
    bn1_var: np.ndarray
    bn2_mean: np.ndarray
    bn2_var: np.ndarray
    update_momentum: float = 0.1

    def copy(self) -> "BNState":
        return BNState(self.bn1_mean.copy(), self.bn1_var.copy(),
                       self.bn2_mean.copy(), self.bn2_var.copy(), self.update_momentum)


def init_bn_state(channels: int = CHANNELS, update_momentum: float = 0.1) -> BNState:
    return BNState(np.zeros(channels), np.ones(channels),
                   np.zeros(channels), np.ones(channels), update_momentum)


def init_params(num_classes: int, stream: RngStream) -> ModelParams:
    """He fan-in normal draws for conv weights; zero biases; identity BN affine."""
    layout = ParamLayout(num_classes)
    flat = np.zeros(layout.total)
    params = ModelParams(layout, flat)
    for name, fan_in in (("conv1_w", 27), ("conv2_w", 9 * layout.channels),
                         ("conv3_w", layout.channels)):
        view = params.view(name)
        view[...] = stream.derive(f"init/{name}").normals(view.shape) * np.sqrt(2.0 / fan_in)
    params.view("bn1_scale")[...] = 1.0
    params.view("bn2_scale")[...] = 1.0
    return params


@dataclass
class ForwardCache:
    mode: str
    x_pad: np.ndarray
    xhat1: np.ndarray
    s1: np.ndarray
    mask1: np.ndarray
    a1_pad: np.ndarray
    xhat2: np.ndarray
    s2: np.ndarray
    mask2: np.ndarray
    a2: np.ndarray
    probs_cl: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    layout: ParamLayout


def _assert_finite(arr: np.ndarray, layer: str) -> None:
    # A non-finite value anywhere makes the sum non-finite; cheaper than isfinite().
    with np.errstate(invalid="ignore", over="ignore"):
        total = np.sum(arr)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite activations after {layer}")


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _conv3x3(x_pad: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # x_pad: (B, H+2, W+2, Cin), w: (3, 3, Cin, Cout); nine shifted GEMMs.
    h, ww = x_pad.shape[1] - 2, x_pad.shape[2] - 2
    out = np.empty(x_pad.shape[:1] + (h, ww, w.shape[3]))
    np.copyto(out, b)
    for ky in range(3):
        for kx in range(3):
            out += x_pad[:, ky:ky + h, kx:kx + ww, :] @ w[ky, kx]
    return out


def _conv3x3_backward(x_pad: np.ndarray, d_out: np.ndarray, w: np.ndarray | None,
                      need_dx: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    b, h, ww, co = d_out.shape
    ci = x_pad.shape[3]
    # Weight gradient as one GEMM over the im2col matrix (single contiguous copy).
    win = sliding_window_view(x_pad, (3, 3), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * ww, 9 * ci)
    dz = d_out.reshape(b * h * ww, co)
    dw = (cols.T @ dz).reshape(3, 3, ci, co)
    db = dz.sum(axis=0)
    dx = None
    if need_dx:
        dx_pad = np.zeros_like(x_pad)
        for ky in range(3):
            for kx in range(3):
                dx_pad[:, ky:ky + h, kx:kx + ww, :] += d_out @ w[ky, kx].T
        dx = dx_pad[:, 1:-1, 1:-1, :]
    return dw, db, dx


def _batchnorm(z, scale, shift, running_mean, running_var, mode, update_momentum):
    n = z.shape[0] * z.shape[1] * z.shape[2]
    flat = z.reshape(n, z.shape[3])
    if mode == "train_stats":
        mean = flat.sum(axis=0) / n
        # Biased variance via E[z^2] - E[z]^2; the einsum avoids temporaries.
        var = np.einsum("nc,nc->c", flat, flat) / n - mean * mean
        np.maximum(var, 0.0, out=var)
        running_mean *= 1.0 - update_momentum
        running_mean += update_momentum * mean
        running_var *= 1.0 - update_momentum
        running_var += update_momentum * var
    else:
        mean, var = running_mean, running_var
    s = np.sqrt(var + EPS_BN)
    xhat = z - mean
    xhat *= 1.0 / s
    y = xhat * scale
    y += shift
    return y, xhat, s


def forward(params: ModelParams, bn: BNState, batch: np.ndarray,
            mode: str) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the network on a (B, 3, h, w) batch; returns (B, K, h, w) softmax maps.

    Only `train_stats` mutates `bn`. `eval` returns no cache.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"batch must have shape (B, 3, h, w), got {batch.shape}")
    x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1))

    x_pad = _pad(x)
    z1 = _conv3x3(x_pad, params.view("conv1_w"), params.view("conv1_b"))
    _assert_finite(z1, "conv1")
    y1, xhat1, s1 = _batchnorm(z1, params.view("bn1_scale"), params.view("bn1_shift"),
                               bn.bn1_mean, bn.bn1_var, mode, bn.update_momentum)
    _assert_finite(y1, "bn1")
    mask1 = y1 > 0.0
    a1 = np.where(mask1, y1, 0.0)

    a1_pad = _pad(a1)
    z2 = _conv3x3(a1_pad, params.view("conv2_w"), params.view("conv2_b"))
    _assert_finite(z2, "conv2")
    y2, xhat2, s2 = _batchnorm(z2, params.view("bn2_scale"), params.view("bn2_shift"),
                               bn.bn2_mean, bn.bn2_var, mode, bn.update_momentum)
    _assert_finite(y2, "bn2")
    mask2 = y2 > 0.0
    a2 = np.where(mask2, y2, 0.0)

    logits = a2 @ params.view("conv3_w") + params.view("conv3_b")
    _assert_finite(logits, "conv3")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expv = np.exp(shifted)
    probs_cl = expv / expv.sum(axis=-1, keepdims=True)

    probs = probs_cl.transpose(0, 3, 1, 2)
    if mode == "eval":
        return probs, None
    cache = ForwardCache(mode=mode, x_pad=x_pad, xhat1=xhat1, s1=s1, mask1=mask1,
                         a1_pad=a1_pad, xhat2=xhat2, s2=s2, mask2=mask2, a2=a2,
                         probs_cl=probs_cl, gamma1=params.view("bn1_scale").copy(),
                         gamma2=params.view("bn2_scale").copy(),
                         w2=params.view("conv2_w").copy(), w3=params.view("conv3_w").copy(),
                         layout=params.layout)
    return probs, cache


def _bn_backward(dy, xhat):
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dshift = dy.sum(axis=(0, 1, 2))
    return dgamma, dshift


def backward(cache: ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Exact gradient of a scalar loss w.r.t. every parameter.

    `dlogits` is the (B, K, h, w) gradient w.r.t. the pre-softmax logits.
    In `train_stats` mode the gradient flows through the batch statistics;
    in `frozen` mode the running statistics are constants.
    """
    if cache is None:
        raise ValueError("eval-mode forward produced no cache")
    train = cache.mode == "train_stats"
    layout = cache.layout
    grads = np.zeros(layout.total)
    g = ModelParams(layout, grads)

    dl = dlogits.transpose(0, 2, 3, 1)
    g.view("conv3_w")[...] = np.tensordot(cache.a2, dl, axes=([0, 1, 2], [0, 1, 2]))
    g.view("conv3_b")[...] = dl.sum(axis=(0, 1, 2))
    da2 = dl @ cache.w3.T

    dy2 = np.where(cache.mask2, da2, 0.0)
    dgamma2, dshift2 = _bn_backward(dy2, cache.xhat2)
    g.view("bn2_scale")[...] = dgamma2
    g.view("bn2_shift")[...] = dshift2
    dxhat2 = dy2 * cache.gamma2
    if train:
        dz2 = (dxhat2 - dxhat2.mean(axis=(0, 1, 2))
               - cache.xhat2 * (dxhat2 * cache.xhat2).mean(axis=(0, 1, 2))) / cache.s2
    else:
        dz2 = dxhat2 / cache.s2

    dw2, db2, da1 = _conv3x3_backward(cache.a1_pad, dz2, cache.w2, need_dx=True)
    g.view("conv2_w")[...] = dw2
    g.view("conv2_b")[...] = db2

    dy1 = np.where(cache.mask1, da1, 0.0)
    dgamma1, dshift1 = _bn_backward(dy1, cache.xhat1)
    g.view("bn1_scale")[...] = dgamma1
    g.view("bn1_shift")[...] = dshift1
    dxhat1 = dy1 * cache.gamma1
    if train:
        dz1 = (dxhat1 - dxhat1.mean(axis=(0, 1, 2))
               - cache.xhat1 * (dxhat1 * cache.xhat1).mean(axis=(0, 1, 2))) / cache.s1
    else:
        dz1 = dxhat1 / cache.s1

    dw1, db1, _ = _conv3x3_backward(cache.x_pad, dz1, None, need_dx=False)
    g.view("conv1_w")[...] = dw1
    g.view("conv1_b")[...] = db1
    return grads


def sgd_step(params: ModelParams, grads: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> tuple[ModelParams, np.ndarray]:
    """v <- momentum*v + g + wd*p;  p <- p - lr*v."""
    if grads.shape != params.flat.shape or velocity.shape != params.flat.shape:
        raise ValueError("gradient/velocity length mismatch")
    v = momentum * velocity + grads + weight_decay * params.flat
    return ModelParams(params.layout, params.flat - lr * v), v


def ema_update(psi: ModelParams, phi: ModelParams, gamma_psi: float) -> ModelParams:
    """psi <- gamma_psi * psi + (1 - gamma_psi) * phi, elementwise."""
    if psi.layout != phi.layout:
        raise ValueError("parameter layouts differ")
    if gamma_psi == 0.0:
        # Disabled-momentum ablation must reproduce phi bitwise.
        return phi.copy()
    return ModelParams(psi.layout, gamma_psi * psi.flat + (1.0 - gamma_psi) * phi.flat)


def validate_softmax(probs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    sums = probs.sum(axis=-3)
    if np.abs(sums - 1.0).max() > tol:
        raise ValueError("softmax map columns do not sum to 1")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueError("softmax map entries outside [0, 1]")
    return probs


# -- checkpoints ---------------------------------------------------------------

MAGIC = "segadapt-checkpoint-v1"


@dataclass
class Checkpoint:
    params: ModelParams
    bn: BNState
    velocity: np.ndarray
    iteration: int
    num_classes: int
    input_h: int
    input_w: int
    config_hash: str


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """JSON header line, then raw little-endian float64 sections. Atomic."""
    layout = ckpt.params.layout
    header = {
        "format": MAGIC,
        "layout": [[name, list(shape)] for name, shape in layout.entries],
        "num_classes": ckpt.num_classes,
        "input_h": ckpt.input_h,
        "input_w": ckpt.input_w,
        "iteration": ckpt.iteration,
        "config_hash": ckpt.config_hash,
        "bn_update_momentum": ckpt.bn.update_momentum,
        "sections": ["params", "bn1_mean", "bn1_var", "bn2_mean", "bn2_var", "velocity"],
    }
    body = b"".join(arr.astype("<f8").tobytes() for arr in (
        ckpt.params.flat, ckpt.bn.bn1_mean, ckpt.bn.bn1_var,
        ckpt.bn.bn2_mean, ckpt.bn.bn2_var, ckpt.velocity))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(body)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} file")
    layout = ParamLayout(header["num_classes"])
    expected = [[name, list(shape)] for name, shape in layout.entries]
    if header["layout"] != expected:
        raise ValueError(f"{path}: unexpected parameter layout")
    c = layout.channels
    counts = [layout.total, c, c, c, c, layout.total]
    if len(body) != 8 * sum(counts):
        raise ValueError(f"{path}: truncated checkpoint body")
    arrays = []
    pos = 0
    for n in counts:
        arrays.append(np.frombuffer(body, dtype="<f8", count=n, offset=pos).copy())
        pos += 8 * n
    params = ModelParams(layout, arrays[0])
    bn = BNState(arrays[1], arrays[2], arrays[3], arrays[4],
                 update_momentum=header["bn_update_momentum"])
    return Checkpoint(params=params, bn=bn, velocity=arrays[5],
                      iteration=header["iteration"], num_classes=header["num_classes"],
                      input_h=header["input_h"], input_w=header["input_w"],
                      config_hash=header["config_hash"])
