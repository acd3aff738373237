import numpy as np
import pytest

from segadapt.core import IGNORE, RngStream
from segadapt.loss import focal_target_loss, source_ce_loss
from segadapt.pseudo import PseudoLabelMap

from helpers import random_softmax_map


def _pseudo_from(labels, confidence):
    return PseudoLabelMap(labels=np.asarray(labels), confidence=np.asarray(confidence))


def test_focal_loss_single_pixel_value():
    # -m * (1-chi)^lambda * log(p): 0.9 * 0.125 * (-ln 0.8)
    pred = np.array([0.8, 0.2]).reshape(2, 1, 1)
    pseudo = _pseudo_from([[0]], [[0.9]])
    chi = np.array([0.5, 0.5])
    report = focal_target_loss(pred, pseudo, chi, focal_lambda=3.0, scale=1.0)
    expected = 0.9 * (1.0 - 0.5) ** 3 * -np.log(0.8)
    assert abs(report.value - expected) < 1e-15
    assert abs(report.value - 0.0251045) < 1e-6
    assert report.labeled == 1 and report.clamped == 0


def test_focal_loss_reduces_to_plain_ce():
    # lambda = 0 with the confidence weight forced to 1
    stream = RngStream(1)
    pred = random_softmax_map(4, 6, 6, stream)
    labels = np.argmax(random_softmax_map(4, 6, 6, stream.derive("l")), axis=0)
    labels[0, :3] = IGNORE
    pseudo = _pseudo_from(labels, stream.derive("c").uniforms(0.1, 1.0, (6, 6)))
    chi = stream.derive("chi").uniforms(0.0, 1.0, 4)
    focal = focal_target_loss(pred, pseudo, chi, focal_lambda=0.0, scale=1.0,
                              confidence_reg=False)
    ce = source_ce_loss(pred, labels)
    assert abs(focal.value - ce.value) < 1e-12
    assert np.allclose(focal.dlogits, ce.dlogits, atol=1e-15)


def test_focal_loss_all_ignored():
    pred = random_softmax_map(3, 4, 4, RngStream(2))
    pseudo = _pseudo_from(np.full((4, 4), IGNORE), np.zeros((4, 4)))
    report = focal_target_loss(pred, pseudo, np.zeros(3), 3.0)
    assert report.value == 0.0 and report.labeled == 0
    assert np.array_equal(report.dlogits, np.zeros_like(pred))


def test_focal_gradient_zero_at_ignored_pixels():
    stream = RngStream(3)
    pred = random_softmax_map(3, 5, 5, stream)
    labels = np.zeros((5, 5), dtype=np.int64)
    labels[2:, :] = IGNORE
    pseudo = _pseudo_from(labels, np.full((5, 5), 0.7))
    report = focal_target_loss(pred, pseudo, np.full(3, 0.2), 2.0, scale=5.0)
    assert np.array_equal(report.dlogits[:, 2:, :], np.zeros((3, 3, 5)))
    assert np.any(report.dlogits[:, :2, :] != 0.0)


def test_focal_gradient_matches_finite_differences_through_softmax():
    stream = RngStream(4)
    logits = stream.normals((3, 4, 4))
    labels = np.array([[0, 1, 2, 0]] * 4)
    labels[0, 0] = IGNORE
    conf = stream.derive("c").uniforms(0.2, 1.0, (4, 4))
    chi = np.array([0.1, 0.5, 0.9])

    def value(lg):
        e = np.exp(lg - lg.max(axis=0))
        pred = e / e.sum(axis=0)
        return focal_target_loss(pred, _pseudo_from(labels, conf), chi, 3.0, scale=2.0).value

    e = np.exp(logits - logits.max(axis=0))
    pred = e / e.sum(axis=0)
    report = focal_target_loss(pred, _pseudo_from(labels, conf), chi, 3.0, scale=2.0)
    rng = np.random.default_rng(0)
    for _ in range(24):
        i = rng.integers(0, 3)
        y, x = rng.integers(0, 4), rng.integers(0, 4)
        hi, lo = logits.copy(), logits.copy()
        hi[i, y, x] += 1e-6
        lo[i, y, x] -= 1e-6
        fd = (value(hi) - value(lo)) / 2e-6
        assert abs(fd - report.dlogits[i, y, x]) < 1e-8


def test_focal_weight_monotone_decreasing_in_chi():
    pred = np.array([0.6, 0.4]).reshape(2, 1, 1)
    pseudo = _pseudo_from([[0]], [[1.0]])
    values = [focal_target_loss(pred, pseudo, np.array([chi, 0.0]), 3.0).value
              for chi in np.linspace(0.0, 1.0, 11)]
    assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))


def test_confidence_flag_keeps_label_set_and_support():
    stream = RngStream(5)
    pred = random_softmax_map(4, 6, 6, stream)
    labels = np.argmax(pred, axis=0)
    labels[1, 1] = IGNORE
    pseudo = _pseudo_from(labels, stream.derive("c").uniforms(0.3, 0.9, (6, 6)))
    chi = np.full(4, 0.25)
    with_conf = focal_target_loss(pred, pseudo, chi, 3.0)
    without = focal_target_loss(pred, pseudo, chi, 3.0, confidence_reg=False)
    assert with_conf.labeled == without.labeled
    assert np.array_equal(with_conf.dlogits != 0.0, without.dlogits != 0.0)


def test_clamp_counting():
    pred = np.array([1e-15, 1.0 - 1e-15]).reshape(2, 1, 1)
    pseudo = _pseudo_from([[0]], [[1.0]])
    report = focal_target_loss(pred, pseudo, np.zeros(2), 0.0)
    assert report.clamped == 1
    assert np.isfinite(report.value)


def test_source_ce_perfect_prediction():
    gt = np.array([[1, 0], [2, 1]])
    pred = np.zeros((3, 2, 2))
    np.put_along_axis(pred, gt[None], 1.0, axis=0)
    report = source_ce_loss(pred, gt)
    assert report.value == 0.0


def test_source_ce_uniform_prediction():
    k = 6
    pred = np.full((k, 3, 3), 1.0 / k)
    report = source_ce_loss(pred, np.zeros((3, 3), dtype=np.int64))
    assert abs(report.value - np.log(6.0)) < 1e-12


def test_source_ce_all_ignore():
    pred = random_softmax_map(4, 3, 3, RngStream(6))
    report = source_ce_loss(pred, np.full((3, 3), IGNORE))
    assert report.value == 0.0
    assert np.array_equal(report.dlogits, np.zeros_like(pred))


def test_loss_shape_mismatch_rejected():
    pred = random_softmax_map(3, 4, 4, RngStream(7))
    with pytest.raises(ValueError):
        source_ce_loss(pred, np.zeros((5, 5), dtype=np.int64))
    with pytest.raises(ValueError):
        focal_target_loss(pred, _pseudo_from(np.zeros((5, 5), dtype=np.int64),
                                             np.ones((5, 5))), np.zeros(3), 1.0)
