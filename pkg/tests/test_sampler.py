import numpy as np
import pytest
from scipy import stats

from segadapt.core import RngStream
from segadapt.sampler import (build_sampler_state, draw, load_priors,
                              marginal_probabilities, precompute_priors, save_priors)

from helpers import random_softmax_map


def test_weights_follow_prior_ratios():
    chi = np.array([[0.2, 0.3, 0.5]])
    state = build_sampler_state(chi)
    assert np.allclose(state.weights[0], [0.2, 0.3, 0.5], atol=1e-15)


def test_single_image_weight_is_one():
    chi = np.array([[0.4], [0.0], [0.6]])
    state = build_sampler_state(chi)
    assert state.weights[0, 0] == 1.0
    assert state.weights[2, 0] == 1.0
    assert state.weights[1, 0] == 1.0  # zero-mass row falls back to uniform


def test_rows_sum_to_one():
    stream = RngStream(1)
    chi = np.stack([random_softmax_map(6, 4, 4, stream.derive(f"i{i}")).mean(axis=(1, 2))
                    for i in range(5)], axis=1)
    state = build_sampler_state(chi)
    assert np.allclose(state.weights.sum(axis=1), 1.0, atol=1e-9)


def test_precompute_priors_columns():
    stream = RngStream(2)
    maps = {}

    def predict(img):
        key = img.tobytes()
        if key not in maps:
            maps[key] = random_softmax_map(6, 8, 8, stream.derive(str(len(maps))))
        return maps[key]

    imgs = [stream.derive(f"img{i}").uniforms(0, 1, (3, 8, 8)) for i in range(3)]
    state = precompute_priors(predict, imgs + [imgs[0]])
    assert state.chi_matrix.shape == (6, 4)
    assert np.allclose(state.chi_matrix.sum(axis=0), 1.0, atol=1e-9)
    # duplicated image yields an identical column
    assert np.array_equal(state.chi_matrix[:, 0], state.chi_matrix[:, 3])
    with pytest.raises(ValueError):
        precompute_priors(predict, [])


def test_draw_statistics_chi_square():
    chi = np.array([
        [0.50, 0.20, 0.20, 0.10],
        [0.05, 0.60, 0.25, 0.10],
        [0.25, 0.25, 0.25, 0.25],
        [0.10, 0.10, 0.10, 0.70],
        [0.40, 0.40, 0.10, 0.10],
        [0.01, 0.01, 0.49, 0.49],
    ])
    state = build_sampler_state(chi)
    expected = marginal_probabilities(state)
    n = 10**5
    stream = RngStream(3).derive("draws")
    counts = np.zeros(4)
    for _ in range(n):
        counts[draw(state, stream)] += 1
    result = stats.chisquare(counts, expected * n)
    assert result.pvalue > 0.01


def test_uniform_mode_draws_uniformly():
    chi = np.array([[0.9, 0.05, 0.05], [0.9, 0.05, 0.05]])
    state = build_sampler_state(chi, uniform=True)
    stream = RngStream(4).derive("draws")
    n = 3 * 10**4
    counts = np.zeros(3)
    for _ in range(n):
        counts[draw(state, stream)] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_dominant_classes_have_positive_mass():
    # Softmax priors are strictly positive, so the class dominating an image
    # always gives it non-zero sample probability.
    stream = RngStream(5)
    cols = [random_softmax_map(6, 8, 8, stream.derive(f"m{i}")).mean(axis=(1, 2))
            for i in range(4)]
    chi = np.stack(cols, axis=1)
    state = build_sampler_state(chi)
    for img in range(4):
        dominant = int(np.argmax(chi[:, img]))
        assert state.weights[dominant, img] > 0.0
    assert np.all(marginal_probabilities(state) > 0.0)


def test_priors_sidecar_round_trip(tmp_path):
    chi = RngStream(6).uniforms(0.0, 1.0, (6, 9))
    state = build_sampler_state(chi, uniform=False)
    path = tmp_path / "priors.bin"
    save_priors(path, state)
    loaded = load_priors(path)
    assert np.array_equal(loaded.chi_matrix, state.chi_matrix)
    assert np.array_equal(loaded.weights, state.weights)
    assert loaded.uniform == state.uniform
    with pytest.raises(ValueError, match="not a segadapt-priors"):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b'{"format": "x"}\n')
        load_priors(bad)


def test_invalid_matrix_rejected():
    with pytest.raises(ValueError):
        build_sampler_state(np.array([[0.5, -0.1]]))
    with pytest.raises(ValueError):
        build_sampler_state(np.zeros((3, 0)))
