import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segadapt.core import (ABLATIONS, ConfigError, RngStream, RunConfig, load_config,
                           make_tensor, parse_config_text)


def test_derive_same_label_identical_sequences():
    a = RngStream(123).derive("x")
    b = RngStream(123).derive("x")
    assert np.array_equal(a.uniforms(0, 1, 64), b.uniforms(0, 1, 64))


def test_derive_distinct_labels_distinct_sequences():
    root = RngStream(123)
    a = root.derive("a").uniforms(0, 1, 64)
    b = root.derive("b").uniforms(0, 1, 64)
    assert not np.any(a == b)


def test_streams_independent_of_sibling_consumption():
    root = RngStream(9)
    first = root.derive("left")
    first.uniforms(0, 1, 1000)  # heavy use of a sibling
    value_after = root.derive("right").uniform()
    value_fresh = RngStream(9).derive("right").uniform()
    assert value_after == value_fresh


def test_uniform_degenerate_interval():
    assert RngStream(1).uniform(0.5, 0.5) == 0.5


def test_uniform_reversed_bounds_rejected():
    with pytest.raises(ValueError):
        RngStream(1).uniform(1.0, 0.0)


def test_uniform_monte_carlo_mean():
    draws = RngStream(7).derive("mc").uniforms(0.0, 1.0, 10**6)
    assert abs(draws.mean() - 0.5) < 0.002


def test_uniform_source_scale_bounds():
    draws = RngStream(5).derive("scale").uniforms(0.5, 1.0, 10**4)
    assert draws.min() >= 0.5 and draws.max() <= 1.0


@settings(max_examples=50, deadline=None)
@given(lo=st.floats(-10, 10), span=st.floats(0, 10), seed=st.integers(0, 2**32))
def test_uniform_stays_in_bounds(lo, span, seed):
    value = RngStream(seed).uniform(lo, lo + span)
    assert lo <= value <= lo + span


def test_make_tensor_rejects_mismatch():
    with pytest.raises(ValueError):
        make_tensor((2, 3), [1.0] * 5)
    with pytest.raises(ValueError):
        make_tensor((2, 2), [1.0, 2.0, np.nan, 4.0])
    with pytest.raises(ValueError):
        make_tensor((0, 3), [])
    arr = make_tensor((2, 3), range(6))
    assert arr.shape == (2, 3) and arr.dtype == np.float64


def test_config_defaults_match_reference_settings():
    cfg = RunConfig().validate()
    assert cfg.gamma_chi == 0.99 and cfg.gamma_psi == 0.99
    assert cfg.momentum_period == 100
    assert cfg.zeta == 0.75 and cfg.beta == 1e-3 and cfg.focal_lambda == 3.0
    assert cfg.lr == 2.5e-4 and cfg.sgd_momentum == 0.9 and cfg.weight_decay == 5e-4
    assert cfg.target_loss_scale == 5.0


def test_config_text_round_trip():
    cfg = RunConfig(zeta=0.7, seed=42)
    cfg.ablation.no_focal_loss = True
    parsed = parse_config_text(cfg.to_text())
    assert parsed == cfg
    assert parsed.config_hash() == cfg.config_hash()


def test_config_unknown_key_is_error():
    with pytest.raises(ConfigError, match="line 2.*unknown config key 'zeta_typo'"):
        parse_config_text("zeta = 0.75\nzeta_typo = 1.0\n")
    with pytest.raises(ConfigError, match="unknown config key 'ablation.bogus'"):
        parse_config_text("ablation.bogus = true\n")


def test_config_invariants_enforced():
    for text in ("gamma_chi = 1.5", "zeta = 0.0", "beta = -1e-3",
                 "focal_lambda = -1", "momentum_period = 0", "crops_per_image = -1",
                 "num_classes = 1", "fusion_mode = maxpool"):
        with pytest.raises(ConfigError):
            parse_config_text(text)


def test_config_comments_and_overrides():
    cfg = parse_config_text("# comment line\nzeta = 0.8  # trailing\n\n")
    assert cfg.zeta == 0.8
    cfg = cfg.apply_overrides({"beta": "0.01", "ablation.no_momentum": "true"})
    assert cfg.beta == 0.01 and cfg.ablation.no_momentum
    with pytest.raises(ConfigError):
        cfg.apply_overrides({"nope": "1"})


def test_config_hash_sensitive_to_values():
    assert RunConfig().config_hash() != RunConfig(zeta=0.7).config_hash()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config file"):
        load_config(tmp_path / "absent.cfg")


def test_ablation_registry_complete():
    assert len(ABLATIONS) == 10
    cfg = RunConfig()
    for name, _ in ABLATIONS:
        cfg.apply_overrides({f"ablation.{name}": "true"})


def test_ablation_resolved_views():
    cfg = parse_config_text("ablation.no_momentum = true")
    assert cfg.effective_gamma_psi == 0.0 and cfg.effective_momentum_period == 1
    cfg = parse_config_text("ablation.no_focal_loss = true")
    assert cfg.effective_focal_lambda == 0.0
    cfg = parse_config_text("ablation.min_entropy_fusion = true")
    assert cfg.effective_fusion_mode == "min_entropy"
    cfg = parse_config_text("ablation.no_aug_consistency = true")
    assert not cfg.photometric_enabled
    assert not cfg.flipping_enabled
    assert not cfg.multiscale_enabled
