"""Tests for weave patterns, fabric specs, parameter types, and sampling."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiberweave import weave as W


# ---------------------------------------------------------------------------
# pattern_matrix
# ---------------------------------------------------------------------------

def test_plain_is_checkerboard():
    p = W.pattern_matrix("plain")
    assert p.matrix.astype(int).tolist() == [[1, 0], [0, 1]]


def test_rot90_variants_are_transpose_flip():
    for kind in ("twill0", "twill1", "satin"):
        base = W.pattern_matrix(kind).matrix
        rot = W.pattern_matrix(f"{kind}-rot90").matrix
        assert np.array_equal(rot, np.rot90(base))


# Golden constant, frozen once: rows of the twill matrices are the first row
# rolled right by the row index (verified visually against a rendered diagonal).
TWILL0_GOLDEN = [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1], [1, 0, 0, 1]]


def test_twill0_rows_shift_by_one():
    t = W.pattern_matrix("twill0").matrix.astype(int)
    assert t.tolist() == TWILL0_GOLDEN
    for i in range(1, 4):
        assert t[i].tolist() == np.roll(t[i - 1], 1).tolist()


def test_every_pattern_has_over_and_under_in_each_row_and_column():
    for kind in W.PATTERN_KINDS:
        m = W.pattern_matrix(kind).matrix
        assert m.any(axis=0).all() and (~m).any(axis=0).all()
        assert m.any(axis=1).all() and (~m).any(axis=1).all()


def test_pattern_matrix_is_pure_and_idempotent():
    a = W.pattern_matrix("satin").matrix
    b = W.pattern_matrix("satin").matrix
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        a[0, 0] = True  # frozen data


def test_pattern_periods():
    assert W.pattern_matrix("plain").shape == (2, 2)
    assert W.pattern_matrix("twill0").shape[0] <= 4
    assert W.pattern_matrix("twill1").shape[0] <= 4
    assert W.pattern_matrix("satin").shape[0] <= 8


def test_unknown_pattern_rejected():
    with pytest.raises(W.ConfigError):
        W.pattern_matrix("herringbone")


# ---------------------------------------------------------------------------
# derive_segment_lengths
# ---------------------------------------------------------------------------

def _spec(L_h=1.0, L_v=1.0, n_h=20, n_v=20):
    return W.FabricSpec(W.pattern_matrix("plain"), L_h, L_v, n_h, n_v)


def test_segment_length_lower_clamp_warns():
    with pytest.warns(UserWarning, match="clamped"):
        spec = _spec(L_h=1.0, n_v=8, L_v=8.0, n_h=4)
    assert spec.l_h == 1.0  # 0.125 clamped up


def test_segment_length_exact():
    spec = _spec(L_h=2.0, n_v=2, L_v=2.0, n_h=2)
    assert spec.segment_lengths == (1.0, 1.0)


def test_segment_length_upper_clamp():
    with pytest.warns(UserWarning, match="clamped"):
        spec = _spec(L_h=10.0, n_v=2, L_v=4.0, n_h=2)
    assert spec.l_h == 4.0
    assert spec.l_v == 2.0


def test_bad_yarn_counts_rejected():
    with pytest.raises(W.ConfigError):
        _spec(n_h=0)
    with pytest.raises(W.ConfigError):
        _spec(n_v=1)
    with pytest.raises(W.ConfigError):
        _spec(L_h=-1.0)


# ---------------------------------------------------------------------------
# parameter type invariants
# ---------------------------------------------------------------------------

def test_param_type_validation():
    with pytest.raises(W.ConfigError):
        W.YarnGeomParams(u_max=math.pi / 2)  # not strictly below the limit
    with pytest.raises(W.ConfigError):
        W.YarnGeomParams(G=0.0)
    with pytest.raises(W.ConfigError):
        W.YarnGeomParams(Q=1.0)
    with pytest.raises(W.ConfigError):
        W.FiberAppearanceParams(C=(0.0, 0.5, 0.5))
    with pytest.raises(W.ConfigError):
        W.FiberAppearanceParams(gamma_M=1.5)
    with pytest.raises(W.ConfigError):
        W.SharedAppearance(w_d=1.2)
    with pytest.raises(W.ConfigError):
        W.CaptureConfig(light_intensity=(-1.0, 1.0, 1.0))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_sampled_params_satisfy_type_invariants(seed):
    # Construction itself enforces the invariants; any violation raises.
    rng = np.random.default_rng(seed)
    kind = W.PATTERN_KINDS[seed % len(W.PATTERN_KINDS)]
    gw, gv, aw, av, sh = W.sample_params(kind, rng)
    assert 0 < gw.G < 1 and 0 < gv.G < 1
    assert gw.s >= 0.008  # satin scales the 0.01 floor by 0.8
    assert 0.1 <= gw.u_max <= 1.5
    assert all(0 < c <= 1 for c in aw.C)
    assert sh.w_d == 0.5


def test_sample_params_paper_rows():
    rng = np.random.default_rng(7)
    draws = [W.sample_params("plain", rng) for _ in range(4000)]
    e = np.array([d[0].e_yarn for d in draws])
    assert e.min() >= 0.0525 and e.max() <= 0.09625
    assert abs(e.mean() - (0.0525 + 0.09625) / 2) < 3 * (0.09625 - 0.0525) / math.sqrt(12 * len(e))
    m = np.array([d[0].m for d in draws])
    assert abs(m.mean() - 200.0) < 1.0
    g = np.array([d[0].G for d in draws])
    assert abs(g.mean() - 0.75) < 0.01


def test_sample_params_satin_s_scaled():
    rng = np.random.default_rng(3)
    s_vals = np.array([W.sample_params("satin", rng)[0].s for _ in range(4000)])
    # max{N(0.2, 0.03), 0.01} * 0.8 -> mean 0.16
    assert abs(s_vals.mean() - 0.16) < 0.005
    assert s_vals.min() >= 0.008


def test_sample_params_deterministic():
    a = W.sample_params("twill1", np.random.default_rng(42))
    b = W.sample_params("twill1", np.random.default_rng(42))
    assert a == b


def test_sample_params_rot90_swaps_axes():
    a = W.sample_params("satin", np.random.default_rng(5))
    b = W.sample_params("satin-rot90", np.random.default_rng(5))
    assert b[0] == a[1] and b[1] == a[0]  # geometry rows swapped
    assert b[2] == a[3] and b[3] == a[2]


def test_sample_fabric_config_counts_in_range():
    for seed in range(30):
        cfg = W.sample_fabric_config("satin", np.random.default_rng(seed))
        assert 11 <= cfg.fabric.n_h <= 13
        assert 9 <= cfg.fabric.n_v <= 11
        assert 0.1 <= cfg.geometry.warp.beta <= 0.5


# ---------------------------------------------------------------------------
# remap_unit_to_range
# ---------------------------------------------------------------------------

def test_remap_endpoints_and_midpoint():
    assert W.remap_unit_to_range(0.0, "Q") == 0.0
    assert W.remap_unit_to_range(1.0, "w_d") == 1.0
    assert W.remap_unit_to_range(0.5, "u_max") == pytest.approx(0.8, abs=1e-15)


def test_remap_unknown_name():
    with pytest.raises(KeyError):
        W.remap_unit_to_range(0.5, "frobnication")


@settings(max_examples=200, deadline=None)
@given(u=st.floats(min_value=1e-9, max_value=1.0 - 1e-9),
       name=st.sampled_from(sorted(W.PARAM_RANGES)))
def test_remap_round_trips(u, name):
    v = W.remap_unit_to_range(u, name)
    assert abs(W.range_to_unit(v, name) - u) < 1e-12


# ---------------------------------------------------------------------------
# ParamVector
# ---------------------------------------------------------------------------

def test_vector_layout_is_exactly_the_jointly_optimized_set():
    v = W.ParamVector.from_config(W.default_config("plain"))
    assert len(v.values) == 28
    for banned in ("m", "e_yarn", "G", "s", "n_h"):
        assert not any(name.endswith(banned) for name in v.names)
    assert "w_d" in v.names and "log_exposure" in v.names
    for axis in W.AXES:
        for f in ("u_max", "beta", "alpha", "Q", "gamma_M", "gamma_N", "gamma_M0"):
            assert f"{axis}.{f}" in v.names
    assert v.layout["weft.u_max"] == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_vector_projection_property(seed):
    rng = np.random.default_rng(seed)
    v = W.ParamVector.from_config(W.default_config("plain"))
    update = v.values + rng.normal(0, 10.0, v.values.shape)
    v2 = v.evolve(values=update)
    assert (v2.values >= v2.lo).all() and (v2.values <= v2.hi).all()


def test_vector_config_round_trip():
    cfg = W.sample_fabric_config("twill0", np.random.default_rng(11))
    v = W.ParamVector.from_config(cfg)
    cfg2 = v.to_config(cfg)
    v2 = W.ParamVector.from_config(cfg2)
    # C channels may be projected up to the (1e-3, 1] bound; everything else exact
    np.testing.assert_allclose(v2.values, v.values, rtol=0, atol=1e-3)
    assert cfg2.geometry.weft.m == cfg.geometry.weft.m  # config-side untouched
    assert cfg2.geometry.weft.e_yarn == cfg.geometry.weft.e_yarn


def test_vector_entry_access_and_update():
    v = W.ParamVector.from_config(W.default_config("plain"))
    v2 = v.with_entry("warp.gamma_N", 0.2)
    assert v2["warp.gamma_N"] == 0.2
    assert v["warp.gamma_N"] == 0.05  # original untouched (immutability)
    v3 = v.with_entry("weft.Q", 99.0)
    assert v3["weft.Q"] == v.hi[v.index("weft.Q")]  # projected


# ---------------------------------------------------------------------------
# config file IO
# ---------------------------------------------------------------------------

def test_config_round_trips_losslessly(tmp_path):
    import warnings

    cfg = W.sample_fabric_config("twill1-rot90", np.random.default_rng(99), seed=7)
    path = tmp_path / "cfg.json"
    W.save_config(cfg, path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # 1 cm twill clamps l
        back = W.load_config(path)
    assert back == cfg
    # and a second round trip produces identical bytes
    path2 = tmp_path / "cfg2.json"
    W.save_config(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_config_errors(tmp_path):
    with pytest.raises(W.ConfigError, match="not found"):
        W.load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(W.ConfigError, match="JSON"):
        W.load_config(bad)
    wrong = tmp_path / "wrong.json"
    wrong.write_text('{"schema": "other"}')
    with pytest.raises(W.ConfigError, match="schema"):
        W.load_config(wrong)


def test_default_config_matches_table_means():
    cfg = W.default_config("plain")
    assert cfg.geometry.weft.G == 0.75
    assert cfg.geometry.weft.m == 200
    assert cfg.appearance.weft.gamma_N == 0.05
    assert cfg.appearance.shared.w_d == 0.5
    assert cfg.capture.light_intensity == (100.0, 100.0, 100.0)
    w, h = cfg.capture.image_size
    assert w == h  # default crop is square
