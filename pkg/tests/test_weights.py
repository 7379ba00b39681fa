import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hinfgrid.converter import ConverterParams, build_plant, closed_loop, controller_template, solve_operating_point
from hinfgrid.lti import StateSpaceModel, default_grid, freqresp, hinf_norm
from hinfgrid.synthesis import K_PUBLISHED_PV
from hinfgrid.weights import (
    RationalWeight,
    WeightingSpec,
    biquad_ratio,
    default_pq_weights,
    default_pv_weights,
    double_biquad_inverse,
    eval_weight,
    lead_lag,
    weight_grid,
    weighted_objective,
    weighted_system,
)


def loop(lg=0.2, K=K_PUBLISHED_PV, P=1.0):
    p = ConverterParams(L_g=lg)
    return closed_loop(build_plant(p, solve_operating_point(p, P)), K)


# ---------------------------------------------------------------- scalar weights

def test_lead_lag_values():
    w = lead_lag(5.0, 0.0005)
    assert w(0.0) == pytest.approx(1e4)
    assert abs(w(1e6j)) == pytest.approx(1.0, rel=1e-5)


def test_biquad_ratio_limits():
    w = biquad_ratio(7e5, 0.35, 1000.0, 0.8)
    assert w(0.0) == pytest.approx(1.0)
    assert abs(w(1e9j)) == pytest.approx((7e5 / 1e3) ** 2, rel=1e-3)


def test_double_biquad_inverse_rolloff():
    w = double_biquad_inverse(1000.0, 0.6, 0.5)
    assert w(0.0) == pytest.approx(0.5)
    # fourth-order rolloff: a decade costs a factor 1e4
    assert abs(w(1e6j)) / abs(w(1e7j)) == pytest.approx(1e4, rel=1e-3)


@pytest.mark.parametrize("bad", [
    ("lead_lag", {"a": 1.0, "b": -1.0}),
    ("lead_lag", {"a": 1.0}),
    ("biquad_ratio", {"w1": 1.0, "xi1": 0.0, "w2": 1.0, "xi2": 1.0}),
    ("notch", {}),
])
def test_invalid_weights_rejected(bad):
    with pytest.raises(ValueError):
        RationalWeight(*bad)


@pytest.mark.parametrize("w", [lead_lag(20.0, 1e-5), biquad_ratio(7e5, 0.1, 7e3, 0.1),
                               double_biquad_inverse(1000.0, 0.6, 0.5)])
def test_realization_matches_rational_form(w):
    om = np.array([0.0, 1e-3, 1.0, 1e3, 1e5])
    assert np.allclose(freqresp(w.realize(), om)[:, 0, 0], w(1j * om), rtol=1e-9)


def test_weight_dict_round_trip():
    w = biquad_ratio(7e5, 0.35, 1000.0, 0.8, k=1 / 6)
    assert RationalWeight.from_dict(w.to_dict()) == w


# ---------------------------------------------------------------- weight matrices

def test_spec_round_trip_and_sparsity():
    s = default_pv_weights()
    t = WeightingSpec.from_dict(s.to_dict())
    assert t.entries == s.entries and t.mode == "PV"
    assert s.get(1, 7) is None
    assert eval_weight(s, 1, 7, 3.0) == 0


def test_pq_weights_reconfigure_channels():
    pv, pq = default_pv_weights(), default_pq_weights()
    assert pq.mode == "PQ"
    assert pq.get(1, 1) is None and pq.get(3, 1) is None
    assert pq.get(6, 4) == pv.get(5, 3)
    assert pq.get(3, 4) == pv.get(8, 3)


def test_out_of_range_entry_rejected():
    with pytest.raises(ValueError):
        WeightingSpec({(11, 1): lead_lag(1.0, 1.0)})


def test_weight_grid_shape():
    W = weight_grid(default_pv_weights(), [0.0, 1.0])
    assert W.shape == (2, 10, 7)
    assert W[0, 7, 2] == pytest.approx(1e4)


# ---------------------------------------------------------------- objective

def test_weighted_system_is_entrywise_product():
    cl = loop()
    spec = default_pv_weights()
    ws = weighted_system(cl, spec)
    om = np.array([0.0, 0.7, 40.0, 900.0, 3e4])
    ref = weight_grid(spec, om) * freqresp(cl, om)
    assert np.allclose(freqresp(ws, om), ref, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("lg", [0.05, 0.2, 0.5])
def test_refined_objective_matches_certified_norm(lg):
    cl = loop(lg)
    spec = default_pv_weights()
    val, _ = weighted_objective(cl, spec)
    h = hinf_norm(weighted_system(cl, spec), rel_tol=1e-8).norm
    assert val <= h * (1 + 1e-7)
    assert val == pytest.approx(h, rel=1e-2)


def test_refinement_never_lowers_grid_value():
    cl = loop(0.35)
    spec = default_pv_weights()
    coarse, _ = weighted_objective(cl, spec, grid=default_grid(50), refine=False)
    fine, _ = weighted_objective(cl, spec, grid=default_grid(50))
    assert fine >= coarse


def test_unstable_loop_gives_infinite_objective():
    unstable = StateSpaceModel([[1.0]], np.ones((1, 7)), np.ones((10, 1)), np.zeros((10, 7)))
    val, peak = weighted_objective(unstable, default_pv_weights())
    assert val == np.inf and np.isnan(peak)


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        weighted_objective(loop(), default_pv_weights(), grid=[])


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 10.0))
def test_objective_is_homogeneous_in_weights(k):
    cl = loop(0.2, controller_template("droop"), 0.0)
    spec = default_pv_weights()
    scaled = WeightingSpec({ij: RationalWeight(w.kind, {**w.params, "k": k * w.params["k"]})
                            for ij, w in spec.entries.items()})
    a, _ = weighted_objective(cl, spec, refine=False)
    b, _ = weighted_objective(cl, scaled, refine=False)
    assert b == pytest.approx(k * a, rel=1e-9)
