import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hinfgrid.lti import (
    AlgebraicLoopError,
    FrequencyResponse,
    GainMatrix,
    GeneralizedPlant,
    LTIError,
    StateSpaceModel,
    UnstableSystemError,
    balanced,
    default_grid,
    feedback,
    freqresp,
    grid_peak,
    hinf_norm,
    identity,
    lft_close,
    parallel,
    series,
    sigma_plot,
    spectral_abscissa,
    static_gain,
    write_sigma_csv,
)


def random_stable(rng, n, m, p, feedthrough=True):
    A = rng.normal(size=(n, n))
    A -= (np.linalg.eigvals(A).real.max() + rng.uniform(0.05, 2.0)) * np.eye(n)
    D = rng.normal(size=(p, m)) if feedthrough else np.zeros((p, m))
    return StateSpaceModel(A, rng.normal(size=(n, m)), rng.normal(size=(p, n)), D)


def tf_eval(sys, w):
    return sys.C @ np.linalg.solve(1j * w * np.eye(sys.nstates) - sys.A, sys.B) + sys.D


seeds = st.integers(0, 2**31 - 1)
W = np.array([0.0, 0.3, 2.0, 17.0])


# ---------------------------------------------------------------- construction

def test_default_labels_and_shapes():
    s = StateSpaceModel(-np.eye(2), np.ones((2, 1)), np.ones((3, 2)), np.zeros((3, 1)))
    assert s.input_labels == ("u1",)
    assert s.output_labels == ("y1", "y2", "y3")
    assert (s.nstates, s.ninputs, s.noutputs) == (2, 1, 3)


def test_duplicate_labels_rejected():
    with pytest.raises(LTIError):
        StateSpaceModel(-np.eye(1), [[1.0]], [[1.0], [1.0]], np.zeros((2, 1)), output_labels=("a", "a"))


def test_non_square_A_rejected():
    with pytest.raises(LTIError):
        StateSpaceModel(np.ones((2, 3)), np.ones((2, 1)), np.ones((1, 2)), [[0.0]])


def test_matrices_are_read_only():
    s = identity(2)
    with pytest.raises(ValueError):
        s.D[0, 0] = 3.0


def test_subsystem_by_label():
    rng = np.random.default_rng(0)
    s = random_stable(rng, 3, 2, 2)
    sub = s.subsystem(["y2"], ["u1"])
    assert np.allclose(freqresp(sub, W)[:, 0, 0], freqresp(s, W)[:, 1, 0])


def test_gain_matrix_mask_pins_entries():
    g = GainMatrix(np.arange(6.0).reshape(2, 3), [[1, 0, 1], [0, 1, 0]])
    assert g.K[0, 1] == 0 and g.K[1, 0] == 0
    assert np.array_equal(g.free_values(), [0.0, 2.0, 4.0])
    assert np.array_equal(g.with_free_values([1, 2, 3]).K, [[1, 0, 2], [0, 3, 0]])


def test_frequency_response_requires_increasing_grid():
    with pytest.raises(LTIError):
        FrequencyResponse(np.array([1.0, 1.0]), np.zeros((2, 1, 1)))


# ---------------------------------------------------------------- interconnections

@settings(max_examples=30, deadline=None)
@given(seeds)
def test_series_is_product(seed):
    rng = np.random.default_rng(seed)
    g1, g2 = random_stable(rng, 3, 2, 3), random_stable(rng, 2, 3, 2)
    s = series(g1, g2)
    for w in W:
        assert np.allclose(tf_eval(s, w), tf_eval(g2, w) @ tf_eval(g1, w))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_parallel_is_sum(seed):
    rng = np.random.default_rng(seed)
    g1, g2 = random_stable(rng, 3, 2, 2), random_stable(rng, 1, 2, 2)
    s = parallel(g1, g2)
    for w in W:
        assert np.allclose(tf_eval(s, w), tf_eval(g1, w) + tf_eval(g2, w))


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from([-1, 1]))
def test_feedback_matches_pointwise_formula(seed, sign):
    rng = np.random.default_rng(seed)
    g = random_stable(rng, 3, 2, 2)
    k = 0.3 * rng.normal(size=(2, 2))
    cl = feedback(g, k, sign)
    for w in W:
        G = tf_eval(g, w)
        assert np.allclose(tf_eval(cl, w), np.linalg.solve(np.eye(2) - sign * G @ k, G))


def test_feedback_algebraic_loop():
    with pytest.raises(AlgebraicLoopError):
        feedback(static_gain([[1.0]]), [[1.0]], sign=1)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_lft_close_matches_pointwise_formula(seed):
    rng = np.random.default_rng(seed)
    m = random_stable(rng, 4, 3, 3)
    plant = GeneralizedPlant(m, nw=2, nz=2)
    K = 0.2 * rng.normal(size=(1, 1))
    cl = lft_close(plant, K)
    for w in W:
        P = tf_eval(m, w)
        P11, P12, P21, P22 = P[:2, :2], P[:2, 2:], P[2:, :2], P[2:, 2:]
        ref = P11 + P12 @ K @ np.linalg.solve(np.eye(1) - P22 @ K, P21)
        assert np.allclose(tf_eval(cl, w), ref)


def test_lft_close_dimension_check():
    plant = GeneralizedPlant(static_gain(np.ones((3, 3))), nw=2, nz=2)
    with pytest.raises(LTIError):
        lft_close(plant, np.ones((2, 2)))


# ---------------------------------------------------------------- norms

@pytest.mark.parametrize("a", [0.1, 1.0, 50.0])
def test_first_order_norm(a):
    s = StateSpaceModel([[-a]], [[1.0]], [[1.0]], [[0.0]])
    h = hinf_norm(s)
    assert h.norm == pytest.approx(1 / a, rel=1e-9)


@pytest.mark.parametrize("zeta", [0.01, 0.1, 0.5])
def test_resonant_peak(zeta):
    wn = 3.0
    s = StateSpaceModel([[0, 1], [-wn**2, -2 * zeta * wn]], [[0], [wn**2]], [[1, 0]], [[0]])
    h = hinf_norm(s)
    assert h.norm == pytest.approx(1 / (2 * zeta * np.sqrt(1 - zeta**2)), rel=1e-8)
    assert h.peak_frequency == pytest.approx(wn * np.sqrt(1 - 2 * zeta**2), rel=1e-3)


def test_static_norm_is_sigma_max():
    D = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert hinf_norm(static_gain(D)).norm == pytest.approx(5.0)


def test_norm_of_unstable_raises():
    with pytest.raises(UnstableSystemError):
        hinf_norm(StateSpaceModel([[0.5]], [[1.0]], [[1.0]], [[0.0]]))


def test_bad_tolerance_rejected():
    with pytest.raises(ValueError):
        hinf_norm(identity(1), rel_tol=0.0)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_grid_never_exceeds_certified_norm(seed):
    rng = np.random.default_rng(seed)
    s = random_stable(rng, int(rng.integers(1, 8)), 2, 2, feedthrough=bool(rng.integers(0, 2)))
    h = hinf_norm(s).norm
    g = grid_peak(s, np.logspace(-3, 3, 3000), include_infinity=True).norm
    assert g <= h * (1 + 1e-8)
    assert g >= h * (1 - 1e-3)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.1, 10.0))
def test_norm_scales_linearly(seed, alpha):
    s = random_stable(np.random.default_rng(seed), 4, 2, 2)
    assert hinf_norm(s.scaled(alpha)).norm == pytest.approx(alpha * hinf_norm(s).norm, rel=1e-7)


def test_norm_ignores_state_scaling():
    rng = np.random.default_rng(3)
    s = random_stable(rng, 5, 2, 2)
    T = np.diag(10.0 ** rng.uniform(-4, 4, 5))
    Ti = np.linalg.inv(T)
    s2 = StateSpaceModel(T @ s.A @ Ti, T @ s.B, s.C @ Ti, s.D)
    assert hinf_norm(s2).norm == pytest.approx(hinf_norm(s).norm, rel=1e-7)


def test_balanced_keeps_response():
    rng = np.random.default_rng(4)
    s = random_stable(rng, 5, 2, 2)
    assert np.allclose(freqresp(balanced(s), W), freqresp(s, W))


def test_widely_separated_poles():
    # a weight-like biquad at 7e5 rad/s in series with a slow plant
    slow = StateSpaceModel([[-1e-3]], [[1e-3]], [[1.0]], [[0.0]])
    w1, w2 = 7e5, 1e3
    num = np.array([1 / w2**2, 2 * 0.8 / w2, 1.0])
    den = np.array([1 / w1**2, 2 * 0.35 / w1, 1.0])
    A = np.array([[0, 1], [-den[2] / den[0], -den[1] / den[0]]])
    C = np.array([[num[2] / den[0] - num[0] * den[2] / den[0] ** 2, num[1] / den[0] - num[0] * den[1] / den[0] ** 2]])
    bq = StateSpaceModel(A, [[0], [1]], C, [[num[0] / den[0]]])
    s = series(slow, bq)
    h = hinf_norm(s)
    g = grid_peak(s, np.logspace(-6, 7, 20000), include_infinity=True)
    assert h.norm == pytest.approx(g.norm, rel=1e-6)


# ---------------------------------------------------------------- grids and export

def test_default_grid_span():
    g = default_grid(400)
    assert g[0] == 0.0 and len(g) == 401
    assert g[1] == pytest.approx(2 * np.pi * 1e-4)
    assert g[-1] == pytest.approx(2 * np.pi * 1e4)


def test_spectral_abscissa():
    assert spectral_abscissa(np.diag([-1.0, -3.0])) == -1.0
    assert spectral_abscissa(np.zeros((0, 0))) == -np.inf


def test_sigma_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    s = random_stable(rng, 3, 2, 2)
    fr = sigma_plot(s, default_grid(50))
    path = tmp_path / "s.csv"
    write_sigma_csv(path, fr)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (51, 3)
    assert np.allclose(data[:, 1:], fr.singular_values, rtol=1e-14)
    assert np.all(data[:, 1] >= data[:, 2])


def test_identity_sigma_is_flat():
    fr = sigma_plot(identity(2), default_grid(20))
    assert np.allclose(fr.singular_values, 1.0)
