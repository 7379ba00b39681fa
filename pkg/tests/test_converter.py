import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hinfgrid.converter import (
    ETA,
    N_STATES,
    ConverterParams,
    InfeasibleOperatingPoint,
    admittance_cascade,
    build_plant,
    closed_loop,
    controller_template,
    dynamics,
    extract_admittance,
    initial_integrators,
    sensitivity_entry,
    solve_operating_point,
    stability_matrix,
    unused_integrators,
)
from hinfgrid.lti import freqresp, lft_close, spectral_abscissa
from hinfgrid.network import line_F
from hinfgrid.synthesis import K_PUBLISHED_PQ, K_PUBLISHED_PV


def plant_at(P=1.0, **kw):
    p = ConverterParams(**kw)
    return build_plant(p, solve_operating_point(p, P))


# ---------------------------------------------------------------- parameters

@pytest.mark.parametrize("bad", [{"L_g": 0.0}, {"C_F": -1.0}, {"tau": -0.1}, {"T_P": 0.0},
                                 {"omega_b": 0.0}, {"mode": "XY"}])
def test_invalid_params_rejected(bad):
    with pytest.raises(ValueError):
        ConverterParams(**bad)


def test_with_returns_modified_copy():
    p = ConverterParams()
    q = p.with_(L_g=0.4)
    assert q.L_g == 0.4 and p.L_g == 0.2


# ---------------------------------------------------------------- operating point

@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.05, 0.5))
def test_operating_point_is_equilibrium(P, lg):
    p = ConverterParams(L_g=lg)
    op = solve_operating_point(p, P)
    dx, y, _, _ = dynamics(p, op.x0, np.zeros(7), op.u0, op.refs.as_array(), op.U_grid)
    free = [i for i in range(N_STATES) if i not in ETA]
    assert np.abs(dx[free]).max() < 1e-9
    assert abs(y[0]) < 1e-9 and abs(y[4]) < 1e-9
    assert op.P0 == pytest.approx(P, abs=1e-9)


def test_zero_flow_capacitor_voltage():
    p = ConverterParams()
    op = solve_operating_point(p, 0.0)
    assert np.allclose(op.V0, [1.0, 0.0], atol=1e-9)
    assert np.allclose(op.Uc0, [1.0 - p.L_F * p.C_F, 0.0], atol=1e-9)
    assert np.allclose(op.Uc0, op.V0, atol=2 * p.L_F * p.C_F)


def test_pq_mode_tracks_reactive_reference():
    p = ConverterParams(mode="PQ")
    op = solve_operating_point(p, 0.5, 0.2)
    assert op.P0 == pytest.approx(0.5, abs=1e-9)
    assert op.Q0 == pytest.approx(0.2, abs=1e-9)


def test_infeasible_power_transfer():
    with pytest.raises(InfeasibleOperatingPoint):
        solve_operating_point(ConverterParams(L_g=0.5), 10.0)


# ---------------------------------------------------------------- linearization

def test_plant_dimensions_and_labels():
    pl = plant_at()
    m = pl.model
    assert (m.nstates, m.ninputs, m.noutputs) == (20, 10, 17)
    assert (pl.nw, pl.nz, pl.nu, pl.ny) == (7, 10, 3, 7)
    assert m.input_labels[-3:] == ("Icd_ref", "Icq_ref", "omega")
    assert m.output_labels[-1] == "y7"


def test_linearization_matches_central_differences():
    p = ConverterParams()
    op = solve_operating_point(p, 0.8)
    pl = build_plant(p, op).model
    ra = op.refs.as_array()
    v0 = np.concatenate([op.x0, np.zeros(7), op.u0])

    def f(v):
        dx, y, z, _ = dynamics(p, v[:20], v[20:27], v[27:], ra, op.U_grid)
        return np.concatenate([dx, z, y])

    h = 1e-6
    J = np.array([(f(v0 + h * e) - f(v0 - h * e)) / (2 * h) for e in np.eye(30)]).T
    ref = np.block([[pl.A, pl.B], [pl.C, pl.D]])
    assert np.allclose(J, ref, rtol=1e-6, atol=1e-5 * np.abs(ref).max())


# ---------------------------------------------------------------- templates and loops

def test_template_layouts():
    d = controller_template("droop").K
    assert d[2, 4] == pytest.approx(4 * np.pi)
    assert d[0, 0] == 2.0 and d[1, 3] == 10.0
    q = controller_template("pll").K
    assert q[2, 2] == pytest.approx(-171.8) and q[2, 3] == pytest.approx(-14754.2)
    assert controller_template("droop", {"K_f": 1.0}).K[2, 4] == 1.0
    with pytest.raises(ValueError):
        controller_template("vsm")


def test_unused_integrators_are_pruned():
    pl = plant_at(0.5)
    k = controller_template("droop")
    assert unused_integrators(k) == [13]
    full = closed_loop(pl, k, prune=False)
    cl = closed_loop(pl, k)
    assert cl.nstates == full.nstates - 1
    ev_full = np.sort_complex(np.linalg.eigvals(full.A))
    assert np.min(np.abs(ev_full)) < 1e-9
    assert spectral_abscissa(cl.A) < 0
    assert np.allclose(stability_matrix(pl, k), cl.A)
    w = np.array([0.0, 1.0, 100.0])
    assert np.allclose(freqresp(cl, w[1:]), freqresp(full, w[1:]), atol=1e-8)


def test_closed_loop_equals_lft():
    pl = plant_at(0.3)
    cl = closed_loop(pl, K_PUBLISHED_PV, prune=False)
    ref = lft_close(pl, K_PUBLISHED_PV)
    assert np.allclose(cl.A, ref.A) and np.allclose(cl.D, ref.D)


@pytest.mark.parametrize("lg", [0.05, 0.2, 0.5])
def test_published_gains_stabilize(lg):
    assert spectral_abscissa(stability_matrix(plant_at(1.0, L_g=lg), K_PUBLISHED_PV)) < 0
    assert spectral_abscissa(stability_matrix(plant_at(0.0, L_g=lg, mode="PQ"), K_PUBLISHED_PQ)) < 0


def test_cascade_equals_line_inverse_times_admittance():
    p = ConverterParams(L_g=0.35)
    pl = build_plant(p, solve_operating_point(p, 1.0))
    Y = extract_admittance(pl, K_PUBLISHED_PV)
    G = admittance_cascade(pl, K_PUBLISHED_PV)
    _, finv = line_F(p.omega_b, p.tau)
    w = np.array([0.0, 1.0, 50.0, 2000.0])
    ref = finv(1j * w) @ freqresp(Y, w)
    assert np.allclose(freqresp(G, w), ref, rtol=1e-8, atol=1e-10)
    assert np.abs(Y.D).max() == 0.0


def test_sensitivity_entry_indexing():
    pl = plant_at(0.0)
    k = controller_template("droop")
    s = sensitivity_entry(pl, k, 7, 7)
    assert (s.ninputs, s.noutputs) == (1, 1)
    assert s.input_labels == ("w7",) and s.output_labels == ("z7",)
    with pytest.raises(IndexError):
        sensitivity_entry(pl, k, 11, 1)


def test_angle_sensitivity_vanishes_at_dc():
    pl = plant_at(0.0)
    for kind in ("droop", "pll"):
        s = sensitivity_entry(pl, controller_template(kind), 7, 7)
        assert abs(freqresp(s, [0.0])[0, 0, 0]) < 1e-9
        assert abs(freqresp(s, [1e5])[0, 0, 0]) == pytest.approx(1.0, abs=1e-2)


def test_initial_integrators_hold_equilibrium():
    p = ConverterParams(L_g=0.2)
    op = solve_operating_point(p, 1.0)
    x = initial_integrators(K_PUBLISHED_PV, op, p)
    _, y, _, _ = dynamics(p, x, np.zeros(7), op.u0, op.refs.as_array(), op.U_grid)
    u = K_PUBLISHED_PV @ np.real(y)
    assert np.allclose(u, op.u0, atol=1e-8)
    dx, *_ = dynamics(p, x, np.zeros(7), u, op.refs.as_array(), op.U_grid)
    assert np.abs(dx).max() < 1e-8
