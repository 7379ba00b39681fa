"""Averaged dq model of an LCL-filtered grid converter and its generalized plant.

All quantities are per unit. The grid (global) frame rotates at the nominal
frequency ``omega_b``. The controller frame lags it by the angle ``theta``
(plus the angle disturbance ``w7``). The control input ``omega`` is the
controller-frame frequency deviation in rad/s, so ``dtheta/dt = omega``.

State vector (20 entries)::

    0:2   Ic      converter-side current, grid frame
    2:4   V       capacitor voltage, grid frame
    4:6   I       grid-side current, grid frame
    6:8   xi      current-loop PI integrators (controller frame)
    8:10  vf      voltage feedforward filter (controller frame)
    10    theta   controller frame angle
    11:14 eta     integrators feeding y2, y4, y6
    14:16 pq      filtered active/reactive power
    16:18 vm      filtered controller-frame capacitor voltage
    18:20 im      filtered controller-frame grid current
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .lti import GainMatrix, GeneralizedPlant, StateSpaceModel, lft_close

__all__ = [
    "ConverterParams",
    "References",
    "OperatingPoint",
    "ConverterPlant",
    "InfeasibleOperatingPoint",
    "W_LABELS",
    "U_LABELS",
    "Z_LABELS",
    "Y_LABELS",
    "N_STATES",
    "ETA",
    "ETA_Y",
    "rot",
    "dynamics",
    "solve_operating_point",
    "build_plant",
    "controller_template",
    "closed_loop",
    "stability_matrix",
    "extract_admittance",
    "admittance_cascade",
    "sensitivity_entry",
    "initial_integrators",
]

J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
N_STATES = 20
THETA = 10
ETA = (11, 12, 13)
ETA_Y = (1, 3, 5)
W_LABELS = tuple(f"w{i}" for i in range(1, 8))
U_LABELS = ("Icd_ref", "Icq_ref", "omega")
Z_LABELS = tuple(f"z{i}" for i in range(1, 11))
Y_LABELS = tuple(f"y{i}" for i in range(1, 8))


class InfeasibleOperatingPoint(RuntimeError):
    """Steady-state equations have no (reachable) solution."""


@dataclass(frozen=True)
class ConverterParams:
    """Physical and inner-loop parameters of one converter (per unit).

    ``T_P`` and ``T_M`` are first-order measurement filter time constants for
    the power calculation and for the voltage/current samples used by the
    outer loop.
    """

    L_F: float = 0.05
    C_F: float = 0.05
    L_g: float = 0.2
    tau: float = 0.1
    Kp_i: float = 0.5
    Ki_i: float = 10.0
    K_VF: float = 1.0
    T_VF: float = 0.004
    X_v: float = 0.3
    omega_b: float = 2 * np.pi * 50
    mode: str = "PV"
    T_P: float = 0.05
    T_M: float = 0.0005

    def __post_init__(self):
        if min(self.L_F, self.C_F, self.L_g) <= 0:
            raise ValueError("L_F, C_F and L_g must be positive")
        if self.tau < 0 or self.X_v < 0:
            raise ValueError("tau and X_v must be nonnegative")
        if self.T_VF <= 0 or self.T_P <= 0 or self.T_M <= 0:
            raise ValueError("filter time constants must be positive")
        if self.omega_b <= 0:
            raise ValueError("omega_b must be positive")
        if self.mode not in ("PV", "PQ"):
            raise ValueError(f"mode must be PV or PQ, got {self.mode!r}")

    def with_(self, **kw) -> "ConverterParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class References:
    Vd: float = 1.0
    Vq: float = 0.0
    P: float = 0.0
    Q: float = 0.0

    def as_array(self):
        return np.array([self.Vd, self.Vq, self.P, self.Q])


@dataclass(frozen=True)
class OperatingPoint:
    """Equilibrium of the nonlinear converter model.

    ``x0`` holds the full state with the outer integrators set to zero (their
    value depends on the controller, see :func:`initial_integrators`).
    """

    V0: np.ndarray
    I0: np.ndarray
    Ic0: np.ndarray
    Uc0: np.ndarray
    theta0: float
    P0: float
    Q0: float
    x0: np.ndarray
    u0: np.ndarray
    refs: References
    U_grid: np.ndarray
    residual: float = 0.0


@dataclass(frozen=True)
class ConverterPlant(GeneralizedPlant):
    """Generalized plant with inputs ``(w1..w7, u)`` and outputs ``(z1..z10, y1..y7)``."""

    op: OperatingPoint = field(default=None)
    params: ConverterParams = field(default=None)


def rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def dynamics(p: ConverterParams, x, w, u, refs, U_grid=(1.0, 0.0)):
    """Nonlinear right-hand side.

    Works with complex arguments so that complex-step derivatives are exact.

    Returns
    -------
    dx : ndarray (20,)
    y : ndarray (7,)
    z : ndarray (10,)
    aux : dict
        ``P``, ``Q`` and controller-frame signals, for traces.
    """
    x = np.asarray(x)
    Ic, V, I = x[0:2], x[2:4], x[4:6]
    xi, vf, th = x[6:8], x[8:10], x[10]
    eta, pq, vm, im = x[11:14], x[14:16], x[16:18], x[18:20]
    Vdr, Vqr, Pr, Qr = refs
    wb = p.omega_b

    thp = th + w[6]
    to_ctrl = rot(-thp)
    Vc = to_ctrl @ V
    Icc = to_ctrl @ Ic
    Ig = to_ctrl @ I
    P = V[0] * I[0] + V[1] * I[1]
    Q = V[1] * I[0] - V[0] * I[1]

    y1 = Vdr - vm[0] + im[1] * p.X_v + w[0]
    y3 = Vqr - vm[1] - im[0] * p.X_v + w[1]
    y5 = Pr - pq[0] + w[2]
    y7 = Qr - pq[1] + w[3]

    e = u[:2] - Icc
    Ucmd = p.Kp_i * e + p.Ki_i * xi - p.L_F * (J2 @ Icc) + vf
    Uc = rot(thp) @ Ucmd
    U = np.asarray(U_grid) + w[4:6]

    dI = wb / p.L_g * (V - U) - p.tau * I + wb * (J2 @ I)
    dx = np.concatenate([
        wb / p.L_F * (Uc - V) + wb * (J2 @ Ic),
        wb / p.C_F * (Ic - I) + wb * (J2 @ V),
        dI,
        e,
        (p.K_VF * Vc - vf) / p.T_VF,
        [u[2]],
        [y7 if p.mode == "PQ" else y1, y3, y5],
        (np.array([P, Q]) - pq) / p.T_P,
        (Vc - vm) / p.T_M,
        (Ig - im) / p.T_M,
    ])
    y = np.array([y1, eta[0], y3, eta[1], y5, eta[2], y7])
    # F^{-1}(s) I with F^{-1}(s) = ((s + tau) I - omega_b J) / omega_b
    gi = (dI + p.tau * I) / wb - J2 @ I
    z = np.array([vm[0], vm[1], y7 if p.mode == "PQ" else y1, y3, pq[0], pq[1], thp, y5, gi[0], gi[1]])
    aux = {"P": P, "Q": Q, "Vc": Vc, "Icc": Icc, "Ig": Ig, "Uc": Uc}
    return dx, y, z, aux


_FREE = np.array([i for i in range(N_STATES) if i not in ETA])


def _steady_residual(p, refs, U_grid, v):
    x = np.zeros(N_STATES, dtype=v.dtype)
    x[_FREE] = v[:17]
    u = v[17:]
    dx, y, _, _ = dynamics(p, x, np.zeros(7), u, refs, U_grid)
    # integrated errors must vanish; the first one is y7 in PQ mode
    first = y[6] if p.mode == "PQ" else y[0]
    return np.concatenate([dx[_FREE], [first, y[2], y[4]]])


def _cs_jacobian(fun, v, h=1e-30):
    n = v.size
    cols = [np.imag(fun(v.astype(complex) + 1j * h * e)) / h for e in np.eye(n)]
    return np.array(cols).T


def solve_operating_point(
    params: ConverterParams,
    P_ref: float = 0.0,
    V_or_Q_ref: float | None = None,
    U_grid=1.0,
    *,
    Vd_ref: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> OperatingPoint:
    """Newton solve of the steady-state equations.

    Parameters
    ----------
    P_ref : float
        Active power reference.
    V_or_Q_ref : float, optional
        ``Vd_ref`` in PV mode or ``Q_ref`` in PQ mode. Defaults to 1 (PV) or 0 (PQ).
    U_grid : complex or pair
        Grid voltage phasor in the global frame.

    Raises
    ------
    InfeasibleOperatingPoint
        When no starting guess converges within ``max_iter`` iterations.
    """
    Ug = np.array([np.real(U_grid), np.imag(U_grid)]) if np.isscalar(U_grid) else np.asarray(U_grid, float)
    if np.hypot(*Ug) <= 0:
        raise ValueError("grid voltage magnitude must be positive")
    if params.mode == "PQ":
        refs = References(Vd_ref, 0.0, P_ref, 0.0 if V_or_Q_ref is None else V_or_Q_ref)
    else:
        refs = References(1.0 if V_or_Q_ref is None else V_or_Q_ref, 0.0, P_ref, 0.0)
    ra = refs.as_array()
    fun = lambda v: _steady_residual(params, ra, Ug, v)
    ug_ang = np.arctan2(Ug[1], Ug[0])
    x_tot = params.L_g + params.X_v

    best = np.inf
    guesses = [np.arcsin(np.clip(P_ref * x_tot / max(ra[0], 1e-6), -0.99, 0.99))]
    guesses += [0.0, 0.5, -0.5, 1.0, -1.0]
    for d in guesses:
        th = ug_ang + d
        v = np.zeros(20)
        x = np.zeros(N_STATES)
        x[2:4] = ra[0] * np.array([np.cos(th), np.sin(th)])
        x[8:10] = [params.K_VF * ra[0], 0.0]
        x[10] = th
        x[16:18] = [ra[0], 0.0]
        v[:17] = x[_FREE]
        r = fun(v)
        for _ in range(max_iter):
            if np.abs(r).max() < tol:
                break
            try:
                step = np.linalg.solve(_cs_jacobian(fun, v), r)
            except np.linalg.LinAlgError:
                break
            # damped Newton: halve until the residual drops
            t = 1.0
            while t > 1e-4:
                vn = v - t * step
                rn = fun(vn)
                if np.abs(rn).max() < np.abs(r).max():
                    break
                t /= 2
            v, r = vn, rn
        res = np.abs(r).max()
        best = min(best, res)
        th0 = v[10]
        if res < tol and abs(np.angle(np.exp(1j * (th0 - ug_ang)))) < np.pi / 2:
            x = np.zeros(N_STATES)
            x[_FREE] = v[:17]
            x[10] = np.angle(np.exp(1j * th0))
            u = v[17:]
            _, _, _, aux = dynamics(params, x, np.zeros(7), u, ra, Ug)
            return OperatingPoint(
                V0=x[2:4].copy(), I0=x[4:6].copy(), Ic0=x[0:2].copy(), Uc0=np.real(aux["Uc"]),
                theta0=float(x[10]), P0=float(aux["P"]), Q0=float(aux["Q"]),
                x0=x, u0=u, refs=refs, U_grid=Ug, residual=float(res),
            )
    raise InfeasibleOperatingPoint(f"Newton failed to converge (best residual {best:.3g})")


def build_plant(params: ConverterParams, op: OperatingPoint | None = None) -> ConverterPlant:
    """Exact linearization of :func:`dynamics` at ``op`` by complex-step differentiation."""
    if op is None:
        op = solve_operating_point(params)
    ra = op.refs.as_array()
    x0, u0, w0 = op.x0, op.u0, np.zeros(7)
    v0 = np.concatenate([x0, w0, u0])

    def out(v):
        dx, y, z, _ = dynamics(params, v[:N_STATES], v[N_STATES:N_STATES + 7], v[N_STATES + 7:], ra, op.U_grid)
        return np.concatenate([dx, z, y])

    Jac = _cs_jacobian(out, v0)
    n = N_STATES
    A, B = Jac[:n, :n], Jac[:n, n:]
    C, D = Jac[n:, :n], Jac[n:, n:]
    if A.shape != (20, 20) or B.shape != (20, 10) or C.shape != (17, 20):
        raise ValueError("inconsistent plant dimensions")
    model = StateSpaceModel(A, B, C, D, W_LABELS + U_LABELS, Z_LABELS + Y_LABELS)
    return ConverterPlant(model, 7, 10, op, params)


def controller_template(kind: str, gains: Mapping[str, float] | None = None) -> GainMatrix:
    """Droop or PLL controller laid out as a structured 3x7 gain.

    Droop gains: ``K_VP, K_VI, K_f``. PLL gains: ``K_PP, K_PI, K_VP, K_VI,
    K_wP, K_wI``. Missing gains default to the reference values used for the
    angle-sensitivity comparison.
    """
    g = dict(gains or {})
    K = np.zeros((3, 7))
    if kind == "droop":
        g = {"K_VP": 2.0, "K_VI": 10.0, "K_f": 4 * np.pi, **g}
        K[0, 0:2] = g["K_VP"], g["K_VI"]
        K[1, 2:4] = g["K_VP"], g["K_VI"]
        K[2, 4] = g["K_f"]
    elif kind == "pll":
        g = {"K_PP": 0.5, "K_PI": 40.0, "K_VP": 0.5, "K_VI": 40.0, "K_wP": 171.8, "K_wI": 14754.2, **g}
        K[0, 4:6] = g["K_PP"], g["K_PI"]
        K[1, 0:2] = -g["K_VP"], -g["K_VI"]
        K[2, 2:4] = -g["K_wP"], -g["K_wI"]
    else:
        raise ValueError(f"unknown template {kind!r}")
    mask = K != 0
    return GainMatrix(K, mask)


def _gain(k) -> GainMatrix:
    return k if isinstance(k, GainMatrix) else GainMatrix(np.asarray(k, float))


def closed_loop(plant: ConverterPlant, k, prune: bool = True) -> StateSpaceModel:
    """``w -> z`` closed loop ``P(K)``.

    With ``prune`` the outer integrators the gain never reads are removed.
    Such an integrator only accumulates a measurement and feeds nothing, so a
    controller built from the gain would not implement it; keeping it adds a
    spurious eigenvalue at the origin.
    """
    cl = lft_close(plant, _gain(k))
    drop = unused_integrators(k) if prune else []
    if not drop:
        return cl
    keep = [i for i in range(cl.nstates) if i not in drop]
    return StateSpaceModel(cl.A[np.ix_(keep, keep)], cl.B[keep], cl.C[:, keep], cl.D,
                           cl.input_labels, cl.output_labels)


def unused_integrators(k) -> list[int]:
    """Outer integrator states whose output the gain never reads."""
    K = _gain(k).K
    return [s for s, c in zip(ETA, ETA_Y) if not np.any(K[:, c])]


def stability_matrix(plant: ConverterPlant, k) -> np.ndarray:
    """Closed-loop ``A`` without the unused outer integrators."""
    return closed_loop(plant, k).A


def extract_admittance(plant: ConverterPlant, k) -> StateSpaceModel:
    """Closed-loop admittance ``Y(s)``: terminal voltage ``(w5, w6)`` to grid current.

    Sign convention: ``I = Y U`` with ``I`` flowing from the converter into the
    grid, so a passive branch gives ``Y = -1/(s L)``-like behaviour.
    """
    cl = closed_loop(plant, k)
    n = cl.nstates
    C = np.zeros((2, n))
    C[:, 4:6] = np.eye(2)
    return StateSpaceModel(cl.A, cl.B[:, 4:6], C, np.zeros((2, 2)), ("w5", "w6"), ("Id", "Iq"))


def admittance_cascade(plant: ConverterPlant, k) -> StateSpaceModel:
    """``F^{-1}(s) Y(s)`` realized exactly (the ``w5, w6 -> z9, z10`` block)."""
    return closed_loop(plant, k).subsystem(["z9", "z10"], ["w5", "w6"])


def sensitivity_entry(plant: ConverterPlant, k, i: int, j: int) -> StateSpaceModel:
    """Single closed-loop entry ``P_ij(K)`` with 1-based indices (``z_i`` from ``w_j``)."""
    if not (1 <= i <= 10 and 1 <= j <= 7):
        raise IndexError("entry index out of range")
    return closed_loop(plant, k).subsystem([i - 1], [j - 1])


def initial_integrators(k, op: OperatingPoint, params: ConverterParams) -> np.ndarray:
    """Outer integrator values so that ``K y`` reproduces the equilibrium input.

    Returns the full state vector with ``eta`` filled in. Columns the gain does
    not use are left at zero.
    """
    K = _gain(k).K
    x = op.x0.copy()
    _, y, _, _ = dynamics(params, x, np.zeros(7), op.u0, op.refs.as_array(), op.U_grid)
    y = np.real(y)
    Ke = K[:, ETA_Y]
    rhs = op.u0 - K @ y
    eta, *_ = np.linalg.lstsq(Ke, rhs, rcond=None)
    if np.abs(Ke @ eta - rhs).max() > 1e-8:
        raise InfeasibleOperatingPoint("gain cannot hold the equilibrium input")
    x[list(ETA)] = eta
    return x
