"""Nonlinear dq-frame simulation of one or several grid-connected converters.

The converter model is the one in :func:`hinfgrid.converter.dynamics`, here
compiled with numba and extended with current-reference saturation and
conditional-integration anti-windup. Several converters share a homogeneous
RL network: with a common ``tau`` the line states collapse onto the
converter grid-side currents,

    dI/dt = omega_b (X^{-1} (x) I2) (V - E) - tau I + omega_b J I,

with ``X = diag(L_g) + Q_red^{-1}`` and ``E`` the Thevenin voltage of the
infinite bus and the constant-current loads. A single converter is the case
``X = L_g`` and ``E = U_grid``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit
from scipy import optimize

from .converter import (
    ETA,
    ETA_Y,
    ConverterParams,
    InfeasibleOperatingPoint,
    initial_integrators,
    solve_operating_point,
)
from .lti import GainMatrix
from .network import FInverse, NetworkSpec, laplacian

__all__ = [
    "EVENT_KINDS",
    "ScenarioError",
    "NoStepError",
    "Event",
    "Scenario",
    "SimConfig",
    "SimTrace",
    "StepMetrics",
    "simulate_single",
    "simulate_network",
    "preset_scenarios",
    "metrics",
    "lcl_resonance_hz",
]

EVENT_KINDS = (
    "p_ref_step", "q_ref_step", "v_ref_step", "lg_step", "grid_voltage_step",
    "breaker_open", "breaker_close", "mode_switch", "local_load",
)
SIGNALS = ("P_E", "Q_E", "P_m", "Q_m", "V_d", "V_q", "V_mag", "omega", "theta",
           "I_d", "I_q", "Ic_d", "Ic_q", "Icd_ref", "Icq_ref")
_NSIG = len(SIGNALS)


class ScenarioError(ValueError):
    pass


class NoStepError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    payload: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {self.kind!r}")
        object.__setattr__(self, "payload", dict(self.payload))

    @property
    def converter(self) -> int:
        return int(self.payload.get("converter", 1))

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind, **self.payload}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Event":
        d = dict(d)
        return cls(float(d.pop("time")), d.pop("kind"), d)


@dataclass(frozen=True)
class Scenario:
    """Scripted events. ``initial`` maps reference names to a value or a per-converter list.

    Recognized initial keys: ``P_ref``, ``Q_ref``, ``V_ref``, ``L_g``, ``mode``.
    """

    duration: float
    events: tuple = ()
    initial: Mapping = field(default_factory=dict)
    name: str = ""
    converters: int = 1

    def __post_init__(self):
        if self.converters < 1:
            raise ScenarioError("at least one converter is required")
        ev = tuple(e if isinstance(e, Event) else Event.from_dict(e) for e in self.events)
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        for e in ev:
            if not 0 <= e.time <= self.duration:
                raise ScenarioError(f"event at t={e.time} outside [0, {self.duration}]")
        if any(b.time < a.time for a, b in zip(ev, ev[1:])):
            raise ScenarioError("events must be sorted by time")
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "initial", dict(self.initial))

    def initial_value(self, key: str, k: int, default):
        v = self.initial.get(key, default)
        if isinstance(v, (list, tuple)):
            return v[k]
        return v

    def to_dict(self) -> dict:
        return {"name": self.name, "duration": self.duration, "converters": self.converters,
                "initial": dict(self.initial), "events": [e.to_dict() for e in self.events]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        return cls(float(d["duration"]), tuple(Event.from_dict(e) for e in d.get("events", ())),
                   d.get("initial", {}), d.get("name", ""), int(d.get("converters", 1)))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 2e-5
    solver: str = "rk4"
    icd_limit: float = 1.1
    icq_limit: float = 0.5
    decimation: int = 50
    instability_threshold: float = 1e3

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.solver != "rk4":
            raise ValueError("only the rk4 solver is available")
        if self.icd_limit <= 0 or self.icq_limit <= 0:
            raise ValueError("saturation limits must be positive")
        if self.decimation < 1:
            raise ValueError("decimation must be at least 1")


@dataclass
class SimTrace:
    """Recorded signals. Multi-converter traces suffix names with ``_1``, ``_2``, ..."""

    t: np.ndarray
    signals: dict
    unstable: bool = False
    unstable_time: float = np.nan
    final_state: np.ndarray | None = None

    def __getitem__(self, name) -> np.ndarray:
        return self.signals[name]

    def to_csv(self, path) -> None:
        names = list(self.signals)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + names)
            for k in range(self.t.size):
                w.writerow([f"{self.t[k]:.12g}"] + [f"{self.signals[n][k]:.12g}" for n in names])
            status = f"unstable at t={self.unstable_time:.12g}" if self.unstable else "stable"
            w.writerow([f"# status: {status}"])


@dataclass(frozen=True)
class StepMetrics:
    rise_time_10_90: float
    overshoot_pct: float
    settling_time_2pct: float
    stable: bool
    initial: float
    final: float


def lcl_resonance_hz(p: ConverterParams) -> float:
    """Resonance of the LCL filter with the grid inductance, in Hz."""
    w = p.omega_b * np.sqrt((p.L_F + p.L_g) / (p.L_F * p.L_g * p.C_F))
    return float(w / (2 * np.pi))


# ---------------------------------------------------------------- kernels

_NPRM = 12  # L_F C_F tau Kp Ki K_VF T_VF X_v omega_b T_P T_M pq


@njit(cache=True)
def _outputs(x, prm, refs):
    y = np.empty(7)
    y[0] = refs[0] - x[16] + x[19] * prm[7]
    y[1] = x[11]
    y[2] = refs[1] - x[17] - x[18] * prm[7]
    y[3] = x[12]
    y[4] = refs[2] - x[14]
    y[5] = x[13]
    y[6] = refs[3] - x[15]
    return y


@njit(cache=True)
def _rhs(X, prm, refs, K, lim, Xinv, E, pinned, dX, sig):
    n = X.shape[0]
    for i in range(n):
        x = X[i]
        LF, CF, tau, Kp, Ki, KVF, TVF, Xv, wb, TP, TM = (prm[i, 0], prm[i, 1], prm[i, 2], prm[i, 3],
                                                        prm[i, 4], prm[i, 5], prm[i, 6], prm[i, 7],
                                                        prm[i, 8], prm[i, 9], prm[i, 10])
        c = np.cos(x[10])
        s = np.sin(x[10])
        Vcd = c * x[2] + s * x[3]
        Vcq = -s * x[2] + c * x[3]
        Iccd = c * x[0] + s * x[1]
        Iccq = -s * x[0] + c * x[1]
        Igd = c * x[4] + s * x[5]
        Igq = -s * x[4] + c * x[5]
        P = x[2] * x[4] + x[3] * x[5]
        Q = x[3] * x[4] - x[2] * x[5]
        y = _outputs(x, prm[i], refs[i])
        v = K[i] @ y
        u0 = min(max(v[0], -lim[0]), lim[0])
        u1 = min(max(v[1], -lim[1]), lim[1])
        e0 = u0 - Iccd
        e1 = u1 - Iccq
        Ud = Kp * e0 + Ki * x[6] - LF * Iccq + x[8]
        Uq = Kp * e1 + Ki * x[7] + LF * Iccd + x[9]
        Ucd = c * Ud - s * Uq
        Ucq = s * Ud + c * Uq
        dx = dX[i]
        dx[0] = wb / LF * (Ucd - x[2]) + wb * x[1]
        dx[1] = wb / LF * (Ucq - x[3]) - wb * x[0]
        dx[2] = wb / CF * (x[0] - x[4]) + wb * x[3]
        dx[3] = wb / CF * (x[1] - x[5]) - wb * x[2]
        dx[6] = e0
        dx[7] = e1
        dx[8] = (KVF * Vcd - x[8]) / TVF
        dx[9] = (KVF * Vcq - x[9]) / TVF
        dx[10] = v[2]
        dx[11] = y[6] if prm[i, 11] > 0.5 else y[0]
        dx[12] = y[2]
        dx[13] = y[4]
        # conditional integration: hold integrators that push a saturated reference further out
        for r in range(2):
            excess = 0.0
            if v[r] > lim[r]:
                excess = 1.0
            elif v[r] < -lim[r]:
                excess = -1.0
            if excess != 0.0:
                for j in range(3):
                    if K[i, r, 1 + 2 * j] * dx[11 + j] * excess > 0.0:
                        dx[11 + j] = 0.0
        dx[14] = (P - x[14]) / TP
        dx[15] = (Q - x[15]) / TP
        dx[16] = (Vcd - x[16]) / TM
        dx[17] = (Vcq - x[17]) / TM
        dx[18] = (Igd - x[18]) / TM
        dx[19] = (Igq - x[19]) / TM
        sg = sig[i]
        sg[0] = P
        sg[1] = Q
        sg[2] = x[14]
        sg[3] = x[15]
        sg[4] = Vcd
        sg[5] = Vcq
        sg[6] = np.sqrt(x[2] ** 2 + x[3] ** 2)
        sg[7] = v[2]
        sg[8] = x[10]
        sg[9] = Igd
        sg[10] = Igq
        sg[11] = Iccd
        sg[12] = Iccq
        sg[13] = u0
        sg[14] = u1
    for i in range(n):
        if pinned[i]:
            dX[i, 4] = 0.0
            dX[i, 5] = 0.0
            continue
        wb = prm[i, 8]
        tau = prm[i, 2]
        a = 0.0
        b = 0.0
        for j in range(n):
            rd = X[j, 2] - E[j, 0]
            rq = X[j, 3] - E[j, 1]
            a += Xinv[i, j] * rd
            b += Xinv[i, j] * rq
        dX[i, 4] = wb * a - tau * X[i, 4] + wb * X[i, 5]
        dX[i, 5] = wb * b - tau * X[i, 5] - wb * X[i, 4]


@njit(cache=True)
def _run(X, nsteps, dt, dec, prm, refs, K, lim, Xinv, E, pinned, rec, r0, thresh):
    """RK4 for ``nsteps`` steps; records every ``dec`` steps into ``rec`` from row ``r0``.

    Returns ``(rows written, step at which the state blew up or -1)``.
    """
    n = X.shape[0]
    k1 = np.empty_like(X)
    k2 = np.empty_like(X)
    k3 = np.empty_like(X)
    k4 = np.empty_like(X)
    sig = np.empty((n, rec.shape[2]))
    r = r0
    for step in range(1, nsteps + 1):
        _rhs(X, prm, refs, K, lim, Xinv, E, pinned, k1, sig)
        _rhs(X + 0.5 * dt * k1, prm, refs, K, lim, Xinv, E, pinned, k2, sig)
        _rhs(X + 0.5 * dt * k2, prm, refs, K, lim, Xinv, E, pinned, k3, sig)
        _rhs(X + dt * k3, prm, refs, K, lim, Xinv, E, pinned, k4, sig)
        X += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = False
        for i in range(n):
            for q in range(X.shape[1]):
                if q != 10 and not (abs(X[i, q]) <= thresh):
                    bad = True
        if step % dec == 0 or bad:
            _rhs(X, prm, refs, K, lim, Xinv, E, pinned, k1, sig)
            if r < rec.shape[0]:
                rec[r] = sig
                r += 1
        if bad:
            return r, step
    return r, -1


# ---------------------------------------------------------------- engine

def _prm_row(p: ConverterParams) -> np.ndarray:
    return np.array([p.L_F, p.C_F, p.tau, p.Kp_i, p.Ki_i, p.K_VF, p.T_VF, p.X_v, p.omega_b, p.T_P, p.T_M,
                     1.0 if p.mode == "PQ" else 0.0])


def _as_gain_map(K) -> dict:
    """Controller spec as ``{mode: 3x7 array}``; a bare gain serves every mode."""
    if isinstance(K, Mapping):
        return {m: np.asarray(k.K if isinstance(k, GainMatrix) else k, dtype=float) for m, k in K.items()}
    k = np.asarray(K.K if isinstance(K, GainMatrix) else K, dtype=float)
    if k.shape != (3, 7):
        raise ValueError("gain must be 3x7")
    return {"PV": k, "PQ": k}


class _Engine:
    """Mutable simulation state shared by the single and network front ends."""

    def __init__(self, params: list, gains: list, X0, cfg: SimConfig, refs, Xmat_fn, E_fn):
        self.params = list(params)
        self.gains = gains
        self.cfg = cfg
        self.n = len(params)
        self.X = np.array(X0, dtype=float)
        self.refs = np.array(refs, dtype=float)
        self.prm = np.array([_prm_row(p) for p in self.params])
        self.K = np.array([g[p.mode] for g, p in zip(gains, self.params)])
        self.lim = np.array([cfg.icd_limit, cfg.icq_limit])
        self.pinned = np.zeros(self.n, dtype=np.bool_)
        self.Xmat_fn = Xmat_fn
        self.E_fn = E_fn
        self.update_network()

    def update_network(self):
        self.Xinv = np.linalg.inv(self.Xmat_fn([p.L_g for p in self.params]))
        self.E = np.asarray(self.E_fn(), dtype=float).reshape(self.n, 2)

    def check_dt(self):
        f = max(lcl_resonance_hz(p) for p in self.params)
        if self.cfg.dt > 1.0 / (20.0 * f):
            raise ScenarioError(f"dt={self.cfg.dt:g} too large for the {f:.0f} Hz LCL resonance")

    def switch_mode(self, k: int, mode: str):
        if mode not in ("PV", "PQ"):
            raise ScenarioError(f"unknown mode {mode!r}")
        if mode not in self.gains[k]:
            raise ScenarioError(f"converter {k + 1} has no gain for mode {mode}")
        x = self.X[k]
        y = _outputs(x, self.prm[k], self.refs[k])
        u_old = self.K[k] @ y
        u_old[:2] = np.clip(u_old[:2], -self.lim, self.lim)
        self.params[k] = self.params[k].with_(mode=mode)
        self.prm[k] = _prm_row(self.params[k])
        Kn = self.gains[k][mode]
        self.K[k] = Kn
        # bumpless transfer: pick the integrator values that keep u continuous
        y = _outputs(x, self.prm[k], self.refs[k])
        y[list(ETA_Y)] = 0.0
        Ke = Kn[:, list(ETA_Y)]
        eta, *_ = np.linalg.lstsq(Ke, u_old - Kn @ y, rcond=None)
        used = np.any(Ke != 0, axis=0)
        x[list(ETA)] = np.where(used, eta, x[list(ETA)])

    def run(self, scenario: Scenario, apply_event) -> SimTrace:
        cfg = self.cfg
        self.check_dt()
        dt = cfg.dt
        total = int(round(scenario.duration / dt))
        nrec = total // cfg.decimation + 2
        rec = np.full((nrec, self.n, _NSIG), np.nan)
        # initial sample
        sig = np.empty((self.n, _NSIG))
        _rhs(self.X, self.prm, self.refs, self.K, self.lim, self.Xinv, self.E, self.pinned,
             np.empty_like(self.X), sig)
        rec[0] = sig
        r = 1
        step = 0
        unstable_step = -1
        events = list(scenario.events)
        while step < total:
            while events and int(round(events[0].time / dt)) <= step:
                apply_event(self, events.pop(0))
            nxt = total if not events else min(total, int(round(events[0].time / dt)))
            if nxt <= step:
                continue
            # keep the recording grid aligned with multiples of the decimation
            r, bad = _run(self.X, nxt - step, dt, cfg.decimation, self.prm, self.refs, self.K, self.lim,
                          self.Xinv, self.E, self.pinned, rec, r, cfg.instability_threshold)
            if bad >= 0:
                unstable_step = step + bad
                break
            step = nxt
        t = np.arange(nrec) * dt * cfg.decimation
        if unstable_step >= 0:
            t[r - 1] = unstable_step * dt
        t = t[:r]
        rec = rec[:r]
        signals = {}
        for i in range(self.n):
            sfx = "" if self.n == 1 else f"_{i + 1}"
            for q, name in enumerate(SIGNALS):
                signals[name + sfx] = rec[:, i, q].copy()
        return SimTrace(t, signals, unstable_step >= 0,
                        unstable_step * dt if unstable_step >= 0 else np.nan, self.X.copy())


def _check_alignment(scenario: Scenario, cfg: SimConfig):
    for e in scenario.events:
        k = e.time / cfg.dt
        if abs(k - round(k)) > 1e-6:
            warnings.warn(f"event at t={e.time} rounded to the step grid", RuntimeWarning)


def _common_event(eng: _Engine, ev: Event, k: int) -> bool:
    """Reference, inductance and mode events shared by both front ends."""
    val = ev.payload.get("value")
    if ev.kind == "p_ref_step":
        eng.refs[k, 2] = float(val)
    elif ev.kind == "q_ref_step":
        eng.refs[k, 3] = float(val)
    elif ev.kind == "v_ref_step":
        eng.refs[k, 0] = float(val)
    elif ev.kind == "lg_step":
        if float(val) <= 0:
            raise ScenarioError("L_g must be positive")
        eng.params[k] = eng.params[k].with_(L_g=float(val))
        eng.check_dt()
        eng.update_network()
    elif ev.kind == "mode_switch":
        eng.switch_mode(k, str(ev.payload["mode"]))
    else:
        return False
    return True


# ---------------------------------------------------------------- front ends

def simulate_single(params: ConverterParams, K, scenario: Scenario, cfg: SimConfig | None = None) -> SimTrace:
    """One converter behind ``L_g`` on an infinite bus.

    ``breaker_open`` removes the grid tie: the grid-side current is pinned to
    a constant-current local load ``payload['load']`` computed at the
    pre-event capacitor voltage. ``breaker_close`` reconnects directly.
    """
    cfg = cfg or SimConfig()
    if scenario.converters != 1:
        raise ScenarioError(f"scenario {scenario.name!r} needs {scenario.converters} converters")
    _check_alignment(scenario, cfg)
    gains = _as_gain_map(K)
    mode = scenario.initial_value("mode", 0, params.mode)
    lg = scenario.initial_value("L_g", 0, params.L_g)
    params = params.with_(mode=mode, L_g=float(lg))
    if mode not in gains:
        raise ScenarioError(f"no gain for mode {mode}")
    P0 = float(scenario.initial_value("P_ref", 0, 0.0))
    second = scenario.initial_value("Q_ref" if mode == "PQ" else "V_ref", 0, None)
    Vd = float(scenario.initial_value("V_ref", 0, 1.0))
    op = solve_operating_point(params, P0, second, Vd_ref=Vd)
    x0 = initial_integrators(gains[mode], op, params)
    state = {"Ug": op.U_grid.copy(), "load": None}

    eng = _Engine([params], [gains], x0[None], cfg, [op.refs.as_array()],
                  lambda lgs: np.array([[lgs[0]]]), lambda: state["Ug"][None])

    def apply(e: _Engine, ev: Event):
        if ev.converter != 1:
            raise ScenarioError(f"event targets converter {ev.converter} in a single-converter run")
        if _common_event(e, ev, 0):
            return
        if ev.kind == "grid_voltage_step":
            ang = np.arctan2(state["Ug"][1], state["Ug"][0])
            state["Ug"] = float(ev.payload["value"]) * np.array([np.cos(ang), np.sin(ang)])
            e.update_network()
        elif ev.kind in ("breaker_open", "local_load"):
            if "load" in ev.payload:
                state["load"] = float(ev.payload["load"])
            if ev.kind == "breaker_open" or e.pinned[0]:
                V = e.X[0, 2:4]
                e.X[0, 4:6] = (state["load"] or 0.0) * V / (V @ V)
                e.pinned[0] = True
        elif ev.kind == "breaker_close":
            e.pinned[0] = False

    return eng.run(scenario, apply)


def _network_matrices(spec: NetworkSpec, scale: float):
    Q = laplacian(spec) * scale
    Qi = np.linalg.inv(Q)
    idx = {n: k for k, n in enumerate(spec.nodes)}
    b = [idx[n] for n in spec.boundary]
    i = [idx[n] for n in spec.interior]
    return Q, Qi, b, i, idx


def simulate_network(converters: Sequence, network: NetworkSpec, scenario: Scenario,
                     cfg: SimConfig | None = None, lambda1_scale: float = 1.0) -> SimTrace:
    """Several converters on a homogeneous RL network with an infinite bus.

    ``converters`` is a list of ``(ConverterParams, K)`` pairs where ``K`` is a
    gain or a ``{mode: gain}`` map. Loads are constant currents fixed at the
    initial power flow. ``lambda1_scale`` scales every network susceptance.
    """
    cfg = cfg or SimConfig()
    _check_alignment(scenario, cfg)
    n = len(converters)
    if n != scenario.converters and scenario.converters != 1:
        raise ScenarioError(f"scenario expects {scenario.converters} converters, got {n}")
    if n != len(network.boundary):
        raise ScenarioError("one converter per boundary node is required")
    params, gains = [], []
    for k, (p, K) in enumerate(converters):
        mode = scenario.initial_value("mode", k, p.mode)
        lg = float(scenario.initial_value("L_g", k, p.L_g))
        p = p.with_(mode=mode, L_g=lg)
        if abs(p.tau - network.tau) > 1e-12 or abs(p.omega_b - network.omega0) > 1e-9:
            raise ScenarioError("converter tau and omega_b must match the network")
        params.append(p)
        gains.append(_as_gain_map(K))
    Q, Qi, b, i, idx = _network_matrices(network, lambda1_scale)
    F0 = FInverse(network.omega0, network.tau).D0
    Ug = np.array([1.0, 0.0])
    loads = {idx[nd]: float(pw) for nd, pw in network.loads.items()}
    refs0 = [(float(scenario.initial_value("P_ref", k, 0.0)),
              scenario.initial_value("Q_ref" if params[k].mode == "PQ" else "V_ref", k, None),
              float(scenario.initial_value("V_ref", k, 1.0))) for k in range(n)]

    # power flow: converters see their boundary voltage as an infinite bus
    nn = len(network.nodes)

    def flow(u):
        U = u.reshape(nn, 2)
        ops = [solve_operating_point(params[k], refs0[k][0], refs0[k][1], U_grid=U[b[k]], Vd_ref=refs0[k][2])
               for k in range(n)]
        inj = np.zeros((nn, 2))
        for k in range(n):
            inj[b[k]] = ops[k].I0
        I_load = np.zeros_like(inj)
        for node, pw in loads.items():
            I_load[node] = pw * U[node] / (U[node] @ U[node])
        return ops, I_load, Ug + Qi @ (inj - I_load) @ F0.T

    def residual(u):
        try:
            return flow(u)[2].ravel() - u
        except InfeasibleOperatingPoint:
            return np.full(u.size, 1e6)

    sol = optimize.root(residual, np.tile(Ug, nn), method="hybr", tol=1e-14)
    if not sol.success or np.abs(residual(sol.x)).max() > 1e-10:
        raise InfeasibleOperatingPoint(f"network power flow did not converge: {sol.message}")
    try:
        ops, I_load, _ = flow(sol.x)
    except InfeasibleOperatingPoint as exc:
        raise InfeasibleOperatingPoint(f"network initialization failed: {exc}") from exc
    I_load_fixed = I_load.copy()
    X0 = np.array([initial_integrators(gains[k][params[k].mode], ops[k], params[k]) for k in range(n)])
    refs = [ops[k].refs.as_array() for k in range(n)]
    state = {"Ug": Ug.copy()}
    Qi_bb = Qi[np.ix_(b, b)]

    def Xmat(lgs):
        return np.diag(lgs) + Qi_bb

    def E_fn():
        return state["Ug"] + (Qi[b] @ (-I_load_fixed)) @ F0.T

    eng = _Engine(params, gains, X0, cfg, refs, Xmat, E_fn)

    def apply(e: _Engine, ev: Event):
        k = ev.converter - 1
        if not 0 <= k < n:
            raise ScenarioError(f"event targets unknown converter {ev.converter}")
        if _common_event(e, ev, k):
            return
        if ev.kind == "grid_voltage_step":
            state["Ug"] = float(ev.payload["value"]) * np.array([1.0, 0.0])
            e.update_network()
        else:
            raise ScenarioError(f"event {ev.kind!r} is not supported in network runs")

    return eng.run(scenario, apply)


# ---------------------------------------------------------------- presets and metrics

def preset_scenarios() -> dict:
    """Scenarios of the single- and three-converter studies."""
    def ev(t, kind, **kw):
        return Event(float(t), kind, kw)

    fig5 = Scenario(3.0, (ev(1, "p_ref_step", value=1.0),), {"P_ref": 0.0}, "fig5")
    fig7 = Scenario(9.0, (
        ev(1, "grid_voltage_step", value=0.5),
        ev(2, "grid_voltage_step", value=1.0),
        ev(4, "breaker_open", load=0.5),
        ev(5, "breaker_close"),
        ev(7, "v_ref_step", value=1.45),
    ), {"P_ref": 0.5}, "fig7")
    fig8 = Scenario(8.0, (
        ev(1, "p_ref_step", converter=1, value=1.0),
        ev(2, "p_ref_step", converter=2, value=1.0),
        ev(3, "p_ref_step", converter=3, value=1.0),
        ev(4, "lg_step", converter=1, value=0.4),
        ev(5, "lg_step", converter=2, value=0.3),
        ev(6, "lg_step", converter=3, value=0.5),
    ), {"P_ref": 0.0, "L_g": 0.2}, "fig8", 3)
    fig9 = Scenario(10.0, (
        ev(1, "p_ref_step", converter=1, value=0.0),
        ev(2, "p_ref_step", converter=2, value=0.0),
        ev(2, "q_ref_step", converter=1, value=0.5),
        ev(3, "p_ref_step", converter=3, value=0.0),
        ev(4, "q_ref_step", converter=1, value=0.0),
        ev(5, "p_ref_step", converter=1, value=1.0),
        ev(6, "p_ref_step", converter=2, value=1.0),
        ev(7, "p_ref_step", converter=3, value=1.0),
        ev(8, "mode_switch", converter=1, mode="PV"),
        ev(9, "mode_switch", converter=1, mode="PQ"),
    ), {"P_ref": 1.0, "Q_ref": 0.0, "L_g": 0.2, "mode": "PQ"}, "fig9", 3)
    return {"fig5": fig5, "fig7": fig7, "fig8": fig8, "fig9": fig9}


def _crossing(t, y, level, start):
    """First time at or after index ``start`` where ``y`` reaches ``level`` (linear interpolation)."""
    idx = np.flatnonzero(y[start:] >= level)
    if idx.size == 0:
        return np.nan
    k = start + idx[0]
    if k == 0 or y[k] == y[k - 1]:
        return float(t[k])
    return float(t[k - 1] + (level - y[k - 1]) * (t[k] - t[k - 1]) / (y[k] - y[k - 1]))


def metrics(trace: SimTrace, signal: str, window: tuple[float, float] | None = None,
            tail: float = 0.02) -> StepMetrics:
    """Step metrics in ``window``; times are measured from the window start.

    The initial value is the first sample of the window and the final value the
    mean over the last ``tail`` fraction of it.
    """
    if signal not in trace.signals:
        raise KeyError(f"unknown signal {signal!r}")
    t, y = trace.t, trace.signals[signal]
    t0, t1 = (t[0], t[-1]) if window is None else window
    if t0 < t[0] - 1e-12 or t1 > t[-1] + 1e-9 or t1 <= t0:
        raise ValueError("window outside trace")
    sel = (t >= t0 - 1e-12) & (t <= t1 + 1e-12)
    tw, yw = t[sel] - t0, y[sel]
    y0 = yw[0]
    ntail = max(1, int(np.ceil(tail * yw.size)))
    yf = float(np.mean(yw[-ntail:]))
    step = yf - y0
    if not np.isfinite(step) or abs(step) <= 1e-9 * max(1.0, abs(y0)):
        raise NoStepError(f"no step detected in {signal}")
    z = (yw - y0) / step
    t10 = _crossing(tw, z, 0.1, 0)
    t90 = _crossing(tw, z, 0.9, 0)
    overshoot = max(0.0, float(np.max(z) - (yf - y0) / step)) * 100.0
    outside = np.flatnonzero(np.abs(z - 1.0) > 0.02)
    settle = float(tw[outside[-1] + 1]) if outside.size and outside[-1] + 1 < tw.size else (
        np.nan if outside.size else 0.0)
    stable = bool(not trace.unstable and np.all(np.isfinite(yw)))
    return StepMetrics(t90 - t10, overshoot, settle, stable, float(y0), yf)
