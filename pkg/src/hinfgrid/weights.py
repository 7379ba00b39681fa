"""Frequency weights and the entrywise-weighted H-infinity objective.

A weighting specification is a sparse map ``(i, j) -> W_ij(s)`` with 1-based
``i`` indexing the performance output ``z_i`` and ``j`` the disturbance
``w_j``. The objective is ``max_w sigma_max(W(jw) o P(K)(jw))`` where ``o``
is the entrywise product.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg, signal
from scipy.optimize import minimize_scalar

from .lti import StateSpaceModel, default_grid, freqresp, parallel, series

__all__ = [
    "RationalWeight",
    "WeightingSpec",
    "lead_lag",
    "biquad_ratio",
    "double_biquad_inverse",
    "default_pv_weights",
    "default_pq_weights",
    "eval_weight",
    "weight_grid",
    "weighted_objective",
    "weighted_system",
]

KINDS = ("lead_lag", "biquad_ratio", "double_biquad_inverse", "zero")


@dataclass(frozen=True)
class RationalWeight:
    """A scalar weight from one of the supported families.

    ``lead_lag``: ``k (s + a) / (s + b)``.
    ``biquad_ratio``: ``k (s^2/w2^2 + 2 xi2 s/w2 + 1) / (s^2/w1^2 + 2 xi1 s/w1 + 1)``.
    ``double_biquad_inverse``: ``k / (s^2/w1^2 + 2 xi1 s/w1 + 1)^2``.
    """

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        p = {"k": 1.0, **{k: float(v) for k, v in dict(self.params).items()}}
        need = {"lead_lag": ("a", "b"), "biquad_ratio": ("w1", "xi1", "w2", "xi2"),
                "double_biquad_inverse": ("w1", "xi1"), "zero": ()}[self.kind]
        missing = [n for n in need if n not in p]
        if missing:
            raise ValueError(f"{self.kind} weight missing {missing}")
        if self.kind == "lead_lag" and p["b"] <= 0:
            raise ValueError("lead_lag pole must be in the open left half plane")
        if self.kind in ("biquad_ratio", "double_biquad_inverse") and (p["w1"] <= 0 or p["xi1"] <= 0):
            raise ValueError("denominator must be Hurwitz")
        object.__setattr__(self, "params", p)

    def tf(self) -> tuple[np.ndarray, np.ndarray]:
        """Numerator and denominator coefficients, highest power first."""
        p = self.params
        k = p["k"]
        if self.kind == "zero":
            return np.array([0.0]), np.array([1.0])
        if self.kind == "lead_lag":
            return k * np.array([1.0, p["a"]]), np.array([1.0, p["b"]])
        den1 = np.array([1 / p["w1"] ** 2, 2 * p["xi1"] / p["w1"], 1.0])
        if self.kind == "biquad_ratio":
            num = k * np.array([1 / p["w2"] ** 2, 2 * p["xi2"] / p["w2"], 1.0])
            return num, den1
        return np.array([k]), np.polymul(den1, den1)

    def __call__(self, s) -> np.ndarray:
        num, den = self.tf()
        return np.polyval(num, s) / np.polyval(den, s)

    def realize(self) -> StateSpaceModel:
        """Exact state-space realization (feedthrough kept for biproper weights)."""
        num, den = self.tf()
        if self.kind == "zero":
            return StateSpaceModel(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), [[0.0]])
        a, b, c, d = signal.tf2ss(num / den[0], den / den[0])
        # companion forms of the high-frequency biquads are badly scaled
        _, (sc, _) = linalg.matrix_balance(a, permute=False, separate=True)
        return StateSpaceModel(a * sc[None, :] / sc[:, None], b / sc[:, None], c * sc[None, :], d)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RationalWeight":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, d)


def lead_lag(a: float, b: float, k: float = 1.0) -> RationalWeight:
    return RationalWeight("lead_lag", {"a": a, "b": b, "k": k})


def biquad_ratio(w1: float, xi1: float, w2: float, xi2: float, k: float = 1.0) -> RationalWeight:
    return RationalWeight("biquad_ratio", {"w1": w1, "xi1": xi1, "w2": w2, "xi2": xi2, "k": k})


def double_biquad_inverse(w1: float, xi1: float, k: float) -> RationalWeight:
    return RationalWeight("double_biquad_inverse", {"w1": w1, "xi1": xi1, "k": k})


@dataclass(frozen=True)
class WeightingSpec:
    """Sparse 10x7 weight matrix. Absent entries are identically zero.

    ``mode`` records which plant configuration the weights were designed for.
    """

    entries: Mapping[tuple[int, int], RationalWeight]
    mode: str = "PV"
    shape: tuple[int, int] = (10, 7)

    def __post_init__(self):
        ent = {}
        for (i, j), w in dict(self.entries).items():
            if not (1 <= i <= self.shape[0] and 1 <= j <= self.shape[1]):
                raise ValueError(f"weight index ({i},{j}) out of range")
            if w.kind != "zero":
                ent[(int(i), int(j))] = w
        object.__setattr__(self, "entries", dict(sorted(ent.items())))

    def get(self, i: int, j: int) -> RationalWeight | None:
        return self.entries.get((i, j))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "entries": {f"{i},{j}": w.to_dict() for (i, j), w in self.entries.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WeightingSpec":
        ent = {}
        for key, w in d.get("entries", {}).items():
            i, j = (int(t) for t in key.split(","))
            ent[(i, j)] = RationalWeight.from_dict(w)
        return cls(ent, d.get("mode", "PV"))


def default_pv_weights() -> WeightingSpec:
    """Weights for voltage/active-power (PV) operation."""
    power = biquad_ratio(7e5, 0.35, 1000.0, 0.8)
    sens = lead_lag(20.0, 1e-5)
    volt = biquad_ratio(7e5, 0.1, 7e3, 0.1)
    adm = double_biquad_inverse(1000.0, 0.6, 0.5)
    e = {
        (7, 7): lead_lag(0.2, 0.0001),
        (8, 3): lead_lag(5.0, 0.0005),
        (5, 3): power,
        (5, 5): power,
        (6, 3): biquad_ratio(7e5, 0.35, 1000.0, 0.8, k=1 / 6),
        (3, 1): sens,
        (4, 2): sens,
        (1, 1): volt,
        (2, 2): volt,
        (9, 5): adm,
        (9, 6): adm,
        (10, 5): adm,
        (10, 6): adm,
    }
    return WeightingSpec(e, "PV")


def default_pq_weights() -> WeightingSpec:
    """Weights for active/reactive power (PQ) operation.

    Voltage tracking weights are dropped, ``z3`` carries the reactive power
    error and the reactive channel reuses the active-power families.
    """
    e = dict(default_pv_weights().entries)
    del e[(1, 1)], e[(3, 1)]
    e[(6, 4)] = e[(5, 3)]
    e[(3, 4)] = e[(8, 3)]
    return WeightingSpec(e, "PQ")


def eval_weight(spec: WeightingSpec, i: int, j: int, omega: float) -> complex:
    w = spec.get(i, j)
    return 0j if w is None else complex(w(1j * omega))


def weight_grid(spec: WeightingSpec, grid) -> np.ndarray:
    """Weight matrices on a grid, shape ``(len(grid), 10, 7)``."""
    s = 1j * np.asarray(grid, dtype=float)
    W = np.zeros((len(s),) + spec.shape, dtype=complex)
    for (i, j), w in spec.entries.items():
        W[:, i - 1, j - 1] = w(s)
    return W


def _smax(M):
    return np.linalg.svd(M, compute_uv=False)[..., 0]


def weighted_objective(cl: StateSpaceModel, spec: WeightingSpec, grid=None, refine: bool = True,
                       W=None) -> tuple[float, float]:
    """Gridded ``max sigma_max(W o P)`` with optional local refinement.

    Returns ``(value, argmax_omega)``. An unstable closed loop gives
    ``(inf, nan)`` so optimizers can treat it as a barrier.
    """
    w = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if w.size == 0:
        raise ValueError("empty grid")
    if not spec.entries:
        return 0.0, 0.0
    lam = np.linalg.eigvals(cl.A) if cl.nstates else np.zeros(0)
    if lam.size and lam.real.max() >= 0:
        return np.inf, np.nan
    Wg = weight_grid(spec, w) if W is None else W
    vals = _smax(Wg * freqresp(cl, w))
    k = int(np.argmax(vals))
    best, peak = float(vals[k]), float(w[k])
    if not refine:
        return best, peak

    def f(t):
        om = np.exp(t)
        return -float(_smax(weight_grid(spec, [om]) * freqresp(cl, [om]))[0])

    brackets = []
    if w.size > 2:
        interior = np.flatnonzero((vals[1:-1] >= vals[:-2]) & (vals[1:-1] >= vals[2:])) + 1
        for q in sorted(set(interior) | {int(k)}, key=lambda q: -vals[q])[:3]:
            lo, hi = w[max(q - 1, 0)], w[min(q + 1, w.size - 1)]
            brackets.append((lo if lo > 0 else hi * 1e-3, hi))
    # sharp resonances can fall between grid points; bracket every lightly damped pole
    light = lam[(lam.imag > 0) & (-lam.real < 0.3 * np.abs(lam))]
    if light.size:
        lv = -np.array([f(np.log(om)) for om in light.imag])
        for q in np.argsort(-lv)[:3]:
            om, d = light[q].imag, -light[q].real
            brackets.append((max(om - 3 * d, om * 0.5), om + 3 * d))
            if lv[q] > best:
                best, peak = float(lv[q]), float(om)
    for lo, hi in brackets:
        if hi <= lo:
            continue
        res = minimize_scalar(f, bounds=(np.log(lo), np.log(hi)), method="bounded", options={"xatol": 1e-9})
        if -res.fun > best:
            best, peak = -res.fun, float(np.exp(res.x))
    return best, peak


def _diag_system(weights: list) -> StateSpaceModel:
    """Diagonal system ``diag(W_1, ..., W_p)``; ``None`` entries are zero."""
    blocks = [w.realize() for w in weights if w is not None]
    n = sum(b.nstates for b in blocks)
    p = len(weights)
    A = linalg.block_diag(*[b.A for b in blocks]) if n else np.zeros((0, 0))
    B = np.zeros((n, p))
    C = np.zeros((p, n))
    D = np.zeros((p, p))
    k = r = 0
    for i, w in enumerate(weights):
        if w is None:
            continue
        b = blocks[r]
        B[k:k + b.nstates, i] = b.B[:, 0]
        C[i, k:k + b.nstates] = b.C[0]
        D[i, i] = b.D[0, 0]
        k += b.nstates
        r += 1
    return StateSpaceModel(A, B, C, D)


def weighted_system(cl: StateSpaceModel, spec: WeightingSpec) -> StateSpaceModel:
    """Realization of ``W o P``.

    Column ``j`` is realized as ``diag(W_1j, ..., W_pj) P(:, j)`` so the plant
    states are copied once per weighted column rather than once per entry.
    """
    p, m = spec.shape
    total = None
    for j in sorted({j for (_, j) in spec.entries}):
        col = cl.subsystem(range(p), [j - 1])
        wcol = series(col, _diag_system([spec.get(i, j) for i in range(1, p + 1)]))
        Bp = np.zeros((wcol.nstates, m))
        Bp[:, j - 1] = wcol.B[:, 0]
        Dp = np.zeros((p, m))
        Dp[:, j - 1] = wcol.D[:, 0]
        term = StateSpaceModel(wcol.A, Bp, wcol.C, Dp, cl.input_labels, cl.output_labels)
        total = term if total is None else parallel(total, term)
    if total is None:
        return StateSpaceModel(np.zeros((0, 0)), np.zeros((0, m)), np.zeros((p, 0)), np.zeros((p, m)),
                               cl.input_labels, cl.output_labels)
    return total
