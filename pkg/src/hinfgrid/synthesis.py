"""Structured static-gain H-infinity synthesis over a family of plants.

The problem is ``min_K max_p max_w sigma_max(W o P_p(K)(jw))`` with ``K`` a
3x7 gain restricted to a mask. Phase 1 drives the worst closed-loop spectral
abscissa below ``-margin``; phase 2 minimizes the gridded weighted objective
with a derivative-free simplex search from several starting points.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .converter import (
    ConverterParams,
    ConverterPlant,
    build_plant,
    closed_loop,
    controller_template,
    solve_operating_point,
    unused_integrators,
)
from .lti import (
    AlgebraicLoopError,
    GainMatrix,
    GeneralizedPlant,
    StateSpaceModel,
    default_grid,
    hinf_norm,
    lft_close,
    spectral_abscissa,
)
from .weights import WeightingSpec, weight_grid, weighted_objective, weighted_system

__all__ = [
    "SynthesisConfig",
    "SynthesisResult",
    "PlantReport",
    "StabilizationError",
    "lg_family",
    "lg_set",
    "FamilyEvaluator",
    "spectral_abscissa_family",
    "stabilize",
    "synthesize",
    "evaluate_controller",
    "K_PUBLISHED_PV",
    "K_PUBLISHED_PQ",
]

K_PUBLISHED_PV = np.array([
    [-0.01, 392.7, 0.1, 183.3, 0, 38.8, -2.1],
    [-3.01, -67.1, -0.09, 484.6, 0, -62.9, 4.8],
    [-97.7, -1.9, -134.5, 2.3, 55.7, -0.4, 0.04],
])
K_PUBLISHED_PQ = np.array([
    [-1.35, -61.8, 0.66, 361.8, 0, 13.5, 0],
    [-0.77, -46.1, -0.22, -27.2, 0, -14.9, -0.02],
    [-0.3, -9.3, -257.5, -8.3, 61.6, -2.5, 0.95],
])


BARRIER = 1e12
PENALTY = 100.0


class StabilizationError(RuntimeError):
    """No stabilizing gain found in phase 1."""

    def __init__(self, msg, best_abscissa):
        super().__init__(msg)
        self.best_abscissa = best_abscissa


def lg_set() -> np.ndarray:
    """Grid inductances 0.05, 0.10, ..., 0.50."""
    return np.round(0.05 * np.arange(1, 11), 10)


def lg_family(params: ConverterParams | None = None, lgs=None, P_ref: float = 0.0,
                 V_or_Q_ref: float | None = None) -> list[ConverterPlant]:
    """One linearized plant per grid inductance, each at its own equilibrium."""
    params = params or ConverterParams()
    out = []
    for lg in lg_set() if lgs is None else lgs:
        p = params.with_(L_g=float(lg))
        out.append(build_plant(p, solve_operating_point(p, P_ref, V_or_Q_ref)))
    return out


@dataclass
class SynthesisConfig:
    plant_family: Sequence[GeneralizedPlant]
    weights: WeightingSpec
    mask: np.ndarray = field(default_factory=lambda: np.ones((3, 7), dtype=bool))
    starts: int = 8
    grid: np.ndarray = field(default_factory=lambda: default_grid(400))
    max_iters: int = 1500
    seed: int = 0
    box: float = 5e4
    margin: float = 0.05
    initial: Sequence[np.ndarray] = ()
    time_budget: float | None = None

    def __post_init__(self):
        if self.starts < 1:
            raise ValueError("starts must be at least 1")
        if len(self.grid) == 0:
            raise ValueError("grid must be nonempty")
        if len(self.plant_family) == 0:
            raise ValueError("plant family must be nonempty")
        for p in self.plant_family:
            if tuple(self.weights.shape) != (p.nz, p.nw):
                raise ValueError(f"weights are {self.weights.shape[0]}x{self.weights.shape[1]} "
                                 f"but the plant has {p.nz} performance outputs and {p.nw} disturbances")
        self.mask = np.asarray(self.mask, dtype=bool)
        self.grid = np.asarray(self.grid, dtype=float)


@dataclass(frozen=True)
class PlantReport:
    L_g: float
    norm: float
    stable: bool
    abscissa: float
    certified_norm: float = np.nan


@dataclass
class SynthesisResult:
    K: GainMatrix
    objective: float
    per_plant: list
    iterations: int
    verification: float
    trace: list = field(default_factory=list)
    start_objectives: list = field(default_factory=list)


class FamilyEvaluator:
    """Fast closed-loop evaluation of many gains on a fixed plant family.

    The closed-loop response comes from an eigendecomposition of
    ``A + B2 K C2`` (a direct solve when the eigenvectors are
    ill-conditioned). The grid is augmented with the frequencies of lightly
    damped poles so that sharp resonances are not missed between grid points.
    """

    def __init__(self, plants: Sequence[GeneralizedPlant], weights: WeightingSpec, grid):
        self.plants = list(plants)
        self.weights = weights
        self.grid = np.asarray(grid, dtype=float)
        self.cols = sorted({j - 1 for (_, j) in weights.entries})
        self.rows = sorted({i - 1 for (i, _) in weights.entries})
        self.Wr = self._weights(self.grid)
        self.blocks = []
        for p in self.plants:
            A, B1, B2, C1, C2, D11, D12, D21, D22 = p.blocks()
            if np.abs(D22).max(initial=0) > 0 or np.abs(D12).max(initial=0) > 0:
                raise ValueError("fast evaluator assumes D12 = D22 = 0")
            self.blocks.append((A, B1[:, self.cols], B2, C1[self.rows], C2,
                                D11[np.ix_(self.rows, self.cols)], D21[:, self.cols]))
        self.nevals = 0

    def _weights(self, omega):
        return weight_grid(self.weights, omega)[:, self.rows][:, :, self.cols]

    def evaluate(self, K) -> tuple[float, float]:
        """``(max weighted norm, worst abscissa)``; the norm is ``inf`` when any loop is unstable."""
        vals, absc = self.plant_values(K)
        return float(vals.max()), float(absc.max())

    def plant_values(self, K) -> tuple[np.ndarray, np.ndarray]:
        """Gridded weighted norm and spectral abscissa per plant."""
        self.nevals += 1
        K = np.asarray(K, dtype=float)
        vals = np.full(len(self.blocks), np.inf)
        absc = np.full(len(self.blocks), np.inf)
        s = 1j * self.grid
        for k, (A, B1, B2, C1, C2, D11, D21) in enumerate(self.blocks):
            drop = unused_integrators(K) if isinstance(self.plants[k], ConverterPlant) else []
            keep = [i for i in range(A.shape[0]) if i not in drop]
            Acl = (A + B2 @ K @ C2)[np.ix_(keep, keep)]
            Bcl = (B1 + B2 @ K @ D21)[keep]
            Ck = C1[:, keep]
            lam, V = np.linalg.eig(Acl)
            if not np.all(np.isfinite(lam)):
                return vals, absc
            absc[k] = lam.real.max() if lam.size else -np.inf
            if absc[k] >= 0:
                return vals, absc
            light = lam[(lam.imag > 0) & (-lam.real < 0.3 * np.abs(lam))]
            sk = np.concatenate([s, 1j * light.imag])
            Wk = self.Wr if light.size == 0 else np.concatenate([self.Wr, self._weights(light.imag)])
            if np.linalg.cond(V) < 1e10:
                R = 1.0 / (sk[:, None] - lam[None, :])
                G = ((Ck @ V)[None] * R[:, None, :]) @ np.linalg.solve(V, Bcl) + D11
            else:
                n = Acl.shape[0]
                X = np.linalg.solve(sk[:, None, None] * np.eye(n) - Acl,
                                    np.broadcast_to(Bcl, (sk.size, n, Bcl.shape[1])))
                G = Ck @ X + D11
            M = Wk * G
            H = np.conj(np.swapaxes(M, 1, 2)) @ M
            vals[k] = float(np.sqrt(max(np.linalg.eigvalsh(H)[:, -1].max(), 0.0)))
        return vals, absc


def _closed(p: GeneralizedPlant, K) -> StateSpaceModel:
    return closed_loop(p, K) if isinstance(p, ConverterPlant) else lft_close(p, GainMatrix(K))


def spectral_abscissa_family(plants: Sequence[GeneralizedPlant], K) -> float:
    """Worst closed-loop spectral abscissa; ``inf`` for an ill-posed loop."""
    K = np.asarray(K.K if isinstance(K, GainMatrix) else K, dtype=float)
    worst = -np.inf
    for p in plants:
        try:
            A = _closed(p, K).A
        except AlgebraicLoopError:
            return np.inf
        a = spectral_abscissa(A) if A.size else -np.inf
        if not np.isfinite(a) and a > 0 or np.isnan(a):
            return np.inf
        worst = max(worst, a)
    return float(worst)


def _scales(K0: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-entry search scale: the entry magnitude, at least one."""
    return np.maximum(np.abs(K0), 1.0)[mask]


def _starting_points(cfg: SynthesisConfig, rng) -> list[np.ndarray]:
    """Templates (or user gains) followed by random relative perturbations of them.

    The default templates are the droop and PLL layouts and the published
    gain for the weighting mode.
    """
    base = [np.asarray(K, dtype=float) * cfg.mask for K in cfg.initial]
    if not base:
        published = K_PUBLISHED_PQ if cfg.weights.mode == "PQ" else K_PUBLISHED_PV
        base = [controller_template("droop").K * cfg.mask, controller_template("pll").K * cfg.mask,
                published * cfg.mask]
    pts = []
    for b in base:
        if not any(np.array_equal(b, q) for q in pts):
            pts.append(b)
    k = 0
    while len(pts) < cfg.starts:
        b = base[k % len(base)]
        sc = np.maximum(np.abs(b), 1.0)
        pert = rng.normal(scale=0.3, size=b.shape) * sc
        pts.append(np.clip((b + pert) * cfg.mask, -cfg.box, cfg.box))
        k += 1
    return pts[: cfg.starts]


class _Stop(Exception):
    pass


def _direct_search(fun: Callable, x0: np.ndarray, step: np.ndarray, max_evals: int, deadline=None,
                   target: float = -np.inf):
    """Restarted Nelder-Mead on scaled coordinates.

    Each restart builds a fresh simplex around the incumbent; the simplex
    shrinks when a restart fails to improve. Stops at ``target``, after
    ``max_evals`` evaluations, or at ``deadline``.
    """
    trace = []
    best = [float(fun(x0)), x0.copy()]
    trace.append(best[0])

    def f(z):
        if len(trace) >= max_evals or (deadline is not None and time.monotonic() > deadline):
            raise _Stop
        x = z * step
        v = float(fun(x))
        if v < best[0]:
            best[0], best[1] = v, x.copy()
        trace.append(best[0])
        if best[0] < target:
            raise _Stop
        return v

    radius = 0.25
    try:
        if best[0] < target:
            raise _Stop
        while radius > 1e-4:
            before = best[0]
            xs = best[1] / step
            init = np.vstack([xs] + [xs + radius * e for e in np.eye(xs.size)])
            minimize(f, xs, method="Nelder-Mead",
                     options={"maxfev": max_evals, "adaptive": True, "initial_simplex": init,
                              "xatol": 1e-4 * radius, "fatol": 1e-7})
            if before - best[0] < 1e-4 * abs(before):
                radius *= 0.3
    except _Stop:
        pass
    return best[1], best[0], trace


def _stabilize_from(K0, cfg: SynthesisConfig, plants) -> tuple[np.ndarray, float]:
    """Local phase-1 search from ``K0``; returns the best gain and its abscissa."""
    mask = cfg.mask
    a0 = spectral_abscissa_family(plants, K0)
    if a0 < -cfg.margin or not mask.any():
        return K0, a0

    def fun(x):
        K = np.zeros(mask.shape)
        K[mask] = np.clip(x, -cfg.box, cfg.box)
        a = spectral_abscissa_family(plants, K)
        return a if np.isfinite(a) else 1e6

    x, v, _ = _direct_search(fun, K0[mask], _scales(K0, mask), cfg.max_iters, target=-cfg.margin)
    K = np.zeros(mask.shape)
    K[mask] = np.clip(x, -cfg.box, cfg.box)
    return K, v


def stabilize(cfg: SynthesisConfig, rng=None) -> GainMatrix:
    """Phase 1: a gain with worst spectral abscissa below ``-margin``.

    Starting points are tried in order; the first one whose local search
    reaches the margin is returned.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    plants = list(cfg.plant_family)
    best = np.inf
    for K0 in _starting_points(cfg, rng):
        K, a = _stabilize_from(K0, cfg, plants)
        best = min(best, a)
        if a < -cfg.margin:
            return GainMatrix(K, cfg.mask)
    raise StabilizationError(f"no stabilizing K found (best abscissa {best:.4g})", best)


def _per_plant(cfg: SynthesisConfig, K, certify_norm: bool) -> list[PlantReport]:
    out = []
    for p in cfg.plant_family:
        lg = p.params.L_g if isinstance(p, ConverterPlant) else np.nan
        cl = _closed(p, K)
        a = spectral_abscissa(cl.A) if cl.nstates else -np.inf
        stable = bool(a < 0)
        v = weighted_objective(cl, cfg.weights, cfg.grid, refine=True)[0] if stable else np.inf
        cert = np.nan
        if certify_norm and stable:
            cert = hinf_norm(weighted_system(cl, cfg.weights), rel_tol=1e-6).norm
        out.append(PlantReport(float(lg), float(v), stable, float(a), float(cert)))
    return out


def evaluate_controller(K, cfg: SynthesisConfig, certify_norm: bool = False) -> SynthesisResult:
    """Per-plant report for a fixed gain (no optimization)."""
    K = K if isinstance(K, GainMatrix) else GainMatrix(np.asarray(K, dtype=float))
    if K.K.shape != cfg.mask.shape:
        raise ValueError(f"gain must be {cfg.mask.shape[0]}x{cfg.mask.shape[1]}")
    rep = _per_plant(cfg, K.K, certify_norm)
    obj = max(r.norm for r in rep)
    ver = max(r.certified_norm for r in rep) if certify_norm else np.nan
    return SynthesisResult(K, float(obj), rep, 0, float(ver))


def synthesize(cfg: SynthesisConfig, log: Callable[[str], None] | None = None) -> SynthesisResult:
    """Phase 1 then phase 2 multi-start direct search; deterministic for a seed.

    Every start is first stabilized locally. Phase 2 minimizes the gridded
    objective plus a penalty ``PENALTY * max(0, abscissa + margin)`` that keeps
    the closed loops away from slow modes.
    """
    log = log or (lambda msg: None)
    t0 = time.monotonic()
    deadline = None if cfg.time_budget is None else t0 + cfg.time_budget
    plants = list(cfg.plant_family)
    mask = cfg.mask
    ev = FamilyEvaluator(plants, cfg.weights, cfg.grid)

    def fun(x):
        if np.any(np.abs(x) > cfg.box):
            return BARRIER
        K = np.zeros(mask.shape)
        K[mask] = x
        v, a = ev.evaluate(K)
        if not np.isfinite(v):
            return BARRIER
        return v + PENALTY * max(0.0, a + cfg.margin)

    best = (np.inf, None)
    trace, start_vals = [], []
    total = 0
    for n, K0 in enumerate(_starting_points(cfg, np.random.default_rng(cfg.seed))):
        K1, a1 = _stabilize_from(K0, cfg, plants)
        if not a1 < -cfg.margin:
            log(f"start {n}: phase 1 failed (abscissa {a1:.4g})")
            continue
        v0 = fun(K1[mask])
        start_vals.append(max(r.norm for r in _per_plant(cfg, K1, False)))
        x, v, tr = _direct_search(fun, K1[mask], _scales(K1, mask), cfg.max_iters, deadline)
        total += len(tr)
        log(f"start {n}: {v0:.6g} -> {v:.6g} ({len(tr)} evals, {time.monotonic() - t0:.0f} s)")
        trace.extend(tr)
        if v < best[0]:
            best = (v, x)
        if deadline is not None and time.monotonic() > deadline:
            log("time budget reached")
            break
    if best[1] is None:
        raise StabilizationError("no start could be stabilized", np.inf)
    K = np.zeros(mask.shape)
    K[mask] = best[1]
    rep = _per_plant(cfg, K, certify_norm=True)
    obj = max(r.norm for r in rep)
    ver = max(r.certified_norm for r in rep)
    return SynthesisResult(GainMatrix(K, mask), float(obj), rep, total, float(ver),
                           list(np.minimum.accumulate(trace)), start_vals)
