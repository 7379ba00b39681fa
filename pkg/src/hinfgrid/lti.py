"""Continuous-time LTI algebra on state-space realizations.

Everything here works on plain real ``(A, B, C, D)`` quadruples wrapped in
:class:`StateSpaceModel`. Interconnections concatenate states and never
attempt a minimal realization.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

__all__ = [
    "LTIError",
    "AlgebraicLoopError",
    "UnstableSystemError",
    "StateSpaceModel",
    "GeneralizedPlant",
    "GainMatrix",
    "FrequencyResponse",
    "HinfResult",
    "static_gain",
    "identity",
    "series",
    "parallel",
    "feedback",
    "lft_close",
    "eigenvalues",
    "spectral_abscissa",
    "freqresp",
    "hinf_norm",
    "balanced",
    "grid_peak",
    "sigma_plot",
    "default_grid",
    "write_sigma_csv",
]


class LTIError(ValueError):
    """Dimension or labeling inconsistency in an LTI object."""


class AlgebraicLoopError(LTIError):
    """A loop closure whose feedthrough coupling is singular."""


class UnstableSystemError(LTIError):
    """Raised when a norm is requested for an unstable system."""


def _labels(prefix: str, n: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1}" for i in range(n))


@dataclass(frozen=True)
class StateSpaceModel:
    """Real state-space realization ``dx = Ax + Bu, y = Cx + Du``.

    Parameters
    ----------
    A, B, C, D : array_like
        System matrices. Empty state dimension is allowed for static gains.
    input_labels, output_labels : sequence of str, optional
        Unique channel names. Defaults to ``u1..um`` and ``y1..yp``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    input_labels: tuple[str, ...] = field(default=())
    output_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p, m = D.shape
        A = np.asarray(self.A, dtype=float)
        A = np.zeros((0, 0)) if A.size == 0 else np.atleast_2d(A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise LTIError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float).reshape(n, m)
        C = np.asarray(self.C, dtype=float).reshape(p, n)
        ins = tuple(self.input_labels) or _labels("u", m)
        outs = tuple(self.output_labels) or _labels("y", p)
        if len(ins) != m or len(outs) != p:
            raise LTIError("label count does not match channel count")
        if len(set(ins)) != m or len(set(outs)) != p:
            raise LTIError("channel labels must be unique")
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "input_labels", ins)
        object.__setattr__(self, "output_labels", outs)

    @property
    def nstates(self) -> int:
        return self.A.shape[0]

    @property
    def ninputs(self) -> int:
        return self.D.shape[1]

    @property
    def noutputs(self) -> int:
        return self.D.shape[0]

    def freqresp(self, omega) -> np.ndarray:
        """Frequency response at angular frequencies ``omega`` (rad/s).

        Returns an array of shape ``(len(omega), p, m)``.
        """
        return freqresp(self, omega)

    def subsystem(self, outputs: Sequence[int | str], inputs: Sequence[int | str]) -> "StateSpaceModel":
        """Select output rows and input columns by index or label."""
        oi = [self.output_labels.index(o) if isinstance(o, str) else int(o) for o in outputs]
        ii = [self.input_labels.index(i) if isinstance(i, str) else int(i) for i in inputs]
        return StateSpaceModel(
            self.A,
            self.B[:, ii],
            self.C[oi, :],
            self.D[np.ix_(oi, ii)],
            tuple(self.input_labels[i] for i in ii),
            tuple(self.output_labels[o] for o in oi),
        )

    def scaled(self, alpha: float) -> "StateSpaceModel":
        return StateSpaceModel(self.A, self.B, alpha * self.C, alpha * self.D, self.input_labels, self.output_labels)

    def is_stable(self) -> bool:
        return self.nstates == 0 or spectral_abscissa(self.A) < 0


@dataclass(frozen=True)
class GeneralizedPlant:
    """A state-space model partitioned into ``(w, u) -> (z, y)`` channels.

    The first ``nw`` inputs are exogenous, the remaining ones are controls.
    The first ``nz`` outputs are performance outputs, the rest measurements.
    """

    model: StateSpaceModel
    nw: int
    nz: int

    def __post_init__(self):
        if not (0 <= self.nw <= self.model.ninputs and 0 <= self.nz <= self.model.noutputs):
            raise LTIError("channel partition out of range")

    @property
    def nu(self) -> int:
        return self.model.ninputs - self.nw

    @property
    def ny(self) -> int:
        return self.model.noutputs - self.nz

    def blocks(self):
        """Return ``(A, B1, B2, C1, C2, D11, D12, D21, D22)``."""
        m, w, z = self.model, self.nw, self.nz
        return (m.A, m.B[:, :w], m.B[:, w:], m.C[:z], m.C[z:],
                m.D[:z, :w], m.D[:z, w:], m.D[z:, :w], m.D[z:, w:])


@dataclass(frozen=True)
class GainMatrix:
    """Static output-feedback gain ``u = K y`` with a structure mask.

    Entries where ``mask`` is False are pinned to zero.
    """

    K: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        K = np.array(self.K, dtype=float, ndmin=2)
        mask = np.ones(K.shape, dtype=bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != K.shape:
            raise LTIError("mask shape must match K")
        K = np.where(mask, K, 0.0)
        K.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.K.shape

    def free_values(self) -> np.ndarray:
        return self.K[self.mask]

    def with_free_values(self, values) -> "GainMatrix":
        K = np.zeros(self.K.shape)
        K[self.mask] = values
        return GainMatrix(K, self.mask)


@dataclass(frozen=True)
class FrequencyResponse:
    """Sampled frequency response; ``values[k]`` is the matrix at ``frequencies[k]``."""

    frequencies: np.ndarray
    values: np.ndarray
    singular_values: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=float)
        if w.ndim != 1 or len(w) != len(self.values):
            raise LTIError("one matrix per frequency required")
        if np.any(np.diff(w) <= 0):
            raise LTIError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", w)


@dataclass(frozen=True)
class HinfResult:
    norm: float
    peak_frequency: float
    method: str


def static_gain(K, input_labels=(), output_labels=()) -> StateSpaceModel:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    p, m = K.shape
    return StateSpaceModel(np.zeros((0, 0)), np.zeros((0, m)), np.zeros((p, 0)), K, input_labels, output_labels)


def identity(n: int) -> StateSpaceModel:
    return static_gain(np.eye(n))


def _as_model(k) -> StateSpaceModel:
    if isinstance(k, StateSpaceModel):
        return k
    if isinstance(k, GainMatrix):
        return static_gain(k.K)
    return static_gain(k)


def series(g1: StateSpaceModel, g2: StateSpaceModel) -> StateSpaceModel:
    """Realization of ``g2 * g1`` (``g1`` acts first)."""
    if g1.noutputs != g2.ninputs:
        raise LTIError(f"series: g1 has {g1.noutputs} outputs, g2 has {g2.ninputs} inputs")
    n1, n2 = g1.nstates, g2.nstates
    A = np.block([[g1.A, np.zeros((n1, n2))], [g2.B @ g1.C, g2.A]])
    B = np.vstack([g1.B, g2.B @ g1.D])
    C = np.hstack([g2.D @ g1.C, g2.C])
    D = g2.D @ g1.D
    return StateSpaceModel(A, B, C, D, g1.input_labels, g2.output_labels)


def parallel(g1: StateSpaceModel, g2: StateSpaceModel) -> StateSpaceModel:
    """Realization of ``g1 + g2``."""
    if (g1.noutputs, g1.ninputs) != (g2.noutputs, g2.ninputs):
        raise LTIError("parallel: shapes differ")
    A = linalg.block_diag(g1.A, g2.A)
    return StateSpaceModel(A, np.vstack([g1.B, g2.B]), np.hstack([g1.C, g2.C]), g1.D + g2.D,
                           g1.input_labels, g1.output_labels)


def feedback(g: StateSpaceModel, k=None, sign: int = -1) -> StateSpaceModel:
    """Close ``u = r + sign * k y`` around ``y = g u``.

    The result maps ``r -> y`` and equals ``(I - sign g k)^{-1} g`` pointwise.
    """
    k = _as_model(np.zeros((g.ninputs, g.noutputs)) if k is None else k)
    if (k.ninputs, k.noutputs) != (g.noutputs, g.ninputs):
        raise LTIError("feedback: loop dimensions incompatible")
    if sign not in (1, -1):
        raise LTIError("sign must be +1 or -1")
    p, m = g.noutputs, g.ninputs
    E = np.eye(p) - sign * g.D @ k.D
    if np.linalg.cond(E) > 1e12:
        raise AlgebraicLoopError("I - sign*Dg*Dk is singular")
    Ei = np.linalg.inv(E)
    # y = Ei (Cg xg + sign Dg Ck xk + Dg r); u = r + sign (Ck xk + Dk y)
    Cy = Ei @ np.hstack([g.C, sign * g.D @ k.C])
    Dy = Ei @ g.D
    Cu = np.hstack([np.zeros((m, g.nstates)), sign * k.C]) + sign * k.D @ Cy
    Du = np.eye(m) + sign * k.D @ Dy
    A = linalg.block_diag(g.A, k.A) + np.vstack([g.B @ Cu, k.B @ Cy])
    B = np.vstack([g.B @ Du, k.B @ Dy])
    return StateSpaceModel(A, B, Cy, Dy, g.input_labels, g.output_labels)


def lft_close(plant: GeneralizedPlant, k) -> StateSpaceModel:
    """Lower LFT ``P11 + P12 K (I - P22 K)^{-1} P21`` mapping ``w -> z``."""
    k = _as_model(k)
    A, B1, B2, C1, C2, D11, D12, D21, D22 = plant.blocks()
    if (k.ninputs, k.noutputs) != (plant.ny, plant.nu):
        raise LTIError(f"controller must be {plant.nu}x{plant.ny}")
    n, nk = A.shape[0], k.nstates
    E = np.eye(plant.ny) - D22 @ k.D
    if np.linalg.cond(E) > 1e12:
        raise AlgebraicLoopError("I - D22*K is singular")
    Ei = np.linalg.inv(E)
    # y = Ei (C2 x + D22 Ck xk + D21 w); u = Ck xk + Dk y
    Cy = Ei @ np.hstack([C2, D22 @ k.C])
    Dy = Ei @ D21
    Cu = np.hstack([np.zeros((plant.nu, n)), k.C]) + k.D @ Cy
    Du = k.D @ Dy
    Acl = np.zeros((n + nk, n + nk))
    Acl[:n, :n] = A
    Acl += np.vstack([B2 @ Cu, k.B @ Cy])
    Bcl = np.vstack([B1 + B2 @ Du, k.B @ Dy])
    Ccl = np.hstack([C1, np.zeros((C1.shape[0], nk))]) + D12 @ Cu
    Dcl = D11 + D12 @ Du
    m = plant.model
    return StateSpaceModel(Acl, Bcl, Ccl, Dcl, m.input_labels[: plant.nw], m.output_labels[: plant.nz])


def eigenvalues(m) -> np.ndarray:
    """Eigenvalues of a square matrix (or of the ``A`` matrix of a model)."""
    if isinstance(m, StateSpaceModel):
        m = m.A
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LTIError("eigenvalues: matrix must be square")
    if m.size == 0:
        return np.zeros(0, dtype=complex)
    return linalg.eigvals(m)


def spectral_abscissa(m) -> float:
    ev = eigenvalues(m)
    return float(ev.real.max()) if ev.size else -np.inf


def freqresp(sys: StateSpaceModel, omega) -> np.ndarray:
    """Evaluate ``C (jwI - A)^{-1} B + D`` on a vector of frequencies."""
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    p, m = sys.noutputs, sys.ninputs
    if sys.nstates == 0:
        return np.broadcast_to(sys.D.astype(complex), (len(w), p, m)).copy()
    n = sys.nstates
    M = 1j * w[:, None, None] * np.eye(n) - sys.A
    X = np.linalg.solve(M, np.broadcast_to(sys.B.astype(complex), (len(w), n, m)))
    return sys.C @ X + sys.D


def _sigma_max(G: np.ndarray) -> np.ndarray:
    if G.shape[-1] == 1 or G.shape[-2] == 1:
        return np.sqrt((np.abs(G) ** 2).sum(axis=(-2, -1)))
    return np.linalg.svd(G, compute_uv=False)[..., 0]


def default_grid(n: int = 400, f_min: float = 1e-4, f_max: float = 1e4, include_zero: bool = True) -> np.ndarray:
    """Log-spaced angular frequency grid from ``f_min`` to ``f_max`` Hz."""
    w = 2 * np.pi * np.logspace(np.log10(f_min), np.log10(f_max), n)
    return np.concatenate([[0.0], w]) if include_zero else w


def _hamiltonian(sys: StateSpaceModel, gamma: float) -> np.ndarray:
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    R = gamma**2 * np.eye(sys.ninputs) - D.T @ D
    S = gamma**2 * np.eye(sys.noutputs) - D @ D.T
    F = A + B @ np.linalg.solve(R, D.T @ C)
    return np.block([[F, B @ np.linalg.solve(R, B.T)],
                     [-gamma**2 * C.T @ np.linalg.solve(S, C), -F.T]])


def _imag_axis_frequencies(H: np.ndarray, loose: float = 0.0) -> np.ndarray:
    ev = linalg.eigvals(H)
    tol = np.maximum(1e-8 * (1 + np.abs(ev)), loose * np.abs(ev))
    w = np.abs(ev.imag[np.abs(ev.real) < tol])
    return np.unique(np.round(w, 12))


def balanced(sys: StateSpaceModel) -> StateSpaceModel:
    """Diagonal state scaling that balances ``A`` (response unchanged)."""
    if sys.nstates == 0:
        return sys
    _, (sc, _) = linalg.matrix_balance(sys.A, permute=False, separate=True)
    return StateSpaceModel(sys.A * sc[None, :] / sc[:, None], sys.B / sc[:, None], sys.C * sc[None, :],
                           sys.D, sys.input_labels, sys.output_labels)


def hinf_norm(sys: StateSpaceModel, rel_tol: float = 1e-10, max_iter: int = 200) -> HinfResult:
    """H-infinity norm by bisection on the Hamiltonian imaginary-axis test.

    The bracket starts at ``max(sigma(D), coarse grid max)`` and an upper
    bound obtained by doubling. Each bisection step that finds imaginary-axis
    eigenvalues also lifts the lower bound by evaluating the response at the
    crossing frequencies and their midpoints, which converges quickly.

    Hamiltonian eigenvalues near the imaginary axis only mark candidate
    frequencies. A level counts as reached when the response evaluated at
    (or searched locally around) a candidate actually attains it, which
    keeps rounding on large, badly scaled realizations from inflating the
    norm.

    Parameters
    ----------
    sys : StateSpaceModel
        Asymptotically stable system.
    rel_tol : float
        Relative width of the final bracket.

    Raises
    ------
    UnstableSystemError
        If ``A`` has eigenvalues with nonnegative real part.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    sd = float(np.linalg.svd(sys.D, compute_uv=False)[0]) if sys.D.size else 0.0
    if sys.nstates == 0:
        return HinfResult(sd, 0.0, "hamiltonian_bisection")
    ev = eigenvalues(sys.A)
    if ev.real.max() >= 0:
        raise UnstableSystemError("H-infinity norm undefined for an unstable system")
    if np.any(ev.real > -1e-9 * (1 + np.abs(ev))):
        warnings.warn("poles close to the imaginary axis; norm is ill-conditioned", RuntimeWarning)
    sys = balanced(sys)

    mags = np.abs(ev)
    lo, hi = max(mags.min(), 1e-6) / 10, max(mags.max(), 1e-6) * 10
    grid = np.concatenate([[0.0], np.logspace(np.log10(lo), np.log10(hi), 19), np.abs(ev.imag)])
    grid = np.unique(grid)
    sg = _sigma_max(freqresp(sys, grid))
    i = int(np.argmax(sg))
    lb, peak = float(sg[i]), float(grid[i])
    if sd > lb:
        lb, peak = sd, np.inf
    if lb == 0.0:
        return HinfResult(0.0, 0.0, "hamiltonian_bisection")

    def resp(x):
        return float(_sigma_max(freqresp(sys, [abs(x)]))[0])

    def test(gamma, at):
        # (level reached?, best sampled value, its frequency); ``at`` is the current peak
        H = _hamiltonian(sys, gamma)
        cand = _imag_axis_frequencies(H, loose=1e-5)
        extra = [at] if np.isfinite(at) else []
        if cand.size == 0 and not extra:
            return False, -np.inf, np.nan
        pts = np.unique(np.concatenate([cand, 0.5 * (cand[:-1] + cand[1:]), extra]))
        sp = _sigma_max(freqresp(sys, pts))
        j = int(np.argmax(sp))
        v, wv = float(sp[j]), float(pts[j])
        if v < gamma:
            # rounding on large realizations produces spurious axis crossings;
            # only a response that really reaches gamma counts as a hit
            for c in pts[np.argsort(-sp)[:4]]:
                d = 1e-2 * max(c, 1e-6)
                r = minimize_scalar(lambda x: -resp(x), bounds=(max(c - d, 0.0), c + d),
                                    method="bounded", options={"xatol": 1e-10 * max(c, 1.0)})
                if -r.fun > v:
                    v, wv = float(-r.fun), float(abs(r.x))
        return bool(v >= gamma * (1 - 1e-12)), v, wv

    ub = 2 * lb
    while True:
        hit, v, wv = test(ub, peak)
        if v > lb:
            lb, peak = v, wv
        if not hit:
            break
        lb = max(lb, ub)
        ub = 2 * lb
    for _ in range(max_iter):
        if ub - lb <= rel_tol * lb:
            break
        gamma = 0.5 * (lb + ub)
        hit, v, wv = test(gamma, peak)
        if v > lb:
            lb, peak = v, wv
        if hit:
            lb = max(lb, gamma)
        else:
            ub = gamma
        if lb >= ub:
            ub = lb * (1 + rel_tol)
    if not np.isfinite(peak):
        peak = float(hi)
    return HinfResult(0.5 * (lb + ub), peak, "hamiltonian_bisection")


def grid_peak(sys: StateSpaceModel, grid=None, refine: bool = True, n_peaks: int = 3,
              include_infinity: bool = False) -> HinfResult:
    """Maximum of the largest singular value over a grid with local refinement.

    Refinement runs a bounded scalar search in log frequency around the
    ``n_peaks`` largest local maxima, so the result never falls below the
    plain grid maximum. With ``include_infinity`` the high-frequency limit
    ``sigma_max(D)`` is also considered (reported at ``inf``).
    """
    w = np.asarray(default_grid() if grid is None else grid, dtype=float)
    if w.size == 0:
        raise ValueError("empty grid")
    s = _sigma_max(freqresp(sys, w))
    best = int(np.argmax(s))
    val, peak = float(s[best]), float(w[best])
    if refine and w.size > 2:
        val, peak = _refine_peaks(lambda x: _sigma_max(freqresp(sys, [x]))[0], w, s, val, peak, n_peaks)
    if include_infinity and sys.D.size:
        sd = float(np.linalg.svd(sys.D, compute_uv=False)[0])
        if sd > val:
            val, peak = sd, np.inf
    return HinfResult(val, peak, "grid")


def _refine_peaks(fun, w, s, val, peak, n_peaks):
    interior = np.flatnonzero((s[1:-1] >= s[:-2]) & (s[1:-1] >= s[2:])) + 1
    cand = list(interior) + [0, len(w) - 1]
    cand = sorted(set(cand), key=lambda k: -s[k])[:n_peaks]
    for k in cand:
        a, b = w[max(k - 1, 0)], w[min(k + 1, len(w) - 1)]
        if a <= 0:
            a = min(b, w[k] if w[k] > 0 else b) * 1e-3
        if not b > a:
            continue
        res = minimize_scalar(lambda t: -fun(np.exp(t)), bounds=(np.log(a), np.log(b)),
                              method="bounded", options={"xatol": 1e-10})
        if -res.fun > val:
            val, peak = float(-res.fun), float(np.exp(res.x))
    return val, peak


def sigma_plot(sys: StateSpaceModel, grid) -> FrequencyResponse:
    """Singular values (descending) of ``sys`` at every grid frequency."""
    w = np.asarray(grid, dtype=float)
    if w.size == 0:
        raise ValueError("grid must be nonempty")
    G = freqresp(sys, w)
    sv = np.linalg.svd(G, compute_uv=False)
    return FrequencyResponse(w, G, sv)


def write_sigma_csv(path, fr: FrequencyResponse) -> None:
    """Write ``omega_rad_s, sigma1, sigma2, ...`` rows with 15 significant digits."""
    sv = fr.singular_values
    if sv is None:
        sv = np.linalg.svd(fr.values, compute_uv=False)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["omega_rad_s"] + [f"sigma{i + 1}" for i in range(sv.shape[1])])
        for w, row in zip(fr.frequencies, sv):
            wr.writerow([f"{w:.15g}"] + [f"{x:.15g}" for x in row])
