"""Homogeneous RL networks: line model, Kron reduction and the small-gain certificate.

With a uniform R/L ratio ``tau`` every branch has admittance ``B_ij F(s)``
where ``F(s) = omega0 ((s + tau) I - omega0 J)^{-1}`` and ``B_ij = 1/X_ij``
(per-unit reactance at nominal frequency). The network admittance is then
``Q (x) F(s)`` and the device-side stability test only needs the smallest
eigenvalue of the Kron-reduced grounded Laplacian.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .lti import HinfResult, StateSpaceModel, UnstableSystemError, hinf_norm

__all__ = [
    "NetworkError",
    "NetworkSpec",
    "ReducedNetwork",
    "CertificateReport",
    "DeviceResult",
    "FInverse",
    "line_F",
    "laplacian",
    "kron_reduce",
    "lambda_min",
    "cascade_finv",
    "certify",
    "build_interconnection",
    "reference_network",
    "REFERENCE_QRED",
]

J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])

REFERENCE_QRED = np.array([[114.55, -10.0, -54.55], [-10.0, 40.0, -5.0], [-54.55, -5.0, 59.55]])


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Network description with per-unit branch impedances ``R + jX``.

    ``self_loops`` are branches to the grounded node (the infinite bus).
    ``boundary`` lists the nodes that host devices, in device order.
    ``loads`` maps nodes to constant-current load powers (large-signal only).
    """

    nodes: tuple
    branches: tuple  # (i, j, R, X)
    self_loops: tuple = ()  # (i, R, X)
    boundary: tuple = ()
    loads: dict = field(default_factory=dict)
    omega0: float = 2 * np.pi * 50
    tau: float | None = None

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if len(set(nodes)) != len(nodes):
            raise NetworkError("duplicate node names")
        for i, j, *_ in self.branches:
            if i not in nodes or j not in nodes or i == j:
                raise NetworkError(f"bad branch ({i},{j})")
        for i, *_ in self.self_loops:
            if i not in nodes:
                raise NetworkError(f"self loop at unknown node {i}")
        if not set(self.boundary) <= set(nodes):
            raise NetworkError("boundary nodes must be network nodes")
        ratios = [r / x for *_, r, x in list(self.branches) + list(self.self_loops)]
        if any(x <= 0 for *_, r, x in list(self.branches) + list(self.self_loops)):
            raise NetworkError("reactances must be positive")
        tau_est = ratios[0] * self.omega0 if ratios else 0.0
        if ratios and np.ptp(ratios) * self.omega0 > 1e-9 * max(1.0, tau_est):
            raise NetworkError("branch R/X ratios differ; homogeneous lines are required")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "branches", tuple(tuple(b) for b in self.branches))
        object.__setattr__(self, "self_loops", tuple(tuple(b) for b in self.self_loops))
        object.__setattr__(self, "boundary", tuple(self.boundary))
        if self.tau is None:
            object.__setattr__(self, "tau", float(tau_est))

    @property
    def interior(self) -> tuple:
        return tuple(n for n in self.nodes if n not in self.boundary)


@dataclass(frozen=True)
class ReducedNetwork:
    Q_red: np.ndarray
    lambda1: float
    tau: float
    omega0: float
    boundary: tuple = ()

    def scaled(self, factor: float) -> "ReducedNetwork":
        return ReducedNetwork(self.Q_red * factor, self.lambda1 * factor, self.tau, self.omega0, self.boundary)


@dataclass(frozen=True)
class DeviceResult:
    name: str
    norm: float
    peak_frequency: float


@dataclass(frozen=True)
class CertificateReport:
    per_device: tuple
    lambda1: float
    margin: float
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_rows(self) -> list[list[str]]:
        rows = [["device", "norm", "peak_omega_rad_s", "margin"]]
        for d in self.per_device:
            rows.append([d.name, f"{d.norm:.15g}", f"{d.peak_frequency:.15g}", f"{self.lambda1 - d.norm:.15g}"])
        return rows


@dataclass(frozen=True)
class FInverse:
    """``F^{-1}(s) = D0 + s D1`` with ``D0 = tau/omega0 I - J`` and ``D1 = I/omega0``."""

    omega0: float
    tau: float

    @property
    def D0(self):
        return self.tau / self.omega0 * np.eye(2) - J2

    @property
    def D1(self):
        return np.eye(2) / self.omega0

    def __call__(self, s) -> np.ndarray:
        s = np.atleast_1d(s)
        return self.D0[None] + s[:, None, None] * self.D1[None]


def line_F(omega0: float, tau: float) -> tuple[StateSpaceModel, FInverse]:
    """Line operator ``F(s)`` as a state-space model and its polynomial inverse."""
    if omega0 <= 0:
        raise NetworkError("omega0 must be positive")
    A = -tau * np.eye(2) + omega0 * J2
    F = StateSpaceModel(A, omega0 * np.eye(2), np.eye(2), np.zeros((2, 2)))
    return F, FInverse(omega0, tau)


def laplacian(spec: NetworkSpec) -> np.ndarray:
    """Grounded susceptance Laplacian over ``spec.nodes``."""
    idx = {n: k for k, n in enumerate(spec.nodes)}
    Q = np.zeros((len(idx), len(idx)))
    for i, j, _, x in spec.branches:
        b = 1.0 / x
        a, c = idx[i], idx[j]
        Q[a, a] += b
        Q[c, c] += b
        Q[a, c] -= b
        Q[c, a] -= b
    for i, _, x in spec.self_loops:
        Q[idx[i], idx[i]] += 1.0 / x
    return Q


def kron_reduce(spec: NetworkSpec) -> ReducedNetwork:
    """Schur complement of the grounded Laplacian onto the boundary nodes."""
    Q = laplacian(spec)
    idx = {n: k for k, n in enumerate(spec.nodes)}
    b = [idx[n] for n in spec.boundary]
    i = [idx[n] for n in spec.interior]
    Qr = Q[np.ix_(b, b)]
    if i:
        Qii = Q[np.ix_(i, i)]
        if np.linalg.matrix_rank(Qii) < len(i):
            raise NetworkError("interior block is singular (floating interior subnetwork)")
        Qr = Qr - Q[np.ix_(b, i)] @ np.linalg.solve(Qii, Q[np.ix_(i, b)])
    Qr = 0.5 * (Qr + Qr.T)
    return ReducedNetwork(Qr, lambda_min(Qr), spec.tau, spec.omega0, spec.boundary)


def lambda_min(Q) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise NetworkError("matrix must be square")
    if np.abs(Q - Q.T).max() > 1e-9 * max(1.0, np.abs(Q).max()):
        raise NetworkError("matrix is not symmetric")
    return float(linalg.eigvalsh(Q)[0])


def cascade_finv(Y: StateSpaceModel, finv: FInverse) -> StateSpaceModel:
    """Proper realization of ``F^{-1}(s) Y(s)`` for a strictly proper ``Y``.

    ``s C x = C (A x + B u)`` gives ``(D0 C + D1 C A) x + D1 C B u``.
    """
    if np.abs(Y.D).max(initial=0.0) > 0:
        raise NetworkError("F^-1 Y is improper when Y has feedthrough")
    C = finv.D0 @ Y.C + finv.D1 @ Y.C @ Y.A
    D = finv.D1 @ Y.C @ Y.B
    return StateSpaceModel(Y.A, Y.B, C, D, Y.input_labels, ("z9", "z10"))


def certify(devices: Sequence[StateSpaceModel], reduced: ReducedNetwork, names: Sequence[str] | None = None,
            cascaded: bool = False) -> CertificateReport:
    """Decentralized test ``max_i ||F^{-1} Y_i||_inf < lambda1``.

    ``devices`` are admittances ``Y_i`` or, with ``cascaded=True``, the
    already formed ``F^{-1} Y_i`` blocks. An unstable device gets an infinite
    norm and fails the test.
    """
    _, finv = line_F(reduced.omega0, reduced.tau)
    names = list(names) if names is not None else [f"device{k + 1}" for k in range(len(devices))]
    out = []
    for name, Y in zip(names, devices):
        G = Y if cascaded else cascade_finv(Y, finv)
        try:
            h = hinf_norm(G, rel_tol=1e-8)
        except UnstableSystemError:
            h = HinfResult(np.inf, np.nan, "hamiltonian_bisection")
        out.append(DeviceResult(name, float(h.norm), float(h.peak_frequency)))
    worst = max((d.norm for d in out), default=0.0)
    margin = reduced.lambda1 - worst
    return CertificateReport(tuple(out), reduced.lambda1, margin, "pass" if margin > 0 else "fail")


def build_interconnection(reduced: ReducedNetwork, devices: Sequence[StateSpaceModel]) -> StateSpaceModel:
    """Closed loop of device admittances with the reduced network.

    Device ``i`` injects ``I_i = Y_i U_i`` into boundary node ``i`` and the
    network answers with ``U = (Q_red^{-1} (x) F^{-1}) I + d``. With
    ``H = blkdiag(F^{-1} Y_i)`` and ``M = Q_red^{-1} (x) I2`` this is the loop
    ``U = d + M H U``. The returned model maps the node disturbance ``d`` to
    the node voltages ``U``; its ``A`` matrix decides stability.
    """
    n = len(devices)
    if reduced.Q_red.shape != (n, n):
        raise NetworkError("device count must match boundary size")
    _, finv = line_F(reduced.omega0, reduced.tau)
    blocks = [cascade_finv(Y, finv) for Y in devices]
    A = linalg.block_diag(*[b.A for b in blocks])
    B = linalg.block_diag(*[b.B for b in blocks])
    C = linalg.block_diag(*[b.C for b in blocks])
    D = linalg.block_diag(*[b.D for b in blocks])
    nx = A.shape[0]
    A = A.reshape(nx, nx)
    B = B.reshape(nx, 2 * n)
    C = C.reshape(2 * n, nx)
    M = np.kron(np.linalg.inv(reduced.Q_red), np.eye(2))
    # U = d + M (C x + D U)  ->  U = E^{-1} (d + M C x)
    E = np.eye(2 * n) - M @ D
    if np.linalg.cond(E) > 1e12:
        raise NetworkError("ill-posed interconnection")
    Ei = np.linalg.inv(E)
    Acl = A + B @ Ei @ M @ C
    Bcl = B @ Ei
    Ccl = Ei @ M @ C
    Dcl = Ei
    labels = tuple(f"U{k // 2 + 1}{'dq'[k % 2]}" for k in range(2 * n))
    return StateSpaceModel(Acl, Bcl, Ccl, Dcl, labels, labels)


def reference_network() -> NetworkSpec:
    """Three-converter nine-bus network (converter tie lines moved to the devices).

    Nodes 4, 8 and 6 host converters 1, 2 and 3. Node 9 connects to the
    infinite bus. Loads 1-3 sit at the interior nodes 5, 7 and 9. The line
    ratio ``tau`` is set to the converter value (0.1 1/s) so that devices and
    lines share one line operator ``F(s)``.
    """
    z = {
        (4, 9): 0.0125, (8, 9): 0.025, (7, 8): 0.12, (6, 7): 0.08, (4, 5): 0.012, (5, 6): 0.007,
    }
    branches = tuple((i, j, 0.1 * x, x) for (i, j), x in z.items())
    return NetworkSpec(
        nodes=(4, 5, 6, 7, 8, 9),
        branches=branches,
        self_loops=((9, 0.0005, 0.005),),
        boundary=(4, 8, 6),
        loads={5: 0.12, 7: 0.2, 9: 0.18},
        tau=0.1,
    )

