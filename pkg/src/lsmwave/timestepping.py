"""Global Crank--Nicolson time stepping for the acoustic wave equation.

Each step solves

    (M + tau^2/4 S) u^{n+1} = tau^2 M fhat^n + M (2u^n - u^{n-1}) - tau^2/4 S (2u^n + u^{n-1})

with ``fhat^n = (f^{n+1} + 2 f^n + f^{n-1}) / 4``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .fem import (
    CoefficientField,
    PointFunction,
    assemble_mass,
    assemble_stiffness,
    constant_coefficient,
    nodal_interpolate,
)
from .linalg import CGSolver, FactorizationCache, combine, factorize
from .mesh import MeshHierarchy


def zero_function(x: np.ndarray, t: float) -> np.ndarray:
    return np.zeros(x.shape[0])


def one_function(x: np.ndarray, t: float) -> np.ndarray:
    return np.ones(x.shape[0])


def steps_in(total: float, step: float, what: str) -> int:
    q = total / step
    n = int(round(q))
    if n < 1 or abs(q - n) > 1e-9 * max(q, 1.0):
        raise ConfigError(f"{what} must be a positive integer, got {q!r}")
    return n


@dataclass
class ProblemSpec:
    mesh: MeshHierarchy
    t_fin: float
    tau: float
    coeff: Optional[CoefficientField] = None
    f: PointFunction = zero_function
    u0: PointFunction = zero_function
    v0: PointFunction = zero_function
    record_energy: bool = True
    # Set when f is identically zero, so right-hand side work can be skipped.
    f_is_zero: bool = False

    def __post_init__(self):
        if self.tau <= 0 or self.t_fin <= 0:
            raise ConfigError("tau and t_fin must be positive")
        self.num_steps = steps_in(self.t_fin, self.tau, "t_fin/tau")
        if self.coeff is None:
            self.coeff = constant_coefficient(self.mesh)
        if self.f is zero_function:
            self.f_is_zero = True

    def f_nodal(self, step: int) -> np.ndarray:
        """``I_h f(., step * tau)`` as a full-length nodal vector."""
        if self.f_is_zero:
            return np.zeros(self.mesh.num_nodes)
        return nodal_interpolate(self.mesh, self.f, step * self.tau)


@dataclass
class Operators:
    """Mass and stiffness on the free nodes of a region, with a solver for ``M + tau^2/4 S``."""

    nodes: np.ndarray
    M: sp.csr_matrix
    S: sp.csr_matrix
    solver: object
    tau: float

    @property
    def K(self) -> sp.csr_matrix:
        return combine(self.M, self.S, self.tau)


def build_operators(
    mesh: MeshHierarchy,
    coeff: CoefficientField,
    tau: float,
    region=None,
    solver: str = "direct",
    cache: Optional[FactorizationCache] = None,
    cg_tol: float = 1e-13,
) -> Operators:
    region = mesh.everything() if region is None else region
    M = assemble_mass(mesh, region)
    S = assemble_stiffness(mesh, coeff, region)
    K = combine(M, S, tau)
    if solver == "direct":
        F = factorize(K, cache)
    elif solver == "cg":
        F = CGSolver(K, cg_tol)
    else:
        raise ConfigError(f"unknown solver {solver!r}")
    return Operators(region.interior_nodes, M, S, F, tau)


@dataclass
class WaveState:
    """Consecutive coefficient vectors ``u^{n-1}``, ``u^n`` in some operator's DOF space."""

    u_prev: np.ndarray
    u_curr: np.ndarray
    n: int
    tau: float

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.u_prev + self.u_curr)

    @property
    def velocity(self) -> np.ndarray:
        return (self.u_curr - self.u_prev) / self.tau


def cn_step(solver, M, S, st: WaveState, f_hat: Optional[np.ndarray]) -> WaveState:
    """Advance ``st`` by one Crank--Nicolson step.

    ``f_hat`` is the averaged load in the same DOF space (``None`` for zero).
    The right-hand side is evaluated as
    ``M (2u^n - u^{n-1} + tau^2 fhat) - tau^2/4 S (2u^n + u^{n-1})``.
    """
    tau = st.tau
    w = 2.0 * st.u_curr - st.u_prev
    if f_hat is not None:
        w = w + tau ** 2 * f_hat
    rhs = M @ w - (0.25 * tau ** 2) * (S @ (2.0 * st.u_curr + st.u_prev))
    u_next = solver.solve(rhs)
    return WaveState(st.u_curr, u_next, st.n + 1, tau)


def bootstrap(p: ProblemSpec, ops: Operators) -> WaveState:
    """Initial pair ``(u^0, u^1)`` on the free nodes from a second-order Taylor start.

    ``u^1 = u^0 + tau v^0 + tau^2/2 (f^0 - M^{-1} S u^0)``.
    """
    m, tau, free = p.mesh, p.tau, ops.nodes
    u0 = nodal_interpolate(m, p.u0, 0.0)[free]
    v0 = nodal_interpolate(m, p.v0, 0.0)[free]
    f0 = p.f_nodal(0)[free]
    u1 = u0 + tau * v0 + (0.5 * tau ** 2) * f0
    if np.any(u0):
        Mfac = factorize(ops.M)
        u1 = u1 - (0.5 * tau ** 2) * Mfac.solve(ops.S @ u0)
    return WaveState(u0, u1, 1, tau)


def discrete_energy(M, S, st: WaveState) -> float:
    """``E^{n-1/2} = 1/2 (||D_tau u||^2 + ||u^{n-1/2}||_a^2)`` for the state's pair."""
    vel, mid = st.velocity, st.half
    return 0.5 * (float(vel @ (M @ vel)) + float(mid @ (S @ mid)))


@dataclass
class Trajectory:
    mesh: MeshHierarchy
    tau: float
    snapshots: dict = field(default_factory=dict)
    energy: Optional[np.ndarray] = None
    stability_bound: Optional[np.ndarray] = None
    final_state: Optional[WaveState] = None

    @property
    def steps(self) -> list:
        return sorted(self.snapshots)

    def at(self, step: int) -> np.ndarray:
        return self.snapshots[step]

    def coarse(self, T: float, t_fin: float) -> list:
        """Snapshots at ``kT``, ``k = 1..t_fin/T``."""
        n_res = steps_in(T, self.tau, "T/tau")
        n_T = steps_in(t_fin, T, "t_fin/T")
        return [self.snapshots[k * n_res] for k in range(1, n_T + 1)]

    def stability_holds(self, slack: float = 1e-12) -> bool:
        if self.energy is None:
            return True
        return bool(np.all(np.sqrt(self.energy) <= self.stability_bound + slack))

    def write_snapshot_csv(self, step: int, path) -> None:
        write_nodal_csv(path, self.snapshots[step])

    def write_energy_csv(self, path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh)
            w.writerow(["step", "energy", "stability_bound"])
            for n, (e, b) in enumerate(zip(self.energy, self.stability_bound)):
                w.writerow([n, repr(float(e)), repr(float(b))])


def write_nodal_csv(path, v: np.ndarray, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh)
        w.writerow(["node", "value"])
        for i, x in enumerate(v):
            w.writerow([i, repr(float(x))])


def expand(m: MeshHierarchy, nodes: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.zeros(m.num_nodes)
    out[nodes] = v
    return out


def run_global_cn(
    p: ProblemSpec,
    snapshot_steps: Optional[Iterable[int]] = None,
    ops: Optional[Operators] = None,
    solver: str = "direct",
    initial: Optional[WaveState] = None,
    callback: Optional[Callable[[WaveState], None]] = None,
) -> Trajectory:
    """Run the global scheme to ``t_fin``.

    Snapshots (full-length nodal vectors) are kept at ``snapshot_steps``
    (default: every step). The energy log holds ``E^{n+1/2}`` for
    ``n = 0..N-1`` together with the right-hand side of the stability bound.
    """
    m, tau, N = p.mesh, p.tau, p.num_steps
    if ops is None:
        ops = build_operators(m, p.coeff, tau, solver=solver)
    free = ops.nodes
    wanted = set(range(N + 1)) if snapshot_steps is None else set(int(s) for s in snapshot_steps)
    st = bootstrap(p, ops) if initial is None else initial
    traj = Trajectory(m, tau)
    if 0 in wanted:
        traj.snapshots[0] = expand(m, free, st.u_prev)
    if 1 in wanted:
        traj.snapshots[1] = expand(m, free, st.u_curr)

    energies, bounds = [], []
    if p.record_energy:
        e0 = discrete_energy(ops.M, ops.S, st)
        energies.append(e0)
        bounds.append(math.sqrt(e0))
    acc = 0.0

    # rolling window of f at steps n-1, n, n+1 on the free nodes
    f_win = None if p.f_is_zero else [p.f_nodal(k)[free] for k in (0, 1)]
    for n in range(1, N):
        f_hat = None
        if f_win is not None:
            f_win.append(p.f_nodal(n + 1)[free])
            f_hat = 0.25 * (f_win[0] + 2.0 * f_win[1] + f_win[2])
            f_win.pop(0)
        st = cn_step(ops.solver, ops.M, ops.S, st, f_hat)
        if st.n in wanted:
            traj.snapshots[st.n] = expand(m, free, st.u_curr)
        if p.record_energy:
            e = discrete_energy(ops.M, ops.S, st)
            if f_hat is not None:
                acc += tau / math.sqrt(2.0) * math.sqrt(float(f_hat @ (ops.M @ f_hat)))
            energies.append(e)
            bounds.append(math.sqrt(energies[0]) + acc)
        if callback is not None:
            callback(st)
    if p.record_energy:
        traj.energy = np.array(energies)
        traj.stability_bound = np.array(bounds)
    traj.final_state = st
    return traj
