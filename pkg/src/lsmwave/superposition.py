"""Local superposition method.

Global data are split with the coarse partition of unity, each piece is
advanced with Crank--Nicolson on its own patch ``N_ell(omega_i)`` (zero
Dirichlet values on the patch boundary), and the patch solutions are summed.
Every ``T`` the sum is split again, which keeps the patches bounded.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .fem import CoefficientField, PartitionOfUnity, assemble_mass, assemble_stiffness, build_pou
from .linalg import CGSolver, FactorizationCache, combine, fingerprint
from .mesh import ElementSet, MeshHierarchy, build_hierarchy, extend_patch
from .timestepping import (
    Operators,
    ProblemSpec,
    Trajectory,
    WaveState,
    bootstrap,
    build_operators,
    cn_step,
    expand,
    run_global_cn,
    steps_in,
)

# Calibrates the theory-mode layer formula so that it returns 2H/h = 32 at
# h = tau = 2^-8, H = T = 2^-4, t_fin = 1, A = 1 (see choose_ell).
THEORY_CONSTANT = 0.1443


def choose_ell(
    tau: float,
    h: float,
    T: float,
    H: float,
    t_fin: float,
    theta: Optional[float] = None,
    alpha: float = 1.0,
    beta: float = 1.0,
    mode: str = "heuristic",
    C: float = 2.0,
    c_theory: float = THEORY_CONSTANT,
) -> int:
    """Number of fine element layers added around each partition-of-unity support.

    ``heuristic``: ``ceil(C H/h)``. ``theory``: the log-corrected layer count
    with rate constant ``C_{tau,h} = (beta/alpha)(tau/h + h/tau)`` scaled by
    ``c_theory``; ``theta`` defaults to ``h + tau**2``.
    """
    if mode == "heuristic":
        return int(math.ceil(C * H / h - 1e-9))
    if mode != "theory":
        raise ConfigError(f"unknown ell mode {mode!r}")
    if theta is None:
        theta = h + tau ** 2
    c_th = beta / alpha * (tau / h + h / tau)
    n_res = T / tau
    val = (
        n_res * math.log(c_th * n_res)
        + abs(math.log(h))
        + abs(math.log(theta))
        + (t_fin / T) * abs(math.log(H))
    )
    return max(1, int(math.ceil(c_theory * c_th * val - 1e-9)))


@dataclass
class Patch:
    index: int
    support: ElementSet
    region: ElementSet
    nodes: np.ndarray
    weights: np.ndarray  # Lambda_i at ``nodes``
    ops: Operators
    key: str = ""

    @property
    def size(self) -> int:
        return int(self.nodes.size)


def build_patches(
    m: MeshHierarchy,
    A: CoefficientField,
    tau: float,
    ell: int,
    pou: Optional[PartitionOfUnity] = None,
    cache: Optional[FactorizationCache] = None,
    solver: str = "direct",
    cg_tol: float = 1e-13,
) -> list[Patch]:
    """One patch per interior coarse node, each with factorized local operators.

    Patches whose operators coincide bit for bit share one factorization.
    """
    pou = build_pou(m) if pou is None else pou
    cache = FactorizationCache() if cache is None else cache
    out = []
    ops_by_key: dict[str, Operators] = {}
    for i, sup in enumerate(pou.supports):
        region = extend_patch(m, sup, ell)
        nodes = region.interior_nodes
        if nodes.size == 0:
            raise ConfigError(f"patch {i} has no interior nodes")
        M = assemble_mass(m, region)
        S = assemble_stiffness(m, A, region)
        key = fingerprint(M, S)
        ops = ops_by_key.get(key)
        if ops is None:
            K = combine(M, S, tau)
            F = cache.get(K) if solver == "direct" else CGSolver(K, cg_tol)
            ops = Operators(nodes, M, S, F, tau)
            ops_by_key[key] = ops
        else:
            ops = Operators(nodes, ops.M, ops.S, ops.solver, tau)
        out.append(Patch(i, sup, region, nodes, pou.values_at(i, nodes), ops, key))
    return out


def _advance(ops: Operators, a: np.ndarray, b: np.ndarray, f_hats: Optional[Sequence], n_steps: int):
    """``n_steps`` Crank--Nicolson steps from ``(a, b)``; columns are independent problems.

    ``f_hats`` is any iterable of averaged loads, one per step, or ``None``.
    """
    st = WaveState(a, b, 1, ops.tau)
    loads = iter(f_hats) if f_hats is not None else None
    for _ in range(n_steps):
        st = cn_step(ops.solver, ops.M, ops.S, st, None if loads is None else next(loads))
    return st.u_prev, st.u_curr


def run_patch_cn(
    patch: Patch,
    local_f: Optional[Sequence[np.ndarray]],
    a_i: np.ndarray,
    b_i: np.ndarray,
    n_res: int,
    mesh: Optional[MeshHierarchy] = None,
):
    """Advance one patch over a coarse interval.

    ``a_i``, ``b_i`` are the local data at the interval's first two fine steps
    and ``local_f`` holds ``n_res + 2`` load slices, all on ``patch.nodes``.
    Returns the patch solution at relative steps ``n_res`` and ``n_res + 1``,
    zero-extended to full nodal vectors when ``mesh`` is given.
    """
    f_hats = None
    if local_f is not None:
        if len(local_f) < n_res + 2:
            raise ConfigError(f"need {n_res + 2} load slices, got {len(local_f)}")
        f_hats = [0.25 * (local_f[j] + 2.0 * local_f[j + 1] + local_f[j + 2]) for j in range(n_res)]
    a, b = _advance(patch.ops, a_i, b_i, f_hats, n_res)
    if mesh is None:
        return a, b
    return expand(mesh, patch.nodes, a), expand(mesh, patch.nodes, b)


@dataclass
class LsmConfig:
    problem: ProblemSpec
    H: float
    T: float
    ell: Union[int, str] = "auto-heuristic"
    parallelism: int = 1
    solver: str = "direct"
    cg_tol: float = 1e-13
    max_resets: int = 100_000
    ell_C: float = 2.0
    ell_c_theory: float = THEORY_CONSTANT

    def __post_init__(self):
        p = self.problem
        # the fine level comes from the problem, the coarse level from H
        self.mesh = build_hierarchy(p.mesh.dim, self.H, p.mesh.h)
        self.n_res = steps_in(self.T, p.tau, "T/tau")
        self.n_T = steps_in(p.t_fin, self.T, "t_fin/T")
        if self.n_T > self.max_resets:
            raise ConfigError(f"{self.n_T} resets exceed the guard {self.max_resets}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        self.ell_value = self.resolve_ell()

    def resolve_ell(self) -> int:
        p = self.problem
        if isinstance(self.ell, str):
            mode = {"auto-heuristic": "heuristic", "auto-theory": "theory"}.get(self.ell)
            if mode is None:
                raise ConfigError(f"ell must be an integer, 'auto-heuristic' or 'auto-theory', got {self.ell!r}")
            return choose_ell(
                p.tau, p.mesh.h, self.T, self.H, p.t_fin,
                alpha=p.coeff.alpha, beta=p.coeff.beta, mode=mode,
                C=self.ell_C, c_theory=self.ell_c_theory,
            )
        ell = int(self.ell)
        if ell < 0:
            raise ConfigError("ell must be nonnegative")
        return ell


@dataclass
class LsmResult:
    mesh: MeshHierarchy
    T: float
    ell: int
    num_patches: int
    snapshots: list = field(default_factory=list)  # u at kT, k = 1..N_T
    companions: list = field(default_factory=list)  # u at kT + tau
    wall_times: list = field(default_factory=list)
    setup_time: float = 0.0

    def times(self) -> list:
        return [(k + 1) * self.T for k in range(len(self.snapshots))]


class _Group:
    """Patches sharing operators, advanced together as columns of one array."""

    def __init__(self, patches: list[Patch]):
        self.patches = patches
        self.ops = patches[0].ops
        self.idx = np.column_stack([p.nodes for p in patches])
        self.lam = np.column_stack([p.weights for p in patches])

    def run(self, a: np.ndarray, b: np.ndarray, f_hats: Optional[list], n_res: int):
        A = self.lam * a[self.idx]
        B = self.lam * b[self.idx]
        F = None if f_hats is None else (self.lam * fh[self.idx] for fh in f_hats)
        return _advance(self.ops, A, B, F, n_res)


def _groups(patches: list[Patch]) -> list[_Group]:
    by_key: dict[str, list[Patch]] = {}
    for p in patches:
        by_key.setdefault(p.key, []).append(p)
    return [_Group(ps) for ps in by_key.values()]


def _interval_loads(p: ProblemSpec, start: int, n_res: int):
    if p.f_is_zero:
        return None
    f = [p.f_nodal(start + j) for j in range(n_res + 2)]
    return [0.25 * (f[j] + 2.0 * f[j + 1] + f[j + 2]) for j in range(n_res)]


def run_lsm(cfg: LsmConfig, patches: Optional[list[Patch]] = None, keep_states: bool = True) -> LsmResult:
    """Algorithm: bootstrap, then for each coarse interval localize, solve patches, superpose."""
    p = cfg.problem
    m = cfg.mesh
    t0 = time.perf_counter()
    if patches is None:
        patches = build_patches(m, p.coeff, p.tau, cfg.ell_value, solver=cfg.solver, cg_tol=cfg.cg_tol)
    groups = _groups(patches)
    res = LsmResult(m, cfg.T, cfg.ell_value, len(patches))

    glob_ops = _bootstrap_ops(p)
    st = bootstrap(p, glob_ops)
    a = expand(m, glob_ops.nodes, st.u_prev)
    b = expand(m, glob_ops.nodes, st.u_curr)
    res.setup_time = time.perf_counter() - t0

    pool = ThreadPoolExecutor(max_workers=cfg.parallelism) if cfg.parallelism > 1 else None
    try:
        for k in range(cfg.n_T):
            t1 = time.perf_counter()
            f_hats = _interval_loads(p, k * cfg.n_res, cfg.n_res)
            if pool is None:
                outs = [g.run(a, b, f_hats, cfg.n_res) for g in groups]
            else:
                outs = list(pool.map(lambda g: g.run(a, b, f_hats, cfg.n_res), groups))
            a, b = _superpose(m, patches, groups, outs)
            res.snapshots.append(a)
            if keep_states or k == cfg.n_T - 1:
                res.companions.append(b)
            res.wall_times.append(time.perf_counter() - t1)
    finally:
        if pool is not None:
            pool.shutdown()
    return res


def _bootstrap_ops(p: ProblemSpec) -> Operators:
    """Operators for the initial pair; the mass solve is only needed for nonzero u0."""
    m = p.mesh
    M = assemble_mass(m)
    S = assemble_stiffness(m, p.coeff)
    return Operators(m.free_nodes, M, S, None, p.tau)


def _superpose(m: MeshHierarchy, patches, groups, outs):
    """Sum patch solutions in patch-index order."""
    cols = {}
    for g, (A, B) in zip(groups, outs):
        for j, pt in enumerate(g.patches):
            cols[pt.index] = (A[:, j], B[:, j])
    a = np.zeros(m.num_nodes)
    b = np.zeros(m.num_nodes)
    for pt in patches:
        ai, bi = cols[pt.index]
        a[pt.nodes] += ai
        b[pt.nodes] += bi
    return a, b


def fine_snapshots(cfg: LsmConfig, result: LsmResult, k: int, patches: Optional[list[Patch]] = None) -> list:
    """Recompute the superposed fine-step states inside coarse interval ``k`` (0-based).

    The interval restarts from the stored pair at ``kT`` (the initial pair for
    ``k = 0``); the list holds the states at fine steps ``kT/tau`` through
    ``(k+1)T/tau + 1``.
    """
    p, m = cfg.problem, cfg.mesh
    if patches is None:
        patches = build_patches(m, p.coeff, p.tau, cfg.ell_value, solver=cfg.solver)
    if k == 0:
        ops = _bootstrap_ops(p)
        st = bootstrap(p, ops)
        a, b = expand(m, ops.nodes, st.u_prev), expand(m, ops.nodes, st.u_curr)
    else:
        a, b = result.snapshots[k - 1], result.companions[k - 1]
    groups = _groups(patches)
    f_hats = _interval_loads(p, k * cfg.n_res, cfg.n_res)
    series = [a, b]
    cur = [(g.lam * a[g.idx], g.lam * b[g.idx]) for g in groups]
    for j in range(cfg.n_res):
        nxt = []
        for g, (ua, ub) in zip(groups, cur):
            fh = None if f_hats is None else g.lam * f_hats[j][g.idx]
            st = cn_step(g.ops.solver, g.ops.M, g.ops.S, WaveState(ua, ub, 1, p.tau), fh)
            nxt.append((st.u_prev, st.u_curr))
        cur = nxt
        series.append(_superpose(m, patches, groups, cur)[1])
    return series


def global_reference(p: ProblemSpec, T: float, solver: str = "direct") -> Trajectory:
    """Global Crank--Nicolson run keeping only the coarse-time snapshots."""
    n_res = steps_in(T, p.tau, "T/tau")
    n_T = steps_in(p.t_fin, T, "t_fin/T")
    q = ProblemSpec(p.mesh, p.t_fin, p.tau, p.coeff, p.f, p.u0, p.v0, record_energy=False, f_is_zero=p.f_is_zero)
    return run_global_cn(q, snapshot_steps=[k * n_res for k in range(1, n_T + 1)], solver=solver)


@dataclass
class ErrorReport:
    """Relative ``||.||_{h,T}`` error of one run plus bookkeeping."""

    params: dict
    rel_error: float
    per_snapshot: list = field(default_factory=list)
    wall_time: float = 0.0
    reference_norm: float = 0.0

    HEADER = ("d", "h", "tau", "H", "T", "ell", "alpha", "beta", "seed", "rel_error")

    def row(self) -> list:
        vals = [self.params.get(k, "") for k in self.HEADER[:-1]]
        return [_fmt(v) for v in vals] + [_fmt(self.rel_error)]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def ht_error(mesh: MeshHierarchy, coeff: CoefficientField, T: float, approx: Sequence, ref: Sequence):
    """Relative ``||.||_{h,T}`` distance and per-snapshot energy-seminorm errors."""
    from .fem import NormWorkspace

    if len(approx) != len(ref):
        raise ConfigError("snapshot sequences differ in length")
    ws = NormWorkspace(mesh, coeff, 0.0)
    diffs = [ws.a_sq(x - y) for x, y in zip(approx, ref)]
    den = sum(T * ws.a_sq(y) for y in ref)
    num = sum(T * d for d in diffs)
    rel = math.sqrt(num / den) if den > 0 else math.sqrt(num)
    return rel, [math.sqrt(d) for d in diffs], math.sqrt(den)


def run_params(cfg: LsmConfig) -> dict:
    p = cfg.problem
    return {
        "d": p.mesh.dim,
        "h": p.mesh.h,
        "tau": p.tau,
        "H": cfg.H,
        "T": cfg.T,
        "ell": cfg.ell_value,
        "alpha": p.coeff.alpha,
        "beta": p.coeff.beta,
        "seed": "" if p.coeff.seed is None else p.coeff.seed,
    }


def compare_to_global(
    cfg: LsmConfig,
    reference: Optional[Trajectory] = None,
    result: Optional[LsmResult] = None,
) -> ErrorReport:
    """Relative ``||.||_{h,T}`` error of the superposition against global Crank--Nicolson."""
    p = cfg.problem
    t0 = time.perf_counter()
    if result is None:
        result = run_lsm(cfg, keep_states=False)
    if reference is None:
        reference = global_reference(p, cfg.T, solver=cfg.solver)
    ref = reference.coarse(cfg.T, p.t_fin)
    rel, per, den = ht_error(p.mesh, p.coeff, cfg.T, result.snapshots, ref)
    return ErrorReport(run_params(cfg), rel, per, time.perf_counter() - t0, den)
