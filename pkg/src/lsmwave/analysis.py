"""Measurement probes: inverse-matrix decay, tail norms, localization errors, sweeps."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .fem import (
    NormWorkspace,
    PointFunction,
    assemble_mass,
    assemble_stiffness,
    constant_coefficient,
    element_a_sq,
    element_l2_sq,
    nodal_interpolate,
)
from .linalg import combine, dense_inverse
from .mesh import ElementSet, MeshHierarchy, build_hierarchy, element_rings, extend_patch
from .superposition import (
    ErrorReport,
    LsmConfig,
    LsmResult,
    compare_to_global,
    global_reference,
    ht_error,
    run_lsm,
    run_params,
)
from .timestepping import ProblemSpec, Trajectory, WaveState, build_operators, cn_step, expand, run_global_cn


def rate_constant(tau: float, h: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    """``C_{tau,h} = (beta/alpha)(tau/h + h/tau)`` with unit proportionality."""
    return beta / alpha * (tau / h + h / tau)


def gamma_from_rate(c: float) -> float:
    return math.sqrt((c + 0.5) / (1.0 + c))


def rate_from_gamma(g: float) -> float:
    """Inverse of :func:`gamma_from_rate`; ``nan`` when ``g**2 <= 1/2``."""
    g2 = g * g
    if g2 <= 0.5 or g2 >= 1.0:
        return float("nan")
    return (g2 - 0.5) / (1.0 - g2)


def _exp_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares fit ``log y = a + b x``; returns ``(exp(b), R^2)``."""
    ly = np.log(y)
    b, a = np.polyfit(x, ly, 1)
    pred = a + b * x
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return math.exp(b), r2


@dataclass
class DecayProfile:
    ells: np.ndarray
    values: np.ndarray
    kind: str
    bounds: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ells = np.asarray(self.ells)
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.ells) <= 0):
            raise ConfigError("profile abscissae must be strictly increasing")
        if np.any(self.values < 0):
            raise ConfigError("profile values must be nonnegative")

    def value(self, ell: int) -> float:
        return float(self.values[list(self.ells).index(ell)])

    def write_csv(self, path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh)
            w.writerow(["ell", "value", "bound"])
            for i, (l, v) in enumerate(zip(self.ells, self.values)):
                b = "" if self.bounds is None else repr(float(self.bounds[i]))
                w.writerow([int(l), repr(float(v)), b])


# -- inverse matrix decay ------------------------------------------------------------

@dataclass
class MatrixDecay:
    magnitude: np.ndarray  # |K^{-1}|
    distances: np.ndarray
    band_means: np.ndarray
    fit_rate: float
    r2: float
    gamma_formula: float
    fitted_rate_constant: float
    log_floor: float = 1e-16

    def write_grid_csv(self, path) -> None:
        np.savetxt(path, self.magnitude, delimiter=",", fmt="%.17g")

    def write_pgm(self, path) -> None:
        write_log_pgm(path, self.magnitude, self.log_floor)

    def write_bands_csv(self, path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh)
            w.writerow(["distance", "band_mean"])
            for k, v in zip(self.distances, self.band_means):
                w.writerow([int(k), repr(float(v))])


def write_log_pgm(path, mag: np.ndarray, floor: float = 1e-16) -> None:
    """8-bit binary PGM, gray = 255 * (log10 max(x, floor) - log10 floor) / (log10 max - log10 floor)."""
    lo = math.log10(floor)
    hi = math.log10(max(float(mag.max()), floor * 10))
    g = (np.log10(np.maximum(mag, floor)) - lo) / (hi - lo)
    img = np.clip(np.round(255 * g), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n# log10 scale, floor {floor:g}, max {10 ** hi:.6g}\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def matrix_decay(h: float, tau: float, d: int = 2, fit_range: tuple[int, int] = (1, 10)) -> MatrixDecay:
    """Magnitudes of ``(M + tau^2/4 S)^{-1}`` and their mean per Chebyshev node distance."""
    m = build_hierarchy(d, h, h)
    K = combine(assemble_mass(m), assemble_stiffness(m, constant_coefficient(m)), tau)
    mag = np.abs(dense_inverse(K))
    g = m.node_grid_index[m.free_nodes]
    dist = np.zeros(mag.shape, dtype=np.int32)
    for c in range(d):
        dist = np.maximum(dist, np.abs(g[:, c][:, None] - g[:, c][None, :]))
    counts = np.bincount(dist.ravel())
    sums = np.bincount(dist.ravel(), weights=mag.ravel())
    ks = np.flatnonzero(counts)
    means = sums[ks] / counts[ks]
    lo, hi = fit_range
    sel = (ks >= lo) & (ks <= hi)
    rate, r2 = _exp_fit(ks[sel].astype(float), means[sel])
    return MatrixDecay(
        magnitude=mag,
        distances=ks,
        band_means=means,
        fit_rate=rate,
        r2=r2,
        gamma_formula=gamma_from_rate(rate_constant(tau, h)),
        fitted_rate_constant=rate_from_gamma(math.sqrt(rate)),
    )


# -- tail norms and localization --------------------------------------------------------

def _check_support(m: MeshHierarchy, omega: ElementSet, vecs: Iterable[np.ndarray]) -> None:
    outside = np.ones(m.num_nodes, dtype=bool)
    outside[omega.interior_nodes] = False
    for v in vecs:
        if np.any(v[outside] != 0):
            raise ConfigError("data are not supported in omega")


def _short_problem(p: ProblemSpec, steps: int) -> ProblemSpec:
    return replace(p, t_fin=steps * p.tau, record_energy=False)


def _element_triple(m: MeshHierarchy, coeff, tau: float, v: np.ndarray) -> np.ndarray:
    return element_l2_sq(m, v) + 0.25 * tau ** 2 * element_a_sq(m, coeff, v)


def decay_profile(p: ProblemSpec, omega: ElementSet, n: int, ell_max: int) -> DecayProfile:
    """Tail norms ``|||u^{n+1/2}|||`` outside ``N_ell(omega)`` for ``ell = 0..ell_max``.

    ``bounds`` holds ``(ell+1)^{n/2} gamma^ell max_{k<=n} |||u^{k+1/2}|||`` with
    ``gamma`` the smallest value for which the bound dominates the measured
    tail (reported in ``info['gamma']``); ``info['ls_rate']`` is a plain
    least-squares per-layer rate over the decaying part.
    """
    m = p.mesh
    q = _short_problem(p, n + 1)
    traj = run_global_cn(q)
    _check_support(m, omega, [traj.at(0), traj.at(1)] + [q.f_nodal(k) for k in range(n + 2)])

    halves = [0.5 * (traj.at(k) + traj.at(k + 1)) for k in range(n + 1)]
    ws = NormWorkspace(m, p.coeff, p.tau)
    peak = max(ws.triple(v) for v in halves)

    per_el = _element_triple(m, p.coeff, p.tau, halves[n])
    rings = element_rings(m, omega, ell_max)
    by_ring = np.bincount(rings, weights=per_el, minlength=ell_max + 2)
    # tail(ell) = sum over rings > ell
    tails_sq = np.cumsum(by_ring[::-1])[::-1][1: ell_max + 2]
    tails = np.sqrt(np.maximum(tails_sq, 0.0))
    ells = np.arange(ell_max + 1)

    pre = (ells + 1.0) ** (n / 2.0)
    gamma = 0.0
    if peak > 0:
        for l in range(1, ell_max + 1):
            if tails[l] > 0:
                gamma = max(gamma, (tails[l] / (pre[l] * peak)) ** (1.0 / l))
    bounds = pre * gamma ** ells * peak
    pos = tails > 0
    ls_rate = float("nan")
    if pos.sum() >= 3:
        ls_rate, _ = _exp_fit(ells[pos].astype(float), tails[pos])
    info = {"gamma": gamma, "peak": peak, "ls_rate": ls_rate, "n": n}
    return DecayProfile(ells, tails, "triple-norm tail", bounds, info)


def localization_errors(p: ProblemSpec, omega: ElementSet, ells: Sequence[int], n: int) -> DecayProfile:
    """``|||u^{n+1/2} - u~^{n+1/2}|||`` for each ``ell``.

    ``u~`` solves the same scheme on ``N_ell(omega)`` with zero values on the
    patch boundary, starting from the same initial pair.
    """
    m = p.mesh
    q = _short_problem(p, n + 1)
    traj = run_global_cn(q)
    fs = [q.f_nodal(k) for k in range(n + 2)]
    _check_support(m, omega, [traj.at(0), traj.at(1)] + fs)
    ws = NormWorkspace(m, p.coeff, p.tau)
    glob_half = 0.5 * (traj.at(n) + traj.at(n + 1))
    vals = []
    for ell in ells:
        region = extend_patch(m, omega, int(ell))
        ops = build_operators(m, p.coeff, p.tau, region)
        idx = ops.nodes
        st = WaveState(traj.at(0)[idx], traj.at(1)[idx], 1, p.tau)
        hist = [st.u_prev, st.u_curr]
        for k in range(1, n + 1):
            fh = 0.25 * (fs[k + 1] + 2 * fs[k] + fs[k - 1])[idx]
            st = cn_step(ops.solver, ops.M, ops.S, st, fh if np.any(fh) else None)
            hist.append(st.u_curr)
        loc_half = expand(m, idx, 0.5 * (hist[n] + hist[n + 1]))
        vals.append(ws.triple(glob_half - loc_half))
    return DecayProfile(np.asarray(ells), np.asarray(vals), "localization error", info={"n": n})


def localization_error(p: ProblemSpec, omega: ElementSet, ell: int, n: int) -> float:
    return float(localization_errors(p, omega, [ell], n).values[0])


# -- errors against exact solutions and sweeps --------------------------------------------

def exact_error(
    snapshots: Sequence[np.ndarray],
    times: Sequence[float],
    u_exact: PointFunction,
    mesh: MeshHierarchy,
    T: float,
    coeff=None,
) -> float:
    """Relative ``||.||_{h,T}`` error against the nodal interpolant of ``u_exact``."""
    coeff = constant_coefficient(mesh) if coeff is None else coeff
    ref = [nodal_interpolate(mesh, u_exact, t) for t in times]
    rel, _, _ = ht_error(mesh, coeff, T, list(snapshots), ref)
    return rel


def lsm_exact_error(result: LsmResult, u_exact: PointFunction, coeff=None) -> float:
    return exact_error(result.snapshots, result.times(), u_exact, result.mesh, result.T, coeff)


def trajectory_exact_error(traj: Trajectory, u_exact: PointFunction, T: float, t_fin: float, coeff=None) -> float:
    snaps = traj.coarse(T, t_fin)
    times = [(k + 1) * T for k in range(len(snaps))]
    return exact_error(snaps, times, u_exact, traj.mesh, T, coeff)


def ell_sweep(
    p: ProblemSpec,
    H: float,
    T: float,
    ells: Sequence[int],
    parallelism: int = 1,
    reference: Optional[Trajectory] = None,
    u_exact: Optional[PointFunction] = None,
    solver: str = "direct",
) -> list[ErrorReport]:
    """Errors of the superposition for each layer count, sharing one reference run.

    Compares against global Crank--Nicolson unless ``u_exact`` is given.
    """
    out = []
    if u_exact is None and reference is None:
        reference = global_reference(p, T, solver=solver)
    for ell in ells:
        cfg = LsmConfig(p, H=H, T=T, ell=int(ell), parallelism=parallelism, solver=solver)
        if u_exact is None:
            out.append(compare_to_global(cfg, reference=reference))
        else:
            t0 = time.perf_counter()
            res = run_lsm(cfg, keep_states=False)
            err = lsm_exact_error(res, u_exact, p.coeff)
            out.append(ErrorReport(run_params(cfg), err, wall_time=time.perf_counter() - t0))
    return out


def write_reports(path, reports: Sequence[ErrorReport], header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh)
        w.writerow(list(ErrorReport.HEADER))
        for r in reports:
            w.writerow(r.row())
