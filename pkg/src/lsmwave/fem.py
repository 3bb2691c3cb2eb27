"""Q1 finite elements with piecewise-constant coefficient.

Assembly accumulates element contributions stencil-wise: for every pair of
local nodes ``(a, b)`` of the reference element (in a fixed order) the
contribution lands in row ``node(K, a)`` at neighbour offset ``b - a``. The
order in which a global entry receives its contributions therefore depends
only on local geometry, so a matrix assembled on a patch agrees bit for bit
with the global matrix restricted to the patch's interior nodes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalError
from .mesh import ElementSet, MeshHierarchy, _interior_coarse_grid, coarse_supports

PointFunction = Callable[[np.ndarray, float], np.ndarray]


# -- reference element matrices ------------------------------------------------

def _mass_1d(h: float) -> np.ndarray:
    return h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def _stiff_1d(h: float) -> np.ndarray:
    return 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])


def element_mass(dim: int, h: float) -> np.ndarray:
    """Exact Q1 element mass matrix, local node order ``a = a_x + 2 a_y``."""
    m = _mass_1d(h)
    return m if dim == 1 else np.kron(m, m)


def element_stiffness(dim: int, h: float) -> np.ndarray:
    """Exact Q1 element stiffness matrix for unit coefficient."""
    m, k = _mass_1d(h), _stiff_1d(h)
    return k if dim == 1 else np.kron(m, k) + np.kron(k, m)


def _local_offsets(dim: int) -> np.ndarray:
    if dim == 1:
        return np.array([[0], [1]])
    return np.array([[0, 0], [1, 0], [0, 1], [1, 1]])


# -- coefficient ---------------------------------------------------------------

@dataclass
class CoefficientField:
    """Scalar coefficient, one value per fine element."""

    values: np.ndarray
    alpha: float
    beta: float
    seed: Optional[int] = None
    scale: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.alpha > 0:
            raise ConfigError("coefficient lower bound alpha must be positive")
        if self.alpha > self.beta:
            raise ConfigError("need alpha <= beta")
        v = self.values
        if not np.all(np.isfinite(v)) or v.min() < self.alpha or v.max() > self.beta:
            raise ConfigError(f"coefficient values outside [{self.alpha}, {self.beta}]")

    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "value"])
            for i, v in enumerate(self.values):
                w.writerow([i, repr(float(v))])

    @classmethod
    def load_csv(cls, path, alpha: float, beta: float) -> "CoefficientField":
        idx, vals = [], []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                idx.append(int(row[0]))
                vals.append(float(row[1]))
        out = np.empty(len(vals))
        out[np.asarray(idx)] = vals
        return cls(out, alpha, beta)

    def save_binary(self, path) -> None:
        self.values.astype("<f8").tofile(path)

    @classmethod
    def load_binary(cls, path, alpha: float, beta: float) -> "CoefficientField":
        return cls(np.fromfile(path, dtype="<f8"), alpha, beta)


def constant_coefficient(m: MeshHierarchy, value: float = 1.0) -> CoefficientField:
    return CoefficientField(np.full(m.num_elements, float(value)), value, value)


def random_coefficient(
    m: MeshHierarchy, seed: int, eps_A: float, alpha: float, beta: float
) -> CoefficientField:
    """Piecewise constant on blocks of edge ``eps_A``, values uniform in ``[alpha, beta)``.

    Block values are drawn from ``numpy.random.default_rng(seed)`` (PCG64) in
    lexicographic block order, x fastest.
    """
    if alpha > beta:
        raise ConfigError("need alpha <= beta")
    nb = 1.0 / eps_A
    per_block = eps_A / m.h
    if abs(nb - round(nb)) > 1e-9 or abs(per_block - round(per_block)) > 1e-9 or round(per_block) < 1:
        raise ConfigError(f"block scale {eps_A} is not aligned with h={m.h}")
    nb, per_block = int(round(nb)), int(round(per_block))
    u = np.random.default_rng(seed).random(nb ** m.dim)
    block_vals = alpha + (beta - alpha) * u
    b = np.arange(m.n_fine) // per_block
    if m.dim == 1:
        blk = b
    else:
        by, bx = np.meshgrid(b, b, indexing="ij")
        blk = (bx + nb * by).ravel()
    vals = block_vals[blk]
    # alpha + (beta - alpha) * u can round up to beta for u close to 1.
    vals = np.clip(vals, alpha, beta)
    return CoefficientField(vals, alpha, beta, seed=seed, scale=eps_A)


# -- assembly ------------------------------------------------------------------

def _assemble(
    m: MeshHierarchy,
    region: ElementSet,
    ref: np.ndarray,
    weights: Optional[np.ndarray],
    nodes: Optional[np.ndarray] = None,
) -> sp.csr_matrix:
    d = m.dim
    if nodes is None:
        nodes = region.interior_nodes
    if nodes.size == 0:
        raise ConfigError("region has no interior nodes")
    elems = region.indices
    conn = m.element_nodes[elems]
    w = None if weights is None else weights[elems]

    # compact numbering of the region's closure nodes
    closure = np.unique(conn)
    cl_conn = np.searchsorted(closure, conn)
    n_off = 3 ** d
    vals = np.zeros((closure.size, n_off))
    loc = _local_offsets(d)
    nloc = loc.shape[0]
    for a in range(nloc):
        rows = cl_conn[:, a]
        for b in range(nloc):
            off = loc[b] - loc[a]
            o = int(off[0] + 1) if d == 1 else int(off[0] + 1 + 3 * (off[1] + 1))
            c = ref[a, b] if w is None else ref[a, b] * w
            vals[rows, o] += c

    # keep rows/cols at the requested nodes
    p = m.nodes_per_axis
    if d == 1:
        shifts = np.array([-1, 0, 1])
    else:
        shifts = np.array([dx + p * dy for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    g2l = np.full(m.num_nodes, -1, dtype=np.int64)
    g2l[nodes] = np.arange(nodes.size)
    row_cl = np.searchsorted(closure, nodes)
    if np.any(closure[np.minimum(row_cl, closure.size - 1)] != nodes):
        raise ConfigError("requested nodes are not covered by the region")
    cols_g = nodes[:, None] + shifts[None, :]
    inside = (cols_g >= 0) & (cols_g < m.num_nodes)
    cols_l = np.where(inside, g2l[np.clip(cols_g, 0, m.num_nodes - 1)], -1)
    keep = cols_l >= 0
    data = vals[row_cl][keep]
    indices = cols_l[keep]
    counts = keep.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return sp.csr_matrix((data, indices, indptr), shape=(nodes.size, nodes.size))


def assemble_mass(m: MeshHierarchy, region: Optional[ElementSet] = None) -> sp.csr_matrix:
    """Mass matrix over the interior nodes of ``region`` (default: whole domain)."""
    region = m.everything() if region is None else region
    return _assemble(m, region, element_mass(m.dim, m.h), None)


def assemble_stiffness(
    m: MeshHierarchy, A: CoefficientField, region: Optional[ElementSet] = None
) -> sp.csr_matrix:
    """Stiffness matrix ``(A grad u, grad v)`` over the interior nodes of ``region``."""
    region = m.everything() if region is None else region
    if A.values.shape != (m.num_elements,):
        raise ConfigError("coefficient does not match the mesh")
    vals = A.values[region.indices]
    if vals.min() < A.alpha or vals.max() > A.beta:
        raise ConfigError("coefficient outside its declared bounds")
    return _assemble(m, region, element_stiffness(m.dim, m.h), A.values)


def assemble_full(m: MeshHierarchy, A: Optional[CoefficientField] = None) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Unconstrained mass and stiffness over all nodes, boundary included."""
    allnodes = np.arange(m.num_nodes)
    region = m.everything()
    M = _assemble(m, region, element_mass(m.dim, m.h), None, nodes=allnodes)
    w = None if A is None else A.values
    S = _assemble(m, region, element_stiffness(m.dim, m.h), w, nodes=allnodes)
    return M, S


# -- interpolation and partition of unity --------------------------------------

def nodal_interpolate(
    m: MeshHierarchy, f: PointFunction, t: float = 0.0, zero_boundary: bool = True
) -> np.ndarray:
    """Values ``f(x_i, t)`` at all fine nodes; boundary entries zeroed for V_h members."""
    vals = np.asarray(f(m.coordinates, t), dtype=float)
    if vals.ndim == 0:
        vals = np.full(m.num_nodes, float(vals))
    vals = np.array(vals.reshape(m.num_nodes), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NumericalError("non-finite value while interpolating")
    if zero_boundary:
        vals[m.boundary_mask] = 0.0
    return vals


def _hat_1d(m: MeshHierarchy, j: int) -> np.ndarray:
    """Coarse hat at node ``j`` on the fine axis, boundary hats folded into the neighbours."""
    r, nc = m.ratio, m.n_coarse
    i = np.arange(m.n_fine + 1)
    phi = np.maximum(0.0, 1.0 - np.abs(i - j * r) / r)
    if j == 1:
        phi = phi + np.maximum(0.0, 1.0 - i / r)
    if j == nc - 1:
        phi = phi + np.maximum(0.0, 1.0 - np.abs(i - nc * r) / r)
    return phi


@dataclass
class PartitionOfUnity:
    """Coarse Q1 hats at interior coarse nodes, sampled at fine nodes.

    ``nodes[i]`` are the fine nodes in the closure of ``supports[i]`` and
    ``weights[i]`` the matching values of ``Lambda_i``.
    """

    mesh: MeshHierarchy
    supports: list
    nodes: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.supports)

    def weight_vector(self, i: int) -> np.ndarray:
        out = np.zeros(self.mesh.num_nodes)
        out[self.nodes[i]] = self.weights[i]
        return out

    def values_at(self, i: int, nodes: np.ndarray) -> np.ndarray:
        """``Lambda_i`` at the given global nodes (zero outside its support)."""
        pos = np.searchsorted(self.nodes[i], nodes)
        pos = np.minimum(pos, self.nodes[i].size - 1)
        hit = self.nodes[i][pos] == nodes
        return np.where(hit, self.weights[i][pos], 0.0)


def build_pou(m: MeshHierarchy) -> PartitionOfUnity:
    """Partition of unity from the coarse hats at interior coarse nodes.

    Hats of boundary coarse nodes are added to the nearest interior node,
    which keeps ``sum_i Lambda_i == 1`` at every fine node.
    """
    if m.n_coarse < 2:
        raise ConfigError("1/H must be at least 2 for an interior coarse node")
    supports = coarse_supports(m)
    hats = {j: _hat_1d(m, j) for j in range(1, m.n_coarse)}
    pou = PartitionOfUnity(m, supports)
    for jj, sup in zip(_interior_coarse_grid(m), supports):
        nodes = sup.closure_nodes
        g = m.node_grid_index[nodes]
        w = hats[jj[0]][g[:, 0]]
        if m.dim == 2:
            w = w * hats[jj[1]][g[:, 1]]
        pou.nodes.append(nodes)
        pou.weights.append(w)
    return pou


def localize(v: np.ndarray, pou: PartitionOfUnity, i: int) -> np.ndarray:
    """Nodal interpolant of ``Lambda_i * v``."""
    out = np.zeros_like(v, dtype=float)
    nodes = pou.nodes[i]
    out[nodes] = v[nodes] * pou.weights[i]
    return out


# -- norms -----------------------------------------------------------------------

def _element_quadratic(m: MeshHierarchy, ref: np.ndarray, v: np.ndarray) -> np.ndarray:
    vk = v[m.element_nodes]
    return np.einsum("ea,ab,eb->e", vk, ref, vk)


def element_l2_sq(m: MeshHierarchy, v: np.ndarray) -> np.ndarray:
    return _element_quadratic(m, element_mass(m.dim, m.h), v)


def element_a_sq(m: MeshHierarchy, A: CoefficientField, v: np.ndarray) -> np.ndarray:
    return A.values * _element_quadratic(m, element_stiffness(m.dim, m.h), v)


@dataclass
class NormWorkspace:
    """Discrete norms of full-length nodal vectors, optionally restricted to a region."""

    mesh: MeshHierarchy
    coeff: CoefficientField
    tau: float
    region: Optional[ElementSet] = None

    def restrict(self, region: Optional[ElementSet]) -> "NormWorkspace":
        return NormWorkspace(self.mesh, self.coeff, self.tau, region)

    def _check(self, *vs):
        for v in vs:
            if np.shape(v) != (self.mesh.num_nodes,):
                raise ConfigError(
                    f"expected a nodal vector of length {self.mesh.num_nodes}, got {np.shape(v)}"
                )

    def _sum(self, per_element: np.ndarray) -> float:
        if self.region is not None:
            per_element = per_element[self.region.indices]
        return float(np.sum(per_element))

    def l2_sq(self, v) -> float:
        self._check(v)
        return self._sum(element_l2_sq(self.mesh, v))

    def a_sq(self, v) -> float:
        self._check(v)
        return self._sum(element_a_sq(self.mesh, self.coeff, v))

    def triple_sq(self, v) -> float:
        return self.l2_sq(v) + 0.25 * self.tau ** 2 * self.a_sq(v)

    def l2(self, v) -> float:
        return np.sqrt(self.l2_sq(v))

    def a(self, v) -> float:
        return np.sqrt(self.a_sq(v))

    def triple(self, v) -> float:
        return np.sqrt(self.triple_sq(v))

    def energy(self, u_prev, u_curr) -> float:
        """``(||D_tau u||^2 + ||u^{n+1/2}||_a^2)^{1/2}`` for the pair ``(u^n, u^{n+1})``."""
        self._check(u_prev, u_curr)
        vel = (u_curr - u_prev) / self.tau
        mid = 0.5 * (u_curr + u_prev)
        return np.sqrt(self.l2_sq(vel) + self.a_sq(mid))

    def eh(self, u_prev, u_curr) -> float:
        self._check(u_prev, u_curr)
        vel = (u_curr - u_prev) / self.tau
        mid = 0.5 * (u_curr + u_prev)
        return np.sqrt(self.triple_sq(vel) + self.triple_sq(mid) / self.tau ** 2)

    def ht(self, snapshots, T: float) -> float:
        """``(sum_k T ||v^k||_a^2)^{1/2}`` over the given coarse-time snapshots."""
        return np.sqrt(sum(T * self.a_sq(v) for v in snapshots))


def norm(ws: NormWorkspace, kind: str, *args) -> float:
    """Dispatch by name: ``L2``, ``a``, ``triple``, ``energy``, ``Eh`` or ``hT``."""
    table = {
        "L2": ws.l2,
        "a": ws.a,
        "triple": ws.triple,
        "energy": ws.energy,
        "Eh": ws.eh,
        "hT": ws.ht,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ConfigError(f"unknown norm kind {kind!r}") from None
    return fn(*args)
