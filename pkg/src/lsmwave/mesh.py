"""Nested uniform tensor-product meshes on the unit square (or interval).

Numbering is lexicographic with x fastest: node ``(i_x, i_y)`` has index
``i_x + (n + 1) * i_y`` and element ``(e_x, e_y)`` has index ``e_x + n * e_y``
where ``n = 1/h`` is the number of fine cells per axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError


def _integer_ratio(num: float, den: float, what: str) -> int:
    q = num / den
    r = int(round(q))
    if r < 1 or abs(q - r) > 1e-9 * max(1.0, q):
        raise ConfigError(f"{what} must be a positive integer, got {q!r}")
    return r


@dataclass(frozen=True)
class MeshHierarchy:
    """Coarse mesh of edge ``H`` refined uniformly into a fine mesh of edge ``h``."""

    dim: int
    n_coarse: int
    n_fine: int

    @property
    def H(self) -> float:
        return 1.0 / self.n_coarse

    @property
    def h(self) -> float:
        return 1.0 / self.n_fine

    @property
    def ratio(self) -> int:
        return self.n_fine // self.n_coarse

    @property
    def nodes_per_axis(self) -> int:
        return self.n_fine + 1

    @property
    def num_nodes(self) -> int:
        return self.nodes_per_axis ** self.dim

    @property
    def num_elements(self) -> int:
        return self.n_fine ** self.dim

    @property
    def num_coarse_elements(self) -> int:
        return self.n_coarse ** self.dim

    @property
    def node_shape(self) -> tuple[int, ...]:
        """Shape of the node grid in C order, i.e. ``(ny, nx)`` in 2D."""
        return (self.nodes_per_axis,) * self.dim

    @property
    def element_shape(self) -> tuple[int, ...]:
        return (self.n_fine,) * self.dim

    @cached_property
    def node_grid_index(self) -> np.ndarray:
        """Integer grid coordinates ``(N, d)``, column 0 is x."""
        ax = np.arange(self.nodes_per_axis)
        if self.dim == 1:
            return ax[:, None]
        iy, ix = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([ix.ravel(), iy.ravel()])

    @cached_property
    def coordinates(self) -> np.ndarray:
        return self.node_grid_index * self.h

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        g = self.node_grid_index
        return np.any((g == 0) | (g == self.n_fine), axis=1)

    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """Connectivity ``(E, 2**d)``; local node ``a = a_x + 2 a_y``."""
        n, p = self.n_fine, self.nodes_per_axis
        e = np.arange(n)
        if self.dim == 1:
            return np.column_stack([e, e + 1])
        ey, ex = np.meshgrid(e, e, indexing="ij")
        base = (ex + p * ey).ravel()
        return np.column_stack([base, base + 1, base + p, base + p + 1])

    @cached_property
    def element_coarse(self) -> np.ndarray:
        """Index of the coarse element containing each fine element."""
        n, r, nc = self.n_fine, self.ratio, self.n_coarse
        e = np.arange(n) // r
        if self.dim == 1:
            return e
        cy, cx = np.meshgrid(e, e, indexing="ij")
        return (cx + nc * cy).ravel()

    def everything(self) -> "ElementSet":
        return ElementSet(self, np.arange(self.num_elements))


def build_hierarchy(d: int, H: float, h: float) -> MeshHierarchy:
    """Build the coarse/fine pair on ``(0, 1)^d``.

    ``H/h`` and ``1/H`` must be integers; anything else raises
    :class:`ConfigError`.
    """
    if d not in (1, 2):
        raise ConfigError(f"only d in {{1, 2}} is supported, got d={d}")
    if not (0 < h <= H < 1):
        raise ConfigError(f"need 0 < h <= H < 1, got h={h}, H={H}")
    n_coarse = _integer_ratio(1.0, H, "1/H")
    ratio = _integer_ratio(H, h, "H/h")
    return MeshHierarchy(dim=d, n_coarse=n_coarse, n_fine=n_coarse * ratio)


class ElementSet:
    """A set of fine elements, stored sorted and without duplicates."""

    __slots__ = ("mesh", "indices", "_mask", "_interior")

    def __init__(self, mesh: MeshHierarchy, indices: Sequence[int] | np.ndarray):
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= mesh.num_elements):
            raise ConfigError("element index out of range")
        self.mesh = mesh
        self.indices = idx
        self._mask = None
        self._interior = None

    @classmethod
    def from_mask(cls, mesh: MeshHierarchy, mask: np.ndarray) -> "ElementSet":
        return cls(mesh, np.flatnonzero(np.asarray(mask).ravel()))

    def __len__(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ElementSet)
            and other.mesh == self.mesh
            and np.array_equal(other.indices, self.indices)
        )

    def __repr__(self) -> str:
        return f"ElementSet({len(self)} of {self.mesh.num_elements} elements)"

    @property
    def mask(self) -> np.ndarray:
        """Boolean mask on the element grid, shape ``mesh.element_shape``."""
        if self._mask is None:
            m = np.zeros(self.mesh.num_elements, dtype=bool)
            m[self.indices] = True
            self._mask = m.reshape(self.mesh.element_shape)
        return self._mask

    def is_everything(self) -> bool:
        return len(self) == self.mesh.num_elements

    @property
    def interior_nodes(self) -> np.ndarray:
        """Sorted global indices of nodes strictly inside the set and off the domain boundary."""
        if self._interior is None:
            m = self.mask
            if self.mesh.dim == 1:
                inner = m[:-1] & m[1:]
                self._interior = np.flatnonzero(inner) + 1
            else:
                inner = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]
                iy, ix = np.nonzero(inner)
                self._interior = (ix + 1) + self.mesh.nodes_per_axis * (iy + 1)
            self._interior = np.asarray(self._interior, dtype=np.int64)
        return self._interior

    @property
    def closure_nodes(self) -> np.ndarray:
        return np.unique(self.mesh.element_nodes[self.indices])

    def union(self, other: "ElementSet") -> "ElementSet":
        return ElementSet(self.mesh, np.concatenate([self.indices, other.indices]))

    def difference(self, other: "ElementSet") -> "ElementSet":
        return ElementSet(self.mesh, np.setdiff1d(self.indices, other.indices))

    def complement(self) -> "ElementSet":
        return ElementSet.from_mask(self.mesh, ~self.mask)


def coarse_supports(m: MeshHierarchy) -> list[ElementSet]:
    """Supports of the coarse hat functions at interior coarse nodes.

    Ordered lexicographically over coarse nodes (x fastest). Each support is
    the union of the ``2**d`` coarse cells touching the node.
    """
    r = m.ratio
    out = []
    fine_axis = np.arange(m.n_fine)
    for j in _interior_coarse_grid(m):
        masks = [(fine_axis >= (jj - 1) * r) & (fine_axis < (jj + 1) * r) for jj in j]
        if m.dim == 1:
            mask = masks[0]
        else:
            mask = masks[1][:, None] & masks[0][None, :]
        out.append(ElementSet.from_mask(m, mask))
    if not out:
        raise ConfigError(f"no interior coarse node for H={m.H}")
    return out


def _interior_coarse_grid(m: MeshHierarchy) -> list[tuple[int, ...]]:
    """Coarse interior node grid coordinates ``(j_x[, j_y])``, x fastest."""
    ax = range(1, m.n_coarse)
    if m.dim == 1:
        return [(j,) for j in ax]
    return [(jx, jy) for jy in ax for jx in ax]


def extend_patch(m: MeshHierarchy, omega: ElementSet, ell: int) -> ElementSet:
    """Grow ``omega`` by ``ell`` layers of vertex-adjacent elements."""
    if ell < 0:
        raise ConfigError("layer count must be nonnegative")
    if len(omega) == 0:
        raise ConfigError("cannot extend an empty element set")
    if ell == 0 or omega.is_everything():
        return omega
    mask = omega.mask
    # Chebyshev growth saturates after n_fine layers; avoid useless iterations.
    steps = min(ell, m.n_fine)
    grown = ndimage.binary_dilation(mask, structure=np.ones((3,) * m.dim, dtype=bool), iterations=steps)
    return ElementSet.from_mask(m, grown)


def element_rings(m: MeshHierarchy, omega: ElementSet, ell_max: int) -> np.ndarray:
    """Layer number of every element relative to ``omega``.

    Entry ``k`` means the element lies in ``N_k(omega) \\ N_{k-1}(omega)``;
    elements beyond ``ell_max`` layers get ``ell_max + 1``.
    """
    # Chebyshev distance transform on the element grid gives the ring index directly.
    if len(omega) == 0:
        raise ConfigError("empty element set")
    dist = ndimage.distance_transform_cdt(~omega.mask, metric="chessboard")
    return np.minimum(dist, ell_max + 1).ravel()
