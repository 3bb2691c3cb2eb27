"""Data for the shipped experiments.

The manufactured solution is ``u = prod_k sin(pi x_k) * sin(pi t / 2)**2`` with
``A = 1``. It has ``u(0) = 0``, ``u_t(0) = 0`` and load
``f = prod_k sin(pi x_k) * (pi^2/2 cos(pi t) + d pi^2 sin(pi t/2)^2)``.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError


def _spatial(x: np.ndarray) -> np.ndarray:
    return np.prod(np.sin(np.pi * x), axis=1)


def manufactured_exact(x: np.ndarray, t: float) -> np.ndarray:
    return _spatial(x) * np.sin(0.5 * np.pi * t) ** 2


def _temporal_load(d: int, t: float) -> float:
    return 0.5 * np.pi ** 2 * np.cos(np.pi * t) + d * np.pi ** 2 * np.sin(0.5 * np.pi * t) ** 2


def manufactured_source(x: np.ndarray, t: float) -> np.ndarray:
    return _spatial(x) * _temporal_load(x.shape[1], t)


class ManufacturedSource:
    """Same as :func:`manufactured_source`, caching the spatial factor per coordinate array."""

    def __init__(self):
        self._x = None
        self._g = None

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        if x is not self._x:
            self._x, self._g = x, _spatial(x)
        return self._g * _temporal_load(x.shape[1], t)


class ManufacturedExact(ManufacturedSource):
    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        if x is not self._x:
            self._x, self._g = x, _spatial(x)
        return self._g * np.sin(0.5 * np.pi * t) ** 2


class NodalField:
    """Time-independent data given directly by nodal values."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=float)

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        if x.shape[0] != self.values.size:
            raise ConfigError(f"nodal data has {self.values.size} entries, mesh has {x.shape[0]} nodes")
        return self.values


def random_nodal(num_nodes: int, seed: int) -> NodalField:
    """Uniform values in ``[-1, 1]`` from a seeded PCG64 stream."""
    return NodalField(np.random.default_rng(seed).uniform(-1.0, 1.0, num_nodes))
