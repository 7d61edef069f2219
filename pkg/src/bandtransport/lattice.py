"""Lattice geometry, dual-vector enumeration and potential presets.

Direct basis vectors are stored as the rows of ``basis``; the dual basis
rows satisfy ``basis @ dual.T == 2*pi*I``.  The Brillouin zone is the
half-open coefficient box {sum_l theta_l e^l : theta_l in [0, 1)}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, CutoffTooLarge, SingularBasis

TWO_PI = 2.0 * np.pi
DEFAULT_DUAL_LIMIT = 100_000


@dataclass(frozen=True, eq=False)
class Lattice:
    basis: np.ndarray
    dual: np.ndarray
    cell_volume: float
    bz_volume: float

    @property
    def dimension(self) -> int:
        return self.basis.shape[0]

    def to_cartesian(self, coefficients) -> np.ndarray:
        """Dual coefficients (..., d) to cartesian momenta."""
        return np.asarray(coefficients, dtype=float) @ self.dual

    def dual_coordinates(self, k) -> np.ndarray:
        """Cartesian momenta (..., d) to fractional dual coordinates."""
        return np.asarray(k, dtype=float) @ self.basis.T / TWO_PI

    def to_dict(self) -> dict:
        return {"basis": self.basis.tolist()}


@dataclass(frozen=True, eq=False)
class DualVector:
    coefficients: tuple[int, ...]
    value: np.ndarray


@dataclass(frozen=True, eq=False)
class MomentumDecomposition:
    p: np.ndarray
    mu: DualVector


@dataclass(frozen=True, eq=False)
class DualSet:
    """Ordered finite set of dual vectors with O(1) coefficient lookup."""

    lattice: Lattice
    coefficients: np.ndarray  # (n, d) int
    vectors: np.ndarray  # (n, d) float
    index: Mapping[tuple, int] = field(repr=False)
    cutoff: float = float("nan")

    def __len__(self) -> int:
        return self.coefficients.shape[0]

    def __iter__(self):
        for c, v in zip(self.coefficients, self.vectors):
            yield DualVector(tuple(int(x) for x in c), v)

    def lookup(self, coefficients) -> np.ndarray:
        """Indices of the given coefficient rows, -1 where absent."""
        rows = np.atleast_2d(np.asarray(coefficients, dtype=np.int64))
        return np.array([self.index.get(tuple(r), -1) for r in rows.tolist()], dtype=np.int64)

    def shifted(self, shift) -> np.ndarray:
        """For each member nu, the index of nu + shift (or -1)."""
        return self.lookup(self.coefficients + np.asarray(shift, dtype=np.int64))


def make_lattice(basis) -> Lattice:
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    d = basis.shape[0]
    if d not in (1, 2) or basis.shape != (d, d):
        raise ConfigError(f"basis must be d x d with d in (1, 2), got shape {basis.shape}")
    if not np.all(np.isfinite(basis)):
        raise SingularBasis("basis contains non-finite entries")
    det = float(np.linalg.det(basis))
    if abs(det) < 1e-12:
        raise SingularBasis(f"basis determinant {det:.3e} is numerically zero")
    dual = TWO_PI * np.linalg.inv(basis).T
    cell = abs(det)
    return Lattice(basis=basis, dual=dual, cell_volume=cell, bz_volume=TWO_PI**d / cell)


def dual_vector(lat: Lattice, coefficients) -> DualVector:
    coeffs = tuple(int(c) for c in np.atleast_1d(coefficients))
    return DualVector(coeffs, lat.to_cartesian(coeffs))


def decompose_momentum(k, lat: Lattice) -> MomentumDecomposition:
    k = np.atleast_1d(np.asarray(k, dtype=float))
    theta = lat.dual_coordinates(k)
    m = np.floor(theta)
    # rounding can push theta - floor(theta) to exactly 1.0
    m = np.where(theta - m >= 1.0, m + 1, m)
    mu = m @ lat.dual
    coeffs = tuple(int(c) for c in m)
    return MomentumDecomposition(p=k - mu, mu=DualVector(coeffs, mu))


def in_zone(p, lat: Lattice, tol: float = 1e-12) -> bool:
    theta = lat.dual_coordinates(p)
    return bool(np.all(theta >= -tol) and np.all(theta < 1.0))


def enumerate_dual(lat: Lattice, cutoff: float, limit: int = DEFAULT_DUAL_LIMIT) -> DualSet:
    if not cutoff > 0:
        raise ConfigError("cutoff must be positive")
    d = lat.dimension
    ball = math.pi ** (d / 2) / math.gamma(d / 2 + 1) * cutoff**d
    if ball / lat.bz_volume > limit:
        raise CutoffTooLarge(f"about {ball / lat.bz_volume:.0f} duals within cutoff {cutoff} exceed limit {limit}")
    bounds = [int(np.floor(cutoff * np.linalg.norm(lat.basis[l]) / TWO_PI)) + 1 for l in range(d)]
    axes = [np.arange(-b, b + 1) for b in bounds]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    vectors = grid @ lat.dual
    norms = np.linalg.norm(vectors, axis=1)
    keep = norms <= cutoff * (1 + 1e-12)
    grid, vectors, norms = grid[keep], vectors[keep], norms[keep]
    if grid.shape[0] > limit:
        raise CutoffTooLarge(f"{grid.shape[0]} duals within cutoff {cutoff} exceed limit {limit}")
    keys = [np.round(norms, 9)] + [grid[:, l] for l in range(d)]
    order = np.lexsort(keys[::-1])
    grid, vectors = grid[order], vectors[order]
    index = {tuple(int(c) for c in row): i for i, row in enumerate(grid.tolist())}
    return DualSet(lattice=lat, coefficients=grid.astype(np.int64), vectors=vectors, index=index, cutoff=float(cutoff))


def cutoff_for_count(lat: Lattice, count: int) -> float:
    """Smallest cutoff whose dual ball holds at least ``count`` vectors."""
    radius = max(np.linalg.norm(lat.dual, axis=1))
    while True:
        duals = enumerate_dual(lat, radius * 4)
        norms = np.linalg.norm(duals.vectors, axis=1)
        if len(norms) >= count:
            return float(norms[count - 1]) * (1 + 1e-9)
        radius *= 2


@dataclass(frozen=True, eq=False)
class FourierPotential:
    """Real periodic potential given by finitely many Fourier coefficients."""

    lattice: Lattice
    coefficients: Mapping[tuple, complex]

    def __post_init__(self):
        for key, value in self.coefficients.items():
            partner = tuple(-c for c in key)
            if abs(self.coefficients.get(partner, 0.0) - np.conj(value)) > 1e-12:
                raise ConfigError(f"potential is not real: V({key}) and V({partner}) are not conjugate")
            if not np.isfinite(value):
                raise ConfigError(f"non-finite potential coefficient at {key}")

    def support(self) -> list[tuple[tuple, complex]]:
        return [(k, complex(v)) for k, v in sorted(self.coefficients.items()) if v != 0]

    def __call__(self, mu_coefficients) -> complex:
        return complex(self.coefficients.get(tuple(int(c) for c in mu_coefficients), 0.0))

    def evaluate(self, z) -> np.ndarray:
        """Real-space values V(z) for points z of shape (..., d)."""
        z = np.asarray(z, dtype=float)
        total = np.zeros(z.shape[:-1], dtype=complex)
        for key, value in self.support():
            mu = self.lattice.to_cartesian(key)
            total += value * np.exp(1j * (z @ mu))
        return total.real

    def to_dict(self) -> dict:
        return {
            "coefficients": [
                {"mu": list(k), "re": float(np.real(v)), "im": float(np.imag(v))} for k, v in self.support()
            ]
        }


def potential_from_items(lat: Lattice, items: Iterable[tuple[Iterable[int], complex]]) -> FourierPotential:
    return FourierPotential(lat, {tuple(int(c) for c in k): complex(v) for k, v in items})


# presets ---------------------------------------------------------------------


def chain_lattice() -> Lattice:
    """1D lattice 2*pi*Z, so the dual lattice is Z and |B| = 1."""
    return make_lattice([[TWO_PI]])


def square_lattice(spacing: float = 1.0) -> Lattice:
    return make_lattice(spacing * np.eye(2))


def triangular_lattice(spacing: float = TWO_PI) -> Lattice:
    return make_lattice(spacing * np.array([[1.0, 0.0], [-0.5, np.sqrt(3.0) / 2]]))


def free_preset(lat: Lattice) -> FourierPotential:
    return FourierPotential(lat, {})


def cosine_preset(strength: float = 1.0) -> tuple[Lattice, FourierPotential]:
    """V(z) = 2*strength*cos(z) on 2*pi*Z."""
    lat = chain_lattice()
    return lat, potential_from_items(lat, [((1,), strength), ((-1,), strength)])


def crossing_preset(strength: float = 0.1) -> tuple[Lattice, FourierPotential]:
    """V(z) = 2*strength*cos(2z) on 2*pi*Z.

    Only even dual shifts couple, so the even and odd plane-wave families
    never mix and the two lowest folded bands cross exactly at p = 1/2.
    """
    lat = chain_lattice()
    return lat, potential_from_items(lat, [((2,), strength), ((-2,), strength)])


def honeycomb_preset(strength: float, spacing: float = TWO_PI):
    """Triangular lattice with a first-star honeycomb-symmetric potential.

    Returns ``(lattice, potential, K, K_prime)`` with K = (e^1 + e^2)/3 and
    K' the image of -K in the Brillouin zone.  A positive strength puts the
    Dirac degeneracy between bands 1 and 2.
    """
    if strength == 0:
        raise ConfigError("honeycomb strength must be nonzero")
    lat = triangular_lattice(spacing)
    star = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)]
    pot = potential_from_items(lat, [(mu, strength) for mu in star])
    k_point = (lat.dual[0] + lat.dual[1]) / 3.0
    k_prime = decompose_momentum(-k_point, lat).p
    return lat, pot, k_point, k_prime
