"""Plane-wave Bloch solver, band grids and crossing analysis.

States are stored as coefficient vectors over an ordered :class:`DualSet`,
so that Psi_m(z, p) = sum_mu c_mu exp(i (p + mu) . z) with
sum_mu |c_mu|^2 = 1, i.e. (1/|C|) int_C |Psi|^2 = 1.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import (
    AmbiguousOrder,
    ConfigError,
    CutoffTooSmall,
    EigSolveFailure,
    GridSolveError,
    MissingDual,
    MomentumMismatch,
    RefineStall,
)
from .lattice import (
    DualSet,
    FourierPotential,
    Lattice,
    cutoff_for_count,
    decompose_momentum,
    enumerate_dual,
)

DEGENERACY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class BlochState:
    p: np.ndarray
    band: int
    energy: float
    coefficients: np.ndarray
    duals: DualSet
    gauge_fixed: bool = True

    def evaluate(self, z) -> np.ndarray:
        """Psi(z) for points of shape (..., d)."""
        z = np.asarray(z, dtype=float)
        phases = np.exp(1j * (z @ (self.p + self.duals.vectors).T))
        return phases @ self.coefficients

    def with_phase(self, phase: complex) -> "BlochState":
        return BlochState(self.p, self.band, self.energy, self.coefficients * phase, self.duals, False)


@dataclass(frozen=True)
class CrossingDescriptor:
    point: np.ndarray
    order: int
    slope: float
    residual: float
    alternative_residual: float


@lru_cache(maxsize=64)
def dual_set(lat: Lattice, cutoff: float) -> DualSet:
    return enumerate_dual(lat, cutoff)


def default_cutoff(lat: Lattice) -> float:
    return cutoff_for_count(lat, 81 if lat.dimension == 2 else 33)


def assemble_hamiltonian(p, pot: FourierPotential, duals: DualSet) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if not np.all(np.isfinite(p)):
        raise MissingDual("quasimomentum contains NaN or inf")
    if len(duals) == 0:
        raise ConfigError("empty dual set")
    shifted = p + duals.vectors
    ham = np.diag(0.5 * np.einsum("ij,ij->i", shifted, shifted)).astype(complex)
    rows = np.arange(len(duals))
    for key, value in pot.support():
        # H[mu, nu] = V(mu - nu): column index of nu = mu - key
        cols = duals.shifted(-np.asarray(key))
        ok = cols >= 0
        ham[rows[ok], cols[ok]] += value
    return ham


def gauge_fix(coefficients: np.ndarray) -> np.ndarray:
    """Rotate the global phase so the largest coefficient is real positive.

    Ties (within 1e-12) go to the earliest entry in dual ordering.
    """
    mags = np.abs(coefficients)
    pivot = int(np.argmax(mags >= mags.max() - 1e-12))
    value = coefficients[pivot]
    return coefficients * (np.conj(value) / abs(value))


def _eig(ham: np.ndarray, n_bands: int):
    try:
        return scipy.linalg.eigh(ham, subset_by_index=[0, n_bands - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigSolveFailure(str(exc)) from exc


def solve_bands(
    p,
    pot: FourierPotential,
    cutoff: float | None = None,
    n_bands: int = 2,
    validate: bool = False,
    validation_tol: float = 1e-8,
) -> list[BlochState]:
    lat = pot.lattice
    cutoff = default_cutoff(lat) if cutoff is None else float(cutoff)
    duals = dual_set(lat, cutoff)
    if n_bands > len(duals):
        raise ConfigError(f"n_bands={n_bands} exceeds basis size {len(duals)}")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    energies, vectors = _eig(assemble_hamiltonian(p, pot, duals), n_bands)
    if validate:
        norms = np.linalg.norm(duals.vectors, axis=1)
        larger = norms[norms > norms.max() * (1 + 1e-9)]
        bigger_cutoff = float(np.min(np.linalg.norm(lat.dual, axis=1))) + norms.max() if larger.size == 0 else larger.min()
        wide = dual_set(lat, bigger_cutoff * (1 + 1e-9))
        wide_energies, _ = _eig(assemble_hamiltonian(p, pot, wide), n_bands)
        shift = abs(wide_energies[-1] - energies[-1])
        if shift > validation_tol:
            raise CutoffTooSmall(f"top eigenvalue moved by {shift:.3e} on enlarging the cutoff")
    return [
        BlochState(p.copy(), m + 1, float(energies[m]), gauge_fix(vectors[:, m]), duals)
        for m in range(n_bands)
    ]


def shifted_state(state: BlochState, k) -> BlochState:
    """The same Bloch function labelled by the quasimomentum k = p + lambda.

    Psi(z, k) = Psi(z, p) for lambda in the dual lattice; the plane-wave
    coefficients are relabelled c'_nu = c_{nu + lambda}.  Coefficients that
    fall outside the truncation are dropped.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    lat = state.duals.lattice
    shift = lat.dual_coordinates(k - state.p)
    coeff = np.rint(shift)
    if np.max(np.abs(shift - coeff)) > 1e-9:
        raise MomentumMismatch("k - p is not a dual lattice vector")
    idx = state.duals.shifted(coeff.astype(np.int64))
    values = np.where(idx >= 0, state.coefficients[np.clip(idx, 0, None)], 0.0)
    return BlochState(k, state.band, state.energy, values, state.duals, state.gauge_fixed)


# band grids ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BandStructure:
    lattice: Lattice
    potential: FourierPotential
    cutoff: float
    grid_shape: tuple[int, ...]
    points: np.ndarray  # (N, d)
    energies: np.ndarray  # (N, M)
    states: tuple  # N tuples of tracked BlochStates

    def gap(self, pair=(1, 2)) -> np.ndarray:
        return self.energies[:, pair[1] - 1] - self.energies[:, pair[0] - 1]

    def node_index(self, idx: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(idx), self.grid_shape))

    def potential_hash(self) -> str:
        blob = json.dumps(self.potential.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def write_csv(self, path) -> None:
        d = self.lattice.dimension
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow([f"p{i + 1}" for i in range(d)] + [f"E{m + 1}" for m in range(self.energies.shape[1])])
            for point, row in zip(self.points, self.energies):
                writer.writerow([f"{x:.17g}" for x in point] + [f"{e:.17g}" for e in row])

    def metadata(self) -> dict:
        return {
            "cutoff": self.cutoff,
            "grid": list(self.grid_shape),
            "n_bands": int(self.energies.shape[1]),
            "lattice": self.lattice.to_dict(),
            "potential_hash": self.potential_hash(),
        }


def grid_points(lat: Lattice, grid_shape: Sequence[int]) -> np.ndarray:
    axes = [np.arange(n) / n for n in grid_shape]
    theta = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(grid_shape))
    return theta @ lat.dual


def band_grid(
    lat: Lattice,
    pot: FourierPotential,
    grid_spec: Sequence[int],
    cutoff: float | None = None,
    n_bands: int = 2,
    tracked: int = 2,
    workers: int = 1,
) -> BandStructure:
    grid_shape = tuple(int(n) for n in np.atleast_1d(grid_spec))
    if len(grid_shape) != lat.dimension or min(grid_shape) < 2:
        raise ConfigError("grid_spec needs one count >= 2 per axis")
    cutoff = default_cutoff(lat) if cutoff is None else float(cutoff)
    points = grid_points(lat, grid_shape)
    n_solve = max(n_bands, tracked)

    def solve(i: int):
        try:
            return solve_bands(points[i], pot, cutoff, n_solve)
        except Exception as exc:  # attach the node, keep the original type visible
            node = tuple(int(x) for x in np.unravel_index(i, grid_shape))
            raise GridSolveError(f"solve failed at node {node}: {exc}", node) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, range(len(points))))
    else:
        results = [solve(i) for i in range(len(points))]
    energies = np.array([[s.energy for s in states[:n_bands]] for states in results])
    tracked_states = tuple(tuple(states[:tracked]) for states in results)
    return BandStructure(lat, pot, cutoff, grid_shape, points, energies, tracked_states)


# crossings -------------------------------------------------------------------


def _gap_function(bs: BandStructure, pair) -> Callable[[np.ndarray], float]:
    lat = bs.lattice

    def gap(theta):
        p = np.asarray(theta, dtype=float) @ lat.dual
        states = solve_bands(p, bs.potential, bs.cutoff, max(pair))
        return states[pair[1] - 1].energy - states[pair[0] - 1].energy

    return gap


def _grid_local_minima(values: np.ndarray) -> np.ndarray:
    d = values.ndim
    is_min = np.ones(values.shape, dtype=bool)
    offsets = np.stack(np.meshgrid(*[[-1, 0, 1]] * d, indexing="ij"), -1).reshape(-1, d)
    for off in offsets:
        if not off.any():
            continue
        neighbour = np.roll(values, shift=tuple(off), axis=tuple(range(d)))
        is_min &= values <= neighbour
    return np.argwhere(is_min)


def find_crossings(
    bs: BandStructure,
    pair=(1, 2),
    gap_tol: float = 0.05,
    target_gap: float = 1e-8,
    max_iter: int = 4000,
) -> list[np.ndarray]:
    """Grid local minima of the gap below ``gap_tol``, refined by Nelder-Mead."""
    lat = bs.lattice
    gaps = bs.gap(pair).reshape(bs.grid_shape)
    spacing = 1.0 / np.array(bs.grid_shape, dtype=float)
    gap = _gap_function(bs, pair)
    found: list[np.ndarray] = []
    for idx in _grid_local_minima(gaps):
        if gaps[tuple(idx)] >= gap_tol:
            continue
        start = idx * spacing
        best_theta, best_gap = start, gaps[tuple(idx)]
        if best_gap > target_gap:
            simplex = [start] + [start + 0.5 * spacing[i] * np.eye(lat.dimension)[i] for i in range(lat.dimension)]
            res = scipy.optimize.minimize(
                gap,
                start,
                method="Nelder-Mead",
                options={
                    "initial_simplex": np.array(simplex),
                    "xatol": 1e-13,
                    "fatol": target_gap * 1e-3,
                    "maxiter": max_iter,
                    "maxfev": 2 * max_iter,
                },
            )
            if res.fun < best_gap:
                best_theta, best_gap = res.x, float(res.fun)
        if best_gap > 1e-6:
            raise RefineStall(f"crossing refinement stalled at gap {best_gap:.3e}", best_gap)
        point = decompose_momentum(np.asarray(best_theta) @ lat.dual, lat).p
        if not any(_same_point(point, other, lat) for other in found):
            found.append(point)
    return found


def _same_point(a, b, lat: Lattice, tol: float = 1e-5) -> bool:
    delta = lat.dual_coordinates(a - b)
    return bool(np.max(np.abs(delta - np.rint(delta))) < tol)


def fit_power_law(rho: np.ndarray, half_gap: np.ndarray) -> tuple[int, float, float, float]:
    """Least-squares fit of half_gap ~ slope * rho**r for r in {1, 2}.

    Returns ``(r, slope, residual, other_residual)`` with relative residuals.
    """
    rho = np.asarray(rho, dtype=float)
    half_gap = np.asarray(half_gap, dtype=float)
    scale = np.linalg.norm(half_gap)
    fits = {}
    for r in (1, 2):
        basis = rho**r
        slope = float(basis @ half_gap / (basis @ basis))
        fits[r] = (slope, float(np.linalg.norm(half_gap - slope * basis) / scale))
    best = min(fits, key=lambda r: fits[r][1])
    other = 3 - best
    res_best, res_other = fits[best][1], fits[other][1]
    if res_other > 0 and res_best >= 0.9 * res_other:
        raise AmbiguousOrder(f"r=1 residual {fits[1][1]:.3e} and r=2 residual {fits[2][1]:.3e} are within 10%")
    return best, fits[best][0], res_best, res_other


def ring_samples(point, radius: float, dimension: int, n_rings: int = 4, n_angles: int = 8) -> tuple[np.ndarray, np.ndarray]:
    radii = radius * np.arange(1, n_rings + 1) / n_rings
    if dimension == 1:
        offsets = np.concatenate([radii, -radii])[:, None]
        rho = np.concatenate([radii, radii])
    else:
        angles = 2 * np.pi * np.arange(n_angles) / n_angles
        rr, aa = np.meshgrid(radii, angles, indexing="ij")
        offsets = np.stack([rr * np.cos(aa), rr * np.sin(aa)], -1).reshape(-1, 2)
        rho = rr.ravel()
    return np.asarray(point) + offsets, rho


def fit_crossing(bs: BandStructure, point, radius: float, pair=(1, 2), n_rings: int = 4) -> CrossingDescriptor:
    samples, rho = ring_samples(point, radius, bs.lattice.dimension, n_rings)
    half = []
    for p in samples:
        states = solve_bands(p, bs.potential, bs.cutoff, max(pair))
        half.append(0.5 * (states[pair[1] - 1].energy - states[pair[0] - 1].energy))
    order, slope, residual, other = fit_power_law(rho, np.array(half))
    return CrossingDescriptor(np.asarray(point, dtype=float), order, slope, residual, other)


def bands_at_points(
    pot: FourierPotential,
    points,
    cutoff: float | None = None,
    n_bands: int = 2,
    workers: int = 1,
) -> BandStructure:
    """Band data on an arbitrary list of quasimomenta (transport p-grids, rings)."""
    lat = pot.lattice
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != lat.dimension:
        points = points.reshape(-1, lat.dimension)
    cutoff = default_cutoff(lat) if cutoff is None else float(cutoff)

    def solve(i: int):
        try:
            return solve_bands(points[i], pot, cutoff, n_bands)
        except Exception as exc:
            raise GridSolveError(f"solve failed at point {i}: {exc}", (i,)) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, range(len(points))))
    else:
        results = [solve(i) for i in range(len(points))]
    energies = np.array([[s.energy for s in states] for states in results])
    return BandStructure(lat, pot, cutoff, (len(points),), points, energies, tuple(tuple(r) for r in results))
