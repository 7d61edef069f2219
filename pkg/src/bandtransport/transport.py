"""Coherence-matrix transport: deterministic, random, reduced and valley systems.

sigma is stored as an array of shape (P, *x_shape, 2, 2): one 2x2 matrix per
quasimomentum node and spatial node.  The deterministic system reads

    d_t sigma + sum_i d_{x_i} sigma . D_i^T = (i/eps) [E_l - E_j] sigma_jl,

with D[l, n, i] = <(-i d_i) Psi_l, Psi_n>.  Steppers use Strang splitting
with the stiff rotation applied analytically.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .bloch import BandStructure, CrossingDescriptor
from .coupling import coupling_D
from .errors import (
    CflViolation,
    CollisionBlowup,
    ConfigError,
    NonHermitianDrift,
    RegimeViolation,
    ShellTooNarrow,
)
from .lattice import Lattice, enumerate_dual

CFL_LIMIT = 0.9
HERMITIAN_STRICT_TOL = 1e-6
R_HAT_FLOOR = 1e-14


# fields ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoherenceField:
    sigma: np.ndarray  # (P, *x_shape, 2, 2)
    x_lengths: tuple[float, ...]
    p_points: np.ndarray  # (P, d)
    p_weights: np.ndarray  # (P,)
    eps: float
    t: float = 0.0
    tilde: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.sigma.shape[0] != self.p_points.shape[0] or self.sigma.shape[-2:] != (2, 2):
            raise ConfigError("sigma must have shape (P, *x_shape, 2, 2)")
        if len(self.x_lengths) != self.sigma.ndim - 3:
            raise ConfigError("one box length per spatial axis required")

    @property
    def x_shape(self) -> tuple[int, ...]:
        return self.sigma.shape[1:-2]

    @property
    def dx(self) -> np.ndarray:
        return np.array(self.x_lengths) / np.array(self.x_shape)

    def x_axes(self) -> list[np.ndarray]:
        return [np.arange(n) * h for n, h in zip(self.x_shape, self.dx)]

    def cell_volume(self) -> float:
        return float(np.prod(self.dx))

    def evolve(self, sigma: np.ndarray, dt: float) -> "CoherenceField":
        return replace(self, sigma=sigma, t=self.t + dt)

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.sigma - np.conj(np.swapaxes(self.sigma, -1, -2)))))

    def band_mass(self) -> np.ndarray:
        """(P, 2) integrals over x of the diagonal entries."""
        diag = np.diagonal(self.sigma, axis1=-2, axis2=-1)
        return diag.reshape(diag.shape[0], -1, 2).sum(axis=1) * self.cell_volume()

    def total_density(self) -> complex:
        """sum_p w_p int (sigma_11 + sigma_22) dx."""
        return complex(self.p_weights @ self.band_mass().sum(axis=1))

    def write_csv(self, path) -> None:
        grids = np.meshgrid(*self.x_axes(), indexing="ij")
        flat_x = np.stack([g.ravel() for g in grids], -1)
        d = self.p_points.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            head = [f"x{i + 1}" for i in range(flat_x.shape[1])] + [f"p{i + 1}" for i in range(d)]
            for j in range(2):
                for l in range(2):
                    head += [f"re_s{j + 1}{l + 1}", f"im_s{j + 1}{l + 1}"]
            writer.writerow(head)
            for ip, p in enumerate(self.p_points):
                block = self.sigma[ip].reshape(-1, 2, 2)
                for ix, x in enumerate(flat_x):
                    row = [f"{v:.17g}" for v in x] + [f"{v:.17g}" for v in p]
                    for j in range(2):
                        for l in range(2):
                            s = block[ix, j, l]
                            row += [f"{s.real:.17g}", f"{s.imag:.17g}"]
                    writer.writerow(row)


def make_field(sigma0: Callable, x_shape, x_lengths, p_points, p_weights=None, eps: float = 0.01) -> CoherenceField:
    """Sample sigma0(x, p_index) -> (..., 2, 2) on the grid."""
    x_shape = tuple(int(n) for n in x_shape)
    x_lengths = tuple(float(v) for v in x_lengths)
    axes = [np.arange(n) * (length / n) for n, length in zip(x_shape, x_lengths)]
    x = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    p_points = np.atleast_2d(np.asarray(p_points, dtype=float))
    P = p_points.shape[0]
    sigma = np.stack([np.asarray(sigma0(x, i), dtype=complex) for i in range(P)])
    weights = np.full(P, 1.0 / P) if p_weights is None else np.asarray(p_weights, dtype=float)
    return CoherenceField(sigma, x_lengths, p_points, weights, eps)


# band coefficients on the p nodes -------------------------------------------


@dataclass(frozen=True, eq=False)
class NodeCoefficients:
    energies: np.ndarray  # (P, 2)
    D: np.ndarray  # (P, 2, 2, d)
    speeds: np.ndarray  # (d, P, 2) eigenvalues of D_i^T
    modes: np.ndarray  # (d, P, 2, 2) eigenvectors of D_i^T


@lru_cache(maxsize=32)
def node_coefficients(bands: BandStructure) -> NodeCoefficients:
    energies = bands.energies[:, :2]
    D = np.stack([coupling_D(states[:2]) for states in bands.states])
    d = D.shape[-1]
    speeds = np.empty((d, D.shape[0], 2))
    modes = np.empty((d, D.shape[0], 2, 2), dtype=complex)
    for i in range(d):
        A = np.swapaxes(D[..., i], -1, -2)
        A = 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))
        speeds[i], modes[i] = np.linalg.eigh(A)
    return NodeCoefficients(energies, D, speeds, modes)


# advection -------------------------------------------------------------------


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def _complex_minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _minmod(a.real, b.real) + 1j * _minmod(a.imag, b.imag)


def _muscl_rhs(u: np.ndarray, speed: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """-d_x (speed * u) with minmod-limited upwind fluxes on a periodic axis.

    ``speed`` broadcasts against ``u``.
    """
    fwd = np.roll(u, -1, axis=axis) - u
    slope = _complex_minmod(u - np.roll(u, 1, axis=axis), fwd)
    left = u + 0.5 * slope  # state left of i+1/2
    right = np.roll(u - 0.5 * slope, -1, axis=axis)  # state right of i+1/2
    flux = np.maximum(speed, 0.0) * left + np.minimum(speed, 0.0) * right
    return -(flux - np.roll(flux, 1, axis=axis)) / dx


def _x_broadcast(arr: np.ndarray, n_x: int) -> np.ndarray:
    """(P, ...) -> (P, 1*n_x, ...) for broadcasting over spatial axes."""
    return arr.reshape(arr.shape[:1] + (1,) * n_x + arr.shape[1:])


def advection_rhs(sigma: np.ndarray, coeffs: NodeCoefficients, dx: Sequence[float]) -> np.ndarray:
    """-sum_i d_{x_i}(sigma D_i^T), evaluated in characteristic variables."""
    n_x = sigma.ndim - 3
    rhs = np.zeros_like(sigma)
    for i in range(n_x):
        U = _x_broadcast(coeffs.modes[i], n_x)
        lam = _x_broadcast(coeffs.speeds[i], n_x)[..., None, :]
        w = sigma @ U
        rhs_w = _muscl_rhs(w, lam, axis=1 + i, dx=dx[i])
        rhs += rhs_w @ np.conj(np.swapaxes(U, -1, -2))
    return rhs


def diagonal_advection_rhs(sigma: np.ndarray, velocity: np.ndarray, dx: Sequence[float]) -> np.ndarray:
    """Each entry sigma_jl advected with velocity[p, l, :]."""
    n_x = sigma.ndim - 3
    rhs = np.zeros_like(sigma)
    for i in range(n_x):
        lam = _x_broadcast(velocity[..., i], n_x)[..., None, :]
        rhs += _muscl_rhs(sigma, lam, axis=1 + i, dx=dx[i])
    return rhs


def max_cfl(speeds: np.ndarray, dx: Sequence[float], dt: float) -> float:
    """dt * sum_i max|lambda_i| / dx_i."""
    return float(dt * sum(np.max(np.abs(speeds[i])) / dx[i] for i in range(len(dx))))


def check_cfl(speeds: np.ndarray, dx: Sequence[float], dt: float) -> None:
    number = max_cfl(speeds, dx, dt)
    if number > CFL_LIMIT:
        suggestion = dt * CFL_LIMIT / number
        raise CflViolation(f"CFL number {number:.3f} exceeds {CFL_LIMIT}; use dt <= {suggestion:.6g}", suggestion)


def ssp_rk2(sigma: np.ndarray, rhs: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    stage = sigma + dt * rhs(sigma)
    return 0.5 * sigma + 0.5 * (stage + dt * rhs(stage))


def advect(sigma: np.ndarray, coeffs: NodeCoefficients, dx, dt: float) -> np.ndarray:
    return ssp_rk2(sigma, lambda s: advection_rhs(s, coeffs, dx), dt)


# relaxation ------------------------------------------------------------------


def relaxation_phase(energies: np.ndarray, tau: float, eps: float) -> np.ndarray:
    """exp(i (E_l - E_j) tau / eps) as a (P, 2, 2) array indexed [p, j, l]."""
    gap = energies[:, None, :] - energies[:, :, None]
    return np.exp(1j * gap * tau / eps)


def relax(sigma: np.ndarray, energies: np.ndarray, tau: float, eps: float) -> np.ndarray:
    phase = relaxation_phase(energies, tau, eps)
    return sigma * _x_broadcast(phase, sigma.ndim - 3)


def to_tilde(fld: CoherenceField, bands: BandStructure) -> CoherenceField:
    """sigma~_jl = exp(i (E_j - E_l) t / eps) sigma_jl."""
    if fld.tilde:
        return fld
    sigma = relax(fld.sigma, bands.energies[:, :2], -fld.t, fld.eps)
    return replace(fld, sigma=sigma, tilde=True)


def from_tilde(fld: CoherenceField, bands: BandStructure) -> CoherenceField:
    if not fld.tilde:
        return fld
    sigma = relax(fld.sigma, bands.energies[:, :2], fld.t, fld.eps)
    return replace(fld, sigma=sigma, tilde=False)


def _check_hermitian(fld: CoherenceField, strict: bool) -> None:
    if strict:
        defect = fld.hermiticity_defect()
        if defect > HERMITIAN_STRICT_TOL:
            raise NonHermitianDrift(f"Hermiticity defect {defect:.3e}")


def step_deterministic(fld: CoherenceField, bands: BandStructure, dt: float, strict: bool = False) -> CoherenceField:
    """Strang step: half rotation, advection, half rotation.

    The advection term sigma . D^T multiplies from the right only, so sigma
    does not stay Hermitian in general (sigma^H evolves under left
    multiplication).  ``strict`` turns a defect above 1e-6 into an error.
    """
    if fld.tilde:
        raise ConfigError("step_deterministic expects untransformed sigma")
    coeffs = node_coefficients(bands)
    check_cfl(coeffs.speeds, fld.dx, dt)
    sigma = relax(fld.sigma, coeffs.energies, 0.5 * dt, fld.eps)
    sigma = advect(sigma, coeffs, fld.dx, dt)
    sigma = relax(sigma, coeffs.energies, 0.5 * dt, fld.eps)
    out = fld.evolve(sigma, dt)
    _check_hermitian(out, strict)
    return out


# regimes ---------------------------------------------------------------------


class Regime(enum.Enum):
    FAR = "FarFromCrossing"
    TRANSITION = "Transition"
    NEAR = "NearCrossing"


@dataclass(frozen=True)
class RegimeTag:
    regime: Regime
    ratio: float


def classify_regime(p, eps: float, crossing: CrossingDescriptor, rho_far: float = 10.0, rho_near: float = 1.0,
                    lattice: Lattice | None = None) -> RegimeTag:
    """rho = |p - p*| / eps^(1/r); with a lattice the distance is taken modulo the dual lattice."""
    delta = np.atleast_1d(np.asarray(p, dtype=float)) - crossing.point
    if lattice is not None:
        frac = lattice.dual_coordinates(delta)
        delta = (frac - np.rint(frac)) @ lattice.dual
    rho = float(np.linalg.norm(delta) / eps ** (1.0 / crossing.order))
    if rho >= rho_far:
        return RegimeTag(Regime.FAR, rho)
    if rho <= rho_near:
        return RegimeTag(Regime.NEAR, rho)
    return RegimeTag(Regime.TRANSITION, rho)


def _require_far(fld: CoherenceField, bands: BandStructure, crossings: Sequence[CrossingDescriptor]) -> None:
    for p in fld.p_points:
        for c in crossings:
            tag = classify_regime(p, fld.eps, c, lattice=bands.lattice)
            if tag.regime is not Regime.FAR:
                raise RegimeViolation(f"p={p} is {tag.regime.value} (rho={tag.ratio:.3g}) for crossing at {c.point}")


@dataclass(frozen=True, eq=False)
class LiouvilleRule:
    """Far-from-crossing limit: sigma~_jl advects with velocity D_ll."""

    velocity: np.ndarray  # (P, 2, d)

    def rhs(self, sigma: np.ndarray, dx) -> np.ndarray:
        return diagonal_advection_rhs(sigma, self.velocity, dx)

    def step(self, fld: CoherenceField, dt: float) -> CoherenceField:
        check_cfl(np.moveaxis(self.velocity, -1, 0), fld.dx, dt)
        sigma = ssp_rk2(fld.sigma, lambda s: self.rhs(s, fld.dx), dt)
        return fld.evolve(sigma, dt)


def reduce_far_liouville(fld: CoherenceField, bands: BandStructure,
                         crossings: Sequence[CrossingDescriptor] = ()) -> LiouvilleRule:
    _require_far(fld, bands, crossings)
    coeffs = node_coefficients(bands)
    velocity = np.real(np.stack([coeffs.D[:, l, l, :] for l in range(2)], axis=1))
    return LiouvilleRule(velocity)


# random medium and collision kernels ----------------------------------------


@dataclass(frozen=True)
class RandomMedium:
    strength: float
    correlation_length: float
    family: str = "gaussian"

    def __post_init__(self):
        if self.strength < 0 or not self.correlation_length > 0:
            raise ConfigError("medium needs strength >= 0 and correlation_length > 0")
        if self.family != "gaussian":
            raise ConfigError(f"unknown spectral family {self.family!r}")

    def spectral_density(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        sq = np.sum(q * q, axis=-1)
        return self.strength * np.exp(-0.5 * sq * self.correlation_length**2)

    def support_radius(self, floor: float = R_HAT_FLOOR) -> float:
        if self.strength <= floor:
            return 0.0
        return math.sqrt(2.0 * math.log(self.strength / floor)) / self.correlation_length

    def intervalley_weight(self, k_point, k_prime, lat: Lattice) -> float:
        """Largest R-hat(K - K' + mu) over dual vectors mu."""
        delta = np.asarray(k_point, dtype=float) - np.asarray(k_prime, dtype=float)
        mus = enumerate_dual(lat, np.linalg.norm(delta) + 2 * max(np.linalg.norm(lat.dual, axis=1)))
        return float(np.max(self.spectral_density(delta + mus.vectors)))

    def to_dict(self) -> dict:
        return {"family": self.family, "strength": self.strength, "correlation_length": self.correlation_length}


def shell_delta(x: np.ndarray, eta: float) -> np.ndarray:
    return np.exp(-0.5 * (x / eta) ** 2) / (eta * math.sqrt(2.0 * math.pi))


def shell_indicator(x: np.ndarray, eta: float) -> np.ndarray:
    """Unit-height Gaussian: the weak limit of exp(-i x t / eps) at x = 0."""
    return np.exp(-0.5 * (x / eta) ** 2)


def median_energy_spacing(bands: BandStructure) -> float:
    """Median |E_b(p) - E_b(p')| over nodes p and their nearest grid neighbour p'.

    Distances are taken modulo the dual lattice.
    """
    pts = bands.points
    if len(pts) < 2:
        return 0.0
    lat = bands.lattice
    frac = lat.dual_coordinates(pts[:, None, :] - pts[None, :, :])
    dist = np.linalg.norm((frac - np.rint(frac)) @ lat.dual, axis=-1)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argmin(dist, axis=1)
    E = bands.energies[:, :2]
    return float(np.median(np.abs(E - E[nearest])))


@dataclass(frozen=True, eq=False)
class CollisionKernel:
    gain: np.ndarray  # (P, P, 2, 2, 2, 2) [i, k, j, l, m, m']
    loss: np.ndarray  # (P, 2, 2, 2) [i, j, l, m']
    diag_gain: np.ndarray  # (P, P, 2, 2) [i, k, j, m]: w R |A_jm|^2 delta(E_j(p) - E_m(q))
    off_gain: np.ndarray  # (P, P, 2, 2) [i, k, j, l] for j != l, closed off-diagonal form
    off_loss: np.ndarray  # (P, 2, 2)
    eta: float | None
    weights: np.ndarray
    prefactor: float
    mode: str

    @property
    def _gain_matrix(self) -> np.ndarray:
        # (i, j, l) x (k, a, b) so the gain is a single matrix product
        cached = self.__dict__.get("_gm")
        if cached is None:
            P = self.gain.shape[0]
            cached = np.ascontiguousarray(self.gain.transpose(0, 2, 3, 1, 4, 5).reshape(4 * P, 4 * P))
            object.__setattr__(self, "_gm", cached)
        return cached

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.gain) or np.any(self.loss))

    def rhs(self, sigma: np.ndarray) -> np.ndarray:
        P = sigma.shape[0]
        flat = sigma.reshape(P, -1, 2, 2)
        gain = (self._gain_matrix @ flat.transpose(0, 2, 3, 1).reshape(4 * P, -1)).reshape(P, 2, 2, -1)
        gain = gain.transpose(0, 3, 1, 2)
        loss = np.einsum("ijla,ixal->ixjl", self.loss, flat)
        return (gain - loss).reshape(sigma.shape)

    def reduced_rhs(self, sigma: np.ndarray) -> np.ndarray:
        """Reduced far-from-crossing collision operator acting on sigma~."""
        P = sigma.shape[0]
        flat = sigma.reshape(P, -1, 2, 2)
        out = np.zeros_like(flat)
        diag = np.stack([flat[:, :, 0, 0], flat[:, :, 1, 1]], axis=-1)  # (P, X, 2)
        gain = np.einsum("ikjm,kxm->ixj", self.diag_gain, diag)
        loss = self.diag_gain.sum(axis=(1, 3))[:, None, :] * diag
        out[:, :, 0, 0] = gain[..., 0] - loss[..., 0]
        out[:, :, 1, 1] = gain[..., 1] - loss[..., 1]
        for j, l in ((0, 1), (1, 0)):
            out[:, :, j, l] = (
                np.einsum("ik,kx->ix", self.off_gain[:, :, j, l], flat[:, :, j, l])
                - self.off_loss[:, j, l][:, None] * flat[:, :, j, l]
            )
        return out.reshape(sigma.shape)


def _mu_set(bands: BandStructure, medium: RandomMedium):
    lat = bands.lattice
    plane = bands.states[0][0].duals
    span = float(np.max(np.linalg.norm(plane.vectors, axis=1)))
    diffs = bands.points[:, None, :] - bands.points[None, :, :]
    diameter = float(np.max(np.linalg.norm(diffs, axis=-1))) if len(bands.points) > 1 else 0.0
    radius = min(medium.support_radius() + diameter, 2.0 * span)
    return enumerate_dual(lat, radius + 1e-9)


def _overlaps(bands: BandStructure, mus) -> np.ndarray:
    """A(p_i, q_k - mu)[m, j] for all nodes and mu: shape (P, P, n_mu, 2, 2)."""
    plane = bands.states[0][0].duals
    C = np.stack([[s.coefficients for s in states[:2]] for states in bands.states])  # (P, 2, n)
    P = C.shape[0]
    flat = C.reshape(2 * P, -1)
    out = np.empty((P, P, len(mus), 2, 2), dtype=complex)
    for a, mu in enumerate(mus):
        idx = plane.shifted(-mu)  # nu - mu
        ok = idx >= 0
        shifted = np.zeros_like(flat)
        shifted[:, ok] = flat[:, idx[ok]]
        out[:, :, a] = (flat @ shifted.conj().T).reshape(P, 2, P, 2).transpose(0, 2, 1, 3)
    return out


def _significant_mus(bands: BandStructure, medium: RandomMedium, mus):
    """Drop dual vectors whose spectral weight vanishes for every node pair.

    The max over all pairs is invariant under (p, q, mu) -> (q, p, -mu), so
    the kept set stays symmetric.
    """
    diffs = bands.points[:, None, :] - bands.points[None, :, :]
    R = medium.spectral_density(diffs[:, :, None, :] + mus.vectors[None, None])
    r_max = R.reshape(-1, len(mus)).max(axis=0)
    # |A(p, q - mu)| <= sum_nu e_nu e_{nu - mu} with e the coefficient envelope
    plane = bands.states[0][0].duals
    envelope = np.max([[np.abs(s.coefficients) for s in states[:2]] for states in bands.states], axis=(0, 1))
    bound = np.empty(len(mus))
    for a, mu in enumerate(mus.coefficients):
        idx = plane.shifted(-mu)
        ok = idx >= 0
        bound[a] = envelope[ok] @ envelope[idx[ok]]
    score = r_max * bound**2
    keep = (r_max >= R_HAT_FLOOR) & (score >= 1e-4 * R_HAT_FLOOR * score.max())
    return mus.coefficients[keep], mus.vectors[keep]


def build_collision_kernel(
    bands: BandStructure,
    medium: RandomMedium,
    p_weights=None,
    eta_shell: float | None = None,
    mode: str = "shell",
    valley_labels=None,
    intervalley: bool = True,
) -> CollisionKernel:
    """Precompute gain/loss coefficients of the random collision operator.

    mode "shell": Gaussian energy-shell delta with quadrature weights.
    mode "valley": p-grid is {K, K'}; no shell delta, no quadrature.
    mode "ring": shell delta whose weights are normalized to one per valley
    block, so that a ring collapsed onto its centre reduces to "valley".
    With ``intervalley=False`` every (p, q) pair in different valleys is
    dropped from both gain and loss.
    """
    lat = bands.lattice
    d = lat.dimension
    P = len(bands.points)
    E = bands.energies[:, :2]
    prefactor = 1.0 / ((2 * np.pi) ** (d - 1) * lat.bz_volume)
    weights = np.full(P, lat.bz_volume / P) if p_weights is None else np.asarray(p_weights, dtype=float)

    if mode == "shell":
        spacing = median_energy_spacing(bands)
        eta = 3.0 * spacing if eta_shell is None else float(eta_shell)
        if not eta > 0 or eta < 2.0 * spacing:
            raise ShellTooNarrow(f"eta_shell={eta:.3g} is below twice the median energy spacing {spacing:.3g}")
    elif mode == "ring":
        if eta_shell is None or not eta_shell > 0:
            raise ConfigError("ring mode needs a positive eta_shell")
        eta = float(eta_shell)
    elif mode == "valley":
        eta = None
    else:
        raise ConfigError(f"unknown collision mode {mode!r}")

    zero4 = np.zeros((P, P, 2, 2))
    if medium.strength == 0:
        return CollisionKernel(np.zeros((P, P, 2, 2, 2, 2), complex), np.zeros((P, 2, 2, 2), complex),
                               zero4, zero4.astype(complex), np.zeros((P, 2, 2), complex), eta, weights, prefactor, mode)

    coeffs, vectors = _significant_mus(bands, medium, _mu_set(bands, medium))
    A = _overlaps(bands, coeffs)  # (P, P, n_mu, 2, 2), M = A(p_i, q_k - mu)
    R = medium.spectral_density(bands.points[:, None, None, :] - bands.points[None, :, None, :] + vectors[None, None])
    R = np.where(R < R_HAT_FLOOR, 0.0, R)
    # overlaps decay quickly in |mu|; drop terms negligible for every node pair
    weight = (R[..., None, None] * np.abs(A) ** 2).max(axis=(0, 1, 3, 4))
    keep = weight >= R_HAT_FLOOR * weight.max()
    A, R = A[:, :, keep], R[:, :, keep]

    de = E[:, None, :, None] - E[None, :, None, :]  # [i, k, l, m] = E_l(p) - E_m(q)
    if mode == "valley":
        shell = np.ones_like(de)
        qw = np.ones(P)
    else:
        shell = shell_delta(de, eta)
        qw = weights
        if mode == "ring":
            labels = np.zeros(P, int) if valley_labels is None else np.asarray(valley_labels)
            norm = np.zeros_like(shell)
            for v in np.unique(labels):
                block = labels == v
                norm[:, block] = shell[:, block].sum(axis=1, keepdims=True)
            shell = np.where(norm > 0, shell / np.where(norm > 0, norm, 1.0), 0.0)
            qw = np.ones(P)
    if not intervalley:
        labels = np.arange(P) if mode == "valley" and valley_labels is None else np.asarray(valley_labels)
        R = R * (labels[:, None] == labels[None, :])[..., None]
    W = prefactor * qw[None, :, None, None, None] * R[..., None, None] * shell[:, :, None, :, :]  # [i,k,mu,l,m]
    M = A
    N = np.conj(A)
    gain = np.einsum("ikalm,ikajm,ikaln->ikjlmn", W, N, M, optimize=True)
    loss = np.einsum("ikalm,ikajm,ikanm->ijln", W, N, M, optimize=True)

    abs2 = np.abs(A) ** 2  # [i,k,mu,j,m]
    Wd = prefactor * qw[None, :, None, None, None] * R[..., None, None]
    diag_gain = np.einsum("ikajm,ikajm->ikjm", Wd * shell[:, :, None, :, :], abs2)
    off_gain = np.zeros((P, P, 2, 2), complex)
    off_loss = np.zeros((P, 2, 2), complex)
    for j, l in ((0, 1), (1, 0)):
        w_l = Wd[..., 0, 0] [..., None] * shell[:, :, None, l, :]  # [i,k,mu,m]
        mismatch = E[None, :, j] - E[None, :, l] + E[:, None, l] - E[:, None, j]  # [i, k]
        ind = shell_indicator(mismatch, eta) if eta is not None else (np.abs(mismatch) < 1e-12).astype(float)
        off_gain[:, :, j, l] = np.einsum("ikam,ikam,ika->ik", w_l, np.conj(A[..., j, :]), A[..., l, l]) * ind
        off_loss[:, j, l] = np.einsum("ikam,ikam,ikam->i", w_l, np.conj(A[..., j, :]), A[..., j, :])
    return CollisionKernel(gain, loss, diag_gain, off_gain, off_loss, eta, weights, prefactor, mode)


def _collide(sigma: np.ndarray, rhs: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    """Heun step with a blow-up guard."""
    k1 = rhs(sigma)
    stage = sigma + dt * k1
    out = sigma + 0.5 * dt * (k1 + rhs(stage))
    before = np.max(np.abs(sigma))
    if before > 0 and np.max(np.abs(out)) > 10.0 * before:
        raise CollisionBlowup("collision update grew |sigma| more than tenfold; reduce dt")
    return out


def step_random(fld: CoherenceField, kernel: CollisionKernel, bands: BandStructure, dt: float,
                strict: bool = False) -> CoherenceField:
    """Strang step: rotation/2, collision/2, advection, collision/2, rotation/2.

    The term pairing L[W2] with Q_jl is omitted.
    """
    if fld.tilde:
        raise ConfigError("step_random expects untransformed sigma")
    coeffs = node_coefficients(bands)
    check_cfl(coeffs.speeds, fld.dx, dt)
    sigma = relax(fld.sigma, coeffs.energies, 0.5 * dt, fld.eps)
    if not kernel.is_zero:
        sigma = _collide(sigma, kernel.rhs, 0.5 * dt)
    sigma = advect(sigma, coeffs, fld.dx, dt)
    if not kernel.is_zero:
        sigma = _collide(sigma, kernel.rhs, 0.5 * dt)
    sigma = relax(sigma, coeffs.energies, 0.5 * dt, fld.eps)
    out = fld.evolve(sigma, dt)
    _check_hermitian(out, strict)
    return out


def step_reduced_away(fld: CoherenceField, kernel: CollisionKernel, bands: BandStructure, dt: float,
                      crossings: Sequence[CrossingDescriptor] = ()) -> CoherenceField:
    """Far-from-crossing reduced system for sigma~ (no rotation term).

    Diagonals: Liouville transport with D_jj plus the single-band collision
    operator; off-diagonals: their closed equations with velocity D_ll.
    """
    _require_far(fld, bands, crossings)
    fld = fld if fld.tilde else to_tilde(fld, bands)
    rule = reduce_far_liouville(fld, bands, crossings)
    check_cfl(np.moveaxis(rule.velocity, -1, 0), fld.dx, dt)
    sigma = _collide(fld.sigma, kernel.reduced_rhs, 0.5 * dt)
    sigma = ssp_rk2(sigma, lambda s: rule.rhs(s, fld.dx), dt)
    sigma = _collide(sigma, kernel.reduced_rhs, 0.5 * dt)
    return fld.evolve(sigma, dt)


@lru_cache(maxsize=8)
def _valley_kernel(bands: BandStructure, medium: RandomMedium, intervalley: bool = True) -> CollisionKernel:
    return build_collision_kernel(bands, medium, mode="valley", intervalley=intervalley)


def step_graphene_valley(fld: CoherenceField, bands: BandStructure, medium: RandomMedium, dt: float,
                         kernel: CollisionKernel | None = None, intervalley: bool = True) -> CoherenceField:
    """Closed system at p in {K, K'}: transport by D plus intra/intervalley exchange."""
    if fld.sigma.shape[0] != 2:
        raise ConfigError("valley system needs exactly the two nodes K and K'")
    kernel = _valley_kernel(bands, medium, intervalley) if kernel is None else kernel
    coeffs = node_coefficients(bands)
    check_cfl(coeffs.speeds, fld.dx, dt)
    sigma = _collide(fld.sigma, kernel.rhs, 0.5 * dt) if not kernel.is_zero else fld.sigma
    sigma = advect(sigma, coeffs, fld.dx, dt)
    if not kernel.is_zero:
        sigma = _collide(sigma, kernel.rhs, 0.5 * dt)
    return fld.evolve(sigma, dt)


def ring_points(k_point, k_prime, radius: float, n_r: int = 4, n_theta: int = 8):
    """Polar nodes at radii (i - 1/2) radius / n_r around K and K'.

    Returns (points, valley_labels, area_weights).
    """
    radii = (np.arange(n_r) + 0.5) * radius / n_r
    angles = 2 * np.pi * np.arange(n_theta) / n_theta
    rr, aa = np.meshgrid(radii, angles, indexing="ij")
    offsets = np.stack([rr * np.cos(aa), rr * np.sin(aa)], -1).reshape(-1, 2)
    area = (rr * (radius / n_r) * (2 * np.pi / n_theta)).ravel()
    if radius == 0:
        area = np.full(offsets.shape[0], 1.0 / offsets.shape[0])
    points = np.concatenate([np.asarray(k_point) + offsets, np.asarray(k_prime) + offsets])
    labels = np.repeat([0, 1], offsets.shape[0])
    return points, labels, np.concatenate([area, area])


def ring_eta(bands: BandStructure, valley_labels=None) -> float:
    """Default ring shell width: 3x the median energy step between neighbouring radii.

    Radii are measured from each valley block's centroid, so the width does
    not depend on the angular resolution.  On a collapsed ring (a single
    radius) the normalized ring weights do not depend on the width and 1 is
    returned.
    """
    P = len(bands.points)
    labels = np.repeat([0, 1], P // 2) if valley_labels is None else np.asarray(valley_labels)
    steps = []
    for v in np.unique(labels):
        block = labels == v
        pts = bands.points[block]
        radii = np.round(np.linalg.norm(pts - pts.mean(axis=0), axis=1), 9)
        levels = np.unique(radii)
        if len(levels) < 2:
            continue
        mean_e = np.array([bands.energies[block][radii == r, :2].mean(axis=0) for r in levels])
        steps.append(np.abs(np.diff(mean_e, axis=0)).ravel())
    if not steps:
        return 1.0
    spacing = float(np.median(np.concatenate(steps)))
    return 3.0 * spacing if spacing > 1e-12 else 1.0


@lru_cache(maxsize=8)
def _ring_kernel(bands: BandStructure, medium: RandomMedium) -> CollisionKernel:
    half = len(bands.points) // 2
    return build_collision_kernel(bands, medium, eta_shell=ring_eta(bands), mode="ring",
                                  valley_labels=np.repeat([0, 1], half))


def step_graphene_ring(fld: CoherenceField, bands: BandStructure, medium: RandomMedium, dt: float,
                       kernel: CollisionKernel | None = None, strict: bool = False) -> CoherenceField:
    """Ring system near the Dirac points; same splitting as :func:`step_random`.

    The p-grid is laid out as by :func:`ring_points`: first the K ring, then K'.
    """
    if fld.sigma.shape[0] % 2:
        raise ConfigError("ring grid needs equally many nodes around K and K'")
    kernel = _ring_kernel(bands, medium) if kernel is None else kernel
    return step_random(fld, kernel, bands, dt, strict)


# diagnostics -----------------------------------------------------------------


def richardson_ratio(run: Callable[[float], np.ndarray], dt: float) -> float:
    """|u(dt) - u(dt/2)| / |u(dt/2) - u(dt/4)| for a run returning the final state."""
    a, b, c = run(dt), run(dt / 2), run(dt / 4)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b - c))


def evolve(fld: CoherenceField, step: Callable[[CoherenceField, float], CoherenceField], dt: float, t_end: float,
           callback: Callable[[CoherenceField], None] | None = None) -> CoherenceField:
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigError("t_end must be a multiple of dt")
    for _ in range(n_steps):
        fld = step(fld, dt)
        if callback is not None:
            callback(fld)
    return fld
