"""Direct 1D ground truth for the transport models.

Solves  i eps d_t phi = -(eps^2/2) phi'' + V(x/eps) phi + sqrt(eps) N(x/eps) phi
on the periodic box [0, 2 pi) with a Strang split-step Fourier scheme, lifts
the solution to phase space with the asymmetric Wigner transform, and projects
onto the band coherence matrix.

The box length is 2 pi and 1/eps must be an integer, so x/eps spans a whole
number of potential periods and the Wigner k-grid is {n eps}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .bloch import BandStructure, BlochState, bands_at_points, solve_bands
from .errors import ConfigError, NormDrift, TruncationMismatch, UnderResolved
from .lattice import FourierPotential
from .transport import CoherenceField, RandomMedium

BOX_LENGTH = 2.0 * np.pi
MIN_NODES_PER_CELL = 16
DEFAULT_NODES_PER_CELL = 32
NORM_DRIFT_LIMIT = 1e-6
TRUNCATION_TOL = 1e-10


def cell_count(eps: float) -> int:
    """Number of potential periods in the box; 1/eps must be an integer."""
    if not 0 < eps < 1:
        raise ConfigError("eps must lie in (0, 1)")
    n = round(1.0 / eps)
    if abs(n * eps - 1.0) > 1e-9:
        raise ConfigError(f"1/eps must be an integer, got eps={eps}")
    return int(n)


@dataclass(frozen=True, eq=False)
class WaveField:
    values: np.ndarray  # (N,)
    eps: float
    t: float = 0.0
    length: float = BOX_LENGTH

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dx(self) -> float:
        return self.length / self.n_nodes

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n_nodes) * self.dx

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.dx))


@dataclass(frozen=True, eq=False)
class WignerField:
    x: np.ndarray  # (N,)
    k: np.ndarray  # (N,) in fft order: k_n = n eps with n wrapped to [-N/2, N/2)
    values: np.ndarray  # (N, N) indexed [x, n]
    eps: float

    def marginal(self) -> np.ndarray:
        """int W dk on the k-grid."""
        return self.values.sum(axis=1) * self.eps


@dataclass(frozen=True, eq=False)
class MediumSample:
    seed: int
    z: np.ndarray
    values: np.ndarray  # real N(z)
    modes: np.ndarray  # complex Fourier amplitudes a_n, field = sum_n a_n exp(i q_n z)
    wavenumbers: np.ndarray  # q_n


def wave_grid(eps: float, nodes_per_cell: int = DEFAULT_NODES_PER_CELL) -> np.ndarray:
    n_cells = cell_count(eps)
    if nodes_per_cell < MIN_NODES_PER_CELL:
        raise UnderResolved(f"{nodes_per_cell} nodes per eps-cell; at least {MIN_NODES_PER_CELL} required")
    n = n_cells * nodes_per_cell
    return np.arange(n) * (BOX_LENGTH / n)


def bloch_packet(envelope, state: BlochState, eps: float, nodes_per_cell: int = DEFAULT_NODES_PER_CELL) -> WaveField:
    """phi(x) = a(x) Psi(x/eps, p).  p * (1/eps) must be an integer for periodicity."""
    n_cells = cell_count(eps)
    if abs(state.p[0] * n_cells - round(state.p[0] * n_cells)) > 1e-9:
        raise ConfigError(f"p={state.p[0]} is not on the grid eps*Z; the packet would not be periodic")
    x = wave_grid(eps, nodes_per_cell)
    values = np.asarray(envelope(x), dtype=complex) * state.evaluate((x / eps)[:, None])
    return WaveField(values, eps)


def sample_medium(medium: RandomMedium, n_nodes: int, eps: float, seed: int) -> MediumSample:
    """Real stationary field on z in [0, 2 pi / eps) by spectral synthesis.

    E |a_n|^2 = R_hat(q_n) / Lz with q_n = 2 pi n / Lz, so that
    E N(z) N(z') ~ (2 pi)^-1 int R_hat(q) exp(i q (z - z')) dq.
    """
    lz = BOX_LENGTH / eps
    q = 2 * np.pi * np.fft.fftfreq(n_nodes, d=lz / n_nodes)
    z = np.arange(n_nodes) * (lz / n_nodes)
    rng = np.random.default_rng(seed)
    amplitude = np.sqrt(medium.spectral_density(q[:, None]) / lz)
    xi = (rng.standard_normal(n_nodes) + 1j * rng.standard_normal(n_nodes)) / np.sqrt(2.0)
    # Hermitian symmetry a_{-n} = conj(a_n); self-conjugate modes are real normals
    partner = (-np.arange(n_nodes)) % n_nodes
    self_conj = partner == np.arange(n_nodes)
    xi[self_conj] = rng.standard_normal(int(self_conj.sum()))
    upper = np.arange(n_nodes) > partner
    xi[upper] = np.conj(xi[partner[upper]])
    modes = amplitude * xi
    values = np.real(np.fft.ifft(modes) * n_nodes)
    return MediumSample(int(seed), z, values, modes, q)


def split_step_solve(
    wave: WaveField,
    pot: FourierPotential,
    medium: MediumSample | None,
    eps: float,
    dt: float,
    t_end: float,
) -> WaveField:
    """Strang splitting: half potential, full kinetic, half potential."""
    if pot.lattice.dimension != 1:
        raise ConfigError("the direct solver is one-dimensional")
    n_cells = cell_count(eps)
    if wave.n_nodes % n_cells or wave.n_nodes // n_cells < MIN_NODES_PER_CELL:
        raise UnderResolved(
            f"{wave.n_nodes} nodes for {n_cells} cells; need a multiple with >= {MIN_NODES_PER_CELL} per cell"
        )
    if not dt > 0:
        raise ConfigError("dt must be positive")
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigError("t_end must be a multiple of dt")
    x = wave.x
    potential = pot.evaluate((x / eps)[:, None])
    if medium is not None:
        if medium.values.shape != x.shape:
            raise ConfigError("medium sample must live on the wave grid")
        potential = potential + math.sqrt(eps) * medium.values
    half = np.exp(-0.5j * potential * dt / eps)
    k = 2 * np.pi * np.fft.fftfreq(wave.n_nodes, d=wave.dx)
    kinetic = np.exp(-0.5j * eps * k**2 * dt)
    phi = wave.values
    norm0 = wave.norm()
    for _ in range(n_steps):
        phi = half * np.fft.ifft(kinetic * np.fft.fft(half * phi))
    out = replace(wave, values=phi, t=wave.t + n_steps * dt)
    drift = abs(out.norm() - norm0) / max(norm0, 1e-300)
    if drift > NORM_DRIFT_LIMIT:
        raise NormDrift(f"relative norm drift {drift:.3e}")
    return out


def wigner_transform(wave: WaveField, eps: float | None = None) -> WignerField:
    """W(x, k) = (2 pi)^-1 int exp(i k y) phi(x - eps y) conj(phi(x)) dy.

    With y = s dx / eps the sum over s is a discrete Fourier transform and the
    k-grid is k_n = n eps for a box of length 2 pi.
    """
    eps = wave.eps if eps is None else eps
    phi = wave.values
    n = phi.shape[0]
    shifts = np.arange(n)
    products = phi[(np.arange(n)[:, None] - shifts[None, :]) % n] * np.conj(phi)[:, None]  # [x, s]
    values = np.fft.ifft(products, axis=1) * n * (wave.dx / (2 * np.pi * eps))
    k = np.fft.fftfreq(n, d=1.0 / n) * (2 * np.pi * eps / wave.length)
    return WignerField(wave.x, k, values, eps)


def _k_index(k_values: np.ndarray, eps: float, n: int) -> np.ndarray:
    idx = np.rint(k_values / eps).astype(np.int64)
    inside = (idx >= -(n // 2)) & (idx < n - n // 2)
    return np.where(inside, idx % n, -1)


def project_sigma(
    wigner: WignerField,
    bands: BandStructure,
    eps: float | None = None,
    nodes_per_cell: int | None = None,
) -> CoherenceField:
    """sigma_jl(x, p) = < W(x, ., .), Q_jl(., ., p) > with z = x / eps, box-averaged over one eps-cell.

    Q_jl(z, mu) = c^j_mu exp(i mu z) conj(psi_l(z)), with psi_l the periodic
    part of Psi_l.  The result is Hermitized: the asymmetric transform carries
    an anti-Hermitian part that is not a coherence.
    """
    eps = wigner.eps if eps is None else eps
    n = wigner.x.shape[0]
    n_cells = cell_count(eps)
    per_cell = n // n_cells if nodes_per_cell is None else nodes_per_cell
    z = wigner.x / eps
    sigma = np.zeros((len(bands.points), n, 2, 2), dtype=complex)
    for ip, states in enumerate(bands.states):
        states = states[:2]
        duals = states[0].duals
        k_values = bands.points[ip, 0] + duals.vectors[:, 0]
        idx = _k_index(k_values, eps, n)
        if abs(bands.points[ip, 0] / eps - round(bands.points[ip, 0] / eps)) > 1e-9:
            raise TruncationMismatch(f"p={bands.points[ip, 0]} is not on the Wigner k-grid")
        for s in states:
            lost = float(np.sum(np.abs(s.coefficients[idx < 0]) ** 2))
            if lost > TRUNCATION_TOL:
                raise TruncationMismatch(f"band {s.band} has weight {lost:.2e} outside the Wigner k-range")
        ok = idx >= 0
        W = wigner.values[:, idx[ok]]  # [x, mu]
        plane = np.exp(-1j * z[:, None] * duals.vectors[ok, 0][None, :])  # exp(-i mu z)
        periodic = np.exp(1j * z[:, None] * duals.vectors[:, 0][None, :])  # for psi_l(z)
        psi = periodic @ np.stack([s.coefficients for s in states], axis=1)  # [x, l]
        weighted = (W * plane) @ np.conj(np.stack([s.coefficients[ok] for s in states], axis=1))  # [x, j]
        sigma[ip] = weighted[:, :, None] * psi[:, None, :]
    sigma = _cell_average(sigma, per_cell)
    sigma = 0.5 * (sigma + np.conj(np.swapaxes(sigma, -1, -2)))
    return CoherenceField(sigma, (wigner.x.shape[0] * (wigner.x[1] - wigner.x[0]),), bands.points.copy(),
                          np.full(len(bands.points), eps), eps, t=0.0)


def _cell_average(sigma: np.ndarray, width: int) -> np.ndarray:
    """Centered periodic box average over ``width`` nodes along axis 1."""
    kernel = np.zeros(sigma.shape[1])
    offsets = np.arange(width) - (width - 1) / 2.0
    # even widths straddle the node: split the end weights
    if width % 2:
        kernel[np.rint(offsets).astype(int) % kernel.size] = 1.0 / width
    else:
        lo = int(np.floor(offsets[0]))
        for off in range(lo, lo + width + 1):
            weight = 0.5 if off in (lo, lo + width) else 1.0
            kernel[off % kernel.size] += weight / width
    spectrum = np.fft.fft(kernel)
    shape = (1, -1) + (1,) * (sigma.ndim - 2)
    return np.fft.ifft(np.fft.fft(sigma, axis=1) * spectrum.reshape(shape), axis=1)


def downsample(fld: CoherenceField, n_nodes: int) -> CoherenceField:
    """Pick every m-th x node (the field is already cell-averaged)."""
    n = fld.x_shape[0]
    if n % n_nodes:
        raise ConfigError(f"{n} nodes cannot be reduced to {n_nodes}")
    return replace(fld, sigma=fld.sigma[:, :: n // n_nodes].copy())


def p_grid(eps: float) -> np.ndarray:
    """Quasimomenta p = n eps in [0, 1) resolved by the oracle."""
    return (np.arange(cell_count(eps)) * eps)[:, None]


def bin_density(fld: CoherenceField, bins: tuple[int, int] = (16, 16), entry=(0, 0)) -> np.ndarray:
    """Integrate Re sigma_entry over a (x, p) bin grid on [0, L) x [0, 1)."""
    values = np.real(fld.sigma[..., entry[0], entry[1]])  # (P, X)
    x = np.arange(fld.x_shape[0]) * fld.dx[0]
    p = fld.p_points[:, 0]
    ix = np.minimum((x / fld.x_lengths[0] * bins[0]).astype(int), bins[0] - 1)
    ip = np.minimum(np.floor(np.mod(p, 1.0) * bins[1] + 1e-9).astype(int), bins[1] - 1)
    cell = fld.dx[0] * fld.p_weights[:, None]
    out = np.zeros(bins[::-1])
    np.add.at(out, (ip[:, None], ix[None, :]), values * cell)
    return out


def l1_distance(a: CoherenceField, b: CoherenceField, bins=(16, 16)) -> float:
    return float(np.abs(bin_density(a, bins) - bin_density(b, bins)).sum())


def oracle_bands(pot: FourierPotential, eps: float, cutoff: float | None = None) -> BandStructure:
    return bands_at_points(pot, p_grid(eps), cutoff=cutoff)


def packet_state(pot: FourierPotential, p0: float, band: int = 1, cutoff: float | None = None) -> BlochState:
    return solve_bands((p0,), pot, cutoff, n_bands=max(2, band))[band - 1]


# end-to-end comparison -------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    eps: float
    l1: float
    seeds: int
    l1_spread: float  # std over seeds of the per-seed distance (0 for deterministic)


@dataclass(frozen=True)
class ComparisonSetup:
    p0: float = 0.25
    envelope_width: float = 0.4
    t_end: float = 0.5
    transport_dt: float = 0.005
    transport_nodes: int = 256
    bins: tuple[int, int] = (16, 16)
    nodes_per_cell: int = DEFAULT_NODES_PER_CELL
    oracle_steps_per_cell: int = 16  # oracle dt = eps / oracle_steps_per_cell


def _initial_wave(pot: FourierPotential, eps: float, setup: ComparisonSetup) -> WaveField:
    state = packet_state(pot, setup.p0)
    center, width = np.pi, setup.envelope_width
    return bloch_packet(lambda x: np.exp(-((x - center) ** 2) / (2 * width**2)), state, eps, setup.nodes_per_cell)


def _projected(wave: WaveField, bands: BandStructure, setup: ComparisonSetup) -> CoherenceField:
    fld = project_sigma(wigner_transform(wave), bands, nodes_per_cell=setup.nodes_per_cell)
    return downsample(fld, setup.transport_nodes)


def compare_at_eps(
    pot: FourierPotential,
    eps: float,
    mode: str = "deterministic",
    medium: RandomMedium | None = None,
    seeds=(),
    setup: ComparisonSetup = ComparisonSetup(),
) -> ComparisonRow:
    """L1 distance between oracle-projected and transported sigma_11 at t_end.

    In random mode both sides are averaged: the oracle over the given seeds
    and the transport side is the radiative system driven by the same medium
    statistics.
    """
    from .transport import build_collision_kernel, evolve, step_deterministic, step_random

    bands = oracle_bands(pot, eps)
    wave0 = _initial_wave(pot, eps, setup)
    sigma0 = _projected(wave0, bands, setup)
    oracle_dt = eps / setup.oracle_steps_per_cell
    if mode == "deterministic":
        transported = evolve(sigma0, lambda f, dt: step_deterministic(f, bands, dt), setup.transport_dt, setup.t_end)
        final = _projected(split_step_solve(wave0, pot, None, eps, oracle_dt, setup.t_end), bands, setup)
        return ComparisonRow(eps, l1_distance(final, transported, setup.bins), 0, 0.0)
    if mode != "random":
        raise ConfigError(f"unknown comparison mode {mode!r}")
    if medium is None or not seeds:
        raise ConfigError("random comparison needs a medium and at least one seed")
    kernel = build_collision_kernel(bands, medium, p_weights=sigma0.p_weights)
    transported = evolve(sigma0, lambda f, dt: step_random(f, kernel, bands, dt), setup.transport_dt, setup.t_end)
    target = bin_density(transported, setup.bins)
    per_seed = []
    total = np.zeros_like(target)
    for seed in seeds:
        sample = sample_medium(medium, wave0.n_nodes, eps, seed)
        final = _projected(split_step_solve(wave0, pot, sample, eps, oracle_dt, setup.t_end), bands, setup)
        binned = bin_density(final, setup.bins)
        per_seed.append(float(np.abs(binned - target).sum()))
        total += binned
    mean = total / len(seeds)
    return ComparisonRow(eps, float(np.abs(mean - target).sum()), len(seeds), float(np.std(per_seed)))


def compare_sweep(pot: FourierPotential, eps_values, mode="deterministic", medium=None, seeds=(),
                  setup: ComparisonSetup = ComparisonSetup()) -> list[ComparisonRow]:
    return [compare_at_eps(pot, eps, mode, medium, seeds, setup) for eps in eps_values]


def strictly_decreasing(rows: list[ComparisonRow]) -> bool:
    values = [r.l1 for r in rows]
    return all(b < a for a, b in zip(values, values[1:]))
