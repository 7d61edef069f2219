import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from bandtransport.errors import ConfigError, NormDrift, TruncationMismatch, UnderResolved
from bandtransport.lattice import chain_lattice, crossing_preset, free_preset
from bandtransport.oracle import (
    ComparisonSetup,
    WaveField,
    bin_density,
    bloch_packet,
    cell_count,
    compare_at_eps,
    oracle_bands,
    packet_state,
    project_sigma,
    sample_medium,
    split_step_solve,
    wave_grid,
    wigner_transform,
)
from bandtransport.transport import RandomMedium

TWO_PI = 2 * np.pi
FREE = free_preset(chain_lattice())


def gaussian(x, width=0.4, centre=np.pi):
    return np.exp(-((x - centre) ** 2) / (2 * width**2))


@pytest.fixture(scope="module")
def crossing_pot(crossing):
    return crossing[1]


# grid and direct solver --------------------------------------------------------


def test_cell_count_requires_integer_inverse():
    assert cell_count(1 / 16) == 16
    with pytest.raises(ConfigError):
        cell_count(0.3)
    with pytest.raises(ConfigError):
        cell_count(1.5)


def test_wave_grid_needs_sixteen_nodes_per_cell():
    assert wave_grid(1 / 8, 16).shape == (128,)
    with pytest.raises(UnderResolved):
        wave_grid(1 / 8, 8)


def test_solver_rejects_underresolved_wave(crossing_pot):
    eps = 1 / 16
    wave = WaveField(np.ones(128, complex), eps)  # 8 nodes per cell
    with pytest.raises(UnderResolved):
        split_step_solve(wave, crossing_pot, None, eps, 0.01, 0.1)


def test_free_gaussian_matches_closed_form():
    eps, k0, width, t_end = 1 / 16, 0.5, 0.4, 1.0
    x = wave_grid(eps)
    wave = WaveField(gaussian(x, width) * np.exp(1j * k0 * x / eps), eps)
    out = split_step_solve(wave, FREE, None, eps, 0.01, t_end)
    # boosted spreading Gaussian solving i eps phi_t = -(eps^2 / 2) phi_xx
    alpha = width**2 + 1j * eps * t_end
    exact = (
        np.sqrt(width**2 / alpha)
        * np.exp(-((x - np.pi - k0 * t_end) ** 2) / (2 * alpha))
        * np.exp(1j * k0 * x / eps - 1j * k0**2 * t_end / (2 * eps))
    )
    assert np.max(np.abs(out.values - exact)) < 1e-8


def test_norm_is_conserved_with_potential_and_medium(crossing_pot):
    eps = 1 / 16
    wave = bloch_packet(gaussian, packet_state(crossing_pot, 0.25), eps)
    medium = sample_medium(RandomMedium(0.05, 1.0), wave.n_nodes, eps, 11)
    out = split_step_solve(wave, crossing_pot, medium, eps, eps / 16, 1.0)
    assert abs(out.norm() - wave.norm()) < 1e-10


def test_split_step_self_convergence(crossing_pot):
    eps = 1 / 16
    wave = bloch_packet(gaussian, packet_state(crossing_pot, 0.25), eps)
    runs = [split_step_solve(wave, crossing_pot, None, eps, eps / k, 0.5).values for k in (2, 4, 8)]
    ratio = np.linalg.norm(runs[0] - runs[1]) / np.linalg.norm(runs[1] - runs[2])
    assert ratio == pytest.approx(4.0, abs=0.8)


def test_norm_drift_is_reported(crossing_pot):
    eps = 1 / 16
    wave = bloch_packet(gaussian, packet_state(crossing_pot, 0.25), eps)
    bad = sample_medium(RandomMedium(1.0, 1.0), wave.n_nodes, eps, 0)
    bad = type(bad)(bad.seed, bad.z, bad.values + 1j, bad.modes, bad.wavenumbers)  # complex potential
    with pytest.raises(NormDrift):
        split_step_solve(wave, crossing_pot, bad, eps, eps / 16, 0.5)


def test_packet_must_sit_on_momentum_grid(crossing_pot):
    with pytest.raises(ConfigError):
        bloch_packet(gaussian, packet_state(crossing_pot, 0.3), 1 / 16)


# Wigner transform --------------------------------------------------------------


def test_plane_wave_occupies_one_k_column():
    eps, n0 = 1 / 16, 5
    x = wave_grid(eps, 16)
    wig = wigner_transform(WaveField(np.exp(1j * n0 * eps * x / eps), eps))
    column = int(np.argmin(np.abs(wig.k - n0 * eps)))
    assert wig.k[column] == pytest.approx(n0 * eps)
    others = np.delete(wig.values, column, axis=1)
    assert np.max(np.abs(others)) < 1e-12
    np.testing.assert_allclose(wig.values[:, column] * eps, 1.0, atol=1e-12)


def _smooth_random_wave(seed, eps=1 / 8):
    rng = np.random.default_rng(seed)
    x = wave_grid(eps, 16)
    modes = np.arange(-6, 7)
    coeff = rng.normal(size=modes.size) + 1j * rng.normal(size=modes.size)
    return WaveField(np.exp(1j * np.outer(x / eps, modes)) @ (coeff / (1 + modes**2)), eps)


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_marginal_recovers_density(seed):
    wave = _smooth_random_wave(seed)
    wig = wigner_transform(wave)
    np.testing.assert_allclose(wig.marginal(), np.abs(wave.values) ** 2, atol=1e-8 * np.max(np.abs(wave.values)) ** 2)


def test_wigner_matches_direct_quadrature():
    wave = _smooth_random_wave(3)
    wig = wigner_transform(wave)
    n, eps, dx = wave.n_nodes, wave.eps, wave.dx
    dy = dx / eps  # y-step of the shifted copies phi(x - eps y)
    for ix, ik in [(0, 0), (17, 3), (100, -7), (127, 40)]:
        y = np.arange(n) * dy
        shifted = wave.values[(ix - np.arange(n)) % n]
        direct = np.sum(np.exp(1j * wig.k[ik] * y) * shifted * np.conj(wave.values[ix])) * dy / TWO_PI
        assert abs(wig.values[ix, ik] - direct) < 1e-10


def test_real_gaussian_conjugate_symmetry():
    eps = 1 / 16
    x = wave_grid(eps, 16)
    wig = wigner_transform(WaveField(gaussian(x).astype(complex), eps))
    n = x.size
    inner = np.delete(np.arange(n), n // 2)  # the Nyquist column has no partner
    minus = (-inner) % n  # index of -k_n on the fft-ordered grid
    np.testing.assert_allclose(wig.k[minus], -wig.k[inner], atol=1e-14)
    np.testing.assert_allclose(wig.values[:, minus], np.conj(wig.values[:, inner]), atol=1e-12)


# projection --------------------------------------------------------------------


@pytest.fixture(scope="module")
def packet_projection(crossing_pot):
    eps = 1 / 32
    bands = oracle_bands(crossing_pot, eps)
    wave = bloch_packet(gaussian, packet_state(crossing_pot, 0.25), eps)
    return wave, bands, project_sigma(wigner_transform(wave), bands)


def test_band_one_packet_projects_onto_sigma11(packet_projection):
    wave, _, fld = packet_projection
    s = fld.sigma
    peak = np.max(s[..., 0, 0].real)
    assert np.max(np.abs(s[..., 1, 1])) < 0.05 * peak
    assert np.max(np.abs(s[..., 0, 1])) < 0.05 * peak
    # summed over p, sigma_11 is |a|^2 box-averaged over one eps-cell (|Psi|^2 has cell mean 1)
    density = fld.p_weights @ s[..., 0, 0].real
    centre = np.abs(wave.x - np.pi) < 0.4
    cell = TWO_PI * wave.eps
    offsets = np.linspace(-cell / 2, cell / 2, 401)
    averaged = trapezoid(gaussian(wave.x[centre][:, None] + offsets) ** 2, offsets, axis=1) / cell
    np.testing.assert_allclose(density[centre], averaged, rtol=0.02)
    # and it is concentrated at the packet's quasimomentum
    per_p = s[..., 0, 0].real.sum(axis=1)
    assert fld.p_points[np.argmax(per_p), 0] == pytest.approx(0.25)


def test_projection_preserves_mass(packet_projection):
    wave, _, fld = packet_projection
    assert fld.total_density().real == pytest.approx(wave.norm() ** 2, rel=1e-3)


def test_projection_is_hermitian(packet_projection):
    assert packet_projection[2].hermiticity_defect() < 1e-12


def test_superposition_is_a_pure_state(crossing_pot, packet_projection):
    wave, bands, _ = packet_projection
    eps = wave.eps
    z = (wave.x / eps)[:, None]
    first, second = packet_state(crossing_pot, 0.25), packet_state(crossing_pot, 0.25, band=2)
    values = gaussian(wave.x) * (first.evaluate(z) + second.evaluate(z)) / np.sqrt(2)
    fld = project_sigma(wigner_transform(WaveField(values, eps)), bands)
    node = int(round(0.25 / eps))
    s = fld.sigma[node][np.abs(wave.x - np.pi) < 0.5]
    purity = np.abs(s[:, 0, 1]) / np.sqrt(s[:, 0, 0].real * s[:, 1, 1].real)
    np.testing.assert_allclose(purity, 1.0, atol=0.01)


def test_zero_wave_projects_to_zero(packet_projection):
    wave, bands, _ = packet_projection
    fld = project_sigma(wigner_transform(WaveField(np.zeros_like(wave.values), wave.eps)), bands)
    assert not np.any(fld.sigma)


def test_projection_needs_p_on_k_grid(crossing_pot, packet_projection):
    from bandtransport.bloch import bands_at_points

    wave, _, _ = packet_projection
    with pytest.raises(TruncationMismatch):
        project_sigma(wigner_transform(wave), bands_at_points(crossing_pot, [[0.01]]))


# random medium -----------------------------------------------------------------


def test_zero_strength_medium_is_zero():
    assert not np.any(sample_medium(RandomMedium(0.0, 1.0), 256, 1 / 16, 4).values)


def test_medium_is_seed_deterministic_and_real():
    medium = RandomMedium(0.5, 1.0)
    a, b = sample_medium(medium, 256, 1 / 16, 9), sample_medium(medium, 256, 1 / 16, 9)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.isrealobj(a.values)
    assert not np.array_equal(a.values, sample_medium(medium, 256, 1 / 16, 10).values)


def test_medium_mean_within_three_standard_errors():
    # the box mean of a stationary field has variance R_hat(0) / Lz
    medium, eps = RandomMedium(0.5, 1.0), 1 / 16
    bound = 3 * np.sqrt(medium.spectral_density(np.zeros(1)) * eps / TWO_PI)
    means = [sample_medium(medium, 512, eps, seed).values.mean() for seed in range(200)]
    assert np.mean(np.abs(means) < bound) > 0.98


@pytest.mark.xfail(strict=True, reason="s / sqrt(M) ignores the correlation between grid points")
def test_medium_mean_within_grid_point_bound():
    medium = RandomMedium(0.5, 1.0)
    for seed in range(20):
        values = sample_medium(medium, 512, 1 / 16, seed).values
        assert abs(values.mean()) < 3 * medium.strength / np.sqrt(values.size)


@pytest.fixture(scope="module")
def medium_ensemble():
    medium, n, eps = RandomMedium(0.5, 1.0), 512, 1 / 16
    return medium, n, eps, np.array([sample_medium(medium, n, eps, s).values for s in range(200)])


def test_lag_zero_variance_matches_covariance(medium_ensemble):
    medium, _, _, values = medium_ensemble
    # R(0) = (2 pi)^-1 int s exp(-q^2 l^2 / 2) dq = s / (l sqrt(2 pi))
    r0 = medium.strength / (medium.correlation_length * np.sqrt(TWO_PI))
    assert np.mean(values**2) == pytest.approx(r0, rel=0.1)


def test_empirical_spectrum_matches_density(medium_ensemble):
    medium, n, eps, values = medium_ensemble
    lz = TWO_PI / eps
    q = TWO_PI * np.fft.fftfreq(n, d=lz / n)
    power = np.mean(np.abs(np.fft.fft(values, axis=1) / n) ** 2, axis=0)
    expected = medium.spectral_density(q[:, None]) / lz
    resolved = expected > 1e-6 * expected.max()
    error = np.linalg.norm(power[resolved] - expected[resolved]) / np.linalg.norm(expected[resolved])
    assert error < 0.1


# comparisons -------------------------------------------------------------------


def test_random_mode_spread_shrinks_with_seeds(crossing_pot):
    eps = 1 / 16
    bands = oracle_bands(crossing_pot, eps)
    wave = bloch_packet(gaussian, packet_state(crossing_pot, 0.25), eps)
    medium = RandomMedium(0.02, 1.0)

    def batch_mean(seeds):
        total = 0.0
        for seed in seeds:
            sample = sample_medium(medium, wave.n_nodes, eps, seed)
            total = total + bin_density(project_sigma(wigner_transform(
                split_step_solve(wave, crossing_pot, sample, eps, eps / 16, 0.5)), bands))
        return total / len(seeds)

    single = np.mean([np.abs(batch_mean([2 * i]) - batch_mean([2 * i + 1])).sum() for i in range(8)])
    many = np.abs(batch_mean(range(100, 132)) - batch_mean(range(200, 232))).sum()
    assert many < 0.5 * single


def test_random_comparison_needs_seeds(crossing_pot):
    with pytest.raises(ConfigError):
        compare_at_eps(crossing_pot, 1 / 16, mode="random", medium=RandomMedium(0.02, 1.0), seeds=())


@pytest.mark.xfail(strict=True, reason="the asymmetric Wigner transform carries an O(eps) term free transport drops")
def test_free_transport_equals_oracle_to_scheme_tolerance():
    row = compare_at_eps(FREE, 1 / 16, setup=ComparisonSetup())
    assert row.l1 < 1e-4
