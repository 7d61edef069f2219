import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bandtransport.bloch import (
    assemble_hamiltonian,
    band_grid,
    bands_at_points,
    cutoff_for_count,
    dual_set,
    find_crossings,
    fit_crossing,
    fit_power_law,
    gauge_fix,
    solve_bands,
)
from bandtransport.errors import AmbiguousOrder, ConfigError, CutoffTooSmall
from bandtransport.lattice import (
    chain_lattice,
    cosine_preset,
    crossing_preset,
    free_preset,
    honeycomb_preset,
    potential_from_items,
    square_lattice,
)

TWO_PI = 2 * np.pi

# Mathieu characteristic values for -u''/2 + 2s cos(z) u = E u with s = 0.2,
# i.e. a = 8E, q = 8s (scipy.special.mathieu_a / mathieu_b):
# p = 0 -> a_0/8, b_2/8; p = 1/2 -> b_1/8, a_1/8.
MATHIEU_EDGES = {
    0.0: (-0.13074189839206254, 0.4736222595661846),
    0.5: (-0.10777670791283495, 0.27703198922627925),
}
# Real-space finite differences with twisted boundary, N = 800 and 1600,
# Richardson-extrapolated; accurate to about 1e-7.
FD_INTERIOR = {0.3: (-0.11642242, 0.32151661)}


def test_free_hamiltonian_is_kinetic_diagonal():
    lat = square_lattice(1.0)
    duals = dual_set(lat, 15.0)
    p = np.array([0.4, 1.1])
    H = assemble_hamiltonian(p, free_preset(lat), duals)
    np.testing.assert_allclose(H, np.diag(0.5 * np.sum((p + duals.vectors) ** 2, axis=1)))


def test_cosine_hamiltonian_is_tridiagonal_with_unit_coupling():
    lat, pot = cosine_preset(1.0)  # V = 2 cos z
    duals = dual_set(lat, 6.0)
    H = assemble_hamiltonian(np.array([0.2]), pot, duals)
    c = duals.coefficients[:, 0]
    for a in range(len(c)):
        for b in range(len(c)):
            expected = 1.0 if abs(c[a] - c[b]) == 1 else 0.0
            if a != b:
                assert H[a, b] == pytest.approx(expected)


def test_honeycomb_hamiltonian_is_hermitian(honeycomb, honeycomb_cutoff):
    _, pot, _, _ = honeycomb
    H = assemble_hamiltonian(np.array([0.3, 0.2]), pot, dual_set(pot.lattice, honeycomb_cutoff))
    assert np.max(np.abs(H - H.conj().T)) < 1e-14


def test_free_square_folding():
    lat = square_lattice(1.0)
    states = solve_bands([0.0, 0.0], free_preset(lat), n_bands=5)
    energies = [s.energy for s in states]
    assert energies[0] == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(energies[1:], (TWO_PI**2) / 2, rtol=1e-12)


@pytest.mark.parametrize("p", sorted(MATHIEU_EDGES))
def test_cosine_band_edges_match_mathieu(p):
    _, pot = cosine_preset(0.2)
    energies = [s.energy for s in solve_bands([p], pot, n_bands=2)]
    np.testing.assert_allclose(energies, MATHIEU_EDGES[p], atol=1e-12)


def test_cosine_interior_matches_finite_differences():
    _, pot = cosine_preset(0.2)
    energies = [s.energy for s in solve_bands([0.3], pot, n_bands=2)]
    np.testing.assert_allclose(energies, FD_INTERIOR[0.3], atol=1e-6)


def test_cosine_cutoff_convergence():
    lat, pot = cosine_preset(1.0)
    a = solve_bands([0.0], pot, cutoff=32.0, n_bands=3)
    b = solve_bands([0.0], pot, cutoff=64.0, n_bands=3)
    for x, y in zip(a, b):
        assert abs(x.energy - y.energy) < 1e-10


def test_honeycomb_degenerate_at_k(honeycomb, honeycomb_cutoff):
    _, pot, k_point, k_prime = honeycomb
    for point in (k_point, k_prime):
        s = solve_bands(point, pot, honeycomb_cutoff, n_bands=2)
        assert abs(s[1].energy - s[0].energy) < 1e-6


def test_normalization_and_gauge(honeycomb):
    _, pot, _, _ = honeycomb
    for s in solve_bands([0.3, 0.2], pot, n_bands=2):
        assert np.sum(np.abs(s.coefficients) ** 2) == pytest.approx(1.0, abs=1e-12)
        pivot = np.argmax(np.abs(s.coefficients))
        assert abs(s.coefficients[pivot].imag) < 1e-14 and s.coefficients[pivot].real > 0


def test_validation_flags_a_too_small_cutoff():
    _, pot = cosine_preset(3.0)
    with pytest.raises(CutoffTooSmall):
        solve_bands([0.1], pot, cutoff=1.5, n_bands=2, validate=True)
    solve_bands([0.1], pot, cutoff=40.0, n_bands=2, validate=True)


def test_too_many_bands():
    _, pot = cosine_preset(0.2)
    with pytest.raises(ConfigError):
        solve_bands([0.1], pot, cutoff=1.5, n_bands=10)


def test_free_grid_is_min_fold():
    lat = chain_lattice()
    bs = band_grid(lat, free_preset(lat), (16,), n_bands=2)
    p = bs.points[:, 0]
    folded = np.sort(0.5 * (p[:, None] + np.arange(-3, 4)[None, :]) ** 2, axis=1)
    np.testing.assert_allclose(bs.energies, folded[:, :2], atol=1e-12)


@pytest.mark.parametrize("preset", ["cosine", "crossing", "honeycomb"])
def test_periodicity_in_dual_shift(preset):
    if preset == "honeycomb":
        lat, pot, _, _ = honeycomb_preset(0.1)
        p = np.array([0.31, 0.17])
    else:
        lat, pot = cosine_preset(0.2) if preset == "cosine" else crossing_preset(0.1)
        p = np.array([0.31])
    a = [s.energy for s in solve_bands(p, pot, n_bands=2)]
    b = [s.energy for s in solve_bands(p + lat.dual[0], pot, n_bands=2)]
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_honeycomb_grid_minimum_at_k():
    lat, pot, k_point, k_prime = honeycomb_preset(0.1)
    bs = band_grid(lat, pot, (24, 24), cutoff_for_count(lat, 60), workers=2)
    gap = bs.gap()
    best = bs.points[np.argmin(gap)]
    dist = [np.linalg.norm(best - k) for k in (k_point, k_prime)]
    spacing = np.linalg.norm(lat.dual[0]) / 24
    assert min(dist) < spacing
    # node nearest K or K' is the argmin
    nearest = min(np.min(np.linalg.norm(bs.points - k, axis=1)) for k in (k_point, k_prime))
    assert min(dist) == pytest.approx(nearest)


def test_workers_do_not_change_results():
    lat, pot = cosine_preset(0.2)
    a = band_grid(lat, pot, (12,), workers=1)
    b = band_grid(lat, pot, (12,), workers=3)
    np.testing.assert_array_equal(a.energies, b.energies)


def test_honeycomb_two_crossings():
    lat, pot, k_point, k_prime = honeycomb_preset(0.1)
    bs = band_grid(lat, pot, (24, 24), cutoff_for_count(lat, 60))
    found = find_crossings(bs)
    assert len(found) == 2
    for target in (k_point, k_prime):
        assert min(np.linalg.norm(f - target) for f in found) < 1e-5


def test_free_shifted_bands_have_no_crossing():
    lat = chain_lattice()
    pot = potential_from_items(lat, [((1,), 0.6), ((-1,), 0.6)])
    bs = band_grid(lat, pot, (32,))
    assert bs.gap().min() > 0.5
    assert find_crossings(bs, gap_tol=0.05) == []


def test_crossing_preset_located_against_fine_scan():
    lat, pot = crossing_preset(0.1)
    fine = band_grid(lat, pot, (10_000,))
    brute = fine.points[np.argmin(fine.gap()), 0]
    found = find_crossings(band_grid(lat, pot, (32,)))
    assert len(found) == 1
    assert abs(found[0][0] - brute) < 1e-6


def test_honeycomb_fit_is_conical_and_stable():
    lat, pot, k_point, _ = honeycomb_preset(0.1)
    bs = band_grid(lat, pot, (6, 6), cutoff_for_count(lat, 200))
    a = fit_crossing(bs, k_point, 0.02)
    b = fit_crossing(bs, k_point, 0.01)
    assert a.order == 1 and b.order == 1
    assert a.residual < 0.05 and b.residual < 0.05
    assert abs(a.slope - b.slope) / b.slope < 0.02


def test_power_law_fit_on_exact_quadratic_data():
    rho = np.linspace(0.01, 0.1, 8)
    order, slope, residual, _ = fit_power_law(rho, 0.7 * rho**2)
    assert order == 2
    assert slope == pytest.approx(0.7, abs=1e-6)
    assert residual < 1e-12


def test_power_law_ambiguous():
    # an exponent between 1 and 2 fits both candidates about equally badly
    rho = np.linspace(0.1, 1.0, 6)
    with pytest.raises(AmbiguousOrder):
        fit_power_law(rho, rho**1.43)


def test_csv_export(tmp_path):
    lat, pot = cosine_preset(0.2)
    bs = band_grid(lat, pot, (4,))
    bs.write_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "p1,E1,E2" and len(lines) == 5
    assert bs.metadata()["potential_hash"] == band_grid(lat, pot, (4,)).potential_hash()


# properties -------------------------------------------------------------------

ps_1d = st.floats(0.0, 1.0, exclude_max=True)


@given(ps_1d, st.integers(0, 2**31 - 1))
def test_spectral_stability_under_perturbation(p, seed):
    lat, pot = cosine_preset(0.2)
    duals = dual_set(lat, 8.0)
    H = assemble_hamiltonian(np.array([p]), pot, duals)
    base = np.linalg.eigvalsh(H)
    rng = np.random.default_rng(seed)
    delta = 1e-8
    for _ in range(20):
        X = rng.normal(size=H.shape) + 1j * rng.normal(size=H.shape)
        X = X + X.conj().T
        X *= delta / np.linalg.norm(X, 2)
        assert np.max(np.abs(np.linalg.eigvalsh(H + X) - base)) <= 2 * delta


@given(ps_1d, st.floats(1.0, 8.0))
def test_variational_monotonicity_1d(p, cutoff):
    _, pot = cosine_preset(1.0)
    small = solve_bands([p], pot, cutoff, n_bands=2)
    large = solve_bands([p], pot, cutoff + 1.0, n_bands=2)
    for a, b in zip(small, large):
        assert b.energy <= a.energy + 1e-12


@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))
def test_variational_monotonicity_honeycomb(a, b):
    lat, pot, _, _ = honeycomb_preset(0.3)
    p = a * lat.dual[0] + b * lat.dual[1]
    small = solve_bands(p, pot, cutoff_for_count(lat, 30), n_bands=2)
    large = solve_bands(p, pot, cutoff_for_count(lat, 60), n_bands=2)
    for x, y in zip(small, large):
        assert y.energy <= x.energy + 1e-12


@given(st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False), min_size=1, max_size=12)
       .filter(lambda v: max(abs(x) for x in v) > 1e-3))
def test_gauge_fix_idempotent(values):
    c = np.asarray(values)
    once = gauge_fix(c)
    np.testing.assert_allclose(gauge_fix(once), once, atol=1e-12)
    np.testing.assert_allclose(np.abs(once), np.abs(c), atol=1e-12)


def test_gauge_fix_keeps_energies(honeycomb):
    _, pot, _, _ = honeycomb
    s = solve_bands([0.3, 0.2], pot, n_bands=2)[0]
    H = assemble_hamiltonian(s.p, pot, s.duals)
    rotated = gauge_fix(s.coefficients * np.exp(0.7j))
    assert np.real(rotated.conj() @ H @ rotated) == pytest.approx(s.energy, abs=1e-12)


def test_honeycomb_time_reversal_on_grid():
    lat, pot, _, _ = honeycomb_preset(0.1)
    bs = band_grid(lat, pot, (8, 8), cutoff_for_count(lat, 60))
    mirrored = bands_at_points(pot, -bs.points, cutoff=bs.cutoff)
    np.testing.assert_allclose(mirrored.energies, bs.energies, atol=1e-8)


def test_state_evaluation_is_bloch_periodic():
    lat, pot = cosine_preset(0.2)
    s = solve_bands([0.3], pot, n_bands=1)[0]
    z = np.array([[0.4], [1.3]])
    shifted = s.evaluate(z + TWO_PI)
    np.testing.assert_allclose(shifted, np.exp(1j * 0.3 * TWO_PI) * s.evaluate(z), atol=1e-12)
