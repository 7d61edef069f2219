"""Two-scale coupling objects built from Bloch states.

A ``QFunction`` stores the Lambda-periodic function Q_mn(z, mu, p) as
coefficients F[kappa, mu] of exp(i kappa . z), with kappa running over a
dual set large enough to hold every difference of two plane-wave indices:

    Q_mn(z, mu, p) = c^m_mu * sum_kappa conj(c^n_{mu - kappa}) exp(i kappa . z).

The pairing <f, g> sums over mu and cell-averages over z, which in this
representation is sum(F * conj(G)).  All cell integrals here are evaluated in
coefficient space; the only real-space quadrature is the direct evaluation
inside :func:`verify_eta`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bloch import BlochState, dual_set, solve_bands
from .errors import (
    ConfigError,
    MomentumAliasing,
    MomentumMismatch,
    QuadratureNotConverged,
    TruncationOverflow,
)
from .lattice import DualSet, FourierPotential, Lattice, decompose_momentum

LOSS_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class QFunction:
    pair: tuple[int, int] | None
    p: np.ndarray
    kappa: DualSet
    mu: DualSet
    values: np.ndarray  # (len(kappa), len(mu))

    def evaluate(self, z) -> np.ndarray:
        """Q(z, mu) at points z (..., d); returns (..., len(mu))."""
        z = np.asarray(z, dtype=float)
        return np.exp(1j * (z @ self.kappa.vectors.T)) @ self.values

    def gradient(self) -> list["QFunction"]:
        return [
            QFunction(self.pair, self.p, self.kappa, self.mu, 1j * self.kappa.vectors[:, i, None] * self.values)
            for i in range(self.p.shape[0])
        ]

    def momentum_weighted(self) -> list["QFunction"]:
        """(p + mu)_i Q for each axis i."""
        k = self.p + self.mu.vectors
        return [QFunction(self.pair, self.p, self.kappa, self.mu, self.values * k[None, :, i]) for i in range(k.shape[1])]

    def like(self, values: np.ndarray) -> "QFunction":
        return QFunction(self.pair, self.p, self.kappa, self.mu, values)


def pairing(f: QFunction, g: QFunction) -> complex:
    """sum over mu of the cell average of f * conj(g)."""
    return complex(np.vdot(g.values, f.values))


def kappa_set(duals: DualSet) -> DualSet:
    radius = float(np.max(np.linalg.norm(duals.vectors, axis=1)))
    return dual_set(duals.lattice, 2.0 * radius * (1 + 1e-9) + 1e-12)


def same_basis(a: DualSet, b: DualSet) -> bool:
    return a is b or (a.lattice is b.lattice and len(a) == len(b) and np.array_equal(a.coefficients, b.coefficients))


def _check_same_p(a: BlochState, b: BlochState) -> None:
    if not same_basis(a.duals, b.duals) or np.max(np.abs(a.p - b.p)) > 1e-12:
        raise MomentumMismatch("states must share quasimomentum and plane-wave basis")


def build_Q(state_m: BlochState, state_n: BlochState, kappa: DualSet | None = None) -> QFunction:
    _check_same_p(state_m, state_n)
    duals = state_m.duals
    kappa = kappa_set(duals) if kappa is None else kappa
    # index of mu - kappa inside the plane-wave set, per (kappa, mu)
    target = duals.coefficients[None, :, :] - kappa.coefficients[:, None, :]
    idx = duals.lookup(target.reshape(-1, duals.coefficients.shape[1])).reshape(len(kappa), len(duals))
    cn = np.where(idx >= 0, np.conj(state_n.coefficients)[np.clip(idx, 0, None)], 0.0)
    values = state_m.coefficients[None, :] * cn
    return QFunction((state_m.band, state_n.band), state_m.p.copy(), kappa, duals, values)


@dataclass(frozen=True)
class LResult:
    field: QFunction
    loss: float


def apply_L(qf: QFunction, pot: FourierPotential, tolerance: float = LOSS_TOLERANCE) -> QFunction:
    return apply_L_with_loss(qf, pot, tolerance).field


def apply_L_with_loss(qf: QFunction, pot: FourierPotential, tolerance: float = LOSS_TOLERANCE) -> LResult:
    """k . grad_z F + (i/2) lap_z F + i sum_lam V(lam) e^{i lam z} [F(k - lam) - F(k)].

    Output contributions landing outside the stored kappa set are dropped and
    measured; shifts leaving the mu set are part of the plane-wave truncation
    of the Bloch problem itself and are not counted.
    """
    F = qf.values
    k = qf.p + qf.mu.vectors
    kap = qf.kappa.vectors
    out = 1j * (kap @ k.T - 0.5 * np.einsum("ij,ij->i", kap, kap)[:, None]) * F
    dropped = 0.0
    for key, value in pot.support():
        lam = np.asarray(key, dtype=np.int64)
        src_k = qf.kappa.shifted(-lam)  # kappa - lam
        src_m = qf.mu.shifted(-lam)  # mu - lam
        ok_k = src_k >= 0
        shifted_k = np.zeros_like(F)
        shifted_k[ok_k] = F[src_k[ok_k]]
        both = np.zeros_like(F)
        ok_m = src_m >= 0
        both[:, ok_m] = shifted_k[:, src_m[ok_m]]
        out += 1j * value * (both - shifted_k)
        # sources whose image kappa + lam is not stored
        lost = qf.kappa.shifted(lam) < 0
        dropped += abs(value) ** 2 * float(np.sum(np.abs(F[lost]) ** 2)) * 2.0
    norm = float(np.linalg.norm(F))
    loss = np.sqrt(dropped) / norm if norm > 0 else 0.0
    if loss > tolerance:
        raise TruncationOverflow(f"potential convolution dropped {loss:.3e} of the field norm")
    return LResult(qf.like(out), loss)


def coupling_D(states: Sequence[BlochState]) -> np.ndarray:
    """D[l, n, i] = sum_mu (p + mu)_i c^l_mu conj(c^n_mu) = <(-i d_i) Psi_l, Psi_n>."""
    for s in states[1:]:
        _check_same_p(states[0], s)
    k = states[0].p + states[0].duals.vectors
    C = np.stack([s.coefficients for s in states])
    return np.einsum("ai,li,ni->lna", k.T, C, np.conj(C))


def _relabel_shift(state: BlochState, arg) -> np.ndarray:
    lat = state.duals.lattice
    shift = lat.dual_coordinates(np.asarray(arg, dtype=float) - state.p)
    coeff = np.rint(shift)
    if np.max(np.abs(shift - coeff)) > 1e-9:
        raise MomentumAliasing("requested momentum differs from the state's reference by a non-dual vector")
    return coeff.astype(np.int64)


def overlap_A(states_q: Sequence[BlochState], states_p: Sequence[BlochState], q=None, p=None) -> np.ndarray:
    """A[m, j] = (1/|C|) int_C exp(-i(q - p).y) Psi_m(y, q) conj(Psi_j(y, p)) dy.

    ``q`` and ``p`` default to the reference momenta of the two state lists
    and may differ from them by dual vectors (Lambda*-periodic extension).
    """
    ref_q, ref_p = states_q[0], states_p[0]
    lam_q = _relabel_shift(ref_q, ref_q.p if q is None else q)
    lam_p = _relabel_shift(ref_p, ref_p.p if p is None else p)
    if not same_basis(ref_q.duals, ref_p.duals):
        raise MomentumAliasing("states must share the plane-wave basis")
    duals = ref_q.duals
    idx = duals.shifted(lam_p - lam_q)  # nu - lam_q + lam_p
    ok = idx >= 0
    Cq = np.stack([s.coefficients for s in states_q])[:, ok]
    Cp = np.stack([s.coefficients for s in states_p])[:, idx[ok]]
    return Cq @ np.conj(Cp).T


def gauge_rotate(state: BlochState, phase: float) -> BlochState:
    return state.with_phase(np.exp(1j * phase))


# identity checks -------------------------------------------------------------


@dataclass
class IdentityReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-8

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> dict:
        return {"errors": dict(self.errors), "tolerance": self.tolerance, "passed": self.passed}


def gradient_pairing_expected(D: np.ndarray, m: int, n: int, j: int, l: int) -> np.ndarray:
    """<grad Q_mn, Q_jl> = <grad Psi_m, Psi_j> d_nl + conj<grad Psi_n, Psi_l> d_mj.

    With <grad Psi_a, Psi_b> = i D[a, b].
    """
    val = np.zeros(D.shape[2], dtype=complex)
    if n == l:
        val += 1j * D[m, j]
    if m == j:
        val += np.conj(1j * D[n, l])
    return val


def p_orthogonality_weak(states_p, pot: FourierPotential, q0, test_function, n_grid: int = 8) -> np.ndarray:
    """Weak pairing of sum_mu (1/|B|) int_{R^d} P_mn(q) conj(P_jl(q0)) dz against phi(q).

    The z integral runs over an n_grid^d supercell, whose periodicity turns
    the q-integral over B into a Riemann sum on the matching q-grid.  For a
    grid offset q - q0 that is not a dual vector the supercell sum of the
    Bloch phases vanishes, so only q = q0 contributes, with supercell volume
    n^d |C|.  Returns the (m, n, j, l) array of weak values.
    """
    ref = states_p[0]
    lat = ref.duals.lattice
    d = lat.dimension
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    axes = [np.arange(n_grid) / n_grid for _ in range(d)]
    qs = q0 + np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d) @ lat.dual
    n_bands = len(states_p)
    Cp = np.stack([s.coefficients for s in states_p])
    mu_overlap = Cp @ np.conj(Cp).T  # sum_mu c^m_mu conj(c^j_mu)
    states_q0 = solve_bands(ref.p + q0, pot, ref.duals.cutoff, n_bands)
    weak = np.zeros((n_bands,) * 4, dtype=complex)
    for q in qs:
        delta = lat.dual_coordinates(q - q0)
        if np.max(np.abs(delta - np.rint(delta))) > 1e-9:
            continue
        states_q = solve_bands(ref.p + q, pot, ref.duals.cutoff, n_bands)
        inner = overlap_A(states_q0, states_q)  # [l, n] = <Psi_l(q0), Psi_n(q)>
        supercell = n_grid**d * lat.cell_volume
        weight = lat.bz_volume / n_grid**d * test_function(q)
        weak += weight * supercell / lat.bz_volume * np.einsum("mj,ln->mnjl", mu_overlap, inner)
    return weak


def verify_orthogonality_identities(states: Sequence[BlochState], pot: FourierPotential | None = None, tolerance: float = 1e-8,
                     test_functions=None, q0=None) -> IdentityReport:
    """Check the Q-orthogonality, momentum and gradient pairings, and P-orthogonality.

    The P-orthogonality value carries a factor |C| under the normalization
    sum |c|^2 = 1, i.e. the weak limit is |C| d_mj d_nl phi(q0).
    """
    n = len(states)
    Q = {(a, b): build_Q(states[a], states[b]) for a in range(n) for b in range(n)}
    D = coupling_D(states)
    eye = np.eye(n)
    ortho = mom = grad = 0.0
    for (m, nn), qmn in Q.items():
        kq = qmn.momentum_weighted()
        gq = qmn.gradient()
        for (j, l), qjl in Q.items():
            ortho = max(ortho, abs(pairing(qmn, qjl) - eye[m, j] * eye[nn, l]))
            lhs_k = np.array([pairing(f, qjl) for f in kq])
            mom = max(mom, float(np.max(np.abs(lhs_k - D[m, j] * eye[nn, l]))))
            lhs_g = np.array([pairing(f, qjl) for f in gq])
            grad = max(grad, float(np.max(np.abs(lhs_g - gradient_pairing_expected(D, m, nn, j, l)))))
    report = IdentityReport({"q_orthogonality": ortho, "momentum_pairing": mom, "gradient_pairing": grad}, tolerance)
    if pot is not None:
        lat = states[0].duals.lattice
        funcs = test_functions or default_test_functions(lat)
        q0 = np.zeros(lat.dimension) if q0 is None else np.asarray(q0, dtype=float)
        worst = 0.0
        expected = lat.cell_volume * np.einsum("mj,nl->mnjl", eye, eye)
        for phi in funcs:
            weak = p_orthogonality_weak(states, pot, q0, phi)
            worst = max(worst, float(np.max(np.abs(weak - expected * phi(q0)))))
        report.errors["p_orthogonality"] = worst
    return report


def default_test_functions(lat: Lattice, count: int = 10):
    """Smooth Lambda*-periodic test functions on B."""
    funcs = []
    for k in range(count):
        coeffs = np.array([(k % 3) - 1, (k // 3) % 3 - 1][: lat.dimension] if lat.dimension == 2 else [k % 3 - 1])
        shift = 0.3 * (k + 1)

        def phi(q, coeffs=coeffs, shift=shift, k=k):
            theta = lat.dual_coordinates(q)
            return 1.0 + 0.5 * np.cos(2 * np.pi * coeffs @ theta + shift) + 0.1 * k

        funcs.append(phi)
    return funcs


# eta single-mode check -------------------------------------------------------


@dataclass(frozen=True)
class EtaParams:
    theta: float
    mode: np.ndarray  # q_N, the only wavevector carried by the surrogate N-hat
    amplitude: complex
    pair: tuple[int, int]  # (j, l), 1-based
    p: np.ndarray

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigError("theta must be positive")


@dataclass(frozen=True)
class EtaReport:
    direct: complex
    closed: complex
    term_I: complex
    term_II: complex
    relative_error: float
    q0: np.ndarray
    resolution: int

    def to_dict(self) -> dict:
        return {
            "direct": [self.direct.real, self.direct.imag],
            "closed": [self.closed.real, self.closed.imag],
            "relative_error": self.relative_error,
            "q0": self.q0.tolist(),
            "resolution": self.resolution,
        }


def eta_resonance(params: EtaParams, lat: Lattice):
    """q0 in B selected by the surrogate, and the dual vector with -q_N = q0 + mu."""
    dec = decompose_momentum(-np.asarray(params.mode, dtype=float), lat)
    return dec.p, dec.mu.value


def eta_closed_form(params: EtaParams, states_p, states_q, sigma_p, sigma_q) -> tuple[complex, complex, complex]:
    """(I), (II) and their combination |C| (I) + (II), all at q0 = q0*.

    ``states_q`` are the states at p + q0* (any dual representative).
    """
    lat = states_p[0].duals.lattice
    j, l = params.pair[0] - 1, params.pair[1] - 1
    target = states_p[0].p - np.asarray(params.mode, dtype=float)
    A = overlap_A(states_q, states_p, q=_representative(states_q[0], target), p=states_p[0].p)
    denom = states_q[l].energy - states_p[j].energy + 1j * params.theta
    a = params.amplitude
    term_I = a * np.sum(sigma_q[:, l] * A[:, j]) / denom
    term_II = -a * lat.cell_volume * np.sum(sigma_p[j, :] * A[l, :]) / denom
    return complex(term_I), complex(term_II), complex(lat.cell_volume * term_I + term_II)


def _representative(state: BlochState, k) -> np.ndarray:
    """k itself, after checking it differs from the state's momentum by a dual vector."""
    _relabel_shift(state, k)
    return np.asarray(k, dtype=float)


def _cell_grid(lat: Lattice, n: int) -> np.ndarray:
    axes = [np.arange(n) / n for _ in range(lat.dimension)]
    frac = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, lat.dimension)
    return frac @ lat.basis


def eta_direct(params: EtaParams, states_p, states_q, sigma_p, sigma_q, resolution: int) -> complex:
    """Cell quadrature of the direct form with W0 synthesized from sigma.

    Q_mn(z, mu, p) is built from its defining y-average, evaluated as the
    trapezoid average of exp(-i(p+mu).w) Psi_m(w, p) on the same grid.
    """
    lat = states_p[0].duals.lattice
    duals = states_p[0].duals
    z = _cell_grid(lat, resolution)
    j, l = params.pair[0] - 1, params.pair[1] - 1
    p = states_p[0].p
    pq = states_q[0].p
    qN = np.asarray(params.mode, dtype=float)

    psi_p = np.stack([s.evaluate(z) for s in states_p])  # (bands, npts)
    psi_q = np.stack([s.evaluate(z) for s in states_q])

    def y_average(psi, ref, k_vectors):
        # avg_w exp(-i k.w) Psi(w) for each k; k = ref + mu
        phase = np.exp(-1j * (k_vectors @ z.T))
        return psi @ phase.T / z.shape[0]  # (bands, n_k)

    k_direct = p + duals.vectors  # p + mu
    k_shift = k_direct - qN  # p + mu - q_N, reduced to reference pq
    mu1 = k_shift - pq
    frac = lat.dual_coordinates(mu1)
    if np.max(np.abs(frac - np.rint(frac))) > 1e-9:
        raise MomentumMismatch("states_q are not at p - q_N modulo the dual lattice")

    coef_p = y_average(psi_p, p, k_direct)  # c^m_mu(p) by quadrature
    coef_q = y_average(psi_q, pq, k_shift)  # c^m_{mu1}(pq)

    e_direct = np.exp(1j * (z @ k_direct.T))  # (npts, n_mu)
    e_shift = np.exp(1j * (z @ k_shift.T))
    w_shift = np.einsum("mn,mu,zu,nz->zu", sigma_q, coef_q, e_shift, np.conj(psi_q))
    w_here = np.einsum("mn,mu,zu,nz->zu", sigma_p, coef_p, e_direct, np.conj(psi_p))
    P = coef_p[j][None, :] * e_direct * np.conj(psi_q[l])[:, None]
    carrier = np.exp(1j * (z @ qN))[:, None]
    integrand = params.amplitude * carrier * (w_shift - w_here) * np.conj(P)
    denom = states_q[l].energy - states_p[j].energy + 1j * params.theta
    return complex(lat.cell_volume * integrand.sum(axis=1).mean() / denom)


def verify_eta(params: EtaParams, pot: FourierPotential, sigma_p, sigma_q, cutoff: float | None = None,
               resolution: int = 32, tolerance: float = 1e-7) -> EtaReport:
    """Direct quadrature against the closed form for a single-mode N-hat.

    With N-hat(q) = (2 pi)^d a delta(q - q_N), both forms are proportional to
    delta(q0 - q0*); the reported numbers are the coefficients of that delta.
    """
    lat = pot.lattice
    p = np.atleast_1d(np.asarray(params.p, dtype=float))
    q0, _ = eta_resonance(params, lat)
    pq = decompose_momentum(p + q0, lat).p
    n_bands = 2
    states_p = solve_bands(p, pot, cutoff, n_bands)
    states_q = solve_bands(pq, pot, cutoff, n_bands)
    sigma_p = np.asarray(sigma_p, dtype=complex)
    sigma_q = np.asarray(sigma_q, dtype=complex)
    coarse = eta_direct(params, states_p, states_q, sigma_p, sigma_q, resolution)
    fine = eta_direct(params, states_p, states_q, sigma_p, sigma_q, 2 * resolution)
    if abs(fine - coarse) > tolerance * max(1.0, abs(fine)):
        raise QuadratureNotConverged(f"direct eta changed by {abs(fine - coarse):.3e} on doubling resolution")
    term_I, term_II, closed = eta_closed_form(params, states_p, states_q, sigma_p, sigma_q)
    scale = abs(closed)
    rel = abs(fine - closed) / scale if scale > 0 else abs(fine - closed)
    return EtaReport(fine, closed, term_I, term_II, float(rel), q0, 2 * resolution)
