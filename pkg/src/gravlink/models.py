"""Protocol builders for every measurement + feedback gravity model.

Each builder turns physical parameters into a ProtocolSpec whose master
equation carries the model's effective Hamiltonian and decoherence terms:

  ktm_protocol        two trapped masses in 1D, linearized pair coupling
                      K = 2 G m1 m2 / d^3, channels (x1 -> K x2), (x2 -> K x1)
  pairwise_protocol   N masses, every position measured once per partner and
                      per direction pair (9N(N-1) channels in 3D)
  universal_protocol  N masses, every position measured once, the record
                      broadcast through the full coupling tensor (3N channels)
  ktm2_lattice_protocol  occupation-number lattice with regularized couplings
                      chi_ab = -G m^2 / (2(|x_a - x_b| + a))
  linearized_td_protocol  mass-density measurement expanded to bilinear order:
                      coefficient tables from the radial eta integrals

Builders accept SI (or any coherent) inputs and emit dimensionless protocols
scaled by (m1, l1 = sqrt(hbar/(m1 Omega1)), 1/Omega1); the scale triple is
recorded in the protocol label and meta for round trips.  SI constants stay
out of every other module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .hilbert import HilbertSpec, Mode, Operator, combine, number_op, position_op, free_hamiltonian
from .kernels import RadialKernel, SmearingProfile, eta_tensor, classify_eta_integrand, CONVERGES, DivergentIntegralError
from .stochastic import FeedbackChannel, MeasurementChannel, ProtocolSpec

G_NEWTON = 6.6743e-11        # m^3 kg^-1 s^-2
HBAR_SI = 1.0545718e-34      # J s


@dataclass(frozen=True)
class ModelParams:
    """Physical inputs shared by the particle models.

    positions are equilibrium positions, shape (N,) for a collinear chain
    (placed on the z axis) or (N, 3); masses and trap frequencies are per
    particle (isotropic traps).
    """

    masses: tuple
    positions: np.ndarray
    omegas: tuple
    G: float = 1.0
    hbar: float = 1.0
    cutoff: int = 8
    lattice_a: float | None = None

    def __post_init__(self):
        masses = tuple(float(m) for m in self.masses)
        omegas = tuple(float(w) for w in self.omegas)
        pos = np.atleast_1d(np.asarray(self.positions, dtype=float))
        if pos.ndim == 1:
            xyz = np.zeros((pos.size, 3))
            xyz[:, 2] = pos
            pos = xyz
        if pos.shape != (len(masses), 3):
            raise ValueError("positions must have shape (N,) or (N, 3)")
        if len(omegas) != len(masses):
            raise ValueError("one trap frequency per mass required")
        if any(m <= 0.0 for m in masses):
            raise ValueError("masses must be positive")
        for i in range(len(masses)):
            for j in range(i + 1, len(masses)):
                if np.linalg.norm(pos[i] - pos[j]) == 0.0:
                    raise ValueError(f"particles {i} and {j} coincide")
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "positions", pos)

    @property
    def n_particles(self) -> int:
        return len(self.masses)


@dataclass(frozen=True)
class CouplingTensor:
    """Bilinear couplings K[a,b,l,j] of the linearized pair potential.

    K_ablj = G m_a m_b (3 d_l d_j / |d|^5 - delta_lj / |d|^3) with d the
    separation vector; diagonal blocks (a == b) are zero placeholders.
    """

    k: np.ndarray
    positions: np.ndarray
    masses: tuple

    def __post_init__(self):
        k = np.asarray(self.k, dtype=float)
        n = k.shape[0]
        if k.shape != (n, n, 3, 3):
            raise ValueError("coupling tensor must be (N, N, 3, 3)")
        scale = max(np.abs(k).max(), 1e-300)
        if np.abs(k - k.transpose(1, 0, 3, 2)).max() > 1e-12 * scale:
            raise ValueError("coupling tensor must satisfy K_ablj = K_bajl")
        tr = np.einsum("abll->ab", k)
        if np.abs(tr).max() > 1e-12 * scale:
            raise ValueError("coupling tensor blocks must be traceless")
        object.__setattr__(self, "k", k)

    def axis_coupling(self, a: int, b: int, axis: int = 2) -> float:
        return float(self.k[a, b, axis, axis])


def coupling_K(m1: float, m2: float, d: float, G: float = G_NEWTON) -> float:
    """Axial pair coupling K = 2 G m1 m2 / d^3 (SI G by default)."""
    if min(m1, m2, d) <= 0.0:
        raise ValueError("masses and separation must be positive")
    return 2.0 * G * m1 * m2 / d**3


def coupling_tensor(params: ModelParams) -> CouplingTensor:
    """Full 3D coupling tensor of the linearized many-body pair potential."""
    n = params.n_particles
    k = np.zeros((n, n, 3, 3))
    eye = np.eye(3)
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            d = params.positions[a] - params.positions[b]
            r = np.linalg.norm(d)
            k[a, b] = params.G * params.masses[a] * params.masses[b] * (
                3.0 * np.outer(d, d) / r**5 - eye / r**3)
    return CouplingTensor(k, params.positions, params.masses)


# ---------------------------------------------------------------------------
# information-rate minimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaMinimum:
    gamma: float           # analytic argmin 2 hbar K
    coefficient: float     # minimized dephasing coefficient K / 2 hbar
    gamma_numeric: float   # bracketed 1D minimization result


def decoherence_coefficient(gamma: float, K: float, hbar: float = 1.0) -> float:
    """Per-channel dephasing coefficient gamma/8 hbar^2 + K^2/2 gamma."""
    return gamma / (8.0 * hbar**2) + K**2 / (2.0 * gamma)


def minimize_gamma(K: float, hbar: float = 1.0) -> GammaMinimum:
    """Minimize gamma/8 hbar^2 + K^2/2 gamma; the argmin is 2 hbar K.

    The numerical branch brackets the stationary point of the coefficient by
    scale counting alone (+-30 e-folds around K hbar) and polishes it with
    Brent root finding; near the minimum the coefficient itself is flat to
    machine precision, so derivative-free golden search cannot certify 1e-9
    but the stationarity root can.  Disagreement beyond 1e-9 relative raises.
    """
    if not K > 0.0:
        raise ValueError("coupling must be positive")
    analytic = 2.0 * hbar * K

    def slope(u):
        g = math.exp(u)
        return g / (8.0 * hbar**2) - K**2 / (2.0 * g)

    center = math.log(K * hbar)
    numeric = math.exp(brentq(slope, center - 30.0, center + 30.0,
                              xtol=1e-15, rtol=8.9e-16))
    if abs(numeric - analytic) > 1e-9 * analytic:
        raise ArithmeticError(
            f"numerical gamma minimum {numeric!r} disagrees with 2 hbar K = {analytic!r}")
    return GammaMinimum(analytic, K / (2.0 * hbar), numeric)


# ---------------------------------------------------------------------------
# dimensionless scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScaleTriple:
    """(mass, length, time) scales taking inputs to internal hbar = 1 units."""

    mass: float
    length: float
    time: float
    hbar_in: float

    @classmethod
    def from_first_mode(cls, params: ModelParams) -> "ScaleTriple":
        m0 = params.masses[0]
        if params.omegas[0] <= 0.0:
            raise ValueError("first trap frequency must be positive to set scales")
        t0 = 1.0 / params.omegas[0]
        l0 = math.sqrt(params.hbar / (m0 * params.omegas[0]))
        return cls(m0, l0, t0, params.hbar)

    def coupling(self, K: float) -> float:
        """Spring-constant-like couplings (energy/length^2)."""
        return K * self.length**2 * self.time / self.hbar_in

    def rate(self, gamma: float) -> float:
        """Information rates of position measurements."""
        return gamma * self.length**2 * self.time / self.hbar_in**2

    def label(self) -> str:
        return f"m0={self.mass:g},l0={self.length:g},t0={self.time:g}"


def _mode_spec(params: ModelParams, labels, cutoff=None) -> HilbertSpec:
    """One mode per (particle, axis) entry of labels, in dimensionless units."""
    s = ScaleTriple.from_first_mode(params)
    modes = []
    for a, _axis in labels:
        modes.append(Mode(mass=params.masses[a] / s.mass,
                          trap_frequency=params.omegas[a] * s.time))
    return HilbertSpec(tuple(modes), cutoff=cutoff or params.cutoff, hbar=1.0)


# ---------------------------------------------------------------------------
# KTM (two particles, 1D)
# ---------------------------------------------------------------------------

def ktm_protocol(params: ModelParams, gamma=None, coupling: float | None = None) -> ProtocolSpec:
    """Two-mode protocol (a1 = x1, b1 = K x2, g1), (a2 = x2, b2 = K x1, g2).

    gamma may be a scalar, a pair, or None (per-channel minimum 2 hbar K).
    ``coupling`` overrides the derived K = 2 G m1 m2 / d^3 (input units).
    """
    if params.n_particles != 2:
        raise ValueError("the two-particle model needs exactly 2 masses")
    scales = ScaleTriple.from_first_mode(params)
    d = float(np.linalg.norm(params.positions[0] - params.positions[1]))
    K_in = coupling if coupling is not None else (
        2.0 * params.G * params.masses[0] * params.masses[1] / d**3)
    K = scales.coupling(K_in)
    if gamma is None:
        gammas = (2.0 * K, 2.0 * K)
    else:
        pair = (gamma, gamma) if np.isscalar(gamma) else tuple(gamma)
        gammas = tuple(scales.rate(g) for g in pair)
    spec = _mode_spec(params, [(0, 2), (1, 2)])
    x = [position_op(spec, m) for m in range(2)]
    channels = []
    for alpha, beta in ((0, 1), (1, 0)):
        b = combine([x[beta]], [K], hermitian=True)
        channels.append((MeasurementChannel(x[alpha], gammas[alpha]),
                         FeedbackChannel(b)))
    return ProtocolSpec(
        free_hamiltonian(spec), tuple(channels),
        label=f"ktm[{scales.label()}]", hbar=1.0, space=spec,
        meta={"coupling": K, "gammas": gammas, "scales": scales})


def ktm_decoherence_coefficients(K: float, gammas, hbar: float = 1.0) -> np.ndarray:
    """Diagonal dephasing matrix diag(g_a/8 hbar^2 + K^2/2 g_b) of the pair model."""
    g1, g2 = gammas
    return np.diag([g1 / (8 * hbar**2) + K**2 / (2 * g2),
                    g2 / (8 * hbar**2) + K**2 / (2 * g1)])


# ---------------------------------------------------------------------------
# pairwise and universal generalizations
# ---------------------------------------------------------------------------

def _collinear_axis(params: ModelParams) -> int:
    pos = params.positions
    spread = pos.max(axis=0) - pos.min(axis=0)
    axes = np.nonzero(spread > 0)[0]
    if axes.size != 1:
        raise ValueError("1D reduction needs positions collinear along one axis")
    return int(axes[0])


def _axis_labels(n: int, ndim: int, axis: int):
    if ndim == 1:
        return [(a, axis) for a in range(n)]
    return [(a, l) for a in range(n) for l in range(3)]


def _rates_pairwise(rates, kmat: np.ndarray, hbar: float) -> np.ndarray:
    """Validate/construct the symmetric rate table gamma[a,b,(l,j)]."""
    if rates is None:
        out = 2.0 * hbar * np.abs(kmat)
        return out
    r = np.asarray(rates, dtype=float)
    if r.ndim == 0:
        return np.full_like(kmat, float(r))
    if r.shape != kmat.shape:
        raise ValueError(f"rates must be scalar or have shape {kmat.shape}")
    if kmat.ndim == 2:
        sym_ok = np.allclose(r, r.T, rtol=0, atol=1e-12 * max(r.max(), 1))
    else:
        sym_ok = (np.allclose(r, r.transpose(1, 0, 2, 3), rtol=0, atol=1e-12 * r.max())
                  and np.allclose(r, r.transpose(0, 1, 3, 2), rtol=0, atol=1e-12 * r.max()))
    if not sym_ok:
        raise ValueError("pairwise rates must satisfy g_ab.. = g_ba.. and g_..lj = g_..jl")
    return r


def pairwise_protocol(params: ModelParams, rates=None, ndim: int = 1) -> ProtocolSpec:
    """Pairwise model: channels (a = x_al, b = K_ablj x_bj), one per record.

    rates: scalar, full table, or None for the per-channel minimum
    2 hbar |K| (channels whose coupling vanishes are dropped in that case).
    Tables are in input units, shape (N,N) for ndim=1 or (N,N,3,3).
    """
    tensor = coupling_tensor(params)
    scales = ScaleTriple.from_first_mode(params)
    n = params.n_particles
    if ndim == 1:
        axis = _collinear_axis(params)
        kmat = tensor.k[:, :, axis, axis]
    elif ndim == 3:
        axis = 2
        kmat = tensor.k
    else:
        raise ValueError("ndim must be 1 or 3")
    rate_tab = _rates_pairwise(rates, kmat, params.hbar)
    labels = _axis_labels(n, ndim, axis)
    spec = _mode_spec(params, labels)
    xs = {lab: position_op(spec, i) for i, lab in enumerate(labels)}

    channels = []
    minimized = rates is None
    pairs = ([(a, b, axis, axis) for a in range(n) for b in range(n) if b != a]
             if ndim == 1 else
             [(a, b, l, j) for a in range(n) for b in range(n) if b != a
              for l in range(3) for j in range(3)])
    for a, b, l, j in pairs:
        K_in = kmat[a, b] if ndim == 1 else kmat[a, b, l, j]
        g_in = rate_tab[a, b] if ndim == 1 else rate_tab[a, b, l, j]
        if minimized and K_in == 0.0:
            continue
        if g_in <= 0.0:
            raise ValueError("information rates must be positive")
        K = scales.coupling(K_in)
        gam = scales.rate(g_in)
        bop = combine([xs[(b, j)]], [K], hermitian=True)
        channels.append((MeasurementChannel(xs[(a, l)], gam), FeedbackChannel(bop)))
    return ProtocolSpec(
        free_hamiltonian(spec), tuple(channels),
        label=f"pairwise[N={n},ndim={ndim},{scales.label()}]", hbar=1.0,
        space=spec, meta={"tensor": tensor, "scales": scales, "ndim": ndim,
                          "axis": axis, "rates": rate_tab})


def default_universal_rates(params: ModelParams, ndim: int = 1) -> np.ndarray:
    """Heuristic default gamma_al = 2 hbar sqrt(sum_bj K_ablj^2).

    A per-channel analogue of the two-particle minimum; the universal model
    itself fixes no rates, so treat this purely as a labeled default.
    """
    tensor = coupling_tensor(params)
    if ndim == 1:
        axis = _collinear_axis(params)
        k = tensor.k[:, :, axis, axis]
        return 2.0 * params.hbar * np.sqrt((k**2).sum(axis=1))
    return 2.0 * params.hbar * np.sqrt(np.einsum("ablj,ablj->al", tensor.k, tensor.k))


def universal_protocol(params: ModelParams, rates=None, ndim: int = 1) -> ProtocolSpec:
    """Universal model: one record per (particle, direction), broadcast feedback.

    Channels a_al = x_al with b_al = sum_{b != a, j} K_ablj x_bj; rates shape
    (N,) / (N,3) in input units (scalar broadcast, None = heuristic default).
    """
    tensor = coupling_tensor(params)
    scales = ScaleTriple.from_first_mode(params)
    n = params.n_particles
    if ndim == 1:
        axis = _collinear_axis(params)
    elif ndim == 3:
        axis = 2
    else:
        raise ValueError("ndim must be 1 or 3")
    if rates is None:
        rate_tab = default_universal_rates(params, ndim)
    else:
        r = np.asarray(rates, dtype=float)
        want = (n,) if ndim == 1 else (n, 3)
        rate_tab = np.full(want, float(r)) if r.ndim == 0 else r
        if rate_tab.shape != want:
            raise ValueError(f"rates must be scalar or shape {want}")
    if np.any(rate_tab <= 0.0):
        raise ValueError("information rates must be positive")

    labels = _axis_labels(n, ndim, axis)
    spec = _mode_spec(params, labels)
    xs = {lab: position_op(spec, i) for i, lab in enumerate(labels)}

    channels = []
    for a, l in labels:
        parts, coeffs = [], []
        for b in range(n):
            if b == a:
                continue
            js = [axis] if ndim == 1 else range(3)
            for j in js:
                K = scales.coupling(tensor.k[a, b, l, j])
                if K != 0.0:
                    parts.append(xs[(b, j)])
                    coeffs.append(K)
        bop = (combine(parts, coeffs, hermitian=True) if parts else
               Operator(np.zeros((spec.dim, spec.dim)), hermitian_hint=True,
                        mode_terms=()))
        g = rate_tab[a] if ndim == 1 else rate_tab[a, l]
        channels.append((MeasurementChannel(xs[(a, l)], scales.rate(g)),
                         FeedbackChannel(bop)))
    return ProtocolSpec(
        free_hamiltonian(spec), tuple(channels),
        label=f"universal[N={n},ndim={ndim},{scales.label()}]", hbar=1.0,
        space=spec, meta={"tensor": tensor, "scales": scales, "ndim": ndim,
                          "axis": axis, "rates": rate_tab})


def pairwise_decoherence_coefficients(params: ModelParams, rates=None,
                                      ndim: int = 1) -> np.ndarray:
    """Diagonal dephasing matrix of the pairwise model over (particle, axis).

    Entry (al, al) = sum_{b != a} sum_j (g_ablj/8 hbar^2 + K_ablj^2/2 g_ablj);
    input units throughout.
    """
    tensor = coupling_tensor(params)
    hbar = params.hbar
    n = params.n_particles
    if ndim == 1:
        axis = _collinear_axis(params)
        kmat = tensor.k[:, :, axis, axis]
        rate_tab = _rates_pairwise(rates, kmat, hbar)
        out = np.zeros((n, n))
        for a in range(n):
            tot = 0.0
            for b in range(n):
                if b == a or (rates is None and kmat[a, b] == 0.0):
                    continue
                tot += decoherence_coefficient(rate_tab[a, b], kmat[a, b], hbar)
            out[a, a] = tot
        return out
    rate_tab = _rates_pairwise(rates, tensor.k, hbar)
    out = np.zeros((3 * n, 3 * n))
    for a in range(n):
        for l in range(3):
            tot = 0.0
            for b in range(n):
                if b == a:
                    continue
                for j in range(3):
                    K = tensor.k[a, b, l, j]
                    if rates is None and K == 0.0:
                        continue
                    tot += decoherence_coefficient(rate_tab[a, b, l, j], K, hbar)
            out[3 * a + l, 3 * a + l] = tot
    return out


def universal_decoherence_coefficients(params: ModelParams, rates=None,
                                       ndim: int = 1) -> np.ndarray:
    """Full dephasing matrix C of the universal model over (particle, axis):

        drho/dt (dec.) = - sum C_(bj),(ei) [x_bj, [x_ei, rho]],

    C = diag(g_al/8 hbar^2) + sum_{a != b,e} K_ablj K_aeli / (2 g_al).
    """
    tensor = coupling_tensor(params)
    hbar = params.hbar
    n = params.n_particles
    if rates is None:
        rate_tab = default_universal_rates(params, ndim)
    else:
        rate_tab = np.asarray(rates, dtype=float)
    if ndim == 1:
        axis = _collinear_axis(params)
        k = tensor.k[:, :, axis, axis]
        out = np.diag(rate_tab / (8.0 * hbar**2))
        for a in range(n):
            for b in range(n):
                for e in range(n):
                    if b == a or e == a:
                        continue
                    out[b, e] += k[a, b] * k[a, e] / (2.0 * rate_tab[a])
        return out
    out = np.zeros((3 * n, 3 * n))
    for a in range(n):
        for l in range(3):
            out[3 * a + l, 3 * a + l] += rate_tab[a, l] / (8.0 * hbar**2)
    for a in range(n):
        for l in range(3):
            g = rate_tab[a, l]
            for b in range(n):
                if b == a:
                    continue
                for e in range(n):
                    if e == a:
                        continue
                    for j in range(3):
                        for i in range(3):
                            out[3 * b + j, 3 * e + i] += (
                                tensor.k[a, b, l, j] * tensor.k[a, e, l, i] / (2.0 * g))
    return out


# ---------------------------------------------------------------------------
# KTM2 lattice model
# ---------------------------------------------------------------------------

def ktm2_couplings(positions, mass: float, a: float, G: float = 1.0) -> np.ndarray:
    """chi[a,b] = -G m^2 / (2 (|x_a - x_b| + a)), including the a = b entry."""
    if not a > 0.0:
        raise ValueError("minimum-length cutoff a must be positive")
    pos = np.atleast_1d(np.asarray(positions, dtype=float))
    if pos.ndim == 1:
        pos = pos[:, None]
    n = pos.shape[0]
    chi = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            chi[i, j] = -G * mass**2 / (2.0 * (np.linalg.norm(pos[i] - pos[j]) + a))
    return chi


def ktm2_lattice_protocol(n_sites: int, mass: float, a: float, positions,
                          occupation_cutoff: int, *, hbar: float = 1.0,
                          G: float = 1.0, include_self: bool = False) -> ProtocolSpec:
    """Lattice occupation model: channels a_s = n_s, b_s = sum_b chi_sb n_b.

    The per-site rate is the mass-density weighting of the short-range
    correlator value 2 hbar/m, i.e. gamma_eff = m^2 (2 hbar/m) = 2 hbar m,
    reproducing the dephasing coefficient xi/2 with xi = m/2 hbar.
    Self couplings chi_aa = -G m^2/2a are excluded unless ``include_self``.
    """
    pos = np.atleast_1d(np.asarray(positions, dtype=float))
    n = pos.shape[0]
    if n != n_sites:
        raise ValueError("positions must list every lattice site")
    if occupation_cutoff < 2:
        raise ValueError("occupation cutoff must be >= 2")
    chi = ktm2_couplings(pos, mass, a, G)
    spec = HilbertSpec(tuple(Mode(mass=mass, trap_frequency=0.0, length_scale=1.0)
                             for _ in range(n)), cutoff=occupation_cutoff, hbar=hbar)
    nops = [number_op(spec, s) for s in range(n)]
    gamma_eff = 2.0 * hbar * mass
    channels = []
    for s in range(n):
        parts, coeffs = [], []
        for b in range(n):
            if b == s and not include_self:
                continue
            parts.append(nops[b])
            coeffs.append(chi[s, b])
        bop = combine(parts, coeffs, hermitian=True)
        channels.append((MeasurementChannel(nops[s], gamma_eff), FeedbackChannel(bop)))
    h0 = Operator(np.zeros((spec.dim, spec.dim)), hermitian_hint=True, mode_terms=())
    return ProtocolSpec(h0, tuple(channels),
                        label=f"ktm2[N={n},a={a:g},m={mass:g}]", hbar=hbar,
                        space=spec,
                        meta={"chi": chi, "xi": mass / (2.0 * hbar),
                              "gamma_eff": gamma_eff, "include_self": include_self})


# ---------------------------------------------------------------------------
# linearized mass-density (TD) model
# ---------------------------------------------------------------------------

@dataclass
class LinearizedTDModel:
    """Coefficient tables of the bilinear expansion of the density-measurement ME.

    eta2[a,b] (3x3, a != b) sets the Hamiltonian bilinear
    C[a,b] = -4 pi G m_a m_b eta2[a,b] (per unordered pair), and
    eta_dec[a,b] = sqrt(pi^3/8 hbar^5) eta0 + sqrt(8 pi hbar) G^2 eta4 the
    dephasing tensor; decoherence_matrix() is m_a m_b eta_dec over (a,l).
    """

    params: ModelParams
    kernel_label: str
    smearing_label: str
    eta0: np.ndarray
    eta2: np.ndarray
    eta4: np.ndarray
    eta_dec: np.ndarray = field(init=False)
    hamiltonian_coeff: np.ndarray = field(init=False)

    def __post_init__(self):
        hbar = self.params.hbar
        G = self.params.G
        self.eta_dec = (math.sqrt(math.pi**3 / (8.0 * hbar**5)) * self.eta0
                        + math.sqrt(8.0 * math.pi * hbar) * G**2 * self.eta4)
        n = self.params.n_particles
        coeff = np.zeros_like(self.eta2)
        for a in range(n):
            for b in range(n):
                if a != b:
                    coeff[a, b] = (-4.0 * math.pi * G * self.params.masses[a]
                                   * self.params.masses[b] * self.eta2[a, b])
        self.hamiltonian_coeff = coeff

    def decoherence_matrix(self) -> np.ndarray:
        """(3N x 3N) PSD matrix D_(al),(bj) = m_a m_b eta_dec[a,b,l,j]."""
        n = self.params.n_particles
        out = np.zeros((3 * n, 3 * n))
        for a in range(n):
            for b in range(n):
                out[3 * a: 3 * a + 3, 3 * b: 3 * b + 3] = (
                    self.params.masses[a] * self.params.masses[b] * self.eta_dec[a, b])
        return out

    def me_rhs_1d(self, spec: HilbertSpec, axis: int = 2):
        """Dense rhs closure for the collinear chain (one mode per particle)."""
        n = self.params.n_particles
        if spec.n_modes != n:
            raise ValueError("need one mode per particle")
        hbar = self.params.hbar
        x = [position_op(spec, m).entries for m in range(n)]
        h = free_hamiltonian(spec).entries.copy()
        for a in range(n):
            for b in range(a + 1, n):
                h = h + self.hamiltonian_coeff[a, b, axis, axis] * (x[a] @ x[b])
        dmat = np.array([[self.params.masses[a] * self.params.masses[b]
                          * self.eta_dec[a, b, axis, axis] for b in range(n)]
                         for a in range(n)])

        def rhs(rho):
            out = (-1j / hbar) * (h @ rho - rho @ h)
            for a in range(n):
                for b in range(n):
                    comm = x[b] @ rho - rho @ x[b]
                    out -= dmat[a, b] * (x[a] @ comm - comm @ x[a])
            return out

        return rhs


def linearized_td_protocol(params: ModelParams, kernel: RadialKernel,
                           smearing: SmearingProfile) -> LinearizedTDModel:
    """Coefficient tables (eta tensors) of the linearized density-measurement ME.

    Divergent coefficient integrals are rejected up front via the eta
    classifier (measurement insert: correlator; feedback insert: inverse
    correlator; the Hamiltonian eta2 carries no insertion).
    """
    hbar = params.hbar
    checks = [(0, 1, "measurement (eta0)"), (2, 0, "Hamiltonian (eta2)"),
              (4, -1, "feedback (eta4)")]
    for n_idx, p, name in checks:
        verdict = classify_eta_integrand(n_idx, smearing,
                                         kernel if p != 0 else None, p)
        if verdict != CONVERGES:
            raise DivergentIntegralError(
                f"{name} coefficient divergent for {kernel.label} with "
                f"{smearing.label}: {verdict}", verdict)
    n = params.n_particles
    eta0 = np.zeros((n, n, 3, 3))
    eta2 = np.zeros((n, n, 3, 3))
    eta4 = np.zeros((n, n, 3, 3))
    for a in range(n):
        for b in range(n):
            d = params.positions[a] - params.positions[b]
            eta0[a, b] = eta_tensor(0, smearing, d, kernel, 1, hbar)
            eta4[a, b] = eta_tensor(4, smearing, d, kernel, -1, hbar)
            if a != b:
                eta2[a, b] = eta_tensor(2, smearing, d, gamma=None,
                                        gamma_power=0, hbar=hbar)
    model = LinearizedTDModel(params, kernel.label, smearing.label,
                              eta0, eta2, eta4)
    dec = model.decoherence_matrix()
    w = np.linalg.eigvalsh(0.5 * (dec + dec.T))
    if w.min() < -1e-10 * max(abs(w).max(), 1.0):
        raise ArithmeticError(
            f"dephasing tensor lost positivity (min eigenvalue {w.min():.3e})")
    return model


# ---------------------------------------------------------------------------
# Earth-atom rate
# ---------------------------------------------------------------------------

def earth_atom_rate(C: float, m_atom: float, M_earth: float, R_earth: float,
                    hbar: float = HBAR_SI, G: float = G_NEWTON) -> float:
    """Lambda = C G m_atom M_earth / (hbar R_earth^3), the coefficient of the
    vertical dephasing -Lambda [z, [z, rho]] after tracing out the planet."""
    if min(m_atom, M_earth, R_earth) <= 0.0 or C < 0.0:
        raise ValueError("physical inputs must be positive (C >= 0)")
    return C * G * m_atom * M_earth / (hbar * R_earth**3)
