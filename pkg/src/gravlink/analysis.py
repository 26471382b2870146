"""Executable consistency arguments: center-of-mass reduction, the universal
model's cross coefficient, the KTM vs linearized-density comparison, and
order-of-magnitude decoherence reports.

The reduction works at the coefficient level.  Writing the dephasing part of
any linear(ized) model as  drho/dt = - sum_{uv} C_uv [x_u, [x_v, rho]]  over
(particle, axis) indices, splitting every position into center-of-mass plus
relative displacement and tracing out the relative coordinates maps each
double commutator onto the centers of mass with unit weight, so the reduced
coefficient matrix is the block sum of C over the partition groups.  That is
exact, which is why the pairwise model's reduced cross blocks vanish
identically while the universal model's do not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import RadialKernel, SmearingProfile
from .models import (
    ModelParams,
    coupling_tensor,
    default_universal_rates,
    earth_atom_rate,
    ktm_decoherence_coefficients,
    linearized_td_protocol,
    minimize_gamma,
    universal_decoherence_coefficients,
)


@dataclass(frozen=True)
class Partition:
    """Assignment of each particle to one of a few subsystem groups."""

    assignment: tuple

    def __post_init__(self):
        a = tuple(int(g) for g in self.assignment)
        object.__setattr__(self, "assignment", a)
        groups = sorted(set(a))
        if groups != list(range(len(groups))):
            raise ValueError("group labels must be 0..G-1 with every group non-empty")

    @property
    def n_particles(self) -> int:
        return len(self.assignment)

    @property
    def n_groups(self) -> int:
        return len(set(self.assignment))

    def members(self, group: int):
        return [i for i, g in enumerate(self.assignment) if g == group]


@dataclass(frozen=True)
class DecoherenceMatrix:
    """Symmetric dephasing-coefficient matrix over (subsystem, axis) pairs."""

    entries: np.ndarray
    labels: tuple
    psd_floor: float = -1e-10

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != len(self.labels):
            raise ValueError("entries must be square and match the labels")
        scale = max(np.abs(m).max(), 1e-300)
        if np.abs(m - m.T).max() > 1e-10 * scale:
            raise ValueError("dephasing matrix must be symmetric")
        w = np.linalg.eigvalsh(0.5 * (m + m.T))
        if w.min() < self.psd_floor * max(scale, 1.0):
            raise ValueError(
                f"dephasing matrix not PSD (min eigenvalue {w.min():.3e})")
        object.__setattr__(self, "entries", m)

    def block(self, g: int, h: int, ndim: int = 1) -> np.ndarray:
        return self.entries[g * ndim:(g + 1) * ndim, h * ndim:(h + 1) * ndim]


def com_reduce(coefficients: np.ndarray, partition: Partition,
               ndim: int = 1) -> DecoherenceMatrix:
    """Exact coefficient-level reduction onto subsystem centers of mass.

    ``coefficients`` is (N*ndim) x (N*ndim), particle-major; the output is
    (G*ndim) x (G*ndim) with entry ((g,l),(h,j)) = sum over a in g, b in h of
    C[(a,l),(b,j)].
    """
    c = np.asarray(coefficients, dtype=float)
    n = partition.n_particles
    if c.shape != (n * ndim, n * ndim):
        raise ValueError(f"coefficient matrix must be ({n * ndim}, {n * ndim})")
    g = partition.n_groups
    proj = np.zeros((g * ndim, n * ndim))
    for a, grp in enumerate(partition.assignment):
        for l in range(ndim):
            proj[grp * ndim + l, a * ndim + l] = 1.0
    reduced = proj @ c @ proj.T
    labels = tuple((grp, l) for grp in range(g) for l in range(ndim))
    return DecoherenceMatrix(reduced, labels)


@dataclass(frozen=True)
class CrossCoefficient:
    """Cross-subsystem dephasing weight of the universal model.

    S doubles the summed cross blocks of the reduced matrix, matching the
    closed form 2 sum_a (prod of the two cross couplings)/gamma_a; the
    per-measured-particle decomposition is kept alongside.
    """

    S: float
    per_particle: dict
    reduced: DecoherenceMatrix


def cross_coefficient(params: ModelParams, rates=None,
                      partition: Partition | None = None) -> CrossCoefficient:
    """Universal-model cross coefficient for a two-group split (default {0,1}|{2}).

    1D collinear geometry; rates per particle (None applies the labeled
    heuristic default).
    """
    n = params.n_particles
    if partition is None:
        if n != 3:
            raise ValueError("default partition needs exactly 3 particles")
        partition = Partition((0, 0, 1))
    if partition.n_groups != 2:
        raise ValueError("cross coefficient needs exactly two groups")
    if partition.n_particles != n:
        raise ValueError("partition size mismatch")
    gam = (default_universal_rates(params, ndim=1) if rates is None
           else np.asarray(rates, dtype=float))
    c = universal_decoherence_coefficients(params, gam, ndim=1)
    reduced = com_reduce(c, partition, ndim=1)
    S = 2.0 * float(reduced.entries[0, 1] + reduced.entries[1, 0])

    tensor = coupling_tensor(params)
    axis_candidates = np.nonzero(params.positions.max(axis=0)
                                 - params.positions.min(axis=0))[0]
    axis = int(axis_candidates[0])
    k = tensor.k[:, :, axis, axis]
    per = {}
    g1 = set(partition.members(0))
    g2 = set(partition.members(1))
    for a in range(n):
        tot = 0.0
        for b in range(n):
            for e in range(n):
                if a in (b, e):
                    continue
                if (b in g1 and e in g2) or (b in g2 and e in g1):
                    tot += k[a, b] * k[a, e] / (2.0 * gam[a])
        per[a] = 2.0 * tot
    return CrossCoefficient(S, per, reduced)


# ---------------------------------------------------------------------------
# KTM vs linearized density-measurement comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KtmTdComparison:
    separation: float
    coupling: float
    gamma: float
    ktm_matrix: np.ndarray        # 2x2, exactly diagonal
    td_matrix: np.ndarray         # 2x2 along the separation axis
    off_diagonal_ratio: float     # |eta12| / sqrt(eta11 eta22)
    kernel_label: str
    smearing_label: str

    def to_text(self) -> str:
        lines = [
            f"two equal masses, separation {self.separation:g}",
            f"pair coupling K = {self.coupling:.6e}, rate gamma = {self.gamma:.6e}",
            "position-measurement dephasing matrix (diagonal by construction):",
            f"  [{self.ktm_matrix[0, 0]:.6e}, 0]",
            f"  [0, {self.ktm_matrix[1, 1]:.6e}]",
            f"density-measurement dephasing matrix ({self.kernel_label}, {self.smearing_label}):",
            f"  [{self.td_matrix[0, 0]:.6e}, {self.td_matrix[0, 1]:.6e}]",
            f"  [{self.td_matrix[1, 0]:.6e}, {self.td_matrix[1, 1]:.6e}]",
            f"off-diagonal ratio |eta12|/sqrt(eta11 eta22) = {self.off_diagonal_ratio:.6e}",
        ]
        return "\n".join(lines)

    def csv_rows(self):
        yield "model,entry_11,entry_12,entry_21,entry_22,off_diagonal_ratio"
        k = self.ktm_matrix
        t = self.td_matrix
        yield (f"position-measurement,{k[0, 0]:.17g},0,0,{k[1, 1]:.17g},0")
        yield (f"density-measurement,{t[0, 0]:.17g},{t[0, 1]:.17g},"
               f"{t[1, 0]:.17g},{t[1, 1]:.17g},{self.off_diagonal_ratio:.17g}")


def compare_ktm_td(params: ModelParams, kernel: RadialKernel,
                   smearing: SmearingProfile, gamma: float | None = None) -> KtmTdComparison:
    """Both dephasing matrices for two particles in 1D at the same separation.

    The position-measurement matrix is diag(g/8 hbar^2 + K^2/2 g) with the
    minimized g = 2 hbar K unless given; the density-measurement matrix is
    m_a m_b eta_ab along the separation axis, including its off-diagonal.
    """
    if params.n_particles != 2:
        raise ValueError("comparison is defined for two particles")
    d = float(np.linalg.norm(params.positions[0] - params.positions[1]))
    K = 2.0 * params.G * params.masses[0] * params.masses[1] / d**3
    g = 2.0 * params.hbar * K if gamma is None else float(gamma)
    ktm = ktm_decoherence_coefficients(K, (g, g), params.hbar)

    model = linearized_td_protocol(params, kernel, smearing)
    sep = params.positions[0] - params.positions[1]
    axis = int(np.argmax(np.abs(sep)))
    dec = model.decoherence_matrix()
    idx = [3 * 0 + axis, 3 * 1 + axis]
    td = dec[np.ix_(idx, idx)]
    ratio = abs(td[0, 1]) / math.sqrt(td[0, 0] * td[1, 1])
    return KtmTdComparison(d, K, g, ktm, td, ratio,
                           kernel.label, smearing.label)


# ---------------------------------------------------------------------------
# decoherence report (order of magnitude)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Superposition experiment inputs for the suppression-exponent estimate."""

    geometry_factor: float = 0.47
    m_atom: float = 1.4e-25
    M_earth: float = 6e24
    R_earth: float = 6e6
    dz: float = 0.0
    duration: float = 0.0


@dataclass(frozen=True)
class DecoherenceReport:
    couplings: dict               # name -> K (input units)
    minimized: dict               # name -> (gamma_min, coefficient)
    rate: float                   # Earth-atom Lambda [m^-2 s^-1]
    suppression_exponent: float   # Lambda * dz^2 * duration
    scenario: Scenario

    def to_text(self) -> str:
        lines = ["decoherence report (order-of-magnitude estimates)"]
        for name, K in self.couplings.items():
            g, c = self.minimized[name]
            lines.append(f"  {name}: K = {K:.6e}, gamma_min = {g:.6e}, "
                         f"minimized coefficient = {c:.6e}")
        lines.append(f"  planet-atom dephasing rate Lambda = {self.rate:.6e} m^-2 s^-1")
        lines.append(f"  suppression exponent Lambda*dz^2*T = "
                     f"{self.suppression_exponent:.6e} "
                     f"(dz = {self.scenario.dz:g} m, T = {self.scenario.duration:g} s)")
        lines.append("  all figures are order-of-magnitude only")
        return "\n".join(lines)

    def csv_rows(self):
        yield "quantity,value"
        for name, K in self.couplings.items():
            g, c = self.minimized[name]
            yield f"coupling_{name},{K:.17g}"
            yield f"gamma_min_{name},{g:.17g}"
            yield f"coefficient_{name},{c:.17g}"
        yield f"earth_atom_rate,{self.rate:.17g}"
        yield f"suppression_exponent,{self.suppression_exponent:.17g}"


def decoherence_report(couplings, scenario: Scenario,
                       hbar: float = 1.0) -> DecoherenceReport:
    """Minimized dephasing table plus the planet-atom suppression exponent.

    couplings: mapping name -> K (or a single float under the name 'pair').
    """
    if np.isscalar(couplings):
        couplings = {"pair": float(couplings)}
    minimized = {}
    for name, K in couplings.items():
        gm = minimize_gamma(float(K), hbar)
        minimized[name] = (gm.gamma, gm.coefficient)
    rate = earth_atom_rate(scenario.geometry_factor, scenario.m_atom,
                           scenario.M_earth, scenario.R_earth)
    exponent = rate * scenario.dz**2 * scenario.duration
    return DecoherenceReport(dict(couplings), minimized, rate, exponent, scenario)
