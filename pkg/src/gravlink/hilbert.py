"""Truncated Fock-basis representation of trapped modes.

Every mode is a harmonic oscillator (mass m, trap frequency Omega) kept in
its number basis |0..M-1>.  Position and momentum are tridiagonal there,

    x = (l/sqrt(2)) (a + a+),   p = i sqrt(hbar m Omega / 2) (a+ - a),

with l = sqrt(hbar/(m Omega)) unless an explicit length scale is given
(mandatory for untrapped modes, Omega = 0).  Multi-mode operators are dense
Kronecker embeddings; the per-mode factor structure is kept alongside the
dense matrix so steppers can apply operators mode-by-mode instead of paying
the full-dimension matmul.

Truncation is monitored, not hidden: the population of the top Fock level of
each mode is exposed and states above ``LEAKAGE_THRESHOLD`` are flagged with
a warning attached to results (never an abort).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

DEFAULT_DIM_CAP = 4096
LEAKAGE_THRESHOLD = 1e-6

HERMITIAN_RTOL = 1e-12
STATE_NORM_TOL = 1e-10
RHO_TRACE_TOL = 1e-9
RHO_EIG_FLOOR = -1e-8


class LeakageWarning(UserWarning):
    """Top Fock level of some mode is populated beyond the trusted band."""


@dataclass(frozen=True)
class Mode:
    """One trapped (or free) mode: mass [kg], trap frequency [rad/s]."""

    mass: float
    trap_frequency: float = 0.0
    length_scale: float | None = None

    def __post_init__(self):
        if not self.mass > 0.0:
            raise ValueError(f"mode mass must be positive, got {self.mass}")
        if self.trap_frequency < 0.0:
            raise ValueError("trap frequency must be >= 0")
        if self.trap_frequency == 0.0:
            if self.length_scale is None or not self.length_scale > 0.0:
                raise ValueError(
                    "untrapped mode (Omega=0) needs an explicit positive length_scale"
                )
        elif self.length_scale is not None and not self.length_scale > 0.0:
            raise ValueError("length_scale must be positive when given")


@dataclass(frozen=True)
class HilbertSpec:
    """Tensor product of truncated Fock spaces.

    Parameters
    ----------
    modes : tuple of Mode
    cutoff : int or tuple of int
        Fock levels 0..M-1 kept per mode (M >= 2); an int is broadcast.
    hbar : float
        1.0 in internal units; model builders own any SI conversion.
    max_dim : int
        Hard cap on the total dense dimension.
    """

    modes: tuple
    cutoff: object = 2
    hbar: float = 1.0
    max_dim: int = DEFAULT_DIM_CAP
    cutoffs: tuple = field(init=False)

    def __post_init__(self):
        modes = tuple(
            m if isinstance(m, Mode) else Mode(*m) for m in self.modes
        )
        object.__setattr__(self, "modes", modes)
        if not modes:
            raise ValueError("need at least one mode")
        if isinstance(self.cutoff, int):
            cutoffs = (self.cutoff,) * len(modes)
        else:
            cutoffs = tuple(int(c) for c in self.cutoff)
        if len(cutoffs) != len(modes):
            raise ValueError("one cutoff per mode required")
        if any(c < 2 for c in cutoffs):
            raise ValueError("every mode needs cutoff M >= 2")
        object.__setattr__(self, "cutoffs", cutoffs)
        if not self.hbar > 0.0:
            raise ValueError("hbar must be positive")
        dim = 1
        for c in cutoffs:
            dim *= c
        if dim > self.max_dim:
            raise ValueError(f"total dimension {dim} exceeds cap {self.max_dim}")

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def dim(self) -> int:
        return int(np.prod(self.cutoffs))

    def length_scale(self, mode: int) -> float:
        m = self.modes[mode]
        if m.length_scale is not None:
            return m.length_scale
        return math.sqrt(self.hbar / (m.mass * m.trap_frequency))


@dataclass(frozen=True)
class Operator:
    """Dense operator on the full space.

    ``mode_terms`` (optional) records the operator as a sum of single-mode
    embeddings ``sum_t embed(local_t, mode_t)``; steppers use it to apply the
    operator at per-mode cost.  It must stay consistent with ``entries``.
    """

    entries: np.ndarray
    hermitian_hint: bool = False
    mode_terms: tuple | None = None

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("operator entries must be a square matrix")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)
        if self.hermitian_hint:
            scale = max(np.abs(a).max(), 1e-300)
            dev = np.abs(a - a.conj().T).max()
            if dev > HERMITIAN_RTOL * scale:
                raise ValueError(
                    f"hermitian_hint violated: |A - A+| = {dev:.3e} > {HERMITIAN_RTOL:.0e}*max|A|"
                )

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def dagger(self) -> "Operator":
        return Operator(self.entries.conj().T, self.hermitian_hint)

    def expect(self, psi: np.ndarray) -> complex:
        psi = np.asarray(psi)
        return complex(np.vdot(psi, self.entries @ psi))


def as_matrix(op) -> np.ndarray:
    """Accept Operator / DensityOperator / ndarray; return the ndarray."""
    if isinstance(op, Operator):
        return op.entries
    if isinstance(op, DensityOperator):
        return op.entries
    return np.asarray(op, dtype=complex)


@dataclass
class StateVector:
    """Normalized amplitude vector over the truncated multi-mode basis."""

    amplitudes: np.ndarray
    spec: HilbertSpec | None = None

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex).ravel()
        n = np.linalg.norm(a)
        if abs(n - 1.0) > STATE_NORM_TOL:
            raise ValueError(f"state not normalized: ||psi|| = {n!r}")
        self.amplitudes = a
        if self.spec is not None and self.spec.dim != a.size:
            raise ValueError("amplitude length does not match HilbertSpec dimension")

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def expect(self, op) -> float:
        m = as_matrix(op)
        return float(np.real(np.vdot(self.amplitudes, m @ self.amplitudes)))

    def density(self) -> "DensityOperator":
        return DensityOperator(np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass
class DensityOperator:
    """Hermitian, unit-trace, numerically positive matrix."""

    entries: np.ndarray
    validate: bool = True

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("density matrix must be square")
        self.entries = a
        if self.validate:
            scale = max(np.abs(a).max(), 1e-300)
            if np.abs(a - a.conj().T).max() > 1e-10 * max(scale, 1.0):
                raise ValueError("density matrix not Hermitian to 1e-10")
            tr = a.trace()
            if abs(tr - 1.0) > RHO_TRACE_TOL:
                raise ValueError(f"density matrix trace {tr!r} != 1")
            w = np.linalg.eigvalsh(0.5 * (a + a.conj().T))
            if w.min() < RHO_EIG_FLOOR:
                raise ValueError(
                    f"density matrix min eigenvalue {w.min():.3e} below positivity band"
                )

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def purity(self) -> float:
        return float(np.real(np.trace(self.entries @ self.entries)))

    def expect(self, op) -> float:
        return float(np.real(np.trace(as_matrix(op) @ self.entries)))


# ---------------------------------------------------------------------------
# single-mode building blocks and tensor embedding
# ---------------------------------------------------------------------------

def _ladder_local(M: int) -> np.ndarray:
    a = np.zeros((M, M), dtype=complex)
    n = np.arange(1, M)
    a[n - 1, n] = np.sqrt(n)
    return a


def _check_mode(spec: HilbertSpec, mode: int):
    if not 0 <= mode < spec.n_modes:
        raise IndexError(f"mode {mode} out of range for {spec.n_modes} modes")


def embed(spec: HilbertSpec, local: np.ndarray, mode: int) -> np.ndarray:
    """Kronecker-embed a single-mode matrix at position ``mode``."""
    _check_mode(spec, mode)
    mats = [np.eye(c, dtype=complex) for c in spec.cutoffs]
    mats[mode] = np.asarray(local, dtype=complex)
    return reduce(np.kron, mats)


def embedded_operator(spec, local, mode, hermitian=False) -> Operator:
    return Operator(embed(spec, local, mode), hermitian_hint=hermitian,
                    mode_terms=((mode, np.asarray(local, dtype=complex)),))


def combine(ops, coeffs=None, hermitian=False) -> Operator:
    """Linear combination of Operators, merging their mode-term structure."""
    ops = list(ops)
    if coeffs is None:
        coeffs = [1.0] * len(ops)
    entries = sum(c * op.entries for c, op in zip(coeffs, ops))
    terms: list | None = []
    for c, op in zip(coeffs, ops):
        if op.mode_terms is None:
            terms = None
            break
        terms.extend((m, c * loc) for m, loc in op.mode_terms)
    return Operator(entries, hermitian_hint=hermitian,
                    mode_terms=tuple(terms) if terms is not None else None)


# ---------------------------------------------------------------------------
# spec operations
# ---------------------------------------------------------------------------

def ladder_op(spec: HilbertSpec, mode: int) -> Operator:
    """Annihilation operator a|n> = sqrt(n)|n-1> embedded on the full space."""
    _check_mode(spec, mode)
    return embedded_operator(spec, _ladder_local(spec.cutoffs[mode]), mode)


def position_op(spec: HilbertSpec, mode: int) -> Operator:
    """x = (l/sqrt(2))(a + a+) with l the mode's length scale."""
    _check_mode(spec, mode)
    a = _ladder_local(spec.cutoffs[mode])
    ell = spec.length_scale(mode)
    local = (ell / math.sqrt(2.0)) * (a + a.conj().T)
    return embedded_operator(spec, local, mode, hermitian=True)


def momentum_op(spec: HilbertSpec, mode: int) -> Operator:
    """p = i sqrt(hbar m Omega / 2)(a+ - a); for Omega=0 uses hbar/l instead."""
    _check_mode(spec, mode)
    a = _ladder_local(spec.cutoffs[mode])
    # sqrt(hbar m Omega / 2) == hbar / (l sqrt(2)) for either length-scale origin
    ell = spec.length_scale(mode)
    scale = spec.hbar / (ell * math.sqrt(2.0))
    local = 1j * scale * (a.conj().T - a)
    return embedded_operator(spec, local, mode, hermitian=True)


def number_op(spec: HilbertSpec, mode: int) -> Operator:
    """n = a+ a, diagonal with entries 0..M-1."""
    _check_mode(spec, mode)
    local = np.diag(np.arange(spec.cutoffs[mode], dtype=float)).astype(complex)
    return embedded_operator(spec, local, mode, hermitian=True)


def free_hamiltonian(spec: HilbertSpec) -> Operator:
    """H0 = sum_a p_a^2/2m_a + (1/2) m_a Omega_a^2 x_a^2 (truncated matrices)."""
    terms = []
    for mode, m in enumerate(spec.modes):
        x = position_op(spec, mode).mode_terms[0][1]
        p = momentum_op(spec, mode).mode_terms[0][1]
        local = p @ p / (2.0 * m.mass)
        if m.trap_frequency != 0.0:
            local = local + 0.5 * m.mass * m.trap_frequency**2 * (x @ x)
        terms.append(embedded_operator(spec, local, mode, hermitian=True))
    return combine(terms, hermitian=True)


def ground_state(spec: HilbertSpec) -> StateVector:
    amp = np.zeros(spec.dim, dtype=complex)
    amp[0] = 1.0
    return StateVector(amp, spec)


def basis_state(spec: HilbertSpec, occupations) -> StateVector:
    occupations = tuple(int(n) for n in occupations)
    if len(occupations) != spec.n_modes:
        raise ValueError("one occupation per mode required")
    idx = 0
    for n, M in zip(occupations, spec.cutoffs):
        if not 0 <= n < M:
            raise ValueError(f"occupation {n} outside 0..{M - 1}")
        idx = idx * M + n
    amp = np.zeros(spec.dim, dtype=complex)
    amp[idx] = 1.0
    return StateVector(amp, spec)


def coherent_state(spec: HilbertSpec, alphas) -> StateVector:
    """Product of truncated coherent states c_n = alpha^n/sqrt(n!), renormalized."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=complex))
    if alphas.size != spec.n_modes:
        raise ValueError("one amplitude per mode required")
    factors = []
    for alpha, M in zip(alphas, spec.cutoffs):
        n = np.arange(M)
        log_fact = np.concatenate(([0.0], np.cumsum(np.log(np.arange(1, M)))))
        c = np.where(n == 0, 1.0 + 0j, 0j) if alpha == 0 else (
            alpha**n * np.exp(-0.5 * log_fact)
        )
        factors.append(c / np.linalg.norm(c))
    amp = reduce(np.kron, factors)
    return StateVector(amp / np.linalg.norm(amp), spec)


def top_level_population(spec: HilbertSpec, amplitudes: np.ndarray) -> np.ndarray:
    """Population of the top Fock level of each mode (truncation-leakage monitor).

    ``amplitudes`` may be a single state (dim,) or a batch (dim, B); returns
    shape (n_modes,) or (n_modes, B).
    """
    a = np.asarray(amplitudes)
    batched = a.ndim == 2
    shape = spec.cutoffs + ((a.shape[1],) if batched else ())
    prob = (a.real**2 + a.imag**2).reshape(shape)
    out = []
    for mode in range(spec.n_modes):
        take = np.take(prob, spec.cutoffs[mode] - 1, axis=mode)
        axes = tuple(range(spec.n_modes - 1))
        out.append(take.sum(axis=axes))
    return np.array(out)


def flag_leakage(spec: HilbertSpec, amplitudes, threshold: float = LEAKAGE_THRESHOLD,
                 context: str = "state") -> np.ndarray:
    """Return per-mode top-level populations, warning when any exceeds threshold."""
    pops = top_level_population(spec, amplitudes)
    worst = float(np.max(pops))
    if worst > threshold:
        warnings.warn(
            f"{context}: top Fock level population {worst:.3e} exceeds "
            f"{threshold:.0e}; truncation no longer trusted",
            LeakageWarning,
            stacklevel=2,
        )
    return pops


def trace_distance(rho1, rho2) -> float:
    """(1/2)||rho1 - rho2||_1 via the eigenvalues of the Hermitian difference."""
    d = as_matrix(rho1) - as_matrix(rho2)
    d = 0.5 * (d + d.conj().T)
    return 0.5 * float(np.abs(np.linalg.eigvalsh(d)).sum())
