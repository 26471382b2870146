"""Deterministic evolution of the measurement + feedback master equation.

For M channels (a_l, gamma_l, b_l) the generator is

    drho/dt = -(i/hbar)[H0, rho]
              + sum_l { -(i/2 hbar)[b_l, {a_l, rho}]
                        - (gamma_l/8 hbar^2)[a_l, [a_l, rho]]
                        - (1/2 gamma_l)[b_l, [b_l, rho]] }.

The same generator repackages exactly into GKSL form with

    H_eff = H0 + sum_l (1/4){a_l, b_l},
    L_l   = (sqrt(gamma_l)/2 hbar) a_l - (i/sqrt(gamma_l)) b_l,

which is both a complete-positivity witness and the strongest internal
consistency oracle of the package (the identity is checked term-free on
random inputs in the tests).  Integration is fixed-step RK4 on the dense
density matrix; Gaussian protocols additionally get a closed moment ODE.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .hilbert import DensityOperator, HilbertSpec, Operator, as_matrix, momentum_op, position_op
from .stochastic import ProtocolSpec, StabilityWarning


class PositivityError(RuntimeError):
    """Integrated density matrix left the numerical positivity band."""


class UnsupportedProtocolError(ValueError):
    """Protocol falls outside the Gaussian (quadratic/linear) moment closure."""


POSITIVITY_FLOOR = -1e-6


class _LeftRight:
    """Left/right multiplication by an operator, per-mode when structured."""

    def __init__(self, op: Operator, cutoffs):
        self.dense = op.entries
        self.terms = op.mode_terms if (op.mode_terms is not None and cutoffs) else None
        self.cutoffs = tuple(cutoffs) if cutoffs else None

    def left(self, rho: np.ndarray) -> np.ndarray:
        if self.terms is None:
            return self.dense @ rho
        dim = rho.shape[0]
        t = rho.reshape(*self.cutoffs, dim)
        out = np.zeros_like(t)
        for mode, local in self.terms:
            y = np.tensordot(local, t, axes=([1], [mode]))
            out += np.moveaxis(y, 0, mode)
        return out.reshape(dim, dim)

    def right(self, rho: np.ndarray) -> np.ndarray:
        if self.terms is None:
            return rho @ self.dense
        dim = rho.shape[0]
        t = rho.reshape(dim, *self.cutoffs)
        out = np.zeros_like(t)
        for mode, local in self.terms:
            y = np.tensordot(t, local, axes=([1 + mode], [0]))
            out += np.moveaxis(y, -1, 1 + mode)
        return out.reshape(dim, dim)


class MasterRHS:
    """Right-hand side of the feedback master equation with precomputed pieces."""

    def __init__(self, protocol: ProtocolSpec):
        self.hbar = protocol.hbar
        cutoffs = protocol.space.cutoffs if protocol.space is not None else None
        self.h0 = _LeftRight(protocol.h0, cutoffs)
        self.channels = [
            (_LeftRight(m.a_op, cutoffs), _LeftRight(f.b_op, cutoffs), m.gamma)
            for m, f in protocol.channels
        ]

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        hbar = self.hbar
        out = (-1j / hbar) * (self.h0.left(rho) - self.h0.right(rho))
        for a, b, g in self.channels:
            ar = a.left(rho)
            ra = a.right(rho)
            anti = ar + ra
            out += (-0.5j / hbar) * (b.left(anti) - b.right(anti))
            comm = ar - ra
            out += (-g / (8.0 * hbar**2)) * (a.left(comm) - a.right(comm))
            commb = b.left(rho) - b.right(rho)
            out += (-1.0 / (2.0 * g)) * (b.left(commb) - b.right(commb))
        return out


def rhs(rho, protocol: ProtocolSpec) -> np.ndarray:
    """Evaluate the master-equation right-hand side on a density matrix."""
    r = as_matrix(rho)
    if r.shape[0] != protocol.dim:
        raise ValueError("dimension mismatch between rho and protocol")
    return MasterRHS(protocol)(r)


@dataclass(frozen=True)
class LindbladForm:
    h_eff: Operator
    lindblad_ops: tuple

    def rhs(self, rho, hbar: float = 1.0) -> np.ndarray:
        r = as_matrix(rho)
        h = self.h_eff.entries
        out = (-1j / hbar) * (h @ r - r @ h)
        for L in self.lindblad_ops:
            Ld = L.conj().T
            LdL = Ld @ L
            out += L @ r @ Ld - 0.5 * (LdL @ r + r @ LdL)
        return out


def lindblad_form(protocol: ProtocolSpec) -> LindbladForm:
    """GKSL repackaging: H_eff = H0 + sum (1/4){a,b}, L = sqrt(g)/2hbar a - i/sqrt(g) b."""
    hbar = protocol.hbar
    h = protocol.h0.entries.copy()
    ops = []
    for mch, fch in protocol.channels:
        a = mch.a_op.entries
        b = fch.b_op.entries
        g = mch.gamma
        h = h + 0.25 * (a @ b + b @ a)
        ops.append(math.sqrt(g) / (2.0 * hbar) * a - 1j / math.sqrt(g) * b)
    return LindbladForm(Operator(h, hermitian_hint=True), tuple(ops))


@dataclass
class MasterTrajectory:
    times: np.ndarray
    rhos: np.ndarray            # (n_snapshots, dim, dim)
    trace_drift: float          # max |tr rho - 1| encountered (logged, not corrected)
    min_eigenvalue: float       # most negative eigenvalue seen at snapshots

    def at(self, t: float) -> np.ndarray:
        idx = np.nonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12))[0]
        if idx.size == 0:
            raise ValueError(f"time {t} not stored; snapshots at {self.times}")
        return self.rhos[int(idx[0])]

    def density(self, t: float) -> DensityOperator:
        return DensityOperator(self.at(t))


def _rhs_scale(protocol: ProtocolSpec) -> float:
    hbar = protocol.hbar
    scale = float(np.abs(protocol.h0.entries).sum(axis=1).max()) / hbar
    for mch, fch in protocol.channels:
        na = float(np.abs(mch.a_op.entries).sum(axis=1).max())
        nb = float(np.abs(fch.b_op.entries).sum(axis=1).max())
        scale += mch.gamma / (4.0 * hbar**2) * na**2 + nb**2 / mch.gamma + na * nb / hbar
    return scale


def integrate(rho0, protocol_or_rhs, dt: float, t_final: float, *,
              snapshot_times=None, scheme: str = "rk4",
              hbar: float | None = None) -> MasterTrajectory:
    """Fixed-step RK4 on the density matrix.

    ``protocol_or_rhs`` is a ProtocolSpec or any callable rho -> drho/dt.
    Trace drift is logged, never renormalized; a snapshot eigenvalue below
    POSITIVITY_FLOOR aborts with a diagnostic.
    """
    if scheme != "rk4":
        raise ValueError("only the rk4 scheme is implemented")
    if not dt > 0.0 or not t_final > 0.0:
        raise ValueError("dt and t_final must be positive")
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer number of steps")

    if isinstance(protocol_or_rhs, ProtocolSpec):
        f = MasterRHS(protocol_or_rhs)
        if dt * _rhs_scale(protocol_or_rhs) > 0.1:
            warnings.warn("dt exceeds the RK4 stability heuristic (|rhs|*dt > 0.1)",
                          StabilityWarning, stacklevel=2)
    else:
        f = protocol_or_rhs

    rho = np.array(as_matrix(rho0), dtype=complex)
    dim = rho.shape[0]

    if snapshot_times is None:
        snapshot_times = [t_final]
    snap_steps = []
    for t in snapshot_times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= n_steps:
            raise ValueError(f"snapshot time {t} is not on the step grid")
        snap_steps.append(k)
    order = np.argsort(snap_steps)
    snap_steps = [snap_steps[i] for i in order]
    times = np.array([snapshot_times[i] for i in order], dtype=float)

    rhos = np.empty((len(snap_steps), dim, dim), dtype=complex)
    trace_drift = 0.0
    min_eig = np.inf

    def store(ptr):
        nonlocal trace_drift, min_eig
        rhos[ptr] = rho
        trace_drift = max(trace_drift, abs(np.real(rho.trace()) - 1.0) + abs(np.imag(rho.trace())))
        w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
        min_eig = min(min_eig, float(w.min()))
        if w.min() < POSITIVITY_FLOOR:
            raise PositivityError(
                f"min eigenvalue {w.min():.3e} < {POSITIVITY_FLOOR:.0e} at "
                f"t = {snap_steps[ptr] * dt:.6g}; reduce dt or check the model")

    snap_ptr = 0
    while snap_ptr < len(snap_steps) and snap_steps[snap_ptr] == 0:
        store(snap_ptr)
        snap_ptr += 1
    for k in range(n_steps):
        k1 = f(rho)
        k2 = f(rho + 0.5 * dt * k1)
        k3 = f(rho + 0.5 * dt * k2)
        k4 = f(rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        while snap_ptr < len(snap_steps) and snap_steps[snap_ptr] == k + 1:
            store(snap_ptr)
            snap_ptr += 1
    return MasterTrajectory(times, rhos, trace_drift, min_eig)


# ---------------------------------------------------------------------------
# Gaussian moment oracle
# ---------------------------------------------------------------------------

def _quadrature_basis(spec: HilbertSpec):
    """Canonical operators (x_1, p_1, ..., x_N, p_N) as dense matrices."""
    mats = []
    labels = []
    for mode in range(spec.n_modes):
        mats.append(position_op(spec, mode).entries)
        labels.append(f"x{mode + 1}")
        mats.append(momentum_op(spec, mode).entries)
        labels.append(f"p{mode + 1}")
    return mats, labels


def _fit_in_span(target: np.ndarray, basis: list, tol: float) -> np.ndarray:
    """Least-squares coefficients of target over basis matrices; residual-checked."""
    cols = np.stack([m.ravel() for m in basis], axis=1)
    y = target.ravel()
    coeff, *_ = np.linalg.lstsq(cols, y, rcond=None)
    resid = np.abs(cols @ coeff - y).max()
    scale = max(np.abs(y).max(), 1.0)
    if resid > tol * scale:
        raise UnsupportedProtocolError(
            f"operator not in the requested span (residual {resid:.3e})")
    return coeff


def _symplectic(n_modes: int) -> np.ndarray:
    omega = np.zeros((2 * n_modes, 2 * n_modes))
    for m in range(n_modes):
        omega[2 * m, 2 * m + 1] = 1.0
        omega[2 * m + 1, 2 * m] = -1.0
    return omega


@dataclass
class MomentSolution:
    """Exact first/second-moment flow of a Gaussian protocol.

    mean(t), cov(t) interpolate the dense ODE solution; drift is the linear
    mean-flow matrix A (d<v>/dt = A <v>), diffusion the constant covariance
    source D in dSigma/dt = A Sigma + Sigma A^T + D.
    """

    labels: list
    drift: np.ndarray
    diffusion: np.ndarray
    _sol: object
    _n: int

    def mean(self, t: float) -> np.ndarray:
        return self._sol.sol(t)[: self._n]

    def cov(self, t: float) -> np.ndarray:
        n = self._n
        return self._sol.sol(t)[n:].reshape(n, n)


def gaussian_moments(state, spec: HilbertSpec):
    """(mean, cov) of a state over the (x,p) basis; cov is symmetrized."""
    mats, _ = _quadrature_basis(spec)
    rho = state.density().entries if hasattr(state, "density") else as_matrix(state)
    n = len(mats)
    mean = np.array([float(np.real(np.trace(m @ rho))) for m in mats])
    cov = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            sym = 0.5 * (mats[i] @ mats[j] + mats[j] @ mats[i])
            cov[i, j] = cov[j, i] = float(np.real(np.trace(sym @ rho))) - mean[i] * mean[j]
    return mean, cov


def moment_oracle(protocol: ProtocolSpec, spec: HilbertSpec, mean0, cov0,
                  t_final: float, *, fit_tol: float = 1e-9,
                  rtol: float = 1e-10, atol: float = 1e-12) -> MomentSolution:
    """Closed first/second-moment ODE for quadratic H_eff and linear channels.

    Means follow d<v>/dt = A<v> with A = Omega H - hbar Omega Im(sum_l c_l c_l+),
    covariances dS/dt = A S + S A^T + hbar^2 Omega Re(sum_l c_l c_l+) Omega^T,
    where c_l = (sqrt(g_l)/2 hbar) a_l - (i/sqrt(g_l)) b_l in the linear-form
    coefficients of the channel operators and H is the quadratic form of
    H_eff = H0 + sum (1/4){a_l, b_l}.  Solved with dense-output adaptive RK.

    Requires cutoff >= 3 per mode so quadratic monomials are independent of
    the identity.
    """
    if any(c < 3 for c in spec.cutoffs):
        raise UnsupportedProtocolError("moment oracle needs cutoff >= 3 per mode")
    hbar = protocol.hbar
    mats, labels = _quadrature_basis(spec)
    n = len(mats)
    dim = spec.dim
    eye = np.eye(dim, dtype=complex)

    lin_basis = [eye] + mats
    c_sum = np.zeros((n, n), dtype=complex)
    for mch, fch in protocol.channels:
        ca = _fit_in_span(mch.a_op.entries, lin_basis, fit_tol)[1:]
        cb = _fit_in_span(fch.b_op.entries, lin_basis, fit_tol)[1:]
        if np.abs(ca.imag).max() > fit_tol or np.abs(cb.imag).max() > fit_tol:
            raise UnsupportedProtocolError("channel operators must be real in (x,p)")
        c = math.sqrt(mch.gamma) / (2.0 * hbar) * ca.real - 1j / math.sqrt(mch.gamma) * cb.real
        c_sum += np.outer(c, c.conj())

    h_eff = lindblad_form(protocol).h_eff.entries
    quad_basis = list(lin_basis)
    pairs = []
    for i in range(n):
        for j in range(i, n):
            quad_basis.append(0.5 * (mats[i] @ mats[j] + mats[j] @ mats[i]))
            pairs.append((i, j))
    coeff = _fit_in_span(h_eff, quad_basis, fit_tol)
    if np.abs(coeff.imag).max() > fit_tol * max(np.abs(coeff).max(), 1.0):
        raise UnsupportedProtocolError("H_eff must be a real quadratic form")
    # coefficients multiply (1/2){v_i, v_j}; repackage as (1/2) v^T H v
    hmat = np.zeros((n, n))
    for (i, j), c in zip(pairs, coeff[1 + n:].real):
        if i == j:
            hmat[i, i] = 2.0 * c
        else:
            hmat[i, j] = hmat[j, i] = c
    lin_part = coeff[1: 1 + n].real
    if np.abs(lin_part).max() > fit_tol * max(np.abs(coeff).max(), 1.0):
        raise UnsupportedProtocolError("linear Hamiltonian terms are not supported")

    omega = _symplectic(spec.n_modes)
    drift = omega @ hmat - hbar * omega @ c_sum.imag
    diffusion = hbar**2 * omega @ c_sum.real @ omega.T

    mean0 = np.asarray(mean0, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)

    def flow(_t, y):
        mu = y[:n]
        sig = y[n:].reshape(n, n)
        dmu = drift @ mu
        dsig = drift @ sig + sig @ drift.T + diffusion
        return np.concatenate([dmu, dsig.ravel()])

    y0 = np.concatenate([mean0, cov0.ravel()])
    sol = solve_ivp(flow, (0.0, t_final), y0, method="RK45", dense_output=True,
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"moment ODE integration failed: {sol.message}")
    return MomentSolution(labels, drift, diffusion, sol, n)


# ---------------------------------------------------------------------------
# CSV dumps
# ---------------------------------------------------------------------------

def dump_rho_csv(traj: MasterTrajectory, path):
    """Snapshot dump: t, i, j, re, im over the upper triangle."""
    with open(path, "w") as fh:
        fh.write("t,i,j,re,im\n")
        for t, rho in zip(traj.times, traj.rhos):
            dim = rho.shape[0]
            for i in range(dim):
                for j in range(i, dim):
                    fh.write(f"{t:.17g},{i},{j},{rho[i, j].real:.17g},{rho[i, j].imag:.17g}\n")


def dump_moments_csv(traj: MasterTrajectory, spec: HilbertSpec, path):
    """Moment dump: t, mean_* then cov_* (upper triangle) from each snapshot."""
    mats, labels = _quadrature_basis(spec)
    n = len(mats)
    header = ["t"] + [f"mean_{l}" for l in labels]
    header += [f"cov_{labels[i]}_{labels[j]}" for i in range(n) for j in range(i, n)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for t, rho in zip(traj.times, traj.rhos):
            mean = [float(np.real(np.trace(m @ rho))) for m in mats]
            row = [f"{t:.17g}"] + [f"{v:.17g}" for v in mean]
            for i in range(n):
                for j in range(i, n):
                    sym = 0.5 * (mats[i] @ mats[j] + mats[j] @ mats[i])
                    cij = float(np.real(np.trace(sym @ rho))) - mean[i] * mean[j]
                    row.append(f"{cij:.17g}")
            fh.write(",".join(row) + "\n")
