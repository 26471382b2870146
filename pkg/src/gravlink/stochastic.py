"""Ito-level engine: Wiener bundles, weak-measurement and feedback increments,
measurement records, the combined SSE step, ensemble simulation and reduction.

One step of the norm-preserving SSE for M channels (a_l Hermitian, rate g_l,
feedback operator b_l, independent Wiener increments dW_l) is

    d|psi> = { -(i/hbar) H0 dt
               + sum_l [ -(g_l/8 hbar^2)(a_l - <a_l>)^2 dt
                         + (sqrt(g_l)/2 hbar)(a_l - <a_l>) dW_l
                         - (i/hbar)<a_l> b_l dt - (1/2 g_l) b_l^2 dt
                         - (i/sqrt(g_l)) b_l dW_l
                         - (i/2 hbar) b_l (a_l - <a_l>) dt ] } |psi>,

integrated explicitly (Euler-Maruyama, <a_l> frozen at the step's start state)
with post-step renormalization.  The classical record of channel l is
r_l = <a_l> + (hbar/sqrt(g_l)) dW_l/dt; only its integral r_l*dt is stored.

Noise streams are counter-based: trajectory j of a run seeded with s draws
from Philox keyed by SeedSequence(s, spawn_key=(j,)), and step k uses the
k-th row of that stream, so the (seed, trajectory, step) triple pins every
increment bit-exactly regardless of batching or thread count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.special import ndtri

from .hilbert import (
    DensityOperator,
    HilbertSpec,
    LEAKAGE_THRESHOLD,
    LeakageWarning,
    Operator,
    StateVector,
    combine,
    top_level_population,
)


class NormCollapseError(RuntimeError):
    """A single step changed the norm drastically: dt is too large."""


class StabilityWarning(UserWarning):
    """dt is large compared to the fastest deterministic scale."""


_HERM_TOL = 1e-12


def _require_hermitian(op: Operator, name: str):
    a = op.entries
    scale = max(np.abs(a).max(), 1e-300)
    if np.abs(a - a.conj().T).max() > _HERM_TOL * max(scale, 1.0):
        raise ValueError(f"{name} must be Hermitian")


@dataclass(frozen=True)
class MeasurementChannel:
    """Continuously measured observable with information rate gamma.

    gamma carries units [a]^2 * hbar^2 / time in the convention where the
    dephasing coefficient is gamma/8 hbar^2; internal units keep hbar = 1.
    """

    a_op: Operator
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0.0:
            raise ValueError(f"information rate must be positive, got {self.gamma}")
        _require_hermitian(self.a_op, "measurement operator")


@dataclass(frozen=True)
class FeedbackChannel:
    b_op: Operator

    def __post_init__(self):
        _require_hermitian(self.b_op, "feedback operator")


@dataclass(frozen=True)
class ProtocolSpec:
    """Free Hamiltonian + M (measurement, feedback) channel pairs.

    ``correlation``, when present, is the raw-channel correlator the channels
    were whitened from (kept for reference; the channels stored here always
    carry independent unit-variance noises).
    """

    h0: Operator
    channels: tuple
    correlation: np.ndarray | None = None
    label: str = ""
    hbar: float = 1.0
    space: HilbertSpec | None = None
    meta: dict | None = None

    def __post_init__(self):
        channels = tuple((mch, fch) for mch, fch in self.channels)
        object.__setattr__(self, "channels", channels)
        dim = self.h0.dim
        _require_hermitian(self.h0, "H0")
        for mch, fch in channels:
            if mch.a_op.dim != dim or fch.b_op.dim != dim:
                raise ValueError("all protocol operators must share one dimension")
        if self.correlation is not None:
            g = np.asarray(self.correlation, dtype=float)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValueError("correlation matrix must be square")
            if np.abs(g - g.T).max() > 1e-10 * max(np.abs(g).max(), 1.0):
                raise ValueError("correlation matrix must be symmetric")
            w = np.linalg.eigvalsh(0.5 * (g + g.T))
            if w.min() < -1e-10 * max(w.max(), 1.0):
                raise ValueError("correlation matrix must be PSD")
            object.__setattr__(self, "correlation", g)

    @property
    def dim(self) -> int:
        return self.h0.dim

    @property
    def n_channels(self) -> int:
        return len(self.channels)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

_U_FLOOR = 2.0**-64


@dataclass(frozen=True)
class WienerBundle:
    """Reproducible Gaussian increments of M independent Wiener processes."""

    channels: int
    dt: float
    seed: int

    def __post_init__(self):
        if self.channels < 0 or not self.dt > 0.0:
            raise ValueError("need channels >= 0 and dt > 0")

    def _generator(self, trajectory: int) -> Generator:
        ss = SeedSequence(self.seed, spawn_key=(int(trajectory),))
        return Generator(Philox(ss))

    def increments(self, trajectory: int, n_steps: int) -> np.ndarray:
        """dW array of shape (n_steps, channels) for one trajectory.

        Row k is the step-k increment; rows are stable under extending
        n_steps (the stream is consumed in row-major order).
        """
        g = self._generator(trajectory)
        u = g.random((n_steps, self.channels))
        return ndtri(np.maximum(u, _U_FLOOR)) * math.sqrt(self.dt)

    def step_increments(self, trajectory: int, step: int) -> np.ndarray:
        """Increments of a single (trajectory, step) pair."""
        return self.increments(trajectory, step + 1)[step]


# ---------------------------------------------------------------------------
# single-state increments (contract surface; the batched stepper below is the
# same arithmetic applied column-wise)
# ---------------------------------------------------------------------------

def _amplitudes(psi) -> np.ndarray:
    if isinstance(psi, StateVector):
        return psi.amplitudes
    return np.asarray(psi, dtype=complex)


def measurement_increment(psi, ch: MeasurementChannel, dW: float, dt: float,
                          hbar: float = 1.0) -> np.ndarray:
    """{-(g/8 hbar^2)(a-<a>)^2 dt + (sqrt(g)/2 hbar)(a-<a>) dW} |psi>."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    v = _amplitudes(psi)
    a = ch.a_op.entries
    av = a @ v
    exp_a = float(np.real(np.vdot(v, av)))
    centered = av - exp_a * v
    centered2 = a @ centered - exp_a * centered
    g = ch.gamma
    return (-g / (8.0 * hbar**2) * dt) * centered2 + (math.sqrt(g) / (2.0 * hbar) * dW) * centered


def record(psi, ch: MeasurementChannel, dW: float, dt: float, hbar: float = 1.0) -> float:
    """Measurement record r = <a> + (hbar/sqrt(gamma)) dW/dt."""
    if dt == 0.0:
        raise ValueError("dt must be nonzero")
    v = _amplitudes(psi)
    exp_a = float(np.real(np.vdot(v, ch.a_op.entries @ v)))
    return exp_a + hbar / math.sqrt(ch.gamma) * dW / dt


def feedback_increment(psi, mch: MeasurementChannel, fch: FeedbackChannel,
                       dW: float, dt: float, hbar: float = 1.0) -> np.ndarray:
    """{[-(i/hbar)<a> b - (1/2 gamma) b^2] dt - (i/sqrt(gamma)) b dW} |psi>."""
    v = _amplitudes(psi)
    a = mch.a_op.entries
    b = fch.b_op.entries
    exp_a = float(np.real(np.vdot(v, a @ v)))
    bv = b @ v
    bbv = b @ bv
    g = mch.gamma
    return (-1j / hbar * exp_a * dt) * bv - (dt / (2.0 * g)) * bbv - (1j / math.sqrt(g) * dW) * bv


def combined_step(psi, protocol: ProtocolSpec, increments, dt: float) -> StateVector:
    """One explicit SSE step (measurement + feedback + Ito cross + H0), renormalized."""
    v = _amplitudes(psi)
    spec = psi.spec if isinstance(psi, StateVector) else None
    column = v.reshape(-1, 1)
    dW = np.asarray(increments, dtype=float).reshape(len(protocol.channels), 1)
    stepper = _Stepper(protocol, spec)
    out, _ = stepper.step(column, dW, dt)
    return StateVector(out[:, 0], spec)


# ---------------------------------------------------------------------------
# whitening of spatially correlated channels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhitenedChannels:
    """Effective independent channels realizing a correlated-noise protocol.

    mixing L satisfies Gamma = L L^T; raw noise increments are L @ dW with dW
    the unit-variance whitened increments.
    """

    channels: tuple
    mixing: np.ndarray
    inverse_mixing: np.ndarray


def whiten_correlated_channels(raw_ops, correlation, feedback_ops=None,
                               tol: float = 1e-10) -> WhitenedChannels:
    """Factor Gamma = L L^T and build unit-rate channels a'_u = sum_i L[i,u] a_i.

    The feedback map transforms with the pseudo-inverse, b'_u = sum_i
    (L^+)[u,i] b_i, which leaves the deterministic master equation unchanged
    (and drops noise directions of zero weight when Gamma is rank-deficient).
    """
    raw_ops = list(raw_ops)
    n = len(raw_ops)
    gamma = np.asarray(correlation, dtype=float)
    if gamma.shape != (n, n):
        raise ValueError("correlation must be n_raw x n_raw")
    if np.abs(gamma - gamma.T).max() > 1e-10 * max(np.abs(gamma).max(), 1.0):
        raise ValueError("correlation must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (gamma + gamma.T))
    if w.min() < -1e-10 * max(w.max(), 1.0):
        raise ValueError(f"correlation not PSD (min eigenvalue {w.min():.3e})")
    for op in raw_ops:
        _require_hermitian(op, "raw channel operator")

    try:
        mixing = np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (gamma + gamma.T))
        keep = vals > tol * max(vals.max(), 1.0)
        mixing = vecs[:, keep] * np.sqrt(vals[keep])
    inverse_mixing = np.linalg.pinv(mixing)

    if feedback_ops is None:
        zero = Operator(np.zeros_like(raw_ops[0].entries), hermitian_hint=True,
                        mode_terms=())
        feedback_ops = [zero] * n
    else:
        feedback_ops = list(feedback_ops)
        if len(feedback_ops) != n:
            raise ValueError("one feedback operator per raw channel required")

    channels = []
    for mu in range(mixing.shape[1]):
        a_eff = combine(raw_ops, mixing[:, mu], hermitian=True)
        b_eff = combine(feedback_ops, inverse_mixing[mu, :], hermitian=True)
        channels.append((MeasurementChannel(a_eff, 1.0), FeedbackChannel(b_eff)))
    return WhitenedChannels(tuple(channels), mixing, inverse_mixing)


def whitened_protocol(h0: Operator, raw_ops, correlation, feedback_ops=None,
                      label: str = "", hbar: float = 1.0) -> ProtocolSpec:
    """Build a ProtocolSpec from correlated raw channels (whitened once here)."""
    wc = whiten_correlated_channels(raw_ops, correlation, feedback_ops)
    return ProtocolSpec(h0, wc.channels, correlation=np.asarray(correlation, float),
                        label=label, hbar=hbar)


# ---------------------------------------------------------------------------
# batched stepper and ensemble simulation
# ---------------------------------------------------------------------------

class _Applier:
    """Apply an Operator to a (dim, B) batch, per-mode when structure allows."""

    def __init__(self, op: Operator, cutoffs):
        self.terms = None
        self.dense = op.entries
        if op.mode_terms is not None and cutoffs is not None:
            self.terms = op.mode_terms
            self.shape = tuple(cutoffs)

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        if self.terms is None:
            return self.dense @ batch
        t = batch.reshape(*self.shape, -1)
        out = np.zeros_like(t)
        for mode, local in self.terms:
            y = np.tensordot(local, t, axes=([1], [mode]))
            out += np.moveaxis(y, 0, mode)
        return out.reshape(batch.shape)


class _Stepper:
    def __init__(self, protocol: ProtocolSpec, spec: HilbertSpec | None):
        cutoffs = spec.cutoffs if spec is not None else None
        self.hbar = protocol.hbar
        self.h0 = _Applier(protocol.h0, cutoffs)
        self.ch = []
        for mch, fch in protocol.channels:
            self.ch.append((_Applier(mch.a_op, cutoffs), _Applier(fch.b_op, cutoffs),
                            mch.gamma))

    def step(self, psi: np.ndarray, dW: np.ndarray, dt: float):
        """Advance a (dim, B) batch by one step; dW is (M, B).

        Returns (renormalized batch, per-channel <a> of shape (M, B)).
        """
        hbar = self.hbar
        dpsi = (-1j / hbar * dt) * self.h0(psi)
        exps = np.empty((len(self.ch), psi.shape[1]))
        for l, (apply_a, apply_b, g) in enumerate(self.ch):
            av = apply_a(psi)
            exp_a = np.einsum("ij,ij->j", psi.conj(), av).real
            exps[l] = exp_a
            centered = av - psi * exp_a
            centered2 = apply_a(centered) - centered * exp_a
            bv = apply_b(psi)
            bbv = apply_b(bv)
            bcv = apply_b(centered)
            w = dW[l]
            dpsi += (
                (-g / (8.0 * hbar**2) * dt) * centered2
                + (math.sqrt(g) / (2.0 * hbar)) * centered * w
                + (-1j / hbar * dt) * (bv * exp_a)
                - (dt / (2.0 * g)) * bbv
                + (-1j / math.sqrt(g)) * (bv * w)
                + (-1j / (2.0 * hbar) * dt) * bcv
            )
        out = psi + dpsi
        norms = np.linalg.norm(out, axis=0)
        if np.any(norms < 0.5):
            raise NormCollapseError(
                "norm collapsed below 0.5 within one step; reduce dt"
            )
        return out / norms, exps


@dataclass
class TrajectoryEnsemble:
    """Seeded SSE trajectory collection, reducible to an empirical density."""

    n_traj: int
    dt: float
    times: np.ndarray                # snapshot times (subset of the step grid)
    states: np.ndarray               # (n_snapshots, dim, n_traj)
    records_cum: np.ndarray          # integral of r dt up to each snapshot: (n_snap, M, n_traj)
    records: np.ndarray | None       # per-step r*dt increments: (n_steps, M, n_traj)
    leakage: np.ndarray              # (n_modes, n_traj) max top-level population
    leakage_flagged: bool
    seed: int
    label: str = ""
    spec: HilbertSpec | None = None

    @property
    def n_channels(self) -> int:
        return self.records_cum.shape[1]

    def snapshot_index(self, t: float) -> int:
        idx = np.nonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12 + 1e-9 * self.dt))[0]
        if idx.size == 0:
            raise ValueError(f"time {t} is not on the stored snapshot grid {self.times}")
        return int(idx[0])


def _stability_scale(protocol: ProtocolSpec) -> float:
    h = protocol.h0.entries
    scale = float(np.abs(h).sum(axis=1).max()) / protocol.hbar
    return scale


def simulate_ensemble(protocol: ProtocolSpec, psi0: StateVector, dt: float,
                      t_final: float, n_traj: int, seed: int, *,
                      snapshot_times=None, store_records: bool = True,
                      threads: int = 1, block_size: int = 1024) -> TrajectoryEnsemble:
    """Euler-Maruyama ensemble of SSE trajectories (strong order 0.5).

    Reproducible: the (seed, trajectory, step) triple fixes every increment,
    and the block decomposition is independent of ``threads``, so results are
    bit-identical for any thread count.
    """
    if not dt > 0.0 or not t_final > 0.0:
        raise ValueError("dt and t_final must be positive")
    if n_traj < 1:
        raise ValueError("n_traj >= 1 required")
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer number of steps")

    scale = _stability_scale(protocol)
    if dt * scale > 0.1:
        warnings.warn(
            f"dt*|H0|/hbar = {dt * scale:.3g} > 0.1; deterministic phase errors "
            "may dominate", StabilityWarning, stacklevel=2)

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

    spec = psi0.spec
    dim = psi0.dim
    n_ch = protocol.n_channels
    bundle = WienerBundle(n_ch, dt, seed)
    stepper = _Stepper(protocol, spec)
    hbar = protocol.hbar
    sqrt_g = np.array([math.sqrt(m.gamma) for m, _ in protocol.channels])

    n_snap = len(snap_steps)
    states = np.empty((n_snap, dim, n_traj), dtype=complex)
    records_cum = np.zeros((n_snap, n_ch, n_traj))
    records = np.empty((n_steps, n_ch, n_traj)) if store_records else None
    n_modes = spec.n_modes if spec is not None else 0
    leakage = np.zeros((n_modes, n_traj))

    blocks = [(start, min(start + block_size, n_traj))
              for start in range(0, n_traj, block_size)]

    def run_block(block):
        start, stop = block
        nb = stop - start
        psi = np.repeat(psi0.amplitudes.reshape(-1, 1), nb, axis=1)
        noise = np.empty((n_steps, n_ch, nb))
        for j in range(nb):
            noise[:, :, j] = bundle.increments(start + j, n_steps)
        cum = np.zeros((n_ch, nb))
        local_leak = np.zeros((n_modes, nb))

        def take_snapshot(ptr):
            states[ptr, :, start:stop] = psi
            records_cum[ptr, :, start:stop] = cum
            if spec is not None:
                np.maximum(local_leak, top_level_population(spec, psi),
                           out=local_leak)

        snap_ptr = 0
        while snap_ptr < n_snap and snap_steps[snap_ptr] == 0:
            take_snapshot(snap_ptr)
            snap_ptr += 1
        for k in range(n_steps):
            dW = noise[k]
            psi, exps = stepper.step(psi, dW, dt)
            r_dt = exps * dt + (hbar / sqrt_g)[:, None] * dW
            cum += r_dt
            if store_records:
                records[k, :, start:stop] = r_dt
            while snap_ptr < n_snap and snap_steps[snap_ptr] == k + 1:
                take_snapshot(snap_ptr)
                snap_ptr += 1
        if spec is not None:
            np.maximum(local_leak, top_level_population(spec, psi), out=local_leak)
            leakage[:, start:stop] = local_leak

    if threads > 1 and len(blocks) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_block, blocks))
    else:
        for block in blocks:
            run_block(block)

    flagged = bool(leakage.size and leakage.max() > LEAKAGE_THRESHOLD)
    if flagged:
        warnings.warn(
            f"ensemble leakage {leakage.max():.3e} exceeds {LEAKAGE_THRESHOLD:.0e}",
            LeakageWarning, stacklevel=2)
    return TrajectoryEnsemble(
        n_traj=n_traj, dt=dt, times=times, states=states,
        records_cum=records_cum, records=records, leakage=leakage,
        leakage_flagged=flagged, seed=seed, label=protocol.label, spec=spec)


def ensemble_density(ens: TrajectoryEnsemble, t: float) -> DensityOperator:
    """Empirical density (1/n) sum_i |psi_i><psi_i| at a stored snapshot time."""
    k = ens.snapshot_index(t)
    v = ens.states[k]
    rho = (v @ v.conj().T) / ens.n_traj
    rho = 0.5 * (rho + rho.conj().T)
    return DensityOperator(rho)


def dump_trajectories_csv(ens: TrajectoryEnsemble, path, include_amplitudes: bool = False):
    """CSV dump: t, traj, channel, integrated_record[, re_amp_*, im_amp_*]."""
    dim = ens.states.shape[1]
    with open(path, "w") as fh:
        header = "t,traj,channel,integrated_record"
        if include_amplitudes:
            header += "".join(f",re_amp_{i}" for i in range(dim))
            header += "".join(f",im_amp_{i}" for i in range(dim))
        fh.write(header + "\n")
        for si, t in enumerate(ens.times):
            for j in range(ens.n_traj):
                for l in range(ens.n_channels):
                    row = f"{t:.17g},{j},{l},{ens.records_cum[si, l, j]:.17g}"
                    if include_amplitudes and l == 0:
                        amp = ens.states[si, :, j]
                        row += "".join(f",{x.real:.17g}" for x in amp)
                        row += "".join(f",{x.imag:.17g}" for x in amp)
                    fh.write(row + "\n")
