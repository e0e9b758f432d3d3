"""
Impurity dynamics from influence matrices, transport between two leads,
currents, and comparison metrics between influence matrices.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .channels import (
    ImpuritySpec,
    SuperOperator,
    amplitude_damping_reset,
    devectorize,
    haar_unitary,
    identity_channel,
    impurity_channel,
    unitary_channel,
    vectorize,
)
from .errors import ShapeError
from .tensor import (
    TimeMPS,
    absorb_boundaries,
    identity_closure,
    left_canonicalize,
    mps_overlap,
    right_closures,
)

# Sequences per vectorized chunk in the prediction-error Monte Carlo.
EPS_CHUNK = 250


@dataclass(frozen=True)
class ControlSchedule:
    """One CPTP impurity channel per time step."""

    channels: tuple

    def __post_init__(self):
        chans = tuple(self.channels)
        object.__setattr__(self, "channels", chans)
        if not chans:
            raise ShapeError("empty schedule")
        dims = {c.dim for c in chans}
        if len(dims) != 1:
            raise ShapeError("all channels of a schedule must act on the same qubits")
        bad = [k for k, c in enumerate(chans) if not c.cptp_verified]
        if bad:
            raise ValueError(f"schedule channels at steps {bad} are not verified CPTP")

    @property
    def t(self) -> int:
        return len(self.channels)

    @property
    def n_qubits(self) -> int:
        return self.channels[0].n_qubits

    def __getitem__(self, k):
        return self.channels[k]

    @classmethod
    def constant(cls, channel: SuperOperator, t: int) -> "ControlSchedule":
        return cls((channel,) * t)

    @classmethod
    def from_descriptors(cls, descriptors: Sequence, n_qubits: int) -> "ControlSchedule":
        """Descriptors are ImpuritySpec, ``"identity"``, ``"reset"`` or a SuperOperator."""
        out = []
        for d in descriptors:
            if isinstance(d, SuperOperator):
                out.append(d)
            elif isinstance(d, ImpuritySpec):
                if n_qubits != 2:
                    raise ShapeError("an ImpuritySpec channel acts on two qubits")
                out.append(impurity_channel(d))
            elif d == "identity":
                out.append(identity_channel(n_qubits))
            elif d in ("reset", "amplitude_damping_reset"):
                out.append(amplitude_damping_reset(n_qubits))
            else:
                raise ValueError(f"unknown channel descriptor {d!r}")
        return cls(tuple(out))

    @classmethod
    def reset_protocol(cls, spec: ImpuritySpec, t: int, reset_at: int) -> "ControlSchedule":
        """Unitary before ``reset_at``, a reset to all-down at ``reset_at``, identity after."""
        u = impurity_channel(spec)
        reset = amplitude_damping_reset(2)
        ident = identity_channel(2)
        chans = [u if k < reset_at else reset if k == reset_at else ident for k in range(t)]
        return cls(tuple(chans))

    @classmethod
    def haar(cls, t: int, n_qubits: int, rng: np.random.Generator) -> "ControlSchedule":
        d = 2**n_qubits
        return cls(tuple(unitary_channel(haar_unitary(d, rng)) for _ in range(t)))


@dataclass
class Trajectory:
    """Vectorized impurity states after each half step and each full step.

    ``rho_half[k]`` is the state at time ``k + 1/2`` (after the environment
    step, before the impurity channel); ``rho_full[k]`` the state at integer
    time ``k`` with ``rho_full[0]`` the initial state.
    """

    rho_half: np.ndarray
    rho_full: np.ndarray
    observables: dict = field(default_factory=dict)
    closure_defect: float = 0.0

    @property
    def t(self) -> int:
        return self.rho_half.shape[0]

    def expectation(self, op: np.ndarray):
        """``(<O(k + 1/2)>, <O(k)>)`` as arrays of length ``t`` and ``t + 1``."""
        # Tr(O rho) = vec(O^T) . vec(rho)
        w = vectorize(np.asarray(op).T)
        return self.rho_half @ w, self.rho_full @ w

    def density_matrices(self, half: bool = False) -> np.ndarray:
        src = self.rho_half if half else self.rho_full
        return np.array([devectorize(v) for v in src])

    def trace_defect(self) -> float:
        tr = [np.trace(r) for r in self.density_matrices()]
        tr += [np.trace(r) for r in self.density_matrices(half=True)]
        return float(np.max(np.abs(np.array(tr) - 1.0)))

    def psd_violation(self) -> float:
        """Most negative eigenvalue magnitude over all stored states (0 if PSD)."""
        worst = 0.0
        for r in np.concatenate([self.density_matrices(), self.density_matrices(half=True)]):
            w = np.linalg.eigvalsh(0.5 * (r + r.conj().T))
            worst = max(worst, float(-w[0]))
        return worst


def _attach_observables(traj: Trajectory, observables: Mapping | None) -> Trajectory:
    for name, op in (observables or {}).items():
        traj.observables[name] = traj.expectation(op)
    return traj


def impurity_trajectory(im: TimeMPS, schedule: ControlSchedule, rho_i0, observables=None) -> Trajectory:
    """Single-qubit impurity coupled to one environment through its influence matrix."""
    if schedule.t != im.t:
        raise ShapeError(f"schedule has {schedule.t} steps but the IM has {im.t}")
    if schedule.n_qubits != 1:
        raise ShapeError("impurity_trajectory needs a single-qubit schedule")
    closures = right_closures(im)
    v0 = vectorize(rho_i0)
    x = np.outer(im.left, v0)
    half, full = [], [v0]
    for k, core in enumerate(im.cores):
        y = np.einsum("ai,aijb->bj", x, core)
        half.append(closures[k + 1] @ y)
        x = y @ schedule[k].matrix.T
        full.append(closures[k + 1] @ x)
    traj = Trajectory(
        np.array(half), np.array(full), closure_defect=abs(identity_closure(im) - 1.0)
    )
    return _attach_observables(traj, observables)


def _pair_to_legs(vec16: np.ndarray) -> np.ndarray:
    # little-endian: flat = kL + 4 kR  ->  [kL, kR]
    return vec16.reshape(4, 4).T


def _legs_to_pair(legs: np.ndarray) -> np.ndarray:
    return legs.T.reshape(-1)


def transport_trajectory(
    im_left: TimeMPS, im_right: TimeMPS, schedule: ControlSchedule, rho_i0, observables=None
) -> Trajectory:
    """Two-qubit impurity, left qubit coupled to ``im_left`` and right qubit to ``im_right``."""
    if not im_left.t == im_right.t == schedule.t:
        raise ShapeError("left IM, right IM and schedule must have equal length")
    if schedule.n_qubits != 2:
        raise ShapeError("transport needs a two-qubit schedule")
    cl, cr = right_closures(im_left), right_closures(im_right)
    v0 = vectorize(rho_i0)
    x = np.einsum("a,kl,c->aklc", im_left.left, _pair_to_legs(v0), im_right.left)
    half, full = [], [v0]
    for k in range(schedule.t):
        y = np.einsum("aklc,akjb->bjlc", x, im_left.cores[k])
        y = np.einsum("bjlc,cldm->bjdm", y, im_right.cores[k])
        half.append(_legs_to_pair(np.einsum("bjdm,b,m->jd", y, cl[k + 1], cr[k + 1])))
        w = schedule[k].tensor()
        x = np.einsum("PQjd,bjdm->bPQm", w, y)
        full.append(_legs_to_pair(np.einsum("bjdm,b,m->jd", x, cl[k + 1], cr[k + 1])))
    defect = max(abs(identity_closure(im_left) - 1.0), abs(identity_closure(im_right) - 1.0))
    traj = Trajectory(np.array(half), np.array(full), closure_defect=defect)
    return _attach_observables(traj, observables)


def current(traj: Trajectory, op: np.ndarray) -> np.ndarray:
    """Finite-difference current ``<O(k+1)> - <O(k+1/2)>`` for each step ``k``."""
    half, full = traj.expectation(op)
    return (full[1:] - half).real


def steady_current(values: np.ndarray, window) -> float:
    """Mean of ``values`` over ``window`` (a slice or an iterable of step indices)."""
    values = np.asarray(values)
    sel = values[window] if isinstance(window, slice) else values[list(window)]
    if sel.size == 0:
        raise ValueError("empty averaging window")
    return float(np.mean(sel))


def steady_current_stderr(values: np.ndarray, window) -> float:
    values = np.asarray(values)
    sel = values[window] if isinstance(window, slice) else values[list(window)]
    if sel.size < 2:
        return 0.0
    return float(np.std(sel, ddof=1) / np.sqrt(sel.size))


def infidelity(a: TimeMPS, b: TimeMPS) -> float:
    """``1 - |<a|b>|^2 / (<a|a><b|b>)``, the IMs treated as wavefunctions."""
    if a.t != b.t:
        raise ShapeError("infidelity needs IMs of equal length")
    na = mps_overlap(a, a).real
    nb = mps_overlap(b, b).real
    if na <= 0.0 or nb <= 0.0:
        raise ValueError("zero-norm influence matrix")
    f = abs(mps_overlap(a, b)) ** 2 / (na * nb)
    return float(min(1.0, max(0.0, 1.0 - f)))


def _batched_states(im: TimeMPS, unitaries: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """Integer-time impurity states for a batch of single-qubit unitary schedules.

    ``unitaries`` has shape ``(S, t, 2, 2)``; returns ``(S, t, 4)``.
    """
    closures = right_closures(im)
    s = unitaries.shape[0]
    # vec(U rho U^dagger) = (U kron conj U) vec(rho) for a single qubit
    sup = np.einsum("stac,stbd->stabcd", unitaries, unitaries.conj()).reshape(s, im.t, 4, 4)
    x = np.broadcast_to(np.outer(im.left, v0), (s,) + (im.left.size, 4))
    out = np.empty((s, im.t, 4), dtype=complex)
    for k, core in enumerate(im.cores):
        y = np.einsum("sai,aijb->sbj", x, core)
        x = np.einsum("sbj,sij->sbi", y, sup[:, k])
        out[:, k] = np.einsum("sbi,b->si", x, closures[k + 1])
    return out


def _trace_norms(diff_vecs: np.ndarray) -> np.ndarray:
    m = diff_vecs.reshape(diff_vecs.shape[:-1] + (2, 2))
    m = 0.5 * (m + np.swapaxes(m.conj(), -1, -2))
    return np.abs(np.linalg.eigvalsh(m)).sum(axis=-1)


def prediction_error(
    im_a: TimeMPS,
    im_b: TimeMPS,
    n_sequences: int = 4000,
    seed: int = 0,
    rho_i0=None,
    threads: int = 1,
) -> float:
    """Mean over Haar-random unitary schedules of the time-averaged trace distance.

    The impurity starts in spin up unless ``rho_i0`` is given.
    """
    if im_a.t != im_b.t:
        raise ShapeError("prediction_error needs IMs of equal length")
    t = im_a.t
    rho0 = np.array([[1, 0], [0, 0]], dtype=complex) if rho_i0 is None else rho_i0
    v0 = vectorize(rho0)
    seeds = np.random.SeedSequence(seed).spawn(n_sequences)

    def chunk_sum(lo: int, hi: int) -> float:
        us = np.empty((hi - lo, t, 2, 2), dtype=complex)
        for k in range(lo, hi):
            rng = np.random.default_rng(seeds[k])
            for tau in range(t):
                us[k - lo, tau] = haar_unitary(2, rng)
        da = _batched_states(im_a, us, v0)
        db = _batched_states(im_b, us, v0)
        per_seq = _trace_norms(da - db).mean(axis=1)
        return float(np.sum(per_seq))

    bounds = [(lo, min(lo + EPS_CHUNK, n_sequences)) for lo in range(0, n_sequences, EPS_CHUNK)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: chunk_sum(*b), bounds))
    else:
        parts = [chunk_sum(*b) for b in bounds]
    # fixed-order reduction keeps the result independent of the worker count
    return float(np.sum(parts) / n_sequences)


def im_norm(im: TimeMPS) -> float:
    """Frobenius norm ``sqrt(<J|J>)``."""
    return float(np.sqrt(max(mps_overlap(im, im).real, 0.0)))


def im_reduce(im: TimeMPS, t_new: int) -> TimeMPS:
    """Keep the first ``t_new`` steps, closing the rest with ``I/2`` in and trace out."""
    if not 1 <= t_new <= im.t:
        raise ValueError(f"t_new must lie in [1, {im.t}]")
    if t_new == im.t:
        return im
    closures = right_closures(im)
    return im.with_cores(im.cores[:t_new], right=closures[t_new])


def temporal_entanglement_profile(im: TimeMPS) -> list[float]:
    """Von Neumann entropies across every internal bond ``1..t-1``."""
    cores = left_canonicalize(absorb_boundaries(im))
    out = [0.0] * (len(cores) - 1)
    for k in range(len(cores) - 1, 0, -1):
        c = cores[k]
        d, _, _, dr = c.shape
        u, s, vh = np.linalg.svd(c.reshape(d, 16 * dr), full_matrices=False)
        p = s**2 / np.sum(s**2)
        p = p[p > 0.0]
        out[k - 1] = float(-np.sum(p * np.log(p)))
        cores[k] = vh.reshape(-1, 4, 4, dr)
        cores[k - 1] = np.tensordot(cores[k - 1], u * s, axes=(3, 0))
    return out


def temporal_entanglement(im: TimeMPS, cut: int) -> float:
    """Entropy of the normalized IM across the bond after ``cut`` time steps."""
    if not 1 <= cut < im.t:
        raise ValueError(f"cut must lie in [1, {im.t - 1}]")
    return temporal_entanglement_profile(im)[cut - 1]


def trajectory_rows(traj: Trajectory, names: Iterable[str] | None = None):
    """CSV-ready rows ``(tau, name, half, full, current)`` for stored observables."""
    names = list(traj.observables) if names is None else list(names)
    rows = []
    for name in names:
        half, full = traj.observables[name]
        for k in range(traj.t):
            rows.append((k, name, half[k].real, full[k + 1].real, (full[k + 1] - half[k]).real))
    return rows
