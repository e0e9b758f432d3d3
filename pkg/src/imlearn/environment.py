"""
Floquet spin-chain environments and their influence matrices.

The impurity qubit sits at site 0 of a chain with environment sites
``1..L``.  One Floquet step applies two-site gates ``exp(-i H)`` with
``H = J (XX + YY) + J' ZZ`` first on bonds ``(1,2), (3,4), ...`` and then
on bonds ``(0,1), (2,3), ...``.  Sites without a partner in a layer idle.

Influence matrices are built in two independent ways: densely, by
evolving the joint density matrix with open impurity legs, and as an MPS,
by absorbing chain sites from the far end towards the impurity.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from . import _dense
from .channels import (
    DOWN,
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    UP,
    SuperOperator,
    unitary_channel,
    vectorize,
)
from .dynamics import ControlSchedule, Trajectory, _attach_observables
from .errors import GuardError, ShapeError
from .tensor import TimeMPS, mps_compress

log = logging.getLogger(__name__)

INITIAL_STATES = ("polarized_up", "polarized_down", "infinite_temperature")
MODELS = ("XX", "XXZ")

# Size guards for dense constructions.
MAX_DENSE_QUBITS = 12
MAX_DENSE_SUPEROP_QUBITS = 6
MAX_DENSE_IM_STEPS = 4
MAX_DENSE_IM_LENGTH = 5
# Joint-operator entries per chunk in build_im_dense.
_DENSE_CHUNK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class ChainSpec:
    model: str = "XX"
    j: float = 0.1
    j_prime: float = 0.0
    length: int = 2
    initial_state: str = "infinite_temperature"
    steps: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.model == "XX" and self.j_prime != 0.0:
            raise ValueError("the XX model has j_prime = 0")
        if self.initial_state not in INITIAL_STATES:
            raise ValueError(f"initial_state must be one of {INITIAL_STATES}")
        if self.length < 1 or self.steps < 1:
            raise ValueError("length and steps must be positive")
        if not np.isfinite(self.j) or not np.isfinite(self.j_prime):
            raise ValueError("couplings must be finite")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChainSpec":
        return cls(**d)

    def replace(self, **changes) -> "ChainSpec":
        return ChainSpec(**{**asdict(self), **changes})


@dataclass(frozen=True)
class InfluenceMatrix(TimeMPS):
    """A :class:`TimeMPS` tagged with where it came from."""

    provenance: str = "first_principles"
    chain_spec: ChainSpec | None = None
    discarded_weight: float = 0.0
    run_id: str | None = None


def site_state(spec: ChainSpec) -> np.ndarray:
    return {
        "polarized_up": UP,
        "polarized_down": DOWN,
        "infinite_temperature": 0.5 * np.eye(2, dtype=complex),
    }[spec.initial_state]


def bond_hamiltonian(j: float, j_prime: float) -> np.ndarray:
    return j * (np.kron(PAULI_X, PAULI_X) + np.kron(PAULI_Y, PAULI_Y)) + j_prime * np.kron(
        PAULI_Z, PAULI_Z
    )


def chain_gate(spec: ChainSpec) -> np.ndarray:
    """Two-site Floquet gate ``exp(-i H)``."""
    return scipy.linalg.expm(-1j * bond_hamiltonian(spec.j, spec.j_prime))


def brickwork_layers(n_sites: int):
    """Bonds of the first (odd) and second (even) layer for sites ``0..n_sites-1``."""
    odd = [(i, i + 1) for i in range(1, n_sites - 1, 2)]
    even = [(i, i + 1) for i in range(0, n_sites - 1, 2)]
    return odd, even


def _apply_step(rho: np.ndarray, gate: np.ndarray, qubit_of_site: Sequence[int]) -> np.ndarray:
    odd, even = brickwork_layers(len(qubit_of_site))
    for a, b in odd + even:
        rho = _dense.apply_unitary(rho, gate, [qubit_of_site[a], qubit_of_site[b]])
    return rho


def environment_step_unitary(spec: ChainSpec) -> np.ndarray:
    """Dense Floquet unitary on impurity plus ``L`` chain sites."""
    n = spec.length + 1
    if n > MAX_DENSE_QUBITS:
        raise GuardError(f"{n} qubits exceed the dense guard of {MAX_DENSE_QUBITS}")
    gate = chain_gate(spec)
    odd, even = brickwork_layers(n)
    u = np.eye(2**n, dtype=complex)
    for a, _ in odd + even:
        full = np.kron(np.kron(np.eye(2**a), gate), np.eye(2 ** (n - a - 2)))
        u = full @ u
    return u


def environment_step_superop(spec: ChainSpec) -> SuperOperator:
    """One Floquet step as a dense superoperator (impurity is qubit 0)."""
    n = spec.length + 1
    if n > MAX_DENSE_SUPEROP_QUBITS:
        raise GuardError(f"dense superoperator on {n} qubits exceeds the guard")
    return unitary_channel(environment_step_unitary(spec))


def _check_dense_im_guard(spec: ChainSpec):
    if spec.steps > MAX_DENSE_IM_STEPS or spec.length > MAX_DENSE_IM_LENGTH:
        raise GuardError(
            f"dense IM needs t <= {MAX_DENSE_IM_STEPS} and L <= {MAX_DENSE_IM_LENGTH}"
        )


def build_im_dense(spec: ChainSpec) -> np.ndarray:
    """Exact influence matrix as a dense array with axes ``(i0, j0, ..., i_{t-1}, j_{t-1})``.

    Evolves the environment operator attached to every configuration of
    open impurity legs, then takes the final environment trace.
    """
    _check_dense_im_guard(spec)
    L, t = spec.length, spec.steps
    denv = 2**L
    u = environment_step_unitary(spec)
    rho_env = _dense.product_state([site_state(spec)] * L).reshape(denv, denv)
    # impurity input basis: vec index i <-> |i // 2><i % 2|
    units = np.zeros((4, 2, 2), dtype=complex)
    for i in range(4):
        units[i, i // 2, i % 2] = 1.0

    def step(x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        joint = np.einsum("irc,nRC->nirRcC", units, x).reshape(n * 4, 2 * denv, 2 * denv)
        joint = u @ joint @ u.conj().T
        joint = joint.reshape(n, 4, 2, denv, 2, denv).transpose(0, 1, 2, 4, 3, 5)
        return joint.reshape(n * 16, denv, denv)

    def evolve(x: np.ndarray, remaining: int) -> np.ndarray:
        if remaining == 0:
            return np.trace(x, axis1=1, axis2=2)
        chunk = max(1, _DENSE_CHUNK_ENTRIES // (64 * denv * denv))
        parts = [evolve(step(x[k : k + chunk]), remaining - 1) for k in range(0, x.shape[0], chunk)]
        return np.concatenate(parts)

    flat = evolve(rho_env[None], t)
    return flat.reshape((4, 4) * t)


def _gate_tensor(spec: ChainSpec) -> np.ndarray:
    # legs (out_left, out_right, in_left, in_right), each a vectorized qubit
    return unitary_channel(chain_gate(spec)).tensor()


def build_im_mps(spec: ChainSpec, chi_max: int = 256, svd_tol: float = 0.0) -> InfluenceMatrix:
    """Influence matrix as an MPS over time, by transverse contraction.

    Starting from the far end of the chain, each site contributes its
    column of gates (with the site's own vectorized state running along
    the time direction) to a boundary MPS, which is then compressed.
    """
    L, t = spec.length, spec.steps
    if L < 2 * t:
        log.warning(
            "L=%d < 2t=%d: the IM describes this finite chain, not the semi-infinite one", L, 2 * t
        )
    g = _gate_tensor(spec)
    rho_site = vectorize(site_state(spec))
    vec_id = vectorize(np.eye(2))
    eye4 = np.eye(4, dtype=complex).reshape(1, 4, 4, 1)
    cores = [eye4] * t
    left = np.ones(1, dtype=complex)
    right = np.ones(1, dtype=complex)
    discarded = 0.0
    for s in range(L, 0, -1):
        new = []
        for b in cores:
            if s % 2 == 1:
                # site s meets s+1 first (odd layer), then s-1 (even layer)
                c = np.einsum("AxyB,PzQy->AxQPBz", b, g)
            else:
                c = np.einsum("PyQx,AyzB->AxQPBz", g, b)
            d, dr = b.shape[0], b.shape[3]
            new.append(c.reshape(d * 4, 4, 4, dr * 4))
        mps = TimeMPS(new, np.kron(left, rho_site), np.kron(right, vec_id))
        mps, dw = mps_compress(mps, chi_max, svd_tol)
        discarded += dw
        cores, left, right = list(mps.cores), mps.left, mps.right
    if discarded > 1e-6:
        log.warning("build_im_mps discarded weight %.3e", discarded)
    return InfluenceMatrix(
        tuple(cores),
        left,
        right,
        provenance="first_principles",
        chain_spec=spec,
        discarded_weight=discarded,
    )


def decoupled_im(t: int) -> InfluenceMatrix:
    """IM of an environment that never touches the impurity (identity channel each step)."""
    core = np.eye(4, dtype=complex).reshape(1, 4, 4, 1)
    return InfluenceMatrix((core,) * t, np.ones(1), np.ones(1), provenance="exact_dense_embedded")


def depolarizing_im(t: int) -> InfluenceMatrix:
    """IM that replaces the impurity by ``I/2`` every step."""
    vi = vectorize(np.eye(2))
    core = np.outer(vi, 0.5 * vi).reshape(1, 4, 4, 1)
    return InfluenceMatrix((core,) * t, np.ones(1), np.ones(1), provenance="exact_dense_embedded")


# --- dense protocol and dynamics oracles --------------------------------------


def _sic_elements():
    from .measurement import sic_povm

    return sic_povm().matrices()


def dense_protocol_probability(spec: ChainSpec, string: Sequence[int], grain: int = 1) -> float:
    """Probability of a SIC-POVM outcome string in the single-ancilla protocol.

    Per measured block a fresh ancilla in ``I/2`` is measured (Lueders
    update), coupled to the chain as site 0 for ``grain`` Floquet steps,
    measured again and discarded.
    """
    n = spec.length + 1
    if n > MAX_DENSE_QUBITS:
        raise GuardError(f"{n} qubits exceed the dense guard of {MAX_DENSE_QUBITS}")
    if grain < 1 or spec.steps % grain:
        raise ValueError("grain must divide the number of steps")
    blocks = spec.steps // grain
    if len(string) != 2 * blocks:
        raise ShapeError(f"expected {2 * blocks} outcomes, got {len(string)}")
    mats = _sic_elements()
    gate = chain_gate(spec)
    sites = list(range(n))
    denv = 2**spec.length
    env = _dense.product_state([site_state(spec)] * spec.length).reshape(denv, denv)
    scale = 1.0
    for b in range(blocks):
        # sqrt(M) (I/2) sqrt(M) = M/2, unnormalized: its trace is the outcome weight
        rho = np.kron(0.5 * mats[string[2 * b]], env).reshape((2,) * (2 * n))
        for _ in range(grain):
            rho = _apply_step(rho, gate, sites)
        rho = rho.reshape(2, denv, 2, denv)
        env = np.einsum("ca,arcs->rs", mats[string[2 * b + 1]], rho)
        p = np.trace(env).real
        if p <= 0.0:
            return 0.0
        scale *= p
        env = env / p
    return float(scale)


def dense_bell_protocol_distribution(spec: ChainSpec) -> np.ndarray:
    """Joint outcome distribution of the Bell-pair protocol, shape ``(4,) * 2t``.

    Each step a fresh Bell pair is made; one half is coupled to the chain
    for one step, then both halves are measured.  The reference half is
    measured with the complex-conjugated SIC elements, which makes the
    outcome labels coincide with the single-ancilla protocol.
    """
    t, L = spec.steps, spec.length
    n = L + 2 * t
    if n > MAX_DENSE_QUBITS:
        raise GuardError(f"{n} qubits exceed the dense guard of {MAX_DENSE_QUBITS}")
    phi = np.zeros((4, 4), dtype=complex)
    phi[np.ix_([0, 3], [0, 3])] = 0.5
    # qubit layout: (R_0, A_0, R_1, A_1, ..., chain_1..chain_L)
    rho = _dense.product_state([phi] * t + [site_state(spec)] * L)
    gate = chain_gate(spec)
    chain = list(range(2 * t, 2 * t + L))
    for k in range(t):
        rho = _apply_step(rho, gate, [2 * k + 1] + chain)
    m = 2 * t
    choi = _dense.reduced(rho, list(range(m))).reshape((2,) * (2 * m))
    mats = np.array(_sic_elements())
    # Tr(op rho) with op = (x)_q ops_q: contract ops_q[a, c, r] with rho[.., r_q, .., c_q, ..]
    operands = [choi, list(range(2 * m))]
    for q in range(m):
        ops = mats.conj() if q % 2 == 0 else mats
        operands += [ops, [2 * m + q, m + q, q]]
    out = np.einsum(*operands, list(range(2 * m, 3 * m)), optimize=True)
    return out.real


def dense_impurity_trajectory(specs, schedule: ControlSchedule, rho_i0, observables=None) -> Trajectory:
    """Exact impurity dynamics by evolving impurity plus chain(s) densely.

    ``specs`` is one ChainSpec (single-qubit impurity) or a ``(left, right)``
    pair (two-qubit impurity; the left lead couples to the left qubit).
    """
    if isinstance(specs, ChainSpec):
        specs = (specs,)
    specs = tuple(specs)
    k = len(specs)
    if k not in (1, 2) or schedule.n_qubits != k:
        raise ShapeError("one lead needs a 1-qubit schedule, two leads a 2-qubit schedule")
    n = k + sum(s.length for s in specs)
    if n > MAX_DENSE_QUBITS:
        raise GuardError(f"{n} qubits exceed the dense guard of {MAX_DENSE_QUBITS}")
    rho0 = np.asarray(rho_i0, dtype=complex)
    factors = [rho0]
    maps = []
    offset = k
    for lead, s in enumerate(specs):
        factors += [site_state(s)] * s.length
        maps.append([lead] + list(range(offset, offset + s.length)))
        offset += s.length
    rho = _dense.product_state(factors)
    gates = [chain_gate(s) for s in specs]
    imp = list(range(k))
    half, full = [], [vectorize(rho0)]
    for step in range(schedule.t):
        for g, sites in zip(gates, maps):
            rho = _apply_step(rho, g, sites)
        half.append(vectorize(_dense.reduced(rho, imp)))
        rho = _dense.apply_superop(rho, schedule[step], imp)
        full.append(vectorize(_dense.reduced(rho, imp)))
    traj = Trajectory(np.array(half), np.array(full))
    return _attach_observables(traj, observables)


def total_magnetization_defect(spec: ChainSpec, schedule: ControlSchedule, rho_i0) -> float:
    """Largest drift of total Z over a dense joint run (for Z-conserving dynamics)."""
    n = 1 + spec.length
    rho = _dense.product_state([rho_i0] + [site_state(spec)] * spec.length)
    zs = [np.kron(np.kron(np.eye(2**q), PAULI_Z), np.eye(2 ** (n - q - 1))) for q in range(n)]
    ztot = sum(zs)

    def mag(r):
        return np.trace(ztot @ r.reshape(2**n, 2**n)).real

    m0 = mag(rho)
    worst = 0.0
    gate = chain_gate(spec)
    for step in range(schedule.t):
        rho = _apply_step(rho, gate, list(range(n)))
        worst = max(worst, abs(mag(rho) - m0))
        rho = _dense.apply_superop(rho, schedule[step], [0])
        worst = max(worst, abs(mag(rho) - m0))
    return worst
