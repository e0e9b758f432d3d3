"""
Vectorization in the matrix-unit basis and qubit channel algebra.

Single-qubit matrix units are ordered ``e0=|0><0|, e1=|1><0|, e2=|0><1|,
e3=|1><1|`` so that ``vec(O)[k] = Tr(e_k O) = O[k // 2, k % 2]``; for one
qubit this is plain row-major flattening.  Multi-qubit vectors carry one
such index per qubit, little-endian by site: ``flat = sum_s k_s 4**s``,
where qubit ``s`` is the ``s``-th Kronecker factor of the matrix.

``|0>`` is spin up and ``|1>`` spin down throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ShapeError

TP_TOL = 1e-10

PAULI_I = np.eye(2, dtype=complex)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
UP = np.array([[1, 0], [0, 0]], dtype=complex)
DOWN = np.array([[0, 0], [0, 1]], dtype=complex)


def _n_qubits(dim: int) -> int:
    n = int(round(np.log2(dim))) if dim > 0 else -1
    if n < 0 or 2**n != dim:
        raise ShapeError(f"dimension {dim} is not a power of two")
    return n


@lru_cache(maxsize=None)
def _site_permutation(n: int) -> np.ndarray:
    """perm[site_index] = row-major index of the same matrix element."""
    # axes of the row-major tensor: (r0..r_{n-1}, c0..c_{n-1})
    idx = np.arange(4**n).reshape((2,) * (2 * n))
    # site order wants (r_{n-1}, c_{n-1}, ..., r0, c0) as C-order axes
    axes = []
    for s in reversed(range(n)):
        axes += [s, n + s]
    return idx.transpose(axes).reshape(-1)


def vectorize(op: np.ndarray) -> np.ndarray:
    """Components ``Tr((e_{k_0} x ... x e_{k_{n-1}}) O)``, little-endian by site."""
    op = np.asarray(op, dtype=complex)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ShapeError(f"expected a square matrix, got {op.shape}")
    n = _n_qubits(op.shape[0])
    return op.reshape(-1)[_site_permutation(n)]


def devectorize(vec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vectorize`."""
    vec = np.asarray(vec, dtype=complex)
    n = _n_qubits(int(round(np.sqrt(vec.size))))
    if vec.size != 4**n:
        raise ShapeError(f"vector length {vec.size} is not a power of 4")
    out = np.empty(4**n, dtype=complex)
    out[_site_permutation(n)] = vec
    return out.reshape(2**n, 2**n)


def hs_pairing(va: np.ndarray, vb: np.ndarray) -> complex:
    """``Tr(A^dagger B)`` from the two vectorizations."""
    return complex(np.vdot(va, vb))


@dataclass(frozen=True)
class SuperOperator:
    """Linear map on vectorized operators of ``n`` qubits (site basis)."""

    dim: int
    matrix: np.ndarray
    cptp_verified: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", m)
        if m.shape != (self.dim**2, self.dim**2):
            raise ShapeError(f"superoperator of dim {self.dim} has shape {m.shape}")
        _n_qubits(self.dim)
        if not np.all(np.isfinite(m)):
            raise ValueError("superoperator has non-finite entries")

    @property
    def n_qubits(self) -> int:
        return _n_qubits(self.dim)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """Apply to a density matrix, returning a density matrix."""
        return devectorize(self.matrix @ vectorize(rho))

    def tensor(self) -> np.ndarray:
        """Per-site legs ``(out_0, ..., out_{n-1}, in_0, ..., in_{n-1})``, each of extent 4."""
        n = self.n_qubits
        t = self.matrix.reshape((4,) * (2 * n))
        axes = list(reversed(range(n))) + list(reversed(range(n, 2 * n)))
        return t.transpose(axes)

    def compose(self, other: "SuperOperator") -> "SuperOperator":
        """``self`` after ``other``."""
        return SuperOperator(
            self.dim, self.matrix @ other.matrix, self.cptp_verified and other.cptp_verified
        )


def _to_site_basis(natural: np.ndarray, n: int) -> np.ndarray:
    p = _site_permutation(n)
    return natural[np.ix_(p, p)]


def _from_site_basis(site: np.ndarray, n: int) -> np.ndarray:
    p = _site_permutation(n)
    out = np.empty_like(site)
    out[np.ix_(p, p)] = site
    return out


def channel_from_kraus(kraus: Sequence[np.ndarray]) -> SuperOperator:
    """Superoperator of ``rho -> sum_K K rho K^dagger``."""
    kraus = [np.asarray(k, dtype=complex) for k in kraus]
    if not kraus:
        raise ShapeError("empty Kraus list")
    shape = kraus[0].shape
    if any(k.shape != shape for k in kraus) or shape[0] != shape[1]:
        raise ShapeError("Kraus operators must be square and of equal shape")
    dim = shape[0]
    n = _n_qubits(dim)
    # row-major vec(K rho K^+) = (K kron conj K) vec(rho)
    natural = sum(np.kron(k, k.conj()) for k in kraus)
    tp = sum(k.conj().T @ k for k in kraus)
    ok = bool(np.max(np.abs(tp - np.eye(dim))) <= TP_TOL)
    return SuperOperator(dim, _to_site_basis(natural, n), cptp_verified=ok)


def unitary_channel(u: np.ndarray) -> SuperOperator:
    return channel_from_kraus([u])


def choi_matrix(s: SuperOperator) -> np.ndarray:
    """``sum_ab |a><b| (x) S(|a><b|)`` with the input factor first."""
    h = s.dim
    natural = _from_site_basis(s.matrix, s.n_qubits)
    # natural[(r, c), (a, b)] -> choi[(a, r), (b, c)]
    return natural.reshape(h, h, h, h).transpose(2, 0, 3, 1).reshape(h * h, h * h)


@dataclass(frozen=True)
class CptpReport:
    ok: bool
    min_choi_eigenvalue: float
    tp_defect: float
    hermiticity_defect: float

    def __bool__(self) -> bool:
        return self.ok


def check_choi(choi: np.ndarray, dim_in: int, tol: float = TP_TOL) -> CptpReport:
    """CPTP test for a Choi matrix with axes ``((in, out), (in, out))``."""
    dim_out = choi.shape[0] // dim_in
    herm = float(np.max(np.abs(choi - choi.conj().T))) if choi.size else 0.0
    evals = np.linalg.eigvalsh(0.5 * (choi + choi.conj().T))
    ptrace = np.trace(choi.reshape(dim_in, dim_out, dim_in, dim_out), axis1=1, axis2=3)
    tp = float(np.max(np.abs(ptrace - np.eye(dim_in))))
    ok = evals[0] >= -tol and tp <= tol and herm <= tol
    return CptpReport(bool(ok), float(evals[0]), tp, herm)


def is_cptp(s: SuperOperator, tol: float = TP_TOL) -> CptpReport:
    """Choi eigenvalues above ``-tol`` and trace-preservation defect within ``tol``."""
    return check_choi(choi_matrix(s), s.dim, tol)


def identity_channel(n_qubits: int = 1) -> SuperOperator:
    d = 2**n_qubits
    return SuperOperator(d, np.eye(d * d), cptp_verified=True)


def depolarizing_channel(n_qubits: int = 1) -> SuperOperator:
    """``rho -> Tr(rho) I / d``."""
    d = 2**n_qubits
    vi = vectorize(np.eye(d))
    return SuperOperator(d, np.outer(vi / d, vi), cptp_verified=True)


def reset_channel(target: np.ndarray) -> SuperOperator:
    """``rho -> Tr(rho) target`` (full amplitude damping when target is all-down)."""
    target = np.asarray(target, dtype=complex)
    d = target.shape[0]
    return SuperOperator(d, np.outer(vectorize(target), vectorize(np.eye(d))), cptp_verified=True)


def amplitude_damping_reset(n_qubits: int = 1) -> SuperOperator:
    """Sends every state of ``n_qubits`` to all spins down."""
    target = DOWN
    for _ in range(n_qubits - 1):
        target = np.kron(target, DOWN)
    return reset_channel(target)


def transpose_map() -> SuperOperator:
    """The (non-CP) single-qubit transpose."""
    m = np.zeros((4, 4), dtype=complex)
    for r in range(2):
        for c in range(2):
            m[2 * c + r, 2 * r + c] = 1.0
    return SuperOperator(2, m)


@dataclass(frozen=True)
class ImpuritySpec:
    """Couplings of the two-site impurity gate, in radians per step."""

    jx: float
    jy: float
    jz: float

    def __post_init__(self):
        if not all(np.isfinite([self.jx, self.jy, self.jz])):
            raise ValueError("impurity couplings must be finite")


def impurity_unitary(spec: ImpuritySpec) -> np.ndarray:
    """``exp(-i (jx XX + jy YY + jz ZZ))`` on two qubits."""
    h = (
        spec.jx * np.kron(PAULI_X, PAULI_X)
        + spec.jy * np.kron(PAULI_Y, PAULI_Y)
        + spec.jz * np.kron(PAULI_Z, PAULI_Z)
    )
    return scipy.linalg.expm(-1j * h)


def impurity_channel(spec: ImpuritySpec) -> SuperOperator:
    return unitary_channel(impurity_unitary(spec))


def haar_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary via QR of a complex Ginibre matrix with phase fix."""
    if dim < 1:
        raise ValueError("dim must be positive")
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))
