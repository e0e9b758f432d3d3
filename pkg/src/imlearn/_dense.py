"""Density matrices of a few qubits stored as ``(2,) * 2n`` tensors (rows, then columns)."""

from __future__ import annotations

import numpy as np

from .channels import SuperOperator


def product_state(factors) -> np.ndarray:
    """Tensor-form density matrix of a product of single-qubit (or larger) factors."""
    rho = np.ones((1, 1), dtype=complex)
    for f in factors:
        rho = np.kron(rho, np.asarray(f, dtype=complex))
    n = int(round(np.log2(rho.shape[0])))
    return rho.reshape((2,) * (2 * n))


def n_qubits(rho: np.ndarray) -> int:
    return rho.ndim // 2


def apply_unitary(rho: np.ndarray, u: np.ndarray, qubits) -> np.ndarray:
    """``U rho U^dagger`` with ``U`` acting on ``qubits`` (first = most significant)."""
    n = n_qubits(rho)
    k = len(qubits)
    ut = np.asarray(u, dtype=complex).reshape((2,) * (2 * k))
    ins = list(range(k, 2 * k))
    rows = list(qubits)
    cols = [n + q for q in qubits]
    rho = np.tensordot(ut, rho, axes=(ins, rows))
    rho = np.moveaxis(rho, list(range(k)), rows)
    rho = np.tensordot(ut.conj(), rho, axes=(ins, cols))
    return np.moveaxis(rho, list(range(k)), cols)


def apply_superop(rho: np.ndarray, s: SuperOperator, qubits) -> np.ndarray:
    """Apply a site-basis superoperator to the listed qubits."""
    n = n_qubits(rho)
    k = len(qubits)
    st = s.tensor().reshape((2, 2) * (2 * k))
    ins = list(range(2 * k, 4 * k))
    targets = []
    for q in qubits:
        targets += [q, n + q]
    rho = np.tensordot(st, rho, axes=(ins, targets))
    return np.moveaxis(rho, list(range(2 * k)), targets)


def apply_kraus(rho: np.ndarray, kraus: np.ndarray, qubit: int) -> np.ndarray:
    """``K rho K^dagger`` for a single (not necessarily unitary) operator."""
    return apply_unitary(rho, kraus, [qubit])


def reduced(rho: np.ndarray, keep) -> np.ndarray:
    """Reduced density matrix of ``keep`` (in the given order) as a dense matrix."""
    n = n_qubits(rho)
    keep = list(keep)
    row_labels = list(range(n))
    col_labels = [q if q not in keep else n + q for q in range(n)]
    out = [q for q in keep] + [n + q for q in keep]
    red = np.einsum(rho, row_labels + col_labels, out)
    d = 2 ** len(keep)
    return red.reshape(d, d)


def trace(rho: np.ndarray) -> complex:
    n = n_qubits(rho)
    d = 2**n
    return complex(np.trace(rho.reshape(d, d)))


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
