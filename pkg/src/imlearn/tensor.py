"""
Dense tensor helpers and matrix-product states over a time axis.

A :class:`TimeMPS` stores one core per time step with legs
``(left bond, in, out, right bond)``; the in/out legs are vectorized
single-qubit operators (extent 4).  The full tensor is

    left[a0] core_0[a0, i0, j0, a1] ... core_{t-1}[.., i_{t-1}, j_{t-1}, at] right[at]

and densifies to an array with axes ``(i0, j0, i1, j1, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import NumericError, ShapeError

# Relative cutoff below which singular values count as numerically zero.
RANK_RTOL = 1e-14

# Vectorized identity (trace functional) and maximally mixed qubit state.
VEC_IDENTITY = np.array([1.0, 0.0, 0.0, 1.0], dtype=complex)
VEC_HALF_IDENTITY = 0.5 * VEC_IDENTITY


def contract(a: np.ndarray, b: np.ndarray, axes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Contract ``a`` with ``b`` over the given ``(axis_of_a, axis_of_b)`` pairs.

    The result carries the free axes of ``a`` followed by those of ``b``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    axes_a = [p[0] for p in axes]
    axes_b = [p[1] for p in axes]
    for ia, ib in zip(axes_a, axes_b):
        if a.shape[ia] != b.shape[ib]:
            raise ShapeError(
                f"cannot contract axis {ia} (extent {a.shape[ia]}) "
                f"with axis {ib} (extent {b.shape[ib]})"
            )
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def _svd(m: np.ndarray):
    try:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")


def svd_truncate(m: np.ndarray, chi_max: int, tol: float = 0.0):
    """Truncated SVD ``m ~ U @ diag(S) @ Vh``.

    Keeps at most ``chi_max`` values and the numerical rank, then drops
    trailing values while their cumulative squared weight stays within
    ``tol`` times the total.

    Returns
    -------
    U, S, Vh, discarded_weight
        ``discarded_weight`` is the summed square of the dropped values
        above the numerical rank cutoff.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if chi_max < 1:
        raise ValueError("chi_max must be positive")
    if not 0.0 <= tol < 1.0:
        raise ValueError("tol must lie in [0, 1)")
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite entries in matrix passed to svd_truncate")
    u, s, vh = _svd(m)
    if s.size == 0 or s[0] == 0.0:
        keep = rank = 1
    else:
        rank = int(np.count_nonzero(s > RANK_RTOL * s[0]))
        keep = max(1, min(rank, chi_max))
        if tol > 0.0:
            sq = s**2
            # tail[k] = weight of values k, k+1, ...
            tail = np.cumsum(sq[::-1])[::-1]
            budget = tol * sq.sum()
            droppable = np.nonzero(tail <= budget)[0]
            if droppable.size:
                keep = max(1, min(keep, int(droppable[0])))
    # values beyond the numerical rank are rounding noise, not discarded weight
    discarded = float(np.sum(s[keep:rank] ** 2))
    return u[:, :keep], s[:keep], vh[:keep], discarded


@dataclass(frozen=True)
class TimeMPS:
    """Matrix-product tensor over ``t`` time steps with 4x4 physical legs."""

    cores: tuple
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        cores = tuple(np.asarray(c, dtype=complex) for c in self.cores)
        object.__setattr__(self, "cores", cores)
        object.__setattr__(self, "left", np.asarray(self.left, dtype=complex))
        object.__setattr__(self, "right", np.asarray(self.right, dtype=complex))
        if len(cores) < 1:
            raise ShapeError("a TimeMPS needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 4 or c.shape[1:3] != (4, 4):
                raise ShapeError(f"core {k} has shape {c.shape}, expected (D, 4, 4, D')")
        for k in range(len(cores) - 1):
            if cores[k].shape[3] != cores[k + 1].shape[0]:
                raise ShapeError(f"bond mismatch between cores {k} and {k + 1}")
        if self.left.shape != (cores[0].shape[0],):
            raise ShapeError("left boundary does not match the first core")
        if self.right.shape != (cores[-1].shape[3],):
            raise ShapeError("right boundary does not match the last core")
        if not np.any(self.left) or not np.any(self.right):
            raise ShapeError("boundary vectors must be nonzero")

    @property
    def t(self) -> int:
        return len(self.cores)

    @property
    def bond_dims(self) -> list[int]:
        """Bond extents ``[D_0, ..., D_t]``."""
        return [c.shape[0] for c in self.cores] + [self.cores[-1].shape[3]]

    def with_cores(self, cores, left=None, right=None) -> "TimeMPS":
        """Copy with replaced cores/boundaries, keeping any extra fields."""
        from dataclasses import replace

        return replace(
            self,
            cores=tuple(cores),
            left=self.left if left is None else left,
            right=self.right if right is None else right,
        )


def absorb_boundaries(mps: TimeMPS) -> list[np.ndarray]:
    """Cores with the boundary vectors folded into the first and last core."""
    cores = list(mps.cores)
    cores[0] = np.tensordot(mps.left, cores[0], axes=(0, 0))[None]
    cores[-1] = np.tensordot(cores[-1], mps.right, axes=(3, 0))[..., None]
    return cores


def densify(mps: TimeMPS) -> np.ndarray:
    """Full tensor with axes ``(i0, j0, ..., i_{t-1}, j_{t-1})``."""
    acc = mps.left.reshape(1, -1)
    for c in mps.cores:
        d = c.shape[0]
        acc = acc @ c.reshape(d, -1)
        acc = acc.reshape(-1, c.shape[3])
    vec = acc @ mps.right
    return vec.reshape((4, 4) * mps.t)


def from_dense(tensor: np.ndarray) -> TimeMPS:
    """Exact MPS of a dense ``(4, 4) * t`` tensor by successive SVDs."""
    t = tensor.ndim // 2
    rest = np.asarray(tensor, dtype=complex).reshape(1, -1)
    cores = []
    for _ in range(t - 1):
        d = rest.shape[0]
        rest = rest.reshape(d * 16, -1)
        u, s, vh, _ = svd_truncate(rest, chi_max=rest.shape[1])
        cores.append(u.reshape(d, 4, 4, -1))
        rest = s[:, None] * vh
    cores.append(rest.reshape(rest.shape[0], 4, 4, 1))
    return TimeMPS(cores, np.ones(1), np.ones(1))


def mps_overlap(a: TimeMPS, b: TimeMPS) -> complex:
    """Inner product ``<a|b>`` with ``a`` complex-conjugated."""
    if a.t != b.t:
        raise ShapeError(f"overlap of MPS with {a.t} and {b.t} steps")
    env = np.outer(a.left.conj(), b.left)
    for ca, cb in zip(a.cores, b.cores):
        da, db = ca.shape[0], cb.shape[0]
        ca2 = ca.reshape(da, 16, -1)
        cb2 = cb.reshape(db, 16, -1)
        tmp = np.tensordot(env, cb2, axes=(1, 0))  # (da, 16, db')
        env = np.tensordot(ca2.conj(), tmp, axes=([0, 1], [0, 1]))
    return complex(a.right.conj() @ env @ b.right)


def mps_norm_squared(mps: TimeMPS) -> float:
    return float(mps_overlap(mps, mps).real)


def left_canonicalize(cores: list[np.ndarray]) -> list[np.ndarray]:
    """QR sweep left to right; the norm ends up in the last core."""
    cores = list(cores)
    for k in range(len(cores) - 1):
        c = cores[k]
        d, _, _, dr = c.shape
        q, r = np.linalg.qr(c.reshape(d * 16, dr))
        cores[k] = q.reshape(d, 4, 4, q.shape[1])
        cores[k + 1] = np.tensordot(r, cores[k + 1], axes=(1, 0))
    return cores


def right_canonicalize(cores: list[np.ndarray]) -> list[np.ndarray]:
    """LQ sweep right to left; the norm ends up in the first core."""
    cores = list(cores)
    for k in range(len(cores) - 1, 0, -1):
        c = cores[k]
        d, _, _, dr = c.shape
        q, r = np.linalg.qr(c.reshape(d, 16 * dr).T)
        cores[k] = q.T.reshape(q.shape[1], 4, 4, dr)
        cores[k - 1] = np.tensordot(cores[k - 1], r.T, axes=(3, 0))
    return cores


def mps_compress(mps: TimeMPS, chi_max: int, tol: float = 0.0):
    """Canonicalize and truncate every bond with :func:`svd_truncate`.

    Returns the compressed MPS (boundaries folded into the cores, so the
    outer bonds have extent 1) and the total discarded squared weight.
    """
    cores = left_canonicalize(absorb_boundaries(mps))
    discarded = 0.0
    for k in range(len(cores) - 1, 0, -1):
        c = cores[k]
        d, _, _, dr = c.shape
        u, s, vh, dw = svd_truncate(c.reshape(d, 16 * dr), chi_max, tol)
        discarded += dw
        cores[k] = vh.reshape(-1, 4, 4, dr)
        cores[k - 1] = np.tensordot(cores[k - 1], u * s, axes=(3, 0))
    return mps.with_cores(cores, left=np.ones(1), right=np.ones(1)), discarded


def insert_gauge(mps: TimeMPS, bond: int, g: np.ndarray) -> TimeMPS:
    """Insert ``g @ inv(g)`` on internal bond ``bond`` (between cores bond-1 and bond)."""
    if not 1 <= bond < mps.t:
        raise ShapeError("gauge can only be inserted on an internal bond")
    cores = list(mps.cores)
    cores[bond - 1] = np.tensordot(cores[bond - 1], g, axes=(3, 0))
    cores[bond] = np.tensordot(np.linalg.inv(g), cores[bond], axes=(1, 0))
    return mps.with_cores(cores)


def closure_matrix(core: np.ndarray) -> np.ndarray:
    """Bond transfer matrix of a core with its in-leg fed ``I/2`` and out-leg traced."""
    return np.einsum("aijb,i,j->ab", core, VEC_HALF_IDENTITY, VEC_IDENTITY)


def right_closures(mps: TimeMPS) -> list[np.ndarray]:
    """Vectors ``R[k]`` closing cores ``k..t-1``; ``R[t]`` is the right boundary."""
    out = [None] * (mps.t + 1)
    out[mps.t] = mps.right
    for k in range(mps.t - 1, -1, -1):
        out[k] = closure_matrix(mps.cores[k]) @ out[k + 1]
    return out


def identity_closure(mps: TimeMPS) -> complex:
    """Full contraction with every step closed by ``I/2`` in and trace out.

    Equals 1 for any trace-preserving influence matrix.
    """
    return complex(mps.left @ right_closures(mps)[0])


def random_mps(t: int, bond: int, rng: np.random.Generator) -> TimeMPS:
    """Random complex MPS; used by tests and demos."""
    dims = [1] + [bond] * (t - 1) + [1]
    cores = [
        rng.normal(size=(dims[k], 4, 4, dims[k + 1]))
        + 1j * rng.normal(size=(dims[k], 4, 4, dims[k + 1]))
        for k in range(t)
    ]
    return TimeMPS(cores, np.ones(1), np.ones(1))
