"""
SIC-POVM measurements of an impurity ancilla, outcome probabilities of
measurement strings under an influence matrix, and exact sampling.

A measured block couples one ancilla to the environment for ``g``
consecutive steps.  Its input outcome ``a`` prepares the ancilla in
``M^a / 2`` (Lueders update of ``I/2``, unnormalized) and its output
outcome ``b`` contributes ``Tr(M^b rho)``.  Inside a block the out-leg of
one step feeds the in-leg of the next unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channels import vectorize
from .errors import SamplingError, ShapeError
from .tensor import TimeMPS

log = logging.getLogger(__name__)

# Conditional masses below -NEGATIVE_MASS_TOL (relative) abort sampling.
NEGATIVE_MASS_TOL = 1e-8
SAMPLE_CHUNK = 4096


@dataclass(frozen=True)
class SicPovm:
    directions: np.ndarray

    def matrices(self) -> np.ndarray:
        """The four elements ``(I + s.sigma) / 4`` as a ``(4, 2, 2)`` array.

        The last element is completed as ``I - (M0 + M1 + M2)``; that
        subtraction is exact in floating point, so the elements sum to the
        identity without rounding.
        """
        from .channels import PAULI_I, PAULI_X, PAULI_Y, PAULI_Z

        s = self.directions
        m = 0.25 * (
            PAULI_I[None]
            + s[:, 0, None, None] * PAULI_X
            + s[:, 1, None, None] * PAULI_Y
            + s[:, 2, None, None] * PAULI_Z
        )
        m[-1] = PAULI_I - ((m[0] + m[1]) + m[2])
        return m

    @property
    def elements(self) -> np.ndarray:
        """Vectorized elements, shape ``(4, 4)``."""
        return np.array([vectorize(m) for m in self.matrices()])

    def input_weights(self) -> np.ndarray:
        """Row ``a``: vectorized unnormalized ancilla state ``M^a / 2`` fed to an in-leg."""
        return 0.5 * self.elements

    def output_weights(self) -> np.ndarray:
        """Row ``b``: functional ``vec(X) -> Tr(M^b X)`` applied to an out-leg."""
        return np.array([vectorize(m.T) for m in self.matrices()])


def sic_povm() -> SicPovm:
    """Tetrahedral SIC-POVM with the first direction along +z."""
    r2 = np.sqrt(2.0)
    s = np.array(
        [
            [0.0, 0.0, 1.0],
            [2.0 * r2 / 3.0, 0.0, -1.0 / 3.0],
            [-r2 / 3.0, np.sqrt(2.0 / 3.0), -1.0 / 3.0],
            [-r2 / 3.0, -np.sqrt(2.0 / 3.0), -1.0 / 3.0],
        ]
    )
    return SicPovm(s)


@dataclass
class MeasurementDataset:
    """Outcome strings grouped into segments of equal grain.

    ``segments`` is a list of ``(grain, outcomes)`` with ``outcomes`` a
    ``uint8`` array of shape ``(rows, 2 * t // grain)``.
    """

    t: int
    segments: list
    seed: int | None = None
    im_provenance: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        segs = []
        for g, x in self.segments:
            x = np.ascontiguousarray(x, dtype=np.uint8)
            if g < 1 or self.t % g:
                raise ShapeError(f"grain {g} does not divide t={self.t}")
            if x.ndim != 2 or x.shape[1] != 2 * (self.t // g):
                raise ShapeError(f"grain-{g} rows need {2 * (self.t // g)} columns")
            if x.size and x.max() > 3:
                raise ValueError("outcome indices must lie in 0..3")
            segs.append((int(g), x))
        self.segments = segs

    @property
    def n_strings(self) -> int:
        return sum(x.shape[0] for _, x in self.segments)

    @property
    def grain_schema(self) -> list[tuple[int, int]]:
        return [(g, x.shape[0]) for g, x in self.segments]

    def take(self, indices: np.ndarray) -> "MeasurementDataset":
        """Rows by global index (segments concatenated in order), keeping segment grouping."""
        indices = np.asarray(indices)
        out = []
        lo = 0
        for g, x in self.segments:
            hi = lo + x.shape[0]
            sel = indices[(indices >= lo) & (indices < hi)] - lo
            if sel.size:
                out.append((g, x[sel]))
            lo = hi
        return MeasurementDataset(self.t, out, self.seed, self.im_provenance)


def block_cores(im: TimeMPS, grain: int) -> list[np.ndarray]:
    """Cores of consecutive ``grain``-step blocks, interior legs paired by identity."""
    if grain < 1 or im.t % grain:
        raise ShapeError(f"grain {grain} does not divide t={im.t}")
    out = []
    for b in range(im.t // grain):
        acc = im.cores[b * grain]
        for c in im.cores[b * grain + 1 : (b + 1) * grain]:
            # acc[A, i, j, B] c[B, j, k, C] -> [A, i, k, C]
            acc = np.einsum("AijB,BjkC->AikC", acc, c)
        out.append(acc)
    return out


def transfer_sets(im: TimeMPS, grain: int, povm: SicPovm | None = None) -> list[np.ndarray]:
    """Per block, bond transfer matrices for each outcome pair: shape ``(4, 4, D, D')``."""
    povm = povm or sic_povm()
    win, wout = povm.input_weights(), povm.output_weights()
    return [np.einsum("AijB,ai,bj->abAB", c, win, wout) for c in block_cores(im, grain)]


def _check_rows(im: TimeMPS, outcomes: np.ndarray, grain: int) -> np.ndarray:
    outcomes = np.atleast_2d(np.asarray(outcomes))
    if grain < 1 or im.t % grain:
        raise ShapeError(f"grain {grain} does not divide t={im.t}")
    if outcomes.shape[1] != 2 * (im.t // grain):
        raise ShapeError(
            f"strings of length {outcomes.shape[1]} do not match t={im.t}, grain={grain}"
        )
    return outcomes.astype(np.intp)


def outcome_probabilities(im: TimeMPS, outcomes, grain: int = 1, povm: SicPovm | None = None):
    """Probabilities of many strings (rows of ``outcomes``) at one grain."""
    rows = _check_rows(im, outcomes, grain)
    sets = transfer_sets(im, grain, povm)
    n = rows.shape[0]
    x = np.broadcast_to(im.left, (n, im.left.size)).astype(complex)
    for b, ts in enumerate(sets):
        # group rows by outcome pair: 16 matrix products instead of a per-row gather
        pair = 4 * rows[:, 2 * b] + rows[:, 2 * b + 1]
        y = np.empty((n, ts.shape[3]), dtype=complex)
        for p in np.unique(pair):
            sel = pair == p
            y[sel] = x[sel] @ ts[p // 4, p % 4]
        x = y
    return (x @ im.right).real


def outcome_probability(im: TimeMPS, string: Sequence[int], grain: int = 1, povm=None) -> float:
    return float(outcome_probabilities(im, [list(string)], grain, povm)[0])


def dataset_probabilities(im: TimeMPS, ds: MeasurementDataset) -> np.ndarray:
    """Probabilities of all rows of a dataset, in segment order."""
    if ds.t != im.t:
        raise ShapeError(f"dataset has t={ds.t}, IM has t={im.t}")
    return np.concatenate([outcome_probabilities(im, x, g) for g, x in ds.segments])


def _block_closures(sets: list[np.ndarray], right: np.ndarray) -> list[np.ndarray]:
    # summing a transfer set over both outcomes closes the block with I/2 in, trace out
    out = [None] * (len(sets) + 1)
    out[-1] = right
    for b in range(len(sets) - 1, -1, -1):
        out[b] = sets[b].sum(axis=(0, 1)) @ out[b + 1]
    return out


class _NegativeCounter:
    def __init__(self):
        self.count = 0


def _draw(weights: np.ndarray, u: np.ndarray, counter: _NegativeCounter) -> np.ndarray:
    """Inverse-CDF draws from unnormalized rows of ``weights`` given uniforms ``u``."""
    total = weights.sum(axis=1)
    if np.any(total <= 0.0):
        raise SamplingError("non-positive conditional mass while sampling")
    rel = weights / total[:, None]
    if np.any(rel < -NEGATIVE_MASS_TOL):
        raise SamplingError(f"negative conditional probability {rel.min():.3e}")
    neg = rel < 0.0
    if np.any(neg):
        counter.count += int(neg.sum())
        rel = np.where(neg, 0.0, rel)
        rel = rel / rel.sum(axis=1)[:, None]
    cdf = np.cumsum(rel, axis=1)
    idx = (u[:, None] >= cdf[:, :-1]).sum(axis=1)
    return idx.astype(np.uint8)


def _row_uniforms(seed: int, stream: int, lo: int, hi: int, k: int) -> np.ndarray:
    # one independent generator per row, keyed by (seed, stream, row)
    return np.array([np.random.default_rng([seed, stream, r]).random(k) for r in range(lo, hi)])


def _sample_segment(im: TimeMPS, n: int, grain: int, seed: int, stream: int) -> np.ndarray:
    sets = transfer_sets(im, grain)
    blocks = len(sets)
    closures = _block_closures(sets, im.right)
    counter = _NegativeCounter()
    out = np.empty((n, 2 * blocks), dtype=np.uint8)
    for lo in range(0, n, SAMPLE_CHUNK):
        hi = min(n, lo + SAMPLE_CHUNK)
        u = _row_uniforms(seed, stream, lo, hi, 2 * blocks)
        x = np.broadcast_to(im.left, (hi - lo, im.left.size)).copy()
        for b, ts in enumerate(sets):
            nxt = ts @ closures[b + 1]  # (4, 4, D)
            w_in = np.einsum("nA,abA->na", x, nxt).real
            a = _draw(w_in, u[:, 2 * b], counter)
            w_out = np.einsum("nA,nbA->nb", x, nxt[a]).real
            bb = _draw(w_out, u[:, 2 * b + 1], counter)
            out[lo:hi, 2 * b] = a
            out[lo:hi, 2 * b + 1] = bb
            x = np.einsum("nA,nAB->nB", x, ts[a, bb])
            # renormalize so that x . closure is the running conditional mass 1
            x /= (x @ closures[b + 1]).real[:, None]
    if counter.count:
        log.warning("clamped %d small negative conditional probabilities", counter.count)
    return out


def sample_dataset(im: TimeMPS, n: int, grain: int = 1, seed: int = 0, stream: int = 0):
    """Draw ``n`` i.i.d. strings by sequential conditional sampling."""
    if n < 1:
        raise ValueError("n must be positive")
    if grain < 1 or im.t % grain:
        raise ShapeError(f"grain {grain} does not divide t={im.t}")
    x = _sample_segment(im, n, grain, seed, stream)
    return MeasurementDataset(im.t, [(grain, x)], seed, getattr(im, "provenance", None))


def mixed_grain_dataset(im: TimeMPS, n: int, g_coarse: int, seed: int = 0) -> MeasurementDataset:
    """Half of the rows at grain 1, the rest at grain ``g_coarse``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if g_coarse < 1 or im.t % g_coarse:
        raise ShapeError(f"grain {g_coarse} does not divide t={im.t}")
    n_fine = n // 2
    fine = _sample_segment(im, n_fine, 1, seed, 0)
    coarse = _sample_segment(im, n - n_fine, g_coarse, seed, 1)
    return MeasurementDataset(
        im.t, [(1, fine), (g_coarse, coarse)], seed, getattr(im, "provenance", None)
    )


def all_strings(n_cols: int) -> np.ndarray:
    """Every outcome string of ``n_cols`` columns, lexicographic."""
    return np.array(np.unravel_index(np.arange(4**n_cols), (4,) * n_cols)).T


def exact_distribution(im: TimeMPS, grain: int = 1) -> np.ndarray:
    """Probabilities of all strings, shape ``(4,) * (2 t / grain)``."""
    cols = 2 * (im.t // grain)
    return outcome_probabilities(im, all_strings(cols), grain).reshape((4,) * cols)


def empirical_distribution(outcomes: np.ndarray) -> np.ndarray:
    cols = outcomes.shape[1]
    flat = np.ravel_multi_index(outcomes.T.astype(np.intp), (4,) * cols)
    return np.bincount(flat, minlength=4**cols).reshape((4,) * cols) / outcomes.shape[0]

