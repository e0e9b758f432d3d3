"""
Learnable influence matrices and their maximum-likelihood training.

The ansatz repeats one CPTP map ``Theta`` on (environment of dimension
``m``) x (impurity qubit) at every step, written through a Stinespring
isometry ``Theta[X] = Tr_A(V X V^dagger)``.  The environment starts in
``rho = Tr_A(v v^dagger)``.  Both ``V`` and ``v`` live on Stiefel
manifolds and are optimized with a Riemannian variant of ADAM.

Joint indices are environment-major: ``(e, s) -> 2 e + s``.  Bond
indices vectorize environment operators row-major, ``(e, e') -> m e + e'``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError, TrainingDiverged
from .measurement import MeasurementDataset, sic_povm

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300
# Rows per gradient work unit; fixed so results do not depend on the worker count.
GRAD_CHUNK = 1000


@dataclass(frozen=True)
class AnsatzIM:
    """Stinespring parameters of a uniform influence-matrix ansatz.

    Attributes
    ----------
    m : int
        Environment Hilbert dimension (bond extent ``m**2``).
    V : ndarray, shape ``(r * 2m, 2m)``
        Isometry, ancilla index major.
    v : ndarray, shape ``(r_rho * m, 1)``
        Unit vector purifying the initial environment state.
    """

    m: int
    V: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.V, dtype=complex)
        v = np.asarray(self.v, dtype=complex).reshape(-1, 1)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "v", v)
        h = 2 * self.m
        if V.ndim != 2 or V.shape[1] != h or V.shape[0] % h:
            raise ShapeError(f"V must have shape (r*{h}, {h}), got {V.shape}")
        if v.shape[0] % self.m:
            raise ShapeError(f"v must have length r_rho*{self.m}, got {v.shape[0]}")

    @property
    def h(self) -> int:
        return 2 * self.m

    @property
    def r(self) -> int:
        return self.V.shape[0] // self.h

    @property
    def r_rho(self) -> int:
        return self.v.shape[0] // self.m

    @property
    def bond(self) -> int:
        return self.m * self.m

    def isometry_defect(self) -> float:
        dv = np.abs(self.V.conj().T @ self.V - np.eye(self.h)).max()
        dw = abs((self.v.conj().T @ self.v)[0, 0] - 1.0)
        return float(max(dv, dw))

    def kraus(self) -> np.ndarray:
        """Kraus operators of Theta, shape ``(r, h, h)``."""
        return self.V.reshape(self.r, self.h, self.h)

    def initial_state(self) -> np.ndarray:
        w = self.v.reshape(self.r_rho, self.m)
        return w.T @ w.conj()


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5000
    epochs: int = 300
    lr_initial: float = 0.25
    lr_final: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    m: int = 4
    r: int = 16
    r_rho: int = 1
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("ADAM betas must lie in (0, 1)")
        if self.m < 1 or self.r < 1 or self.r_rho < 1:
            raise ValueError("m, r and r_rho must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def lr(self, epoch: int) -> float:
        """Exponential decay hitting ``lr_initial`` at epoch 0 and ``lr_final`` at the last epoch."""
        if self.epochs == 1:
            return self.lr_initial
        frac = epoch / (self.epochs - 1)
        if epoch == self.epochs - 1:
            return self.lr_final
        return self.lr_initial * (self.lr_final / self.lr_initial) ** frac


@dataclass
class AdamState:
    m_V: np.ndarray
    m_v: np.ndarray
    s_V: np.ndarray
    s_v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, a: AnsatzIM) -> "AdamState":
        return cls(
            np.zeros_like(a.V),
            np.zeros_like(a.v),
            np.zeros(a.V.shape),
            np.zeros(a.v.shape),
        )


def _random_isometry(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(size=(rows, cols)) + 1j * rng.normal(size=(rows, cols))
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def effective_rank(m: int, r: int) -> int:
    """Choi ranks above ``h**2`` add nothing, so they are capped."""
    return min(r, (2 * m) ** 2)


def random_ansatz(m: int, r: int, r_rho: int = 1, rng=None) -> AnsatzIM:
    rng = np.random.default_rng(rng)
    h = 2 * m
    r = effective_rank(m, r)
    r_rho = min(r_rho, m * m)
    return AnsatzIM(m, _random_isometry(r * h, h, rng), _random_isometry(r_rho * m, 1, rng))


def theta_core(a: AnsatzIM) -> np.ndarray:
    """Superoperator of Theta as an IM core ``(D, 4, 4, D)``."""
    k = a.kraus()
    m = a.m
    # natural[(o, o'), (x, x')] = sum_k K[o, x] conj K[o', x']
    nat = np.einsum("kox,kpy->opxy", k, k.conj())
    nat = nat.reshape(m, 2, m, 2, m, 2, m, 2)
    # axes (E, S, E', S', e, s, e', s') -> (e, e', s, s', S, S', E, E')
    core = nat.transpose(4, 6, 5, 7, 1, 3, 0, 2)
    return core.reshape(m * m, 4, 4, m * m)


def _core_to_natural(g: np.ndarray, m: int) -> np.ndarray:
    g = g.reshape(m, m, 2, 2, 2, 2, m, m)
    # inverse of the transpose in theta_core
    g = g.transpose(6, 4, 7, 5, 0, 2, 1, 3)
    h = 2 * m
    return g.reshape(h, h, h, h)


def ansatz_to_im(a: AnsatzIM, t: int):
    from .environment import InfluenceMatrix

    if t < 1:
        raise ValueError("t must be positive")
    core = theta_core(a)
    left = a.initial_state().reshape(-1)
    right = np.eye(a.m, dtype=complex).reshape(-1)
    return InfluenceMatrix((core,) * t, left, right, provenance="learned")


# --- likelihood and gradient -------------------------------------------------


def _segment_pass(core, left, right, rows, grain, win, wout, want_grad):
    """Probabilities of ``rows`` and, optionally, the gradients of ``sum log p``.

    Returns ``(p, d_core, d_left)`` with holomorphic derivatives, i.e.
    ``d sum log p = sum(d_core * dC) + sum(d_left * d_left_vector)``.
    """
    n = rows.shape[0]
    d = core.shape[0]
    blocks = rows.shape[1] // 2
    cmat = core.reshape(d * 4, 4 * d)  # (A, i) -> (j, B)
    x = np.broadcast_to(left, (n, d)).astype(complex)
    log_scale = np.zeros(n)
    inputs, scales = [], []
    for b in range(blocks):
        f = (x[:, :, None] * win[rows[:, 2 * b]][:, None, :]).reshape(n, 4 * d)
        for k in range(grain):
            inputs.append(f)
            y = f @ cmat  # (n, (j, B))
            if k < grain - 1:
                # the out-leg feeds the next in-leg: (j, B) -> (B, j)
                f = y.reshape(n, 4, d).transpose(0, 2, 1).reshape(n, 4 * d)
        x = np.einsum("njB,nj->nB", y.reshape(n, 4, d), wout[rows[:, 2 * b + 1]])
        # per-row rescaling against underflow; the scales enter as constants
        s = np.abs(x).max(axis=1)
        s = np.where(s > 0.0, s, 1.0)
        x = x / s[:, None]
        scales.append(s)
        log_scale += np.log(s)
    pr = (x @ right).real
    prob = np.exp(log_scale) * pr
    if not want_grad:
        return prob, None, None
    inv = 1.0 / np.where(pr > 0.0, pr, PROB_FLOOR)
    adj = np.broadcast_to(right, (n, d)) * inv[:, None]
    d_core = np.zeros((4 * d, 4 * d), dtype=complex)
    for b in range(blocks - 1, -1, -1):
        adj = adj / scales[b][:, None]
        # adjoint of the block's last output y[(j, B)] is wout[j] adj[B]
        g = (wout[rows[:, 2 * b + 1]][:, :, None] * adj[:, None, :]).reshape(n, 4 * d)
        for k in range(grain - 1, -1, -1):
            d_core += inputs[b * grain + k].T @ g
            gf = g @ cmat.T  # adjoint of the step input, layout (A, i)
            if k > 0:
                g = gf.reshape(n, d, 4).transpose(0, 2, 1).reshape(n, 4 * d)
        adj = np.einsum("nAi,ni->nA", gf.reshape(n, d, 4), win[rows[:, 2 * b]])
    return prob, d_core.reshape(d, 4, 4, d), adj.sum(axis=0)


def _weights():
    p = sic_povm()
    return p.input_weights(), p.output_weights()


def _rows_of(ds: MeasurementDataset):
    for g, x in ds.segments:
        yield g, x.astype(np.intp)


def log_likelihood(a: AnsatzIM, ds: MeasurementDataset) -> float:
    """Sum over rows of ``log p`` with ``p`` clamped at ``1e-300``."""
    return float(np.sum(np.log(row_probabilities(a, ds))))


def row_probabilities(a: AnsatzIM, ds: MeasurementDataset) -> np.ndarray:
    win, wout = _weights()
    core = theta_core(a)
    left = a.initial_state().reshape(-1)
    right = np.eye(a.m, dtype=complex).reshape(-1)
    out = []
    for g, rows in _rows_of(ds):
        p, _, _ = _segment_pass(core, left, right, rows, g, win, wout, False)
        out.append(p)
    p = np.concatenate(out) if out else np.zeros(0)
    bad = int(np.sum(p < PROB_FLOOR))
    if bad:
        log.warning("%d rows have probability below %.0e and were clamped", bad, PROB_FLOOR)
    return np.maximum(p, PROB_FLOOR)


def _chunks(ds: MeasurementDataset):
    for g, rows in _rows_of(ds):
        for lo in range(0, rows.shape[0], GRAD_CHUNK):
            yield g, rows[lo : lo + GRAD_CHUNK]


def _likelihood_and_holomorphic_grads(a: AnsatzIM, ds: MeasurementDataset, threads: int = 1):
    win, wout = _weights()
    core = theta_core(a)
    left = a.initial_state().reshape(-1)
    right = np.eye(a.m, dtype=complex).reshape(-1)
    work = list(_chunks(ds))

    def run(item):
        g, rows = item
        return _segment_pass(core, left, right, rows, g, win, wout, True)

    if threads > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, work))
    else:
        parts = [run(w) for w in work]
    # fixed-order reduction
    loglik = 0.0
    d_core = np.zeros_like(core)
    d_left = np.zeros_like(left)
    for p, dc, dl in parts:
        loglik += float(np.sum(np.log(np.maximum(p, PROB_FLOOR))))
        d_core += dc
        d_left += dl
    return loglik, d_core, d_left


def euclidean_gradient(a: AnsatzIM, batch: MeasurementDataset, threads: int = 1):
    """Steepest-ascent direction of the batch log-likelihood w.r.t. ``V`` and ``v``.

    Gradients are with respect to the real inner product ``Re Tr(G^dagger dX)``,
    i.e. ``G = 2 dL/d conj(X)``.
    """
    _, grad_V, grad_v = value_and_gradient(a, batch, threads)
    return grad_V, grad_v


def value_and_gradient(a: AnsatzIM, batch: MeasurementDataset, threads: int = 1):
    """``(log_likelihood, grad_V, grad_v)`` in one forward/backward pass."""
    if batch.n_strings == 0:
        raise ValueError("empty batch")
    loglik, d_core, d_left = _likelihood_and_holomorphic_grads(a, batch, threads)
    m = a.m
    gam = _core_to_natural(d_core, m)
    k = a.kraus()
    # dL/d conj K[p, y] = sum_{o, x} Gamma[o, p, x, y] K[o, x]
    dk = np.einsum("opxy,kox->kpy", gam, k)
    grad_V = 2.0 * dk.reshape(a.V.shape)
    # left[(e, e')] = sum_b w[b, e] conj w[b, e']
    w = a.v.reshape(a.r_rho, m)
    dw = np.einsum("ef,be->bf", d_left.reshape(m, m), w)
    grad_v = 2.0 * dw.reshape(a.v.shape)
    return loglik, grad_V, grad_v


# --- Stiefel geometry and optimizer ---------------------------------------------


def _herm(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + x.conj().T)


def stiefel_project(V: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Projection of ``G`` onto the tangent space at the isometry ``V``."""
    return G - V @ _herm(V.conj().T @ G)


def stiefel_retract(V: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """QR retraction of ``V + xi`` with a positive real ``R`` diagonal."""
    q, r = np.linalg.qr(V + xi)
    d = np.diag(r)
    if np.any(np.abs(d) < 1e-14 * max(1.0, np.abs(r).max())) or not np.all(np.isfinite(r)):
        raise NumericError("rank collapse in Stiefel retraction")
    return q * (d / np.abs(d))


def riemannian_adam_step(a: AnsatzIM, state: AdamState, grads, lr: float, config: TrainConfig):
    """One ADAM step that *ascends* along ``grads`` while staying on the manifolds.

    Moments are kept per entry; the step direction is projected to the
    tangent space before the retraction, and the first moments are carried
    to the new point by projection.
    """
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    step = state.step + 1
    new = []
    moments = []
    for X, G, mom, sec in ((a.V, grads[0], state.m_V, state.s_V), (a.v, grads[1], state.m_v, state.s_v)):
        g = stiefel_project(X, G)
        mom = b1 * mom + (1.0 - b1) * g
        sec = b2 * sec + (1.0 - b2) * np.abs(g) ** 2
        mhat = mom / (1.0 - b1**step)
        shat = sec / (1.0 - b2**step)
        direction = stiefel_project(X, mhat / (np.sqrt(shat) + eps))
        Xn = stiefel_retract(X, lr * direction)
        new.append(Xn)
        moments.append((stiefel_project(Xn, mom), sec))
    a2 = AnsatzIM(a.m, new[0], new[1])
    st = AdamState(moments[0][0], moments[1][0], moments[0][1], moments[1][1], step)
    return a2, st


# --- training loop -----------------------------------------------------------------


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    mean_nll: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.epoch, self.mean_nll, self.lr, self.wall_seconds))


@dataclass
class TrainResult:
    ansatz: AnsatzIM
    history: TrainHistory
    adam: AdamState
    epochs_done: int


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def train(
    ds: MeasurementDataset,
    config: TrainConfig,
    resume: TrainResult | None = None,
    checkpoint=None,
    stop_after: int | None = None,
    callback=None,
) -> TrainResult:
    """Minibatch Riemannian ADAM on the log-likelihood of ``ds``.

    Parameters
    ----------
    resume
        State to continue from; the epoch counter, parameters and moments
        are taken from it, so a resumed run reproduces an uninterrupted one.
    checkpoint
        ``callable(TrainResult)`` invoked every ``config.checkpoint_every``
        epochs and before raising on a non-finite loss.
    stop_after
        Stop after this many epochs in total (for checkpoint tests).
    """
    if resume is None:
        a = random_ansatz(config.m, config.r, config.r_rho, np.random.default_rng([config.seed, 0]))
        result = TrainResult(a, TrainHistory(), AdamState.zeros(a), 0)
    else:
        result = TrainResult(
            resume.ansatz,
            TrainHistory(*[list(c) for c in (resume.history.epoch, resume.history.mean_nll,
                                             resume.history.lr, resume.history.wall_seconds)]),
            replace(resume.adam),
            resume.epochs_done,
        )
    n = ds.n_strings
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(result.epochs_done, last):
        t0 = time.perf_counter()
        lr = config.lr(epoch)
        order = _epoch_order(config.seed, epoch, n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            batch = ds.take(np.sort(order[lo : lo + config.batch_size]))
            ll, gV, gv = value_and_gradient(result.ansatz, batch, config.threads)
            if not np.isfinite(ll) or not (np.all(np.isfinite(gV)) and np.all(np.isfinite(gv))):
                if checkpoint is not None:
                    checkpoint(result)
                raise TrainingDiverged(f"non-finite loss or gradient in epoch {epoch}")
            total += ll
            result.ansatz, result.adam = riemannian_adam_step(
                result.ansatz, result.adam, (gV / batch.n_strings, gv / batch.n_strings), lr, config
            )
        result.epochs_done = epoch + 1
        h = result.history
        h.epoch.append(epoch)
        h.mean_nll.append(-total / n)
        h.lr.append(lr)
        h.wall_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d  nll %.6f  lr %.3e", epoch, -total / n, lr)
        if callback is not None:
            callback(result)
        if checkpoint is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint(result)
    return result
