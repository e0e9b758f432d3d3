import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imlearn.channels import channel_from_kraus, haar_unitary, is_cptp
from imlearn.dynamics import im_norm, im_reduce
from imlearn.environment import ChainSpec, build_im_mps
from imlearn.errors import NumericError, TrainingDiverged
from imlearn import learn
from imlearn.learn import (
    AdamState,
    AnsatzIM,
    TrainConfig,
    ansatz_to_im,
    effective_rank,
    euclidean_gradient,
    log_likelihood,
    random_ansatz,
    riemannian_adam_step,
    row_probabilities,
    stiefel_project,
    stiefel_retract,
    train,
    value_and_gradient,
)
from imlearn.measurement import (
    mixed_grain_dataset,
    outcome_probabilities,
    outcome_probability,
    sample_dataset,
)
from imlearn.tensor import densify, identity_closure


def _cplx(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


@pytest.fixture(scope="module")
def small_data():
    im = build_im_mps(ChainSpec(model="XXZ", j=0.3, j_prime=0.2, length=6, steps=3))
    return sample_dataset(im, 64, seed=11)


def _depolarizing_ansatz():
    # Kraus |a><b| / sqrt 2 replaces the qubit by I/2
    ks = []
    for a in range(2):
        for b in range(2):
            k = np.zeros((2, 2), dtype=complex)
            k[a, b] = 1 / np.sqrt(2)
            ks.append(k)
    return AnsatzIM(1, np.concatenate(ks, axis=0), np.ones((1, 1)))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=1e-3, lr_final=0.1)
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)
    c = TrainConfig(epochs=7, m=2)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_lr_schedule_endpoints():
    c = TrainConfig(epochs=300, lr_initial=0.25, lr_final=1e-3)
    assert c.lr(0) == 0.25
    assert c.lr(299) == 1e-3
    lrs = np.array([c.lr(e) for e in range(300)])
    assert np.all(np.diff(lrs) < 0)
    # constant log-ratio between epochs
    np.testing.assert_allclose(np.diff(np.log(lrs)), np.log(1e-3 / 0.25) / 299, rtol=1e-10)


def test_random_ansatz_invariants():
    a = random_ansatz(2, 3, 2, np.random.default_rng(0))
    assert a.isometry_defect() < 1e-12
    assert is_cptp(channel_from_kraus(list(a.kraus())), tol=1e-8)
    rho = a.initial_state()
    assert np.trace(rho) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.eigvalsh(rho).min() > -1e-12
    np.testing.assert_allclose(rho, rho.conj().T, atol=1e-14)
    assert effective_rank(1, 100) == 4
    assert random_ansatz(1, 100, 1, 0).r == 4


def test_ansatz_unitary_norm():
    rng = np.random.default_rng(1)
    a = AnsatzIM(1, haar_unitary(2, rng), np.ones(1))
    for t in (1, 3, 5):
        assert im_norm(ansatz_to_im(a, t)) == pytest.approx(2.0**t, rel=1e-10)
    # a joint unitary with a traced environment stays below the bound
    b = AnsatzIM(2, haar_unitary(4, rng), np.array([1.0, 0.0]))
    assert im_norm(ansatz_to_im(b, 3)) < 2.0**3


def test_ansatz_unitary_cores_are_unitary_channel():
    from imlearn.channels import unitary_channel
    from imlearn.learn import theta_core

    u = haar_unitary(2, np.random.default_rng(2))
    core = theta_core(AnsatzIM(1, u, np.ones(1)))
    np.testing.assert_allclose(core[0, :, :, 0], unitary_channel(u).matrix.T, atol=1e-14)


def test_ansatz_depolarizing_norm():
    a = _depolarizing_ansatz()
    assert a.isometry_defect() < 1e-14
    for t in (1, 4):
        assert im_norm(ansatz_to_im(a, t)) == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.sampled_from([1, 2, 4]), r=st.integers(1, 4),
       r_rho=st.integers(1, 3), t=st.integers(1, 4))
def test_identity_closure_is_one(seed, m, r, r_rho, t):
    a = random_ansatz(m, r, r_rho, np.random.default_rng(seed))
    assert identity_closure(ansatz_to_im(a, t)) == pytest.approx(1.0, abs=1e-10)


def test_marginal_consistency():
    a = random_ansatz(2, 3, 2, np.random.default_rng(3))
    np.testing.assert_allclose(
        densify(im_reduce(ansatz_to_im(a, 3), 2)), densify(ansatz_to_im(a, 2)), atol=1e-10
    )


def test_ansatz_t_positive():
    with pytest.raises(ValueError):
        ansatz_to_im(random_ansatz(1, 1, 1, 0), 0)


def test_depolarizing_likelihood(small_data):
    ll = log_likelihood(_depolarizing_ansatz(), small_data)
    assert ll == pytest.approx(-64 * 3 * np.log(16.0), rel=1e-12)


def test_single_row_likelihood(small_data):
    a = random_ansatz(2, 2, 1, np.random.default_rng(4))
    one = small_data.take(np.array([5]))
    row = one.segments[0][1][0]
    assert log_likelihood(a, one) == pytest.approx(np.log(outcome_probability(ansatz_to_im(a, 3), row)), rel=1e-12)


def test_row_probabilities_mixed_grain():
    a = random_ansatz(2, 3, 1, np.random.default_rng(5))
    ds = mixed_grain_dataset(build_im_mps(ChainSpec(j=0.3, length=8, steps=4)), 40, 2, seed=2)
    p = row_probabilities(a, ds)
    im = ansatz_to_im(a, 4)
    ref = np.concatenate([outcome_probabilities(im, x, g) for g, x in ds.segments])
    np.testing.assert_allclose(p, ref, rtol=1e-12)


def test_likelihood_gauge_invariance(small_data):
    a = random_ansatz(2, 3, 1, np.random.default_rng(6))
    ua = haar_unitary(a.r, np.random.default_rng(7))
    k = np.einsum("kl,lxy->kxy", ua, a.kraus())
    b = AnsatzIM(2, k.reshape(a.V.shape), a.v)
    assert log_likelihood(b, small_data) == pytest.approx(log_likelihood(a, small_data), abs=1e-10)


def _perturbed(a, rng, which, idx, delta):
    V, v = a.V.copy(), a.v.copy()
    (V if which == "V" else v)[idx] += delta
    return AnsatzIM(a.m, V, v)


def test_gradient_finite_differences(small_data):
    rng = np.random.default_rng(8)
    a = random_ansatz(2, 2, 1, rng)
    _, gV, gv = value_and_gradient(a, small_data)
    h = 1e-5
    worst = 0.0
    for n in range(24):
        which = "V" if n < 20 else "v"
        shape = a.V.shape if which == "V" else a.v.shape
        idx = tuple(int(rng.integers(0, s)) for s in shape)
        g = (gV if which == "V" else gv)[idx]
        for unit, analytic in ((1.0, g.real), (1j, g.imag)):
            lp = log_likelihood(_perturbed(a, rng, which, idx, unit * h), small_data)
            lm = log_likelihood(_perturbed(a, rng, which, idx, -unit * h), small_data)
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - analytic) / max(abs(analytic), 1e-3))
    assert worst <= 1e-6


def test_gradient_grain2_finite_differences():
    im = build_im_mps(ChainSpec(j=0.4, length=8, steps=4))
    ds = mixed_grain_dataset(im, 30, 2, seed=3)
    rng = np.random.default_rng(9)
    a = random_ansatz(2, 2, 2, rng)
    _, gV, gv = value_and_gradient(a, ds)
    for which, grad, shape in (("V", gV, a.V.shape), ("v", gv, a.v.shape)):
        for _ in range(4):
            idx = tuple(int(rng.integers(0, s)) for s in shape)
            fd = (log_likelihood(_perturbed(a, rng, which, idx, 1e-5), ds)
                  - log_likelihood(_perturbed(a, rng, which, idx, -1e-5), ds)) / 2e-5
            assert fd == pytest.approx(grad[idx].real, rel=1e-6, abs=1e-6)


def test_gradient_additive(small_data):
    a = random_ansatz(2, 2, 1, np.random.default_rng(10))
    idx = np.arange(64)
    g1 = euclidean_gradient(a, small_data.take(idx[:20]))
    g2 = euclidean_gradient(a, small_data.take(idx[20:]))
    g = euclidean_gradient(a, small_data)
    np.testing.assert_allclose(g[0], g1[0] + g2[0], atol=1e-10)
    np.testing.assert_allclose(g[1], g1[1] + g2[1], atol=1e-10)


def test_gradient_phase_invariance(small_data):
    a = random_ansatz(2, 2, 2, np.random.default_rng(12))
    gV, gv = euclidean_gradient(a, small_data)
    # derivative along X -> e^{i phi} X vanishes for both parameters
    assert abs(np.real(np.vdot(gv, 1j * a.v))) < 1e-10
    assert abs(np.real(np.vdot(gV, 1j * a.V))) < 1e-10


def test_gradient_thread_independent():
    im = build_im_mps(ChainSpec(j=0.3, length=6, steps=3))
    ds = sample_dataset(im, 3500, seed=1)
    a = random_ansatz(2, 2, 1, np.random.default_rng(13))
    r1 = value_and_gradient(a, ds, threads=1)
    r3 = value_and_gradient(a, ds, threads=3)
    assert r1[0] == r3[0]
    assert r1[1].tobytes() == r3[1].tobytes() and r1[2].tobytes() == r3[2].tobytes()


def test_empty_batch_rejected(small_data):
    with pytest.raises(ValueError):
        value_and_gradient(random_ansatz(1, 1, 1, 0), small_data.take(np.array([], dtype=int)))


# --- Stiefel geometry -----------------------------------------------------------


def _iso(rng, n, k):
    q, _ = np.linalg.qr(_cplx(rng, n, k))
    return q


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4), extra=st.integers(0, 5))
def test_projection_properties(seed, k, extra):
    rng = np.random.default_rng(seed)
    V = _iso(rng, k + extra, k)
    G = _cplx(rng, k + extra, k)
    p = stiefel_project(V, G)
    s = V.conj().T @ p
    np.testing.assert_allclose(s + s.conj().T, 0.0, atol=1e-12)
    np.testing.assert_allclose(stiefel_project(V, p), p, atol=1e-12)
    H = _cplx(rng, k, k)
    np.testing.assert_allclose(stiefel_project(V, V @ (H + H.conj().T)), 0.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4), extra=st.integers(0, 5))
def test_retraction_isometry(seed, k, extra):
    rng = np.random.default_rng(seed)
    V = _iso(rng, k + extra, k)
    xi = stiefel_project(V, _cplx(rng, k + extra, k))
    W = stiefel_retract(V, 0.3 * xi)
    np.testing.assert_allclose(W.conj().T @ W, np.eye(k), atol=1e-12)


def test_retraction_zero_and_order():
    rng = np.random.default_rng(14)
    V = stiefel_retract(_iso(rng, 6, 3), np.zeros((6, 3)))
    np.testing.assert_allclose(stiefel_retract(V, np.zeros_like(V)), V, atol=1e-14)
    xi = stiefel_project(V, _cplx(rng, 6, 3))
    ratios = [np.linalg.norm(stiefel_retract(V, t * xi) - (V + t * xi)) / t**2 for t in (1e-2, 1e-3, 1e-4)]
    assert max(ratios) < 10 * np.linalg.norm(xi) ** 2
    assert ratios[-1] == pytest.approx(ratios[0], rel=0.1)


def test_retraction_rank_collapse():
    V = np.eye(2, dtype=complex)
    with pytest.raises(NumericError):
        stiefel_retract(V, -V)


# --- optimizer --------------------------------------------------------------------


def test_adam_zero_gradient_no_move():
    a = random_ansatz(2, 2, 1, np.random.default_rng(15))
    st0 = AdamState.zeros(a)
    b, st1 = riemannian_adam_step(a, st0, (np.zeros_like(a.V), np.zeros_like(a.v)), 0.1, TrainConfig())
    np.testing.assert_allclose(b.V, a.V, atol=1e-14)
    np.testing.assert_allclose(b.v, a.v, atol=1e-14)
    assert st1.step == 1


def test_adam_small_lr_linear():
    rng = np.random.default_rng(16)
    a = random_ansatz(2, 2, 1, rng)
    g = (_cplx(rng, *a.V.shape), _cplx(rng, *a.v.shape))
    d = []
    for lr in (1e-4, 1e-5, 1e-6):
        b, _ = riemannian_adam_step(a, AdamState.zeros(a), g, lr, TrainConfig())
        d.append(np.linalg.norm(b.V - a.V) / lr)
    np.testing.assert_allclose(d, d[-1], rtol=1e-3)


def test_adam_moments_nonnegative_and_tangent():
    rng = np.random.default_rng(17)
    a = random_ansatz(2, 2, 1, rng)
    st_ = AdamState.zeros(a)
    for _ in range(5):
        a, st_ = riemannian_adam_step(a, st_, (_cplx(rng, *a.V.shape), _cplx(rng, *a.v.shape)), 0.05, TrainConfig())
    assert st_.s_V.min() >= 0 and st_.s_v.min() >= 0
    s = a.V.conj().T @ st_.m_V
    np.testing.assert_allclose(s + s.conj().T, 0.0, atol=1e-12)


def test_adam_polar_factor():
    # maximize Re Tr(A^dagger V) on isometries: optimum is the polar factor of A
    rng = np.random.default_rng(18)
    A = _cplx(rng, 8, 2)
    u, _, vh = np.linalg.svd(A, full_matrices=False)
    polar = u @ vh
    a = AnsatzIM(1, _iso(rng, 8, 2), np.ones(1))
    cfg = TrainConfig(epochs=2000, lr_initial=0.05, lr_final=1e-5)
    st_ = AdamState.zeros(a)
    zero_v = np.zeros_like(a.v)
    for step in range(2000):
        a, st_ = riemannian_adam_step(a, st_, (A, zero_v), cfg.lr(step), cfg)
        if np.abs(a.V - polar).max() <= 1e-6:
            break
    assert np.abs(a.V - polar).max() <= 1e-6


# --- training ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def train_data():
    im = build_im_mps(ChainSpec(j=0.3, length=6, steps=3))
    return sample_dataset(im, 3000, seed=5)


_CFG = TrainConfig(batch_size=500, epochs=6, lr_initial=0.1, lr_final=0.01, m=2, r=2, seed=3)


def test_train_constraints_every_step(train_data, monkeypatch):
    defects = []
    orig = learn.riemannian_adam_step

    def spy(*args, **kw):
        out = orig(*args, **kw)
        defects.append((out[0].isometry_defect(), is_cptp(channel_from_kraus(list(out[0].kraus()))).tp_defect))
        return out

    monkeypatch.setattr(learn, "riemannian_adam_step", spy)
    train(train_data, _CFG)
    assert len(defects) == 36
    assert max(d[0] for d in defects) <= 1e-10
    assert max(d[1] for d in defects) <= 1e-8


def test_train_improves_and_records(train_data):
    res = train(train_data, _CFG)
    h = res.history
    assert h.epoch == list(range(6))
    assert h.lr[0] == 0.1 and h.lr[-1] == 0.01
    assert h.mean_nll[-1] < h.mean_nll[0]
    assert all(w >= 0 for w in h.wall_seconds)
    assert len(h.rows()) == 6


def test_train_deterministic_and_resumable(train_data):
    a = train(train_data, _CFG)
    b = train(train_data, _CFG)
    assert a.history.mean_nll == b.history.mean_nll
    assert a.ansatz.V.tobytes() == b.ansatz.V.tobytes()
    half = train(train_data, _CFG, stop_after=3)
    assert half.epochs_done == 3
    c = train(train_data, _CFG, resume=half)
    assert c.history.mean_nll == a.history.mean_nll
    assert c.ansatz.V.tobytes() == a.ansatz.V.tobytes()
    assert c.ansatz.v.tobytes() == a.ansatz.v.tobytes()


def test_train_threads_do_not_change_result(train_data):
    a = train(train_data, TrainConfig(**{**_CFG.to_dict(), "epochs": 2, "batch_size": 3000}))
    b = train(train_data, TrainConfig(**{**_CFG.to_dict(), "epochs": 2, "batch_size": 3000, "threads": 3}))
    assert a.ansatz.V.tobytes() == b.ansatz.V.tobytes()


def test_train_checkpoint_cadence(train_data):
    seen = []
    train(train_data, TrainConfig(**{**_CFG.to_dict(), "checkpoint_every": 2}), checkpoint=lambda r: seen.append(r.epochs_done))
    assert seen == [2, 4, 6]


def test_train_divergence_checkpoints(train_data, monkeypatch):
    def bad(a, batch, threads=1):
        return float("nan"), np.zeros_like(a.V), np.zeros_like(a.v)

    monkeypatch.setattr(learn, "value_and_gradient", bad)
    seen = []
    with pytest.raises(TrainingDiverged):
        train(train_data, _CFG, checkpoint=lambda r: seen.append(r.epochs_done))
    assert seen == [0]


def test_generating_ansatz_maximizes_likelihood():
    rng = np.random.default_rng(19)
    a0 = random_ansatz(2, 2, 1, rng)
    ds = sample_dataset(ansatz_to_im(a0, 2), 100_000, seed=7)
    l0 = log_likelihood(a0, ds)
    for _ in range(10):
        xi = stiefel_project(a0.V, _cplx(rng, *a0.V.shape))
        V = stiefel_retract(a0.V, 0.1 * xi / np.linalg.norm(xi))
        assert l0 >= log_likelihood(AnsatzIM(2, V, a0.v), ds)


def test_training_recovers_generating_ansatz():
    from imlearn.dynamics import infidelity

    a0 = random_ansatz(1, 2, 1, np.random.default_rng(20))
    im0 = ansatz_to_im(a0, 3)
    ds = sample_dataset(im0, 20_000, seed=8)
    res = train(ds, TrainConfig(batch_size=2000, epochs=30, lr_initial=0.1, lr_final=1e-3, m=1, r=2, seed=1))
    assert infidelity(im0, ansatz_to_im(res.ansatz, 3)) < 1e-2
