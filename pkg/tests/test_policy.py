import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from caglab.dataset import DemoDataset, Demonstration, collect_demos
from caglab.policy import (
    INSTR_DIM,
    NULL_INDEX,
    ChecksumMismatch,
    DimensionMismatch,
    LikelihoodTable,
    PolicyParams,
    ShapeMismatch,
    TrainConfig,
    action_accuracy,
    encode_instruction,
    forward_logits,
    init_params,
    load_params,
    loss_and_grad,
    null_instruction,
    save_params,
    softmax,
    train,
    _sparse_loss_and_grad,
)
from caglab.suites import BiasProfile, make_benchmark


def random_batch(rng, obs_dim, n):
    obs = (rng.random((n, obs_dim)) < 0.2).astype(float)
    instr = rng.dirichlet(np.ones(INSTR_DIM), size=n)
    return obs, instr, rng.integers(0, 7, n)


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


# -- encodings --------------------------------------------------------------


def test_instruction_encoding():
    e = encode_instruction(("put", "the", "bowl", "on", "the", "tray"))
    assert e.shape == (INSTR_DIM,) and abs(e.sum() - 1) < 1e-15 and e[NULL_INDEX] == 0
    n = null_instruction()
    assert n[NULL_INDEX] == 1 and n.sum() == 1
    assert np.array_equal(encode_instruction(()), n)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=st.floats(-700, 700)))
def test_softmax_sums_to_one(z):
    p = softmax(z)
    assert abs(p.sum() - 1) <= 1e-12 and (p >= 0).all()


# -- forward ----------------------------------------------------------------


def test_zero_weights_give_uniform():
    p = init_params(10, 4, 0)
    z = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    logits = forward_logits(z, np.ones(10), null_instruction())
    assert np.array_equal(logits, np.zeros(7))
    assert np.allclose(softmax(logits), 1 / 7)


def test_unconditioned_ignores_instruction():
    p = init_params(20, 8, 1, conditioned=False)
    rng = np.random.default_rng(0)
    obs = rng.random(20)
    a = forward_logits(p, obs, encode_instruction(("put", "the", "mug")))
    b = forward_logits(p, obs, null_instruction())
    c = forward_logits(p, obs, rng.random(INSTR_DIM) * 100)
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_instruction_perturbation_bound():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = init_params(15, 8, int(rng.integers(1000)))
        obs, instr = rng.random(15), rng.dirichlet(np.ones(INSTR_DIM))
        i, eps = int(rng.integers(INSTR_DIM)), 1e-3
        d = instr.copy()
        d[i] += eps
        delta = np.linalg.norm(forward_logits(p, obs, d) - forward_logits(p, obs, instr))
        bound = np.linalg.norm(p.w2, 2) * np.linalg.norm(p.w1[15 + i]) * eps
        assert delta <= bound + 1e-15


def test_dimension_mismatch():
    p = init_params(10, 4, 0)
    with pytest.raises(DimensionMismatch):
        forward_logits(p, np.zeros(11), null_instruction())
    with pytest.raises(DimensionMismatch):
        forward_logits(p, np.zeros(10), np.zeros(5))


# -- loss and gradient ------------------------------------------------------


def test_uniform_loss_is_log7():
    p = init_params(5, 3, 0)
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    loss, _ = loss_and_grad(p, np.zeros((1, 5)), null_instruction()[None], [2])
    assert abs(loss - np.log(7)) < 1e-15
    assert abs(loss - 1.9459) < 1e-4


def test_duplicated_batch_same_loss_and_grad():
    rng = np.random.default_rng(1)
    p = init_params(12, 6, 2)
    obs, instr, acts = random_batch(rng, 12, 9)
    l1, g1 = loss_and_grad(p, obs, instr, acts)
    l2, g2 = loss_and_grad(p, np.vstack([obs, obs]), np.vstack([instr, instr]), np.concatenate([acts, acts]))
    assert abs(l1 - l2) < 1e-15
    assert all(np.allclose(a, b, rtol=0, atol=1e-15) for a, b in zip(g1.arrays(), g2.arrays()))


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        loss_and_grad(init_params(3, 2, 0), np.zeros((0, 3)), np.zeros((0, INSTR_DIM)), [])


def finite_difference(p, obs, instr, acts, eps=1e-5):
    flat = p.flat()
    sizes = [a.size for a in p.arrays()]
    shapes = [a.shape for a in p.arrays()]

    def unflat(v):
        parts = np.split(v, np.cumsum(sizes)[:-1])
        return p.with_arrays([x.reshape(s) for x, s in zip(parts, shapes)])

    g = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (loss_and_grad(unflat(up), obs, instr, acts)[0] - loss_and_grad(unflat(dn), obs, instr, acts)[0]) / (2 * eps)
    return g


def test_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        obs_dim, hidden = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        p = init_params(obs_dim, hidden, k, conditioned=bool(k % 4))
        obs, instr, acts = random_batch(rng, obs_dim, int(rng.integers(1, 6)))
        _, g = loss_and_grad(p, obs, instr, acts)
        num = finite_difference(p, obs, instr, acts)
        worst = max(worst, max_relative_error(g.flat(), num))
    assert worst <= 1e-4, worst
    assert time.perf_counter() - t0 < 10


def test_sparse_path_matches_dense():
    rng = np.random.default_rng(5)
    for k in range(30):
        d = 40
        p = init_params(d, 6, k)
        idx = np.full((12, 5), d)
        for i in range(12):
            m = int(rng.integers(0, 6))
            idx[i, :m] = np.sort(rng.choice(d, m, replace=False))
        obs = np.zeros((12, d + 1))
        obs[np.arange(12)[:, None], idx] = 1
        instr = rng.dirichlet(np.ones(INSTR_DIM), 12)
        acts = rng.integers(0, 7, 12)
        l1, g1 = loss_and_grad(p, obs[:, :d], instr, acts)
        l2, g2 = _sparse_loss_and_grad(p.arrays(), d, idx, instr, acts)
        assert abs(l1 - l2) < 1e-12
        assert all(np.allclose(a, b, rtol=0, atol=1e-12) for a, b in zip(g1.arrays(), g2))


# -- training ---------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_ds():
    sets = make_benchmark({"CFObject": 1}, seed=0)
    return collect_demos(sets, BiasProfile(10, 1, 0), 0)


def test_train_is_deterministic(tiny_ds):
    cfg = TrainConfig(epochs=2, seed=4)
    assert train(tiny_ds, cfg) == train(tiny_ds, cfg)
    assert train(tiny_ds, cfg) != train(tiny_ds, TrainConfig(epochs=2, seed=5))


def test_train_logs_loss(tiny_ds):
    hist = []
    train(tiny_ds, TrainConfig(epochs=3), history=hist)
    assert [e for e, _ in hist] == [0, 1, 2] and hist[-1][1] < hist[0][1]


def test_full_dropout_ignores_dataset_instructions(tiny_ds):
    relabelled = DemoDataset(
        [Demonstration(d.task_id, ("put", "the", "spoon"), d.observations, d.actions, d.seed) for d in tiny_ds.demonstrations],
        tiny_ds.obs_dim,
    )
    cfg = TrainConfig(epochs=2, language_dropout_prob=1.0)
    assert train(tiny_ds, cfg) == train(relabelled, cfg)


def test_unconditioned_training_flag(tiny_ds):
    p = train(tiny_ds, TrainConfig(epochs=1), conditioned=False)
    assert not p.conditioned


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(language_dropout_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_conditioned_accuracy_on_fresh_in_domain_states(trained):
    fresh = collect_demos(trained.sets, BiasProfile(20, 0, 0), seed=12345)
    assert action_accuracy(trained.cond, fresh) >= 0.95


# -- params files -----------------------------------------------------------


def test_params_round_trip(tmp_path):
    p = init_params(30, 5, 7, conditioned=False)
    f = tmp_path / "p.params"
    save_params(p, f)
    q = load_params(f)
    assert q == p and not q.conditioned and q.seed == 7


def test_flipped_byte_is_checksum_mismatch(tmp_path):
    f = tmp_path / "p.params"
    save_params(init_params(30, 5, 7), f)
    raw = bytearray(f.read_bytes())
    raw[-3] ^= 0x01
    f.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        load_params(f)


def test_edited_dims_are_shape_mismatch(tmp_path):
    f = tmp_path / "p.params"
    save_params(init_params(30, 5, 7), f)
    raw = f.read_bytes()
    f.write_bytes(raw.replace(b'"hidden": 5', b'"hidden": 6', 1))
    with pytest.raises(ShapeMismatch):
        load_params(f)


# -- likelihood table -------------------------------------------------------


def test_likelihood_table_factorises():
    rng = np.random.default_rng(0)
    t = LikelihoodTable.random(7, 3, rng)
    for l in range(3):
        post = t.posterior(l)
        assert np.allclose(post, t.prior() * t.likelihood(l) / t.instruction_marginal()[l], atol=1e-15)
    with pytest.raises(ValueError):
        LikelihoodTable(np.ones((2, 2)))
