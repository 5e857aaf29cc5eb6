import numpy as np
import pytest

from occ_lab.policy import Backend, Head, ModelConfig, init_params
from occ_lab.rlgrad import (
    Algo,
    AlgoConfig,
    RolloutBatch,
    ce_diagonal_decomposition,
    ce_gradient,
    collect_rollouts,
    group_advantages,
    mean_mtp_loglik,
    mtp_policy_gradient,
    per_sample_gradients,
    plain_gradient,
    rl_gradient,
    surrogate_objective,
)
from occ_lab.tasks import sum_mod

from conftest import directional_diff

TAB = ModelConfig(vocab_size=5, backend=Backend.TABULAR_SOFTMAX)
MLP = ModelConfig(vocab_size=5, hidden_dim=6, backend=Backend.TINY_MLP)


def make_batch(cfg, seed=0, batch=8, group=4):
    pv = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    task = sum_mod(cfg.vocab_size)
    return pv, collect_rollouts(pv, cfg, task, batch, group, 1.0, rng)


def test_group_advantages_hand_values():
    assert np.allclose(group_advantages([1.0, 0.0]), [1.0, -1.0])
    assert np.allclose(group_advantages([1, 0, 1, 0]), [1, -1, 1, -1])
    assert np.array_equal(group_advantages([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])
    assert np.array_equal(group_advantages([1.0, 1.0, 1.0, 1.0]), [0.0] * 4)


def test_group_advantages_normalization_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = rng.integers(0, 2, size=8).astype(float)
        a = group_advantages(r)
        assert abs(a.sum()) < 1e-9
        if r.std() >= 1e-8:
            assert abs(a.std() - 1.0) < 1e-9


def test_collect_rollouts_contract():
    pv, batch = make_batch(TAB, seed=1, batch=12, group=4)
    assert batch.size == 12
    assert len(batch.prompts) == 3
    for g in range(3):
        assert abs(batch.advantages[4 * g : 4 * g + 4].sum()) < 1e-9
    # rewards consistent with the verifier
    from occ_lab.tasks import verify

    task = sum_mod(TAB.vocab_size)
    for i in range(batch.size):
        assert batch.rewards[i] == verify(task, batch.prompt_of(i), batch.responses[i])


def test_collect_rollouts_deterministic():
    pv = init_params(TAB, 3)
    task = sum_mod(TAB.vocab_size)
    b1 = collect_rollouts(pv, TAB, task, 8, 4, 1.0, np.random.default_rng(5))
    b2 = collect_rollouts(pv, TAB, task, 8, 4, 1.0, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(b1.responses, b2.responses))
    assert np.array_equal(b1.rewards, b2.rewards)


def _nondegenerate_batch(cfg, seed=11, batch=8, group=4):
    # pick a seed whose batch has reward variance so gradients are nonzero
    for s in range(seed, seed + 50):
        pv, b = make_batch(cfg, seed=s, batch=batch, group=group)
        if b.rewards.std() > 0:
            return pv, b
    raise AssertionError("no nondegenerate batch found")


def test_surrogate_consistency_on_policy():
    """At theta = theta_old all three algorithms produce the same gradient."""
    for cfg in (TAB, MLP):
        pv, batch = _nondegenerate_batch(cfg)
        g_grpo = rl_gradient(pv, cfg, batch, AlgoConfig(algo=Algo.GRPO))
        g_dapo = rl_gradient(pv, cfg, batch, AlgoConfig(algo=Algo.DAPO_LITE))
        g_gspo = rl_gradient(pv, cfg, batch, AlgoConfig(algo=Algo.GSPO_LITE))
        assert np.allclose(g_grpo, g_dapo, atol=1e-9)
        assert np.allclose(g_grpo, g_gspo, atol=1e-9)
        m_grpo = mtp_policy_gradient(pv, cfg, batch, AlgoConfig(algo=Algo.GRPO))
        m_dapo = mtp_policy_gradient(pv, cfg, batch, AlgoConfig(algo=Algo.DAPO_LITE))
        assert np.allclose(m_grpo, m_dapo, atol=1e-9)


def test_zero_advantages_zero_gradient():
    pv = init_params(TAB, 0)
    task = sum_mod(TAB.vocab_size)
    # force a degenerate batch: all rewards identical -> advantages all zero
    for s in range(40):
        batch = collect_rollouts(pv, TAB, task, 8, 4, 1.0, np.random.default_rng(s))
        if batch.rewards.std() == 0:
            break
    assert batch.rewards.std() == 0
    for algo in Algo:
        assert np.all(rl_gradient(pv, TAB, batch, AlgoConfig(algo=algo)) == 0.0)
        assert np.all(mtp_policy_gradient(pv, TAB, batch, AlgoConfig(algo=algo)) == 0.0)


@pytest.mark.parametrize("algo", list(Algo), ids=[a.value for a in Algo])
@pytest.mark.parametrize("cfg", [TAB, MLP], ids=["tabular", "mlp"])
def test_rl_gradient_directional_fd(cfg, algo):
    pv, batch = _nondegenerate_batch(cfg)
    rng = np.random.default_rng(2)
    # move off-policy a little so ratios differ from 1 but stay inside the band
    theta = pv.values + rng.normal(0, 0.02, pv.values.size)
    pv2 = pv.with_values(theta)
    acfg = AlgoConfig(algo=algo)

    for head, grad_fn in ((Head.MAIN, rl_gradient), (Head.MTP, mtp_policy_gradient)):
        g = grad_fn(pv2, cfg, batch, acfg)
        for _ in range(3):
            d = rng.normal(size=theta.size)
            d /= np.linalg.norm(d)
            fd = directional_diff(
                lambda v: surrogate_objective(pv.with_values(v), cfg, batch, acfg, head),
                theta, d)
            got = float(np.dot(g, d))
            assert abs(got - fd) <= 1e-5 * max(abs(got), abs(fd)) + 1e-10, (head, algo)


def test_ce_gradient_directional_fd_and_ascent():
    for cfg in (TAB, MLP):
        pv, batch = make_batch(cfg, seed=4)
        rng = np.random.default_rng(3)
        g = ce_gradient(pv, cfg, batch)
        for _ in range(3):
            d = rng.normal(size=pv.values.size)
            d /= np.linalg.norm(d)
            fd = directional_diff(
                lambda v: mean_mtp_loglik(pv.with_values(v), cfg, batch), pv.values, d)
            got = float(np.dot(g, d))
            assert abs(got - fd) <= 1e-5 * max(abs(got), abs(fd)) + 1e-10
        # a small ascent step increases the objective
        before = mean_mtp_loglik(pv, cfg, batch)
        after = mean_mtp_loglik(pv.with_values(pv.values + 0.05 * g), cfg, batch)
        assert after > before


def test_ce_gradient_identical_responses_proportional_to_single():
    cfg = TAB
    pv = init_params(cfg, 0)
    prompt = np.array([1, 2])
    resp = np.array([3])
    from occ_lab.policy import response_logprobs

    lp = response_logprobs(pv, cfg, prompt, resp)
    batch = RolloutBatch(prompts=[prompt], responses=[resp] * 4,
                         rewards=np.ones(4), advantages=np.zeros(4),
                         old_logprobs=[lp] * 4, group_size=4)
    g = ce_gradient(pv, cfg, batch)
    single = RolloutBatch(prompts=[prompt], responses=[resp, resp],
                          rewards=np.ones(2), advantages=np.zeros(2),
                          old_logprobs=[lp, lp], group_size=2)
    g1 = ce_gradient(pv, cfg, single)
    assert np.allclose(g, g1, atol=1e-12)


def test_mtp_gradient_segment_structure():
    pv, batch = _nondegenerate_batch(TAB)
    g = mtp_policy_gradient(pv, TAB, batch, AlgoConfig())
    lo, hi = pv.segments["main_head"]
    assert np.all(g[lo:hi] == 0.0)

    pv_mlp, batch_mlp = _nondegenerate_batch(MLP)
    g_mlp = mtp_policy_gradient(pv_mlp, MLP, batch_mlp, AlgoConfig())
    lo, hi = pv_mlp.segments["trunk"]
    assert np.any(g_mlp[lo:hi] != 0.0)


def test_dapo_clip_blocks_gradient_outside_band():
    cfg = TAB
    pv, batch = _nondegenerate_batch(cfg)
    # push theta far enough that some ratios clip, then check the clipped
    # tokens contribute nothing: the gradient matches a hand-filtered sum
    rng = np.random.default_rng(8)
    theta = pv.values + rng.normal(0, 0.8, pv.values.size)
    pv2 = pv.with_values(theta)
    acfg = AlgoConfig(algo=Algo.DAPO_LITE, clip_low=0.05, clip_high=0.05)
    g = rl_gradient(pv2, cfg, batch, acfg)
    d = rng.normal(size=theta.size)
    d /= np.linalg.norm(d)
    fd = directional_diff(
        lambda v: surrogate_objective(pv.with_values(v), cfg, batch, acfg, Head.MAIN),
        theta, d, h=1e-6)
    got = float(np.dot(g, d))
    assert abs(got - fd) <= 1e-4 * max(abs(got), abs(fd)) + 1e-9


def test_ce_diagonal_decomposition_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        b, p = int(rng.integers(2, 9)), int(rng.integers(2, 12))
        u = rng.normal(size=(b, p))
        x = rng.normal(size=b)
        a = (x - x.mean()) / max(x.std(), 1e-12)
        diag, cross = ce_diagonal_decomposition(u, a)
        # brute-force double sum
        full = 0.0
        diag_bf = 0.0
        for i in range(b):
            for j in range(b):
                term = a[i] * float(np.dot(u[i], u[j]))
                full += term
                if i == j:
                    diag_bf += term
        full /= b * b
        diag_bf /= b * b
        assert abs(diag - diag_bf) < 1e-9
        assert abs((diag + cross) - full) < 1e-9
        # and equals the assembled estimators' inner product
        g_rl = (a[:, None] * u).mean(axis=0)
        g_ce = u.mean(axis=0)
        assert abs((diag + cross) - float(np.dot(g_rl, g_ce))) < 1e-9


def test_ce_diagonal_decomposition_edge_cases():
    diag, cross = ce_diagonal_decomposition(np.array([[1.0, 2.0]]), np.array([0.0]))
    assert cross == 0.0
    u = np.eye(3)  # orthogonal samples
    a = np.array([1.0, 0.0, -1.0])
    diag, cross = ce_diagonal_decomposition(u, a)
    assert cross == 0.0
    assert abs(diag - 0.0) < 1e-12


def test_ce_decomposition_on_real_batch():
    """Reconstruction holds for the actual per-sample main-head gradients."""
    pv, batch = _nondegenerate_batch(TAB)
    u = per_sample_gradients(pv, TAB, batch, Head.MAIN)
    diag, cross = ce_diagonal_decomposition(u, batch.advantages)
    g_rl = plain_gradient(pv, TAB, batch, Head.MAIN)
    g_ce_mainhead = u.mean(axis=0)
    assert abs((diag + cross) - float(np.dot(g_rl, g_ce_mainhead))) < 1e-9


def vanishing_correlation_stat(n_batches=10_000, b=8, p=16, seed=0):
    """|mean <g_RL, g_CE>| normalized by mean ||g_RL|| ||g_CE|| over synthetic
    batches with advantage-independent gradient norms."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_batches, b, p))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    norms = rng.lognormal(0.0, 0.5, size=(n_batches, b, 1))
    u = norms * dirs
    x = rng.normal(size=(n_batches, b))
    a = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    g_rl = np.einsum("nb,nbp->np", a, u) / b
    g_ce = u.mean(axis=1)
    inner = np.einsum("np,np->n", g_rl, g_ce)
    scale = np.linalg.norm(g_rl, axis=1) * np.linalg.norm(g_ce, axis=1)
    return abs(inner.mean()) / scale.mean(), inner, u, a


def test_vanishing_ce_correlation_monte_carlo():
    n = 10_000
    stat, inner, u, a = vanishing_correlation_stat(n_batches=n)
    assert stat < 5.0 / np.sqrt(n)
    # reconstruction identity on a subset of the same synthetic batches
    for k in range(100):
        diag, cross = ce_diagonal_decomposition(u[k], a[k])
        assert abs((diag + cross) - inner[k]) < 1e-9
