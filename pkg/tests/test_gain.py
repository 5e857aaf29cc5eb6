import numpy as np
import pytest

from occ_lab.gain import (
    GainInputs,
    UndefinedOptimumError,
    concave_quadratic,
    delta_mtp,
    delta_terms,
    estimate_curvature,
    estimate_L,
    gain_at_optimum,
    lambda_star,
    positivity_threshold,
    smoothness_bound_check,
)
from occ_lab.policy import Backend, ModelConfig, init_params
from occ_lab.rlgrad import collect_rollouts
from occ_lab.tasks import sum_mod


def eval_delta(c, v2, eta, L, lam):
    return sum(delta_terms(c, v2, eta, L, lam))


def test_delta_mtp_hand_values():
    d = delta_mtp(GainInputs(c=5.0, v2=4.0, eta=0.1, L=1.0, lam=0.0))
    assert (d.first_order, d.second_order, d.delta_mtp) == (0.0, 0.0, 0.0)

    # c=0: only the penalty term, -(1 * 0.01 * 1 / 2) * 4 = -0.02
    d = delta_mtp(GainInputs(c=0.0, v2=4.0, eta=0.1, L=1.0, lam=1.0))
    assert abs(d.first_order) == 0.0
    assert abs(d.delta_mtp - (-0.02)) < 1e-15

    # c=1, v2=1, L=1, eta=0.1, lam=9: 0.81 - 0.405 = 0.405, the optimum value
    d = delta_mtp(GainInputs(c=1.0, v2=1.0, eta=0.1, L=1.0, lam=9.0))
    assert abs(d.first_order - 0.81) < 1e-12
    assert abs(d.second_order - (-0.405)) < 1e-12
    assert abs(d.delta_mtp - 0.405) < 1e-12
    assert abs(d.delta_mtp - d.gain_at_optimum) < 1e-12
    assert abs(d.lambda_star - 9.0) < 1e-12


def test_decomposition_identity_exact():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = rng.normal()
        v2 = rng.uniform(0.1, 5)
        L = rng.uniform(0.5, 2)
        eta = rng.uniform(0.01, 0.9 / L)
        lam = rng.normal() * 3
        d = delta_mtp(GainInputs(c=c, v2=v2, eta=eta, L=L, lam=lam))
        assert d.delta_mtp == d.first_order + d.second_order  # exact float sum


def test_lambda_star_hand_values():
    assert lambda_star(0.0, 1.0, 0.1, 1.0) == 0.0
    assert abs(lambda_star(1.0, 1.0, 0.1, 1.0) - 9.0) < 1e-12
    assert abs(lambda_star(-1.0, 1.0, 0.1, 1.0) + 9.0) < 1e-12
    assert abs(gain_at_optimum(-1.0, 1.0, 0.1, 1.0) - 0.405) < 1e-12


def test_lambda_star_requires_positive_v2_and_valid_eta_l():
    with pytest.raises(UndefinedOptimumError):
        lambda_star(1.0, 0.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        lambda_star(1.0, 1.0, 0.5, 2.0)  # L*eta = 1
    with pytest.raises(ValueError):
        GainInputs(c=0.0, v2=-1.0, eta=0.1, L=1.0, lam=0.0)


def test_gain_at_optimum_matches_grid_argmax():
    rng = np.random.default_rng(1)
    grid = np.arange(-20.0, 20.0 + 1e-3, 1e-3)
    for _ in range(100):
        c = rng.uniform(-2, 2)
        v2 = rng.uniform(0.5, 4)
        L = rng.uniform(0.5, 2)
        eta = rng.uniform(0.3, 0.9) / L
        vals = eval_delta(c, v2, eta, L, grid)
        star = lambda_star(c, v2, eta, L)
        best = gain_at_optimum(c, v2, eta, L)
        assert abs(star - grid[np.argmax(vals)]) <= 1e-3 + 1e-9
        assert vals.max() <= best + 1e-12
        assert abs(eval_delta(c, v2, eta, L, star) - best) < 1e-12


def test_positivity_threshold():
    assert abs(positivity_threshold(1.0, 1.0, 0.1, 1.0) - 18.0) < 1e-12
    assert positivity_threshold(0.0, 1.0, 0.1, 1.0) == 0.0
    c, v2, eta, L = 1.3, 2.0, 0.08, 1.2
    thr = positivity_threshold(c, v2, eta, L)
    assert abs(thr - 2 * lambda_star(c, v2, eta, L)) < 1e-15
    lam_grid = np.arange(1e-3, thr, 1e-3)
    assert np.all(eval_delta(c, v2, eta, L, lam_grid) > 0)
    beyond = np.arange(thr, thr + 5, 1e-2)
    assert np.all(eval_delta(c, v2, eta, L, beyond) <= 1e-12)


def test_parabola_shape_second_difference():
    c, v2, eta, L = 0.7, 1.9, 0.05, 1.4
    lam = np.linspace(-15, 15, 301)
    vals = eval_delta(c, v2, eta, L, lam)
    second = np.diff(vals, 2)
    assert np.all(second <= 0)
    assert np.allclose(second, second[0], atol=1e-12)


def test_optimum_root_and_symmetry_identities():
    rng = np.random.default_rng(2)
    for _ in range(200):
        c = rng.uniform(-2, 2)
        v2 = rng.uniform(0.5, 4)
        L = rng.uniform(0.5, 2)
        eta = rng.uniform(0.3, 0.9) / L
        star = lambda_star(c, v2, eta, L)
        best = gain_at_optimum(c, v2, eta, L)
        assert abs(eval_delta(c, v2, eta, L, 0.0)) == 0.0
        assert abs(eval_delta(c, v2, eta, L, star) - best) < 1e-12
        assert abs(eval_delta(c, v2, eta, L, 2 * star)) < 1e-12
        # sign symmetry is exact in floats
        assert lambda_star(-c, v2, eta, L) == -star
        assert gain_at_optimum(-c, v2, eta, L) == best
        if c != 0.0:
            assert best > 0.0  # clipping to lambda=0 is strictly dominated


def test_smoothness_bound_quadratic_is_tight():
    rng = np.random.default_rng(3)
    L = 1.7
    value, grad = concave_quadratic(L)
    for _ in range(20):
        theta = rng.normal(size=6)
        theta_p = rng.normal(size=6)
        lhs, rhs, holds = smoothness_bound_check(value, grad, theta, theta_p, L)
        assert holds
        assert abs(lhs - rhs) < 1e-10
    lhs, rhs, holds = smoothness_bound_check(value, grad, theta, theta, L)
    assert lhs == rhs and holds


def test_smoothness_bound_detects_understated_l():
    value, grad = concave_quadratic(2.0)
    theta = np.zeros(4)
    theta_p = np.ones(4)
    # claiming L=1 for a curvature-2 objective breaks the bound
    _, _, holds = smoothness_bound_check(value, grad, theta, theta_p, 1.0)
    assert not holds


def test_one_step_replay_on_quadratic():
    """J(theta') - J(theta) equals the standard term plus the gain, exactly."""
    rng = np.random.default_rng(4)
    for _ in range(100):
        dim = int(rng.integers(3, 16))
        L = rng.uniform(0.5, 2.0)
        eta = rng.uniform(0.01, 0.9 / L)
        lam = rng.uniform(-3, 3)
        theta = rng.normal(size=dim)
        g_mtp = rng.normal(size=dim)
        value, grad = concave_quadratic(L)
        g_rl = grad(theta)
        theta_p = theta + eta * (g_rl + lam * g_mtp)
        lhs = value(theta_p) - value(theta)
        c = float(np.dot(g_rl, g_mtp))
        v2 = float(np.dot(g_mtp, g_mtp))
        rhs = eta * (1 - L * eta / 2) * float(np.dot(g_rl, g_rl)) + eval_delta(c, v2, eta, L, lam)
        assert abs(lhs - rhs) < 1e-10


def test_estimate_curvature_quadratic():
    L0 = 1.37
    _, grad = concave_quadratic(L0)
    theta = np.random.default_rng(5).normal(size=10)
    est = estimate_curvature(grad, theta, probes=2, fd_step=1e-4)
    assert abs(est - L0) / L0 < 0.01
    assert est >= 0.0


def test_estimate_curvature_monotone_in_probes():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(8, 8))
    hess = h @ h.T + 0.1 * np.eye(8)

    def grad(theta):
        return -hess @ theta

    theta = rng.normal(size=8)
    ests = [estimate_curvature(grad, theta, probes=p, fd_step=1e-5, power_iters=2)
            for p in (1, 2, 4, 8)]
    assert all(a <= b + 1e-12 for a, b in zip(ests, ests[1:]))
    # and the converged estimate approaches the top eigenvalue
    full = estimate_curvature(grad, theta, probes=2, fd_step=1e-6, power_iters=30)
    top = np.linalg.eigvalsh(hess)[-1]
    assert abs(full - top) / top < 0.01


def _batch_with_variance(cfg, task, pv, batch=8, group=4):
    for s in range(120):
        candidate = collect_rollouts(pv, cfg, task, batch, group, 1.0,
                                     np.random.default_rng(s))
        if candidate.rewards.std() > 0:
            return candidate
    raise AssertionError("no batch with reward variance")


def test_estimate_l_on_policy_batch():
    cfg = ModelConfig(vocab_size=4, hidden_dim=6, backend=Backend.TINY_MLP)
    pv = init_params(cfg, 12)
    batch = _batch_with_variance(cfg, sum_mod(4), pv)
    est = estimate_L(pv, cfg, batch, probes=2, fd_step=1e-4)
    assert est > 0.0
    assert np.isfinite(est)


def test_tabular_single_token_surrogate_is_exactly_linear():
    """With one response token, every group member shares one conditioning row
    and zero-sum advantages cancel the softmax term, so the plain surrogate's
    gradient is theta-independent and its curvature is exactly zero."""
    cfg = ModelConfig(vocab_size=5)
    pv = init_params(cfg, 12)
    batch = _batch_with_variance(cfg, sum_mod(5), pv)
    from occ_lab.policy import Head
    from occ_lab.rlgrad import plain_gradient

    g0 = plain_gradient(pv, cfg, batch, Head.MAIN)
    rng = np.random.default_rng(1)
    g1 = plain_gradient(pv.with_values(pv.values + rng.normal(0, 0.3, pv.values.size)),
                        cfg, batch, Head.MAIN)
    assert np.allclose(g0, g1, atol=1e-12)
    assert estimate_L(pv, cfg, batch, probes=2, fd_step=1e-4) == 0.0
