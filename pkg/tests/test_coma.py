import numpy as np
import pytest

from bayestwin import coma, nnkit
from bayestwin.dynmodel import ModelStructure, truth_draw
from bayestwin.env import default_config

from helpers import fd_grad


def _policy(seed=0, K=4):
    return coma.PolicySet(K, 1, 4, (16, 16), np.random.default_rng(seed))


def test_fresh_actor_near_half():
    pol = _policy()
    for k in range(4):
        for obs in [(1, 0, 0), (1, 1, 1)]:
            p = coma.actor_prob(pol, k, obs, 2)
            assert abs(p[1] - 0.5) < 0.2 and p.sum() == pytest.approx(1.0)


def test_empty_buffer_never_transmits():
    pol = _policy()
    assert coma.actor_prob(pol, 0, (0, 1, 0), 1)[1] == 0.0
    q = np.array([[0, 1, 0, 1]])
    p = pol.transmit_probs(q, q, q, np.array([0]))
    assert p[0, 0] == 0 and p[0, 2] == 0
    assert np.array_equal(p, pol.transmit_probs(q, q, q, np.array([0])))


def test_lambda_return_examples():
    assert coma.lambda_return([1, 1], [0, 0], 0.5, 0.5, 2) == pytest.approx(1.25)
    r, b = [0.3, -1.0, 2.0], [4.0, 1.0, -2.0]
    nstep = 0.3 + 0.9 * -1.0 + 0.81 * 2.0 + 0.729 * -2.0
    assert coma.lambda_return(r, b, 0.9, 1.0, 3) == pytest.approx(nstep)
    for lam in (0.0, 0.4, 1.0):
        assert coma.lambda_return([2.0], [5.0], 0.9, lam, 1) == pytest.approx(2.0 + 4.5)
    with pytest.raises(ValueError):
        coma.lambda_return([1, 1], [0], 0.5, 0.5, 2)


def test_lambda_targets_match_scalar():
    rng = np.random.default_rng(0)
    H, B, n = 12, 3, 5
    r, qbar = rng.normal(size=(H, B)), rng.normal(size=(H + 1, B))
    out = coma.lambda_targets(r, qbar, 0.9, 0.7, n)
    for t in range(H):
        m = min(n, H - t)
        for b in range(B):
            ref = coma.lambda_return(r[t:t + m, b], qbar[t + 1:t + m + 1, b], 0.9, 0.7, m)
            assert out[t, b] == pytest.approx(ref)


def test_lambda_return_reduces_to_monte_carlo():
    r = np.array([[1.0], [-2.0], [0.5], [3.0]])
    out = coma.lambda_targets(r, np.zeros((5, 1)), 0.9, 1.0, 4)
    assert out[0, 0] == pytest.approx(sum(0.9**i * r[i, 0] for i in range(4)))


def test_counterfactual_advantage_examples():
    assert coma.counterfactual_advantage(2.0, [0.0, 2.0], [0.5, 0.5]) == pytest.approx(1.0)
    assert coma.counterfactual_advantage(3.0, [1.0, 3.0], [0.0, 1.0]) == 0.0


def _random_rollout(seed=0, H=6, B=5):
    cfg = default_config()
    st = ModelStructure.from_env(cfg)
    from bayestwin.env import EnvRng, truth_tables
    rng = np.random.default_rng(seed)
    erng = EnvRng(np.random.default_rng(seed + 1), np.random.default_rng(seed + 2))
    pol = _policy(seed)
    start = coma.initial_states(st, B, rng, random_start=True)
    ro = coma.rollout(pol, truth_tables(cfg), st, B, H, coma.control_reward(cfg), rng, erng, start=start)
    return pol, ro


def test_baseline_zero_mean():
    pol, ro = _random_rollout()
    critic = coma.CriticPair(4, 1, 4, (16,), np.random.default_rng(3))
    H = ro.H
    adv = coma.advantages(critic, ro, H)
    # swap each agent's action and recompute: pi-weighted sum is zero
    flipped = coma.Rollout(ro.q, ro.g, ro.d, ro.a.copy(), ro.p1, ro.slot, ro.reward, ro.overflow)
    for k in range(4):
        flipped.a = ro.a.copy()
        flipped.a[..., k] = 1 - ro.a[..., k]
        adv_f = coma.advantages(critic, flipped, H)[..., k]
        p1 = ro.p1[:H, :, k]
        a = ro.a[:H, :, k]
        a1 = np.where(a == 1, adv[..., k], adv_f)
        a0 = np.where(a == 0, adv[..., k], adv_f)
        assert np.allclose((1 - p1) * a0 + p1 * a1, 0, atol=1e-10)


def test_deterministic_policy_zero_advantage():
    pol, ro = _random_rollout()
    ro.p1 = ro.a.astype(float)
    critic = coma.CriticPair(4, 1, 4, (16,), np.random.default_rng(3))
    assert np.allclose(coma.advantages(critic, ro, ro.H), 0)


def _surrogate(pol, ro, adv):
    H = adv.shape[0]
    q, g, d, a, slot = coma._flat(ro, H)
    z = pol.logits(q, g, d)[:, np.arange(len(q)), slot].T
    s = nnkit.sigmoid(z)
    logp = np.where(a == 1, np.log(s), np.log1p(-s)) * (q > 0)
    return float(np.mean(np.sum(logp * adv.reshape(-1, 4), axis=1)))


def test_policy_gradient_matches_finite_difference():
    pol, ro = _random_rollout(1)
    adv = np.random.default_rng(4).normal(size=(ro.H, ro.q.shape[1], 4))

    class Capture:
        grads = None

        def step(self, params, grads):
            Capture.grads = [g.copy() for g in grads]

    coma.policy_update(pol, Capture(), ro, adv)
    for i, p in enumerate(pol.net.params):
        num = fd_grad(lambda: _surrogate(pol, ro, adv), p)
        ana = -Capture.grads[i]
        assert np.linalg.norm(num - ana) <= 1e-4 * max(np.linalg.norm(num), 1e-8) + 1e-9


def test_zero_advantage_zero_gradient_and_ascent():
    pol, ro = _random_rollout(2, H=1, B=1)
    ro.q[0] = 1
    ro.p1[0] = pol.transmit_probs(ro.q[0], ro.g[0], ro.d[0], np.array([ro.slot[0]]))
    gn = coma.policy_update(pol, nnkit.Adam(lr=1e-3), ro, np.zeros((1, 1, 4)))
    assert gn == 0.0
    before = pol.transmit_probs(ro.q[0], ro.g[0], ro.d[0], np.array([ro.slot[0]]))[0]
    adv = np.zeros((1, 1, 4))
    adv[0, 0, 0] = 1.0
    coma.policy_update(pol, nnkit.Adam(lr=1e-3), ro, adv)
    after = pol.transmit_probs(ro.q[0], ro.g[0], ro.d[0], np.array([ro.slot[0]]))[0]
    pa = lambda p: p[0] if ro.a[0, 0, 0] == 1 else 1 - p[0]  # noqa: E731
    assert pa(after) > pa(before)
    assert np.all((after >= 0) & (after <= 1))


def test_nan_advantage_raises():
    pol, ro = _random_rollout()
    adv = np.full((ro.H, ro.q.shape[1], 4), np.nan)
    with pytest.raises(coma.TrainingError):
        coma.policy_update(pol, nnkit.Adam(), ro, adv)


def test_entropy_reward_examples():
    assert coma.entropy_reward(3.0, -0.7, 0.0) == 3.0
    assert coma.entropy_reward(3.0, 0.0, 0.5) == 3.0
    assert coma.entropy_reward(3.0, -1.0, 2.0) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        coma.entropy_reward(1.0, -np.inf, 0.1)


def _two_state_rollout(B=4, H=40):
    # one device whose buffer alternates 0, 1, 0, ...: reward 1 in state q=1, else 0
    q = (np.arange(H + 1)[:, None, None] % 2) * np.ones((1, B, 1), dtype=np.int64)
    z = np.zeros_like(q)
    r = q[:H, :, 0].astype(float)
    return coma.Rollout(q, z, z.copy(), z.copy(), z.astype(float), np.zeros(H + 1, dtype=np.int64), r,
                        np.zeros((H, B, 1), bool))


def test_critic_converges_on_two_state_mdp():
    gamma = 0.5
    V = np.zeros(2)
    for _ in range(200):
        V = np.array([0 + gamma * V[1], 1 + gamma * V[0]])
    ro = _two_state_rollout()
    cfg = coma.TrainConfig(gamma=gamma, lam=0.8, n_step=4, n_target=1)
    critic = coma.CriticPair(1, 1, 1, (16,), np.random.default_rng(0), lr=1e-2)
    for _ in range(1500):
        loss = coma.critic_update(critic, ro, ro.reward, cfg)
    assert loss < 1e-2
    q_hat = critic.q_value(np.array([[0], [1]]), np.zeros((2, 1), int), np.zeros((2, 1), int),
                           np.zeros(2, int), np.zeros((2, 1), int))
    assert np.allclose(q_hat, V, atol=0.1)


def test_critic_target_sync():
    ro = _two_state_rollout()
    cfg = coma.TrainConfig(gamma=0.5, n_target=3)
    critic = coma.CriticPair(1, 1, 1, (8,), np.random.default_rng(0), lr=1e-2)
    for i in range(3):
        coma.critic_update(critic, ro, ro.reward, cfg)
        same = all(np.array_equal(a, b) for a, b in zip(critic.net.params, critic.target.params))
        assert same == (i == 2)
    critic.sync()
    critic.sync()
    assert all(np.array_equal(a, b) for a, b in zip(critic.net.params, critic.target.params))


def test_critic_zero_loss_at_fixed_point():
    ro = _two_state_rollout()
    cfg = coma.TrainConfig(gamma=0.0, lam=0.0, n_step=1, n_target=1)
    critic = coma.CriticPair(1, 1, 1, (8,), np.random.default_rng(0))
    last = critic.net.params[-1]
    last[...] = 0.0
    critic.net.params[-2][...] = 0.0
    critic.sync()
    z = np.zeros_like(ro.reward)
    assert coma.critic_update(critic, ro, z, cfg) == 0.0


def test_zero_iterations_returns_initial_policy():
    cfg = default_config()
    pol = _policy()
    before = [p.copy() for p in pol.net.params]
    out = coma.train(cfg, coma.control_reward(cfg), coma.TrainConfig(iterations=0), np.random.default_rng(0),
                     policy=pol)
    assert out is pol and all(np.array_equal(a, b) for a, b in zip(before, out.net.params))


def test_training_is_deterministic_and_improves():
    cfg = default_config()
    tc = coma.TrainConfig(iterations=60, actor_hidden=(16, 16), critic_hidden=(32, 32), n_critic=2, actor_lr=3e-3)
    a = coma.train(cfg, coma.control_reward(cfg), tc, np.random.default_rng(7))
    b = coma.train(truth_draw(cfg), coma.control_reward(cfg), tc, np.random.default_rng(7))
    assert all(np.allclose(x, y) for x, y in zip(a.net.params, b.net.params))
    assert len(a.history) == 60
    ev0 = coma.evaluate(_policy(), cfg, np.random.default_rng(1), 8, 100)
    ev1 = coma.evaluate(a, cfg, np.random.default_rng(1), 8, 100)
    assert ev1.reward > ev0.reward


def test_policy_save_load(tmp_path):
    pol = _policy(3)
    pol.save(tmp_path / "pol.bin")
    back = coma.PolicySet.load(tmp_path / "pol.bin")
    q = np.array([[1, 1, 0, 1]])
    assert np.array_equal(pol.transmit_probs(q, q, q, np.array([1])), back.transmit_probs(q, q, q, np.array([1])))


def test_history_csv(tmp_path):
    cfg = default_config()
    pol = coma.train(cfg, coma.control_reward(cfg), coma.TrainConfig(iterations=3, actor_hidden=(8,),
                     critic_hidden=(8,)), np.random.default_rng(0))
    coma.write_history_csv(pol, tmp_path / "h.csv", "abc")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=abc" and len(lines) == 5
