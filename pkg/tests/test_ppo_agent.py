import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from batchloop.errors import DomainError, NumericError
from batchloop.ppo_agent import (
    Adam,
    PpoAgent,
    PpoHyperparams,
    RunningNorm,
    Transition,
    clipped_surrogate,
    compute_advantages,
    entropy,
    gaussian_log_prob,
    init_params,
    policy_forward,
    actor_backward,
    ppo_loss_and_grads,
    ppo_update,
    sample_action,
)

SMALL = PpoHyperparams(hidden=(6, 5))


def test_defaults_match_published_hyperparameters():
    hp = PpoHyperparams()
    assert (hp.critic_lr, hp.actor_lr, hp.epochs, hp.gamma) == (1e-4, 5e-5, 10, 0.99)
    assert (hp.entropy_weight, hp.minibatch, hp.horizon, hp.clip_eps) == (0.02, 64, 2048, 0.2)
    assert hp.hidden == (100, 100) and hp.gae_lambda == 0.95


@pytest.mark.parametrize("kw", [{"clip_eps": 0.0}, {"clip_eps": 1.0}, {"gamma": 0.0}, {"gamma": 1.5},
                                {"update_mode": "sometimes"}])
def test_invalid_hyperparameters(kw):
    with pytest.raises(DomainError):
        PpoHyperparams(**kw).validate()


def test_zero_weights_give_centre_of_range():
    p = init_params(3)
    p = {k: np.zeros_like(v) for k, v in p.items()}
    mean, std = policy_forward(p, np.ones(3))
    assert mean[0, 0] == 5.0 and std[0] == 1.0


def test_mean_is_inside_admissible_range(rng):
    p = init_params(3, rng=rng)
    mean, _ = policy_forward(p, rng.normal(scale=5, size=(1000, 3)))
    assert np.all((mean > 0) & (mean < 10))


def test_std_is_clamped():
    p = init_params(2)
    p["log_std"][:] = 10.0
    assert policy_forward(p, np.zeros(2))[1][0] == pytest.approx(5.0)
    p["log_std"][:] = -50.0
    assert policy_forward(p, np.zeros(2))[1][0] == pytest.approx(1e-3)


def test_non_finite_policy_output_detected():
    p = init_params(2)
    p["actor.W0"][0, 0] = np.nan
    with pytest.raises(NumericError):
        policy_forward(p, np.ones(2))


def test_mean_gradient_matches_finite_differences(rng):
    p = init_params(3, SMALL, rng)
    s = rng.normal(size=(4, 3))
    _, _, cache = policy_forward(p, s, return_cache=True)
    grads = actor_backward(p, cache, np.ones((4, 1)))
    h = 1e-6
    for k in (k for k in p if k.startswith("actor.")):
        fd = np.zeros_like(p[k])
        for idx in np.ndindex(p[k].shape):
            old = p[k][idx]
            p[k][idx] = old + h
            up = policy_forward(p, s)[0].sum()
            p[k][idx] = old - h
            dn = policy_forward(p, s)[0].sum()
            p[k][idx] = old
            fd[idx] = (up - dn) / (2 * h)
        assert np.linalg.norm(fd - grads[k]) <= 1e-5 * np.linalg.norm(fd)


def test_sampling_determinism_and_small_std_limit():
    p = init_params(2)
    a1 = sample_action(p, np.ones(2), np.random.default_rng(5))
    a2 = sample_action(p, np.ones(2), np.random.default_rng(5))
    assert a1[1] == a2[1] and a1[2] == a2[2]
    p["log_std"][:] = -50.0
    mean = policy_forward(p, np.ones(2))[0][0]
    _, raw, _ = sample_action(p, np.ones(2), np.random.default_rng(1))
    assert abs(raw[0] - mean[0]) < 1e-2


def test_monte_carlo_mean():
    p = init_params(2)
    s = np.array([0.3, -0.2])
    mean, std = policy_forward(p, s)
    rng = np.random.default_rng(0)
    n = 100_000
    draws = np.array([sample_action(p, s, rng)[1][0] for _ in range(n)])
    assert abs(draws.mean() - mean[0, 0]) < 3 * std[0] / math.sqrt(n)


def test_log_prob_of_raw_sample():
    p = init_params(2)
    s = np.zeros(2)
    a, raw, logp = sample_action(p, s, np.random.default_rng(2))
    mean, std = policy_forward(p, s)
    assert logp == pytest.approx(-0.5 * ((raw[0] - mean[0, 0]) / std[0]) ** 2 - math.log(std[0])
                                 - 0.5 * math.log(2 * math.pi))
    assert 0 <= a[0] <= 10


def direct_gae(r, v, gamma, lam):
    """Hand-unrolled advantage of a single terminating episode."""
    n = len(r)
    deltas = [r[t] + gamma * (v[t + 1] if t + 1 < n else 0.0) - v[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** (j - t) * deltas[j] for j in range(t, n)) for t in range(n)])


def test_gae_limits(rng):
    r, v = rng.normal(size=6), rng.normal(size=6)
    done = [False] * 5 + [True]
    adv, _ = compute_advantages(r, v, done, 0.9, 1.0, normalize=False)
    disc = np.array([sum(0.9 ** (j - t) * r[j] for j in range(t, 6)) for t in range(6)])
    np.testing.assert_allclose(adv, disc - v, atol=1e-12)
    adv0, _ = compute_advantages(r, v, done, 0.9, 0.0, normalize=False)
    td = r + 0.9 * np.append(v[1:], 0.0) - v
    np.testing.assert_allclose(adv0, td, atol=1e-12)


def test_gae_matches_direct_computation(rng):
    r, v = rng.normal(size=5), rng.normal(size=5)
    adv, ret = compute_advantages(r, v, [0, 0, 0, 0, 1], 0.99, 0.95, normalize=False)
    np.testing.assert_allclose(adv, direct_gae(r, v, 0.99, 0.95), atol=1e-12)
    np.testing.assert_allclose(ret, adv + v, atol=1e-15)


def test_gae_resets_at_episode_boundary(rng):
    r, v = rng.normal(size=8), rng.normal(size=8)
    done = [0, 0, 0, 1, 0, 0, 0, 1]
    adv, _ = compute_advantages(r, v, done, 0.99, 0.95, normalize=False)
    np.testing.assert_allclose(adv[:4], direct_gae(r[:4], v[:4], 0.99, 0.95), atol=1e-12)
    np.testing.assert_allclose(adv[4:], direct_gae(r[4:], v[4:], 0.99, 0.95), atol=1e-12)
    norm, _ = compute_advantages(r, v, done, 0.99, 0.95)
    assert abs(norm.mean()) < 1e-12 and norm.std() == pytest.approx(1.0, abs=1e-6)


def test_clipped_surrogate_hand_values():
    assert clipped_surrogate(1.0, 0.7, 0.2) == pytest.approx(0.7)
    assert clipped_surrogate(2.0, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)


@settings(max_examples=200)
@given(st.floats(0.01, 10), st.floats(-10, 10), st.floats(0.01, 0.99))
def test_clipped_surrogate_bounds(ratio, adv, eps):
    s = clipped_surrogate(ratio, adv, eps)
    g = (1 + eps) * adv if adv >= 0 else (1 - eps) * adv
    assert s <= ratio * adv + 1e-12 and s <= g + 1e-12


def toy_batch(rng, n=3, n_state=3, params=None):
    S = rng.normal(size=(n, n_state))
    A = rng.uniform(1, 9, size=(n, 1))
    mean, std = policy_forward(params, S)
    # old log-probs chosen so that ratios sit strictly inside and outside the band
    logp_old = gaussian_log_prob(A, mean, std) - np.array([0.05, 0.5, -0.5])[:n]
    adv = np.array([1.0, -0.7, 0.4])[:n]
    ret = rng.normal(size=n)
    return S, A, logp_old, adv, ret


def test_full_loss_gradient_matches_finite_differences(rng):
    p = init_params(3, SMALL, rng)
    batch = toy_batch(rng, params=p)
    _, _, grads, _ = ppo_loss_and_grads(p, *batch, SMALL)
    h = 1e-6

    def total():
        la, lc, _, _ = ppo_loss_and_grads(p, *batch, SMALL)
        return la + lc

    for k in p:
        fd = np.zeros_like(p[k])
        for idx in np.ndindex(p[k].shape):
            old = p[k][idx]
            p[k][idx] = old + h
            up = total()
            p[k][idx] = old - h
            dn = total()
            p[k][idx] = old
            fd[idx] = (up - dn) / (2 * h)
        assert np.linalg.norm(fd - grads[k]) <= 1e-4 * max(np.linalg.norm(fd), 1e-8), k


def test_surrogate_equals_advantage_at_old_policy(rng):
    p = init_params(3, SMALL, rng)
    S, A, _, adv, ret = toy_batch(rng, params=p)
    mean, std = policy_forward(p, S)
    la, _, _, info = ppo_loss_and_grads(p, S, A, gaussian_log_prob(A, mean, std), adv, ret,
                                        PpoHyperparams(hidden=(6, 5), entropy_weight=0.0))
    assert info["mean_ratio"] == pytest.approx(1.0)
    assert la == pytest.approx(-adv.mean())


def make_transitions(p, rng, adv_sign, n=40):
    S = rng.normal(size=(n, 3))
    mean, std = policy_forward(p, S)
    A = mean + std * rng.normal(size=(n, 1))
    logp = gaussian_log_prob(A, mean, std)
    return [Transition(S[i], A[i], float(logp[i]), adv_sign * 1.0, 0.0, i == n - 1) for i in range(n)], S, A


def test_update_moves_log_prob_with_advantage_sign():
    for sign in (1.0, -1.0):
        rng = np.random.default_rng(0)
        hp = PpoHyperparams(hidden=(6, 5), epochs=1, minibatch=64, entropy_weight=0.0, gae_lambda=0.0,
                            gamma=0.0, actor_lr=1e-3)
        p = init_params(3, hp, rng)
        trs, S, A = make_transitions(p, rng, sign)
        # reward = sign, value 0 so raw advantages share the sign; keep it by skipping normalisation
        before = gaussian_log_prob(A, *policy_forward(p, S)).mean()
        adv = np.full(len(trs), sign)
        _, _, grads, _ = ppo_loss_and_grads(p, S, A, np.array([t.log_prob_old for t in trs]), adv,
                                            np.zeros(len(trs)), hp)
        opt = Adam(hp.actor_lr)
        opt.step(p, grads, [k for k in p if k.startswith("actor.")] + ["log_std"])
        after = gaussian_log_prob(A, *policy_forward(p, S)).mean()
        assert np.sign(after - before) == sign


def test_entropy_weight_never_reduces_entropy():
    rng = np.random.default_rng(1)
    p0 = init_params(3, SMALL, rng)
    S, A, logp_old, adv, ret = toy_batch(rng, params=p0)
    result = []
    for w in (0.0, 0.02, 0.5):
        p = {k: v.copy() for k, v in p0.items()}
        hp = PpoHyperparams(hidden=(6, 5), entropy_weight=w)
        _, _, grads, _ = ppo_loss_and_grads(p, S, A, logp_old, adv, ret, hp)
        Adam(1e-4).step(p, grads, list(p))
        result.append(entropy(p))
    assert result[0] <= result[1] <= result[2]


def test_ppo_update_runs_and_reports(rng):
    hp = PpoHyperparams(hidden=(6, 5), epochs=2, minibatch=16)
    p = init_params(3, hp, rng)
    trs, _, _ = make_transitions(p, rng, 1.0)
    for i, t in enumerate(trs):
        t.reward = float(rng.normal())
    info = ppo_update(p, trs, hp, Adam(hp.actor_lr), Adam(hp.critic_lr), rng)
    assert info["n_minibatches"] == 2 * 3
    assert all(np.isfinite(v) for v in info.values())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ppo_update_aborts_on_non_finite_loss(rng):
    hp = PpoHyperparams(hidden=(6, 5), epochs=1, minibatch=8)
    p = init_params(3, hp, rng)
    trs, _, _ = make_transitions(p, rng, 1.0, n=16)
    trs[12].reward = float("inf")
    before = {k: v.copy() for k, v in p.items()}
    with pytest.raises(NumericError, match="minibatch"):
        ppo_update(p, trs, hp, Adam(1e-3), Adam(1e-3), rng)
    for k in before:
        np.testing.assert_array_equal(p[k], before[k])


def test_running_norm_matches_batch_statistics(rng):
    x = rng.normal(loc=300, scale=5, size=(50, 3))
    norm = RunningNorm.zeros(3)
    for chunk in np.array_split(x, 7):
        norm.update(chunk)
    np.testing.assert_allclose(norm.mean, x.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(norm.var, x.var(axis=0), rtol=1e-10)


def test_agent_update_modes(rng):
    agent = PpoAgent(3, PpoHyperparams(hidden=(6, 5), horizon=80, update_mode="horizon"), seed=0)
    for ep in range(2):
        for t in range(40):
            s = agent.observe(rng.normal(size=3))
            a, raw, logp, v = agent.act(s)
            agent.store(Transition(s, raw, logp, 0.0, v, t == 39))
        assert agent.ready() == (ep == 1)
    agent.update()
    assert agent.buffer == [] and agent.n_updates == 1


def test_checkpoint_reload_is_bit_exact(tmp_path, rng):
    agent = PpoAgent(3, PpoHyperparams(hidden=(6, 5)), seed=4)
    for t in range(40):
        s = agent.observe(rng.normal(size=3))
        a, raw, logp, v = agent.act(s)
        agent.store(Transition(s, raw, logp, float(rng.normal()), v, t == 39))
    agent.update()
    path = tmp_path / "agent.json"
    agent.save(path)
    back = PpoAgent.load(path)
    for k in agent.params:
        np.testing.assert_array_equal(back.params[k], agent.params[k])
    np.testing.assert_array_equal(back.norm.mean, agent.norm.mean)
    s = np.ones(3)
    assert back.act(s)[1][0] == agent.act(s)[1][0]
