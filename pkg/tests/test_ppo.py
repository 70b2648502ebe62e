import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gated_racer.errors import ConfigError
from gated_racer.policy import LOG_STD_MAX, LOG_STD_MIN, Adam, MlpPolicy, gaussian_log_prob
from gated_racer.ppo import (PpoConfig, RewardConfig, RolloutBuffer, ValueNet, compute_gae, ppo_update,
                             reward, surrogate_loss_grad, train_ppo, write_reward_curve)
from gated_racer.artifacts import read_csv
from gated_racer.sim import SimConfig

from test_policy import numeric_grad, rel_err

ABS = RewardConfig()
LITERAL = RewardConfig(steer_mode="literal")


# --------------------------------------------------------------------------
# reward


@pytest.mark.parametrize("cfg", [ABS, LITERAL])
def test_reward_examples(cfg):
    assert reward(0.0, True, 0.0, cfg) == -0.5
    assert reward(0.0, False, 0.05, cfg) == 0.02
    assert reward(0.5, False, 0.2, cfg) == -0.014


def test_reward_branch_order():
    # a crash with a large lateral error still takes the crash branch
    assert reward(0.0, True, 3.0) == -0.5
    assert reward(0.0, False, 0.1) == 0.02  # deadband is strict


def test_reward_abs_symmetry():
    assert reward(-0.5, False, 0.2, ABS) == reward(0.5, False, 0.2, ABS)
    assert reward(-0.5, False, 0.2, LITERAL) == -0.004


@given(st.floats(0.0, 5.0), st.booleans(), st.floats(0.0, 25.0))
def test_reward_modes_agree_for_non_negative_steer(w, crashed, e):
    assert reward(w, crashed, e, ABS) == reward(w, crashed, e, LITERAL)


@given(st.floats(-5.0, 5.0), st.booleans(), st.floats(0.0, 25.0), st.sampled_from([ABS, LITERAL]))
def test_reward_bounds(w, crashed, e, cfg):
    assert -0.52 <= reward(w, crashed, e, cfg) <= 0.02


def test_reward_config_validation():
    with pytest.raises(ConfigError):
        RewardConfig(steer_mode="signed")
    with pytest.raises(ConfigError):
        RewardConfig(crash_penalty=-1.0)


@pytest.mark.parametrize("kw", [{"clip": 0.0}, {"clip": 1.0}, {"gamma": 0.0}, {"gamma": 1.5},
                                {"lam": -0.1}, {"lam": 1.1}, {"horizon": 0}])
def test_ppo_config_validation(kw):
    with pytest.raises(ConfigError):
        PpoConfig(**kw)


# --------------------------------------------------------------------------
# GAE


def brute_force_gae(r, v, d, gamma, lam):
    n = len(r)
    delta = [r[t] + gamma * v[t + 1] * (0.0 if d[t] else 1.0) - v[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, w = 0.0, 1.0
        for k in range(t, n):
            total += w * delta[k]
            if d[k]:
                break
            w *= gamma * lam
        adv.append(total)
    return np.array(adv)


def test_gae_exhaustive_small_horizons():
    rng = np.random.default_rng(0)
    count = 0
    for n in range(1, 13):
        for mask in itertools.product([False, True], repeat=n):
            r = rng.normal(size=n)
            v = rng.normal(size=n + 1)
            gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
            adv, ret = compute_gae(r, v, np.array(mask), gamma, lam)
            want = brute_force_gae(r, v, mask, gamma, lam)
            assert np.max(np.abs(adv - want)) < 1e-10
            assert np.max(np.abs(ret - (want + v[:-1]))) < 1e-10
            count += 1
    assert count == 2 ** 13 - 2


def test_gae_zero_inputs():
    adv, ret = compute_gae(np.zeros(7), np.zeros(8), np.zeros(7, bool), 0.99, 0.95)
    assert np.all(adv == 0) and np.all(ret == 0)


def test_gae_myopic():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=10), rng.normal(size=11)
    adv, _ = compute_gae(r, v, rng.random(10) < 0.3, 0.0, 0.95)
    assert np.array_equal(adv, r - v[:-1])


def test_gae_shape_mismatch():
    with pytest.raises(ValueError):
        compute_gae(np.zeros(5), np.zeros(5), np.zeros(5, bool), 0.99, 0.95)
    with pytest.raises(ValueError):
        compute_gae(np.zeros(5), np.zeros(6), np.zeros(4, bool), 0.99, 0.95)


# --------------------------------------------------------------------------
# clipped surrogate


def toy(seed, d=4, h=6):
    rng = np.random.default_rng(seed)
    p = MlpPolicy(d, h, rng)
    p.W2 = rng.normal(0, 0.5, p.W2.shape)
    p.log_std = rng.uniform(-1.5, 0.0, 2)
    v = ValueNet(d, h, rng)
    return p, v, rng


def toy_batch(p, rng, n=6, clip=0.2):
    obs = rng.normal(size=(n, p.input_dim))
    acts = np.tanh(p(obs) + np.exp(p.log_std) * rng.normal(size=(n, 2)))
    logp = gaussian_log_prob(p, obs, acts)
    # ratios spread over both sides of the clip band, kept away from its edges
    ratios = rng.choice([0.5, 0.9, 1.05, 1.4], size=n) * rng.uniform(0.97, 1.03, n)
    old = logp - np.log(ratios)
    adv = rng.normal(size=n)
    ret = rng.normal(size=n)
    return obs, acts, old, adv, ret


def surrogate_fd_instance(seed):
    p, v, rng = toy(seed)
    cfg = PpoConfig(entropy_coeff=float(rng.uniform(0, 0.01)))
    batch = toy_batch(p, rng)
    _, pg, vg, _ = surrogate_loss_grad(p, v, *batch, cfg)
    f = lambda: surrogate_loss_grad(p, v, *batch, cfg)[0]  # noqa: E731
    num_p = numeric_grad(f, p.params)
    num_v = numeric_grad(f, v.params)
    err = max(rel_err(pg[k], num_p[k]) for k in p.params)
    return max(err, max(rel_err(vg[k], num_v[k]) for k in v.params))


def test_surrogate_gradient_finite_difference():
    assert max(surrogate_fd_instance(s) for s in range(10)) < 1e-4


def test_clip_gradient_zero_outside_band():
    p, v, rng = toy(3)
    cfg = PpoConfig(entropy_coeff=0.0, value_coeff=0.0)
    obs, acts, _, _, ret = toy_batch(p, rng)
    logp = gaussian_log_prob(p, obs, acts)
    adv = np.abs(rng.normal(size=len(obs))) + 0.1
    _, pg, _, stats = surrogate_loss_grad(p, v, obs, acts, logp - math.log(1.5), adv, ret, cfg)
    assert stats["clip_fraction"] == 1.0
    assert all(np.all(g == 0) for g in pg.values())
    # inside the band the gradient is live
    _, pg, _, _ = surrogate_loss_grad(p, v, obs, acts, logp, adv, ret, cfg)
    assert any(np.any(g != 0) for g in pg.values())


def test_zero_advantages_leave_policy_unchanged():
    p, v, rng = toy(4)
    obs, acts, old, _, ret = toy_batch(p, rng, n=128)
    buf = RolloutBuffer(obs, acts, old, np.zeros(len(obs)), ret)
    before = {k: a.copy() for k, a in p.params.items()}
    ppo_update(p, v, buf, PpoConfig(entropy_coeff=0.0), np.random.default_rng(0), Adam(3e-4), Adam(3e-4))
    assert all(np.array_equal(before[k], a) for k, a in p.params.items())
    # with the entropy bonus only log_std moves
    ppo_update(p, v, buf, PpoConfig(), np.random.default_rng(0), Adam(3e-4), Adam(3e-4))
    assert all(np.array_equal(before[k], p.params[k]) for k in ("W1", "b1", "W2", "b2"))
    assert np.all(p.log_std > before["log_std"])


# --------------------------------------------------------------------------
# training loop


def test_zero_steps_returns_initial(oval):
    r = train_ppo(oval, PpoConfig(total_steps=0, hidden_dim=16))
    init = MlpPolicy.for_sim(SimConfig(), 16, 0)
    assert all(np.array_equal(init.params[k], r.policy.params[k]) for k in ("W1", "b1", "W2", "b2"))
    assert r.curve == []


def test_bootstrap_copies_without_mutating(oval):
    init = MlpPolicy.for_sim(SimConfig(), 16, 7)
    snapshot = {k: a.copy() for k, a in init.params.items()}
    r = train_ppo(oval, PpoConfig(total_steps=256, horizon=128, hidden_dim=16), init=init)
    assert all(np.array_equal(snapshot[k], a) for k, a in init.params.items())
    assert not np.array_equal(r.policy.W1, init.W1)
    assert r.config["bootstrapped"] is True


def test_bootstrap_shape_mismatch(oval):
    with pytest.raises(ConfigError):
        train_ppo(oval, PpoConfig(total_steps=10), init=MlpPolicy(50, 16))


def test_short_run_deterministic_and_bounded(oval, tmp_path):
    cfg = PpoConfig(total_steps=1024, horizon=256, hidden_dim=16, lr=1e-2, seed=2)
    a = train_ppo(oval, cfg)
    b = train_ppo(oval, cfg)
    assert a.curve == b.curve
    assert [p.env_steps for p in a.curve] == [256, 512, 768, 1024]
    assert LOG_STD_MIN <= a.policy.log_std.min() and a.policy.log_std.max() <= LOG_STD_MAX
    assert all(np.all(np.isfinite(x)) for x in a.policy.params.values())
    write_reward_curve(a.curve, tmp_path / "r.csv")
    write_reward_curve(b.curve, tmp_path / "r2.csv")
    assert (tmp_path / "r.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    assert list(read_csv(tmp_path / "r.csv")[0]) == ["env_steps", "mean_episode_reward", "mean_episode_length"]
