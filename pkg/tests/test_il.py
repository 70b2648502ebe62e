import math

import numpy as np
import pytest

from gated_racer.errors import ConfigError, ExpertCrashError
from gated_racer.expert import ExpertConfig, GateConfig, PurePursuitExpert
from gated_racer.il import (Dataset, Provenance, TrainConfig, _hinge_terms, eil_loss_grad, fit, train,
                            train_bc, train_dagger, train_eil, train_hg_dagger, write_curve,
                            write_intervention_log)
from gated_racer.artifacts import read_csv
from gated_racer.policy import MlpPolicy, mse_loss_grad
from gated_racer.rollout import evaluate_policy
from gated_racer.sim import RacingEnv, SimConfig

from conftest import circle_track
from test_policy import numeric_grad, rel_err, small_policy

SMALL = TrainConfig(budget=600, warm_start=200, iter_steps=100, max_iters=10, epochs=3, hidden_dim=16,
                    eval_max_time=4.0)
EXPERT = ExpertConfig()


def same_params(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.param_names)


def test_bc_zero_budget_returns_initial(oval):
    cfg = TrainConfig(budget=0, hidden_dim=16)
    r = train_bc(oval, EXPERT, cfg)
    assert same_params(r.policy, MlpPolicy.for_sim(SimConfig(), 16, cfg.seed))
    assert r.budget.expert_labels_used == 0


def test_constant_target_fit(oval):
    env = RacingEnv(oval)
    expert = PurePursuitExpert(oval)
    obs = env.observation
    data = Dataset(108)
    target = np.array([0.3, 0.2])
    xs = []
    for _ in range(300):
        x = obs.scan / 30.0
        xs.append(x)
        data.add(x, target, Provenance.EXPERT)
        obs = env.step(expert.act(obs)).observation
    p = MlpPolicy.for_sim(SimConfig(), 32, 0)
    # Adam moves each weight ~lr per step, so reaching atanh(0.3) takes a few hundred steps
    fit(p, data, TrainConfig(epochs=400, hidden_dim=32), np.random.default_rng(0))
    assert np.max(np.abs(p.forward(np.array(xs)) - target)) < 0.01


def test_dagger_single_iteration_equals_bc(oval):
    d = train_dagger(oval, EXPERT, TrainConfig(**{**SMALL.__dict__, "max_iters": 0}))
    b = train_bc(oval, EXPERT, TrainConfig(**{**SMALL.__dict__, "budget": SMALL.warm_start}))
    assert same_params(d.policy, b.policy)


def test_budget_below_warm_start(oval):
    for algo in ("dagger", "hg-dagger", "eil"):
        with pytest.raises(ConfigError):
            train(algo, oval, cfg=TrainConfig(budget=100, warm_start=500))


def test_unknown_algorithm(oval):
    with pytest.raises(ConfigError):
        train("gail", oval)


@pytest.fixture(scope="module")
def small_runs(oval):
    return {a: train(a, oval, EXPERT, GateConfig(), SMALL) for a in ("bc", "dagger", "hg-dagger", "eil")}


def test_label_accounting(small_runs):
    for algo, r in small_runs.items():
        used = r.budget.expert_labels_used
        assert used == r.dataset.count(Provenance.EXPERT), algo
        assert used <= SMALL.budget
        assert r.curve[0].expert_labels == SMALL.warm_start
        labels = [p.expert_labels for p in r.curve]
        assert labels == sorted(labels)


def test_bc_and_dagger_spend_full_budget(small_runs):
    assert small_runs["bc"].budget.expert_labels_used == SMALL.budget
    assert small_runs["dagger"].budget.expert_labels_used == SMALL.budget


def test_dagger_one_label_per_step(small_runs):
    r = small_runs["dagger"]
    steps = sum(e.steps for e in r.intervention_log)
    assert steps == r.budget.expert_labels_used - SMALL.warm_start
    assert all(e.expert_steps == e.steps for e in r.intervention_log)


def test_eil_free_implicit_data(small_runs):
    r = small_runs["eil"]
    steps = sum(e.steps for e in r.intervention_log)
    expert = r.dataset.count(Provenance.EXPERT) - SMALL.warm_start
    assert expert + r.dataset.count(Provenance.GOOD) == steps
    assert r.dataset.count(Provenance.BAD) == sum(e.interventions for e in r.intervention_log)


def test_hg_dagger_discards_novice_steps(small_runs):
    r = small_runs["hg-dagger"]
    assert r.dataset.count(Provenance.GOOD) == r.dataset.count(Provenance.BAD) == 0
    assert r.budget.expert_labels_used - SMALL.warm_start == sum(e.expert_steps for e in r.intervention_log)


@pytest.mark.parametrize("algo", ["hg-dagger", "eil"])
def test_gate_never_fires_returns_warm_start(oval, algo):
    never = GateConfig(math.inf, math.inf)
    r = train(algo, oval, EXPERT, never, SMALL)
    warm = train_bc(oval, EXPERT, TrainConfig(**{**SMALL.__dict__, "budget": SMALL.warm_start}))
    assert r.budget.expert_labels_used == SMALL.warm_start
    assert same_params(r.policy, warm.policy)
    assert all(e.expert_steps == 0 for e in r.intervention_log)


def test_gate_always_fires_labels_every_step(oval):
    always = GateConfig(0.0, 0.0)
    r = train_hg_dagger(oval, EXPERT, always, SMALL)
    for e in r.intervention_log:
        assert e.expert_steps == e.steps
    assert r.budget.expert_labels_used == SMALL.budget


def test_eil_zero_lambdas_match_hg_dagger(oval):
    cfg = TrainConfig(**{**SMALL.__dict__, "lambda_good": 0.0, "lambda_bad": 0.0})
    e = train_eil(oval, EXPERT, GateConfig(), cfg)
    h = train_hg_dagger(oval, EXPERT, GateConfig(), cfg)
    assert same_params(e.policy, h.policy)
    assert np.array_equal(e.dataset.arrays(Provenance.EXPERT)[0], h.dataset.arrays(Provenance.EXPERT)[0])


def test_hg_dataset_subset_of_eil_states(oval):
    cfg = TrainConfig(**{**SMALL.__dict__, "max_iters": 1})
    e = train_eil(oval, EXPERT, GateConfig(), cfg)
    h = train_hg_dagger(oval, EXPERT, GateConfig(), cfg)
    # same warm start and same first rollout: HG's labeled states are exactly EIL's
    assert np.array_equal(h.dataset.arrays(Provenance.EXPERT)[0], e.dataset.arrays(Provenance.EXPERT)[0])
    assert e.budget.expert_labels_used == h.budget.expert_labels_used
    assert len(e.dataset) >= len(h.dataset)


def test_run_is_deterministic(oval):
    a = train("eil", oval, EXPERT, GateConfig(), SMALL)
    b = train("eil", oval, EXPERT, GateConfig(), SMALL)
    assert same_params(a.policy, b.policy)
    assert a.curve == b.curve


def test_expert_crash_aborts():
    tight = circle_track(2.0, half_width=0.3, n=300)
    with pytest.raises(ExpertCrashError, match="expert crashed"):
        train_bc(tight, ExpertConfig(lookahead=3.0, target_speed=10.0), SMALL)


def test_dataset_csv_round_trip(tmp_path, small_runs):
    ds = small_runs["eil"].dataset
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert [p for p, _ in back.order] == [p for p, _ in ds.order]
    for prov in Provenance:
        a, b = ds.arrays(prov), back.arrays(prov)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "provenance" and header[1] == "obs_0" and header[-2:] == ["steer", "speed"]


def test_curve_and_log_csv(tmp_path, small_runs):
    r = small_runs["hg-dagger"]
    write_curve(r.curve, tmp_path / "c.csv", ["seed: 0"])
    write_intervention_log(r.intervention_log, tmp_path / "i.csv")
    rows = read_csv(tmp_path / "c.csv")
    assert list(rows[0]) == ["expert_labels", "distance_m", "lap", "elapsed_s"]
    assert len(rows) == len(r.curve)
    assert [int(x["expert_labels"]) for x in rows] == [p.expert_labels for p in r.curve]
    assert (tmp_path / "c.csv").read_text().startswith("# seed: 0\n")


def test_evaluate_policy_wall_crash(oval):
    class Hard:
        def act(self, obs):
            from gated_racer.sim import Action
            return Action(0.41, 6.0)

    res = evaluate_policy(RacingEnv(oval), Hard())
    assert res.crashed and not res.lap_completed and res.elapsed is None
    assert res.distance < 5.0


def test_evaluate_distance_matches_trajectory(oval):
    res = evaluate_policy(RacingEnv(oval), PurePursuitExpert(oval))
    steps = np.hypot(*np.diff(res.trajectory[:, :2], axis=0).T)
    assert abs(res.distance - steps.sum()) < 1e-9
    assert res.lap_completed and res.distance > 2 * oval.track_length
    # stopping at the first lap leaves one lap of distance
    once = evaluate_policy(RacingEnv(oval), PurePursuitExpert(oval), stop_at_lap=True)
    assert once.elapsed == res.elapsed and once.time == once.elapsed
    assert abs(once.distance - oval.track_length) < 0.05 * oval.track_length


# --------------------------------------------------------------------------
# EIL hinge gradients


def hinge_fd_instance(seed):
    rng = np.random.default_rng(seed)
    p = small_policy(seed)
    gate = GateConfig(float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.03, 0.3)))
    x = rng.normal(size=(3, 5))
    a = p.forward(x)
    # targets near the current outputs so both hinges are active for some rows
    eb = (x, rng.uniform(-0.9, 0.9, (3, 2)))
    gb = (rng.normal(size=(3, 5)), np.clip(a + rng.normal(0, 0.4, a.shape), -0.99, 0.99))
    bb = (x, np.clip(a + rng.normal(0, 0.1, a.shape), -0.99, 0.99))
    lg, lb = rng.uniform(0.1, 1.0, 2)
    _, g = eil_loss_grad(p, gate, eb, gb, bb, lg, lb)
    params = {k: v for k, v in p.params.items() if k != "log_std"}
    num = numeric_grad(lambda: eil_loss_grad(p, gate, eb, gb, bb, lg, lb)[0], params)
    return max(rel_err(g[k], num[k]) for k in params)


def test_hinge_gradient_finite_difference():
    assert max(hinge_fd_instance(s) for s in range(10)) < 1e-4


def test_hinge_semantics():
    scales = np.array([1.0, 1.0])
    a = np.array([[0.0, 0.0]])
    inside = np.array([[0.5, 0.0]])
    outside = np.array([[2.0, 0.0]])
    assert _hinge_terms(a, inside, scales, good=True)[0][0] == 0.0
    assert _hinge_terms(a, outside, scales, good=True)[0][0] == pytest.approx(1.0)
    assert _hinge_terms(a, inside, scales, good=False)[0][0] == pytest.approx(0.25)
    assert _hinge_terms(a, outside, scales, good=False)[0][0] == 0.0


def test_eil_without_implicit_data_is_mse():
    p = small_policy(1)
    rng = np.random.default_rng(1)
    eb = (rng.normal(size=(4, 5)), rng.uniform(-0.9, 0.9, (4, 2)))
    l1, g1 = eil_loss_grad(p, GateConfig(), eb)
    l2, g2 = mse_loss_grad(p, *eb)
    assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g2)


def test_self_consistent_good_data_has_zero_hinge():
    p = small_policy(2)
    x = np.random.default_rng(2).normal(size=(5, 5))
    loss, _ = eil_loss_grad(p, GateConfig(), None, (x, p.forward(x)), None)
    assert loss == 0.0


# --------------------------------------------------------------------------
# on the training map (shared with the acceptance suite)


@pytest.mark.slow
def test_intervention_fraction_non_increasing_on_average():
    from experiments_cache import SMALL_BUDGET, il_runs
    runs = [r for r in il_runs(SMALL_BUDGET, "normal") if r.algorithm == "hg-dagger"]
    n = min(len(r.intervention_log) for r in runs)
    assert n >= 2
    frac = np.mean([[e.intervention_fraction for e in r.intervention_log[:n]] for r in runs], axis=0)
    slope = np.polyfit(np.arange(n), frac, 1)[0]
    print(f"mean intervention fraction per iteration: {np.round(frac, 3).tolist()} slope {slope:.4f}")
    assert slope <= 0.0
    assert frac[-1] <= frac[0]
