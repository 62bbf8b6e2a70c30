import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphblotto import numerics as nx
from graphblotto.egte import EgteConfig, make_batch
from graphblotto.env import (Allocation, GameGraph, GameState, ScenarioConfig, TransferPlan, apply_transfers,
                             blue_rule_planner, generate_scenario, resolve_initial)
from graphblotto.numerics import Tensor
from graphblotto.planner import PlannerConfig, init_planner, plan_batch
from graphblotto.training import (LfrtConfig, PpoConfig, RunLog, ScenarioStream, _planner_update,
                                  compute_gae, greedy_allocations, lfrt_feedback, planner_return, ppo_loss,
                                  prepare_ppo_batch, rollout_batch, train_planner_reinforce, train_transfer_ppo,
                                  transfer_reward)
from graphblotto.transfer import TransferConfig, forward, init_transfer, log_density

SMALL = EgteConfig(layers=1, heads=2, dim=8, ffn_dim=16)
PCFG = PlannerConfig(egte=SMALL)
TCFG = TransferConfig(egte=SMALL, gat_heads=2)


def gae_oracle(rewards, values, gamma, lam):
    """Lambda-weighted blend of n-step advantage estimates, computed term by term."""
    T = len(rewards)
    v = list(values) + [0.0]
    out = np.zeros(T)
    for t in range(T):
        horizon = T - t
        n_step = []
        for n in range(1, horizon + 1):
            ret = sum(gamma ** k * rewards[t + k] for k in range(n)) + gamma ** n * v[t + n]
            n_step.append(ret - v[t])
        # beyond the horizon every n-step estimate equals the full return
        out[t] = (1 - lam) * sum(lam ** (n - 1) * n_step[n - 1] for n in range(1, horizon)) \
            + lam ** (horizon - 1) * n_step[-1]
    return out


# ---------------------------------------------------------------------- GAE


def test_gae_constant_reward_telescopes():
    adv, ret = compute_gae([1, 1, 1], [0, 0, 0], gamma=1.0, gae_lambda=1.0)
    assert ret.tolist() == [3, 2, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=15), st.floats(0, 1), st.integers(0, 1000))
def test_gae_one_step_reduction(rewards, lam, seed):
    values = np.random.default_rng(seed).normal(size=len(rewards))
    adv, _ = compute_gae(rewards, values, gamma=0.0, gae_lambda=lam)
    assert np.allclose(adv, np.array(rewards) - values, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.floats(0, 1), st.floats(0, 1), st.integers(0, 10_000))
def test_gae_matches_quadratic_oracle(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=T), rng.normal(size=T)
    adv, ret = compute_gae(r, v, gamma, lam)
    assert np.max(np.abs(adv - gae_oracle(r, v, gamma, lam))) < 1e-10
    assert np.allclose(ret, adv + v)


# ---------------------------------------------------------------------- rewards


def three_nodes():
    return GameGraph.build(3, [(0, 1, 0.5), (1, 2, 0.25)], [0.3, 0.6, 0.8])


def test_planner_return_examples():
    g = three_nodes()
    s = resolve_initial(g, Allocation([1, 0, 2]), Allocation([1, 0, 0]))
    assert planner_return(g, s) == pytest.approx(0.9)  # node 0 by tie, node 1 uncontested
    s = resolve_initial(g, Allocation([1, 1, 1]), Allocation([0, 0, 0]))
    assert planner_return(g, s) == 0


def test_reward_static_round_is_ratio_only():
    g = three_nodes()
    s = GameState(red=[4, 0, 0], blue=[0, 1, 2], round=1)
    t = apply_transfers(g, s, TransferPlan.identity(3), TransferPlan.identity(3))
    terms = transfer_reward(g, s, t, 0.0, alpha_s=0.1)
    assert terms.delta_control == 0 and terms.cost_penalty == 0
    assert terms.total == pytest.approx(0.1 * (4 - 3) / 7, abs=1e-15)


def test_reward_capture_adds_value_exactly():
    g = three_nodes()
    s = GameState(red=[4, 0, 0], blue=[0, 1, 2], round=1)
    t = GameState(red=[4, 2, 0], blue=[0, 0, 2], round=2)
    base = transfer_reward(g, s, s, 0.0, 0.0)
    terms = transfer_reward(g, s, t, 0.0, 0.0)
    assert terms.total - base.total == pytest.approx(0.6, abs=1e-15)


def test_reward_hand_traced_round():
    g = three_nodes()
    s = GameState(red=[8, 0, 0], blue=[0, 3, 5], round=1)
    t = apply_transfers(g, s, TransferPlan.from_rows(3, {0: {1: 0.5}}), TransferPlan.identity(3))
    terms = transfer_reward(g, s, t, t.red_cost_total - s.red_cost_total, alpha_s=0.1)
    # red moves 4 to node 1 over w=0.5 (cost 2) and beats blue 3 there
    assert terms.delta_control == pytest.approx(0.6)
    assert terms.resource_ratio == pytest.approx(0.1 * (8 - 5) / 13)
    assert terms.cost_penalty == pytest.approx(2.0 / 8)
    assert terms.total == terms.delta_control + terms.resource_ratio - terms.cost_penalty


def test_reward_degenerate_denominators():
    g = three_nodes()
    z = GameState(red=[0, 0, 0], blue=[0, 0, 0], round=1)
    terms = transfer_reward(g, z, z, 0.0)
    assert terms.resource_ratio == 0 and terms.cost_penalty == 0


# ---------------------------------------------------------------------- rollouts and PPO


def small_rollouts(mode="sample", seed=0, m=4, n=6):
    stream = ScenarioStream(n, seed=seed)
    graphs = stream.sample(m)
    store = init_planner(PCFG, seed)
    init_transfer(TCFG, seed, store)
    blue = [blue_rule_planner(g, stream.blue_budget) for g in graphs]
    red = greedy_allocations(graphs, blue, stream.red_budget, store, PCFG)
    outs = rollout_batch(graphs, blue, red, store, TCFG, mode, np.random.default_rng(seed), max_rounds=5)
    return store, outs


def test_rollout_rewards_and_lengths():
    _, outs = small_rollouts()
    for o in outs:
        assert len(o.steps) <= 5
        assert np.all(np.isfinite(o.rewards))
        for s in o.steps:
            assert s.reward.total == s.reward.delta_control + s.reward.resource_ratio - s.reward.cost_penalty


def test_first_epoch_ratio_is_one():
    store, outs = small_rollouts(seed=3)
    batch = prepare_ppo_batch(outs, PpoConfig())
    loss = ppo_loss(outs, batch.advantages, batch.returns, batch.old_log_prob, store, TCFG, PpoConfig())
    assert np.max(np.abs(loss.ratio - 1.0)) < 1e-9
    assert loss.clip_fraction == 0.0


def test_eps_zero_clipped_equals_unclipped():
    store, outs = small_rollouts(seed=3)
    batch = prepare_ppo_batch(outs, PpoConfig())
    steps = [s for o in outs for s in o.steps]
    fwd = forward(make_batch([o.graph for o in outs for _ in o.steps], [s.observed for s in steps], TCFG.egte),
                  store, TCFG)
    exact_old = log_density(fwd, np.stack([s.sampled for s in steps]), TCFG.noise_std).data
    loss = ppo_loss(outs, batch.advantages, batch.returns, exact_old, store, TCFG, PpoConfig(clip=0.0))
    assert np.all(loss.ratio == 1.0)
    w = np.full(len(steps), 1.0 / len(steps))
    assert loss.clip_objective.item() == nx.sum_(Tensor(loss.ratio) * Tensor(batch.advantages) * Tensor(w)).item()


def test_nonfinite_ratio_samples_dropped():
    store, outs = small_rollouts(seed=4)
    batch = prepare_ppo_batch(outs, PpoConfig())
    old = batch.old_log_prob.copy()
    old[0] = -np.inf
    loss = ppo_loss(outs, batch.advantages, batch.returns, old, store, TCFG, PpoConfig())
    assert loss.dropped == 1 and np.isfinite(loss.total.item())
    nx.backward(loss.total)
    assert all(np.all(np.isfinite(store[n].grad)) for n in store.names("transfer") if store[n].grad is not None)


def test_ppo_never_touches_planner():
    stream = ScenarioStream(6, seed=1)
    store = init_planner(PCFG, 0)
    init_transfer(TCFG, 0, store)
    before_p, before_t = store.checksum("planner"), store.checksum("transfer")
    res = train_transfer_ppo(stream, store, PCFG, TCFG, PpoConfig(episodes_per_iter=4, minibatch_episodes=2,
                                                                  epochs=2), LfrtConfig(max_rounds=4), iters=2)
    assert store.checksum("planner") == before_p and store.checksum("transfer") != before_t
    assert len(res.curve) == 2
    assert all(r["first_epoch_max_ratio_dev"] < 1e-9 for r in res.curve)


def test_feedback_never_touches_transfer():
    stream = ScenarioStream(6, seed=1)
    store = init_planner(PCFG, 0)
    init_transfer(TCFG, 0, store)
    before_p, before_t = store.checksum("planner"), store.checksum("transfer")
    res = lfrt_feedback(stream, store, PCFG, TCFG, LfrtConfig(planner_batch=4, max_rounds=4), iters=2)
    assert store.checksum("transfer") == before_t and store.checksum("planner") != before_p
    assert {"mean_r0", "mean_utility"} <= set(res.curve[0])


def test_feedback_weight_zero_reduces_to_phase_a():
    stores = []
    for phase in ("a", "c"):
        store = init_planner(PCFG, 0)
        init_transfer(TCFG, 0, store)
        cfg = LfrtConfig(planner_batch=4, feedback_weight=0.0, max_rounds=3)
        stream = ScenarioStream(6, seed=2)
        if phase == "a":
            train_planner_reinforce(stream, store, PCFG, cfg, iters=2, seed=5)
        else:
            lfrt_feedback(stream, store, PCFG, TCFG, cfg, iters=2, seed=5)
        stores.append(store.checksum("planner"))
    assert stores[0] == stores[1]


def test_zero_returns_with_zero_baseline_leave_params():
    stream = ScenarioStream(6, seed=0)
    store = init_planner(PCFG, 0)
    store["planner/baseline/w"].data[:] = 0.0
    graphs = stream.sample(3)
    blue = [blue_rule_planner(g, stream.blue_budget) for g in graphs]
    before = store.checksum("planner")
    _planner_update(store, PCFG, graphs, blue, stream.red_budget, np.random.default_rng(0), 1e-3,
                    lambda decisions: (np.zeros(len(decisions)), {}))
    assert store.checksum("planner") == before


def test_curve_length_and_log_files(tmp_path):
    log = RunLog(tmp_path / "curve.jsonl", tmp_path / "timing.jsonl")
    res = train_planner_reinforce(ScenarioStream(6, seed=0), init_planner(PCFG), PCFG,
                                  LfrtConfig(planner_batch=4), iters=3, run_log=log)
    assert len(res.curve) == 3
    assert len((tmp_path / "curve.jsonl").read_text().splitlines()) == 3
    assert "wall_time" not in (tmp_path / "curve.jsonl").read_text()
    assert "wall_time" in (tmp_path / "timing.jsonl").read_text()


class TwoNodeStream:
    """Every scenario is the same two-node board where node 0 is worth far more."""

    blue_budget = 10.0
    red_budget = 9.0

    def __init__(self):
        self.graph = GameGraph.build(2, [(0, 1, 1.0)], [0.9, 0.1])

    def sample(self, m):
        return [self.graph] * m


def test_reinforce_concentrates_on_dominant_action():
    stream = TwoNodeStream()
    store = init_planner(PCFG, 0)
    train_planner_reinforce(stream, store, PCFG, LfrtConfig(planner_batch=16), iters=200, seed=0)
    blue = blue_rule_planner(stream.graph, stream.blue_budget)  # (9, 1): one of the two fits
    with nx.no_grad():
        res = plan_batch([stream.graph], [blue], [stream.red_budget], store, PCFG)
    assert res.step_distributions[0][0, 0] > 0.9


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip=1.5).validate()
    with pytest.raises(ValueError):
        LfrtConfig(feedback_weight=-1).validate()


def test_stream_is_seeded():
    a = [g.edges for g in ScenarioStream(8, seed=3).sample(3)]
    b = [g.edges for g in ScenarioStream(8, seed=3).sample(3)]
    assert a == b
    assert ScenarioStream(8, seed=3).red_budget == 20.0
    g = generate_scenario(ScenarioConfig(n_nodes=8, rng_seed=0))
    assert g.n_nodes == 8
