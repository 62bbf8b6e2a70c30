"""Layered training of the two agents.

Phase A pre-trains the Planner with REINFORCE on the one-shot allocation
return (transfers disabled). Phase B trains the Transfer agent with PPO while
the Planner is frozen. Phase C fine-tunes the Planner on the allocation
return plus a weighted full-episode utility, with the Transfer agent frozen
and decoding greedily.

Rollouts of many episodes advance in lockstep so each round needs a single
batched policy call.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .env import (Allocation, GameGraph, GameState, ScenarioConfig, apply_transfers, blue_rule_planner,
                  blue_rule_transfer, compute_utilities, control_value, derive_seed, generate_scenario, move,
                  observed_state, resolve_initial)
from .egte import make_batch
from .numerics import NonFiniteGradient, ParamStore, Tensor
from .planner import PREFIX as PLANNER_PREFIX
from .planner import PlannerConfig, baseline_value, decision_to_allocation, plan_batch
from .transfer import PREFIX as TRANSFER_PREFIX
from .transfer import TransferConfig, decode_transfers, entropy, forward, log_density

log = logging.getLogger(__name__)

TRAIN_STREAM = 1


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 10
    minibatch_episodes: int = 10
    episodes_per_iter: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 5e-4
    normalize_advantages: bool = True

    def validate(self) -> None:
        if not 0 <= self.clip < 1:
            raise ValueError("clip must lie in [0, 1)")
        if self.epochs <= 0 or self.minibatch_episodes <= 0 or self.episodes_per_iter <= 0:
            raise ValueError("epochs and batch sizes must be positive")


@dataclass(frozen=True)
class LfrtConfig:
    planner_iters: int = 500
    transfer_iters: int = 3000
    feedback_iters: int = 2000
    feedback_weight: float = 0.5  # lambda
    alpha_s: float = 0.1
    planner_lr: float = 1e-3
    planner_batch: int = 32
    max_rounds: int = 20

    def validate(self) -> None:
        if self.feedback_weight < 0:
            raise ValueError("feedback_weight must be >= 0")
        if self.planner_batch <= 0:
            raise ValueError("planner_batch must be positive")


class ScenarioStream:
    """Deterministic endless supply of training graphs of one size."""

    def __init__(self, n_nodes: int, seed: int = 0, scenario: ScenarioConfig | None = None):
        self.template = scenario or ScenarioConfig(n_nodes=n_nodes)
        self.n_nodes = n_nodes
        self.seed = seed
        self.index = 0

    def sample(self, m: int) -> list[GameGraph]:
        out = []
        for _ in range(m):
            s = derive_seed(self.seed, self.n_nodes, self.index, TRAIN_STREAM)
            cfg = ScenarioConfig(**{**asdict(self.template), "n_nodes": self.n_nodes, "rng_seed": s})
            out.append(generate_scenario(cfg))
            self.index += 1
        return out

    @property
    def blue_budget(self) -> float:
        return self.template.blue_budget_factor * self.n_nodes

    @property
    def red_budget(self) -> float:
        return self.template.red_budget_ratio * self.blue_budget


# ---------------------------------------------------------------------- returns and rewards


def planner_return(graph: GameGraph, state: GameState) -> float:
    """Value Red holds after the initial resolution; no cost term."""
    return control_value(graph, state)


@dataclass(frozen=True)
class RewardTerms:
    delta_control: float
    resource_ratio: float  # already scaled by alpha_s
    cost_penalty: float

    @property
    def total(self) -> float:
        return self.delta_control + self.resource_ratio - self.cost_penalty


def transfer_reward(graph: GameGraph, state: GameState, next_state: GameState, round_cost: float,
                    alpha_s: float = 0.1) -> RewardTerms:
    """Per-round Transfer reward: change in held value, a resource-balance
    bonus on the post-round totals, and Red's round cost relative to Red's
    stock at round start. Zero denominators zero the corresponding term."""
    dc = control_value(graph, next_state) - control_value(graph, state)
    rr, rb = next_state.red_total, next_state.blue_total
    ratio = alpha_s * (rr - rb) / (rr + rb) if rr + rb > 0 else 0.0
    stock = state.red_total
    cost = round_cost / stock if stock > 0 else 0.0
    return RewardTerms(dc, ratio, cost)


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float = 0.99,
                gae_lambda: float = 0.95, last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns for one episode; ``last_value`` bootstraps past the end."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        nxt = v[t + 1] if t + 1 < len(r) else last_value
        delta = r[t] + gamma * nxt - v[t]
        acc = delta + gamma * gae_lambda * acc
        adv[t] = acc
    return adv, adv + v


# ---------------------------------------------------------------------- rollouts


@dataclass
class Step:
    observed: GameState
    sampled: np.ndarray | None  # perturbed logits (N, N) in sample mode
    log_prob: float
    value: float
    reward: RewardTerms


@dataclass
class Rollout:
    graph: GameGraph
    blue_alloc: Allocation
    red_alloc: Allocation
    steps: list[Step] = field(default_factory=list)
    final: GameState | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward.total for s in self.steps])

    @property
    def utility(self):
        return compute_utilities(self.graph, self.final)


def rollout_batch(graphs: Sequence[GameGraph], blue_allocs: Sequence[Allocation], red_allocs: Sequence[Allocation],
                  store: ParamStore, config: TransferConfig, mode: str = "greedy",
                  rng: np.random.Generator | None = None, max_rounds: int = 20,
                  alpha_s: float = 0.1) -> list[Rollout]:
    """Play every episode to the end with Blue's rules and the Transfer policy,
    one batched policy call per round."""
    outs = []
    states, prevs = [], []
    for g, b, r in zip(graphs, blue_allocs, red_allocs):
        outs.append(Rollout(g, b, r))
        states.append(resolve_initial(g, b, r))
        prevs.append(GameState(red=r.amounts, blue=b.amounts, round=0))
    while True:
        live = [k for k, s in enumerate(states)
                if s.round - 1 < max_rounds and s.red_total > 0 and s.blue_total > 0]
        if not live:
            break
        blue_plans, observed = [], []
        for k in live:
            bp = blue_rule_transfer(graphs[k], states[k], prevs[k])
            preview, _, _ = move(graphs[k], states[k].blue, bp)
            blue_plans.append(bp)
            observed.append(observed_state(states[k], preview))
        with nx.no_grad():
            batch = make_batch([graphs[k] for k in live], observed, config.egte)
            fwd = forward(batch, store, config)
            plans, row_lp, sampled = decode_transfers(fwd, batch.adjacency, config, mode, rng)
        for pos, k in enumerate(live):
            nxt = apply_transfers(graphs[k], states[k], plans[pos], blue_plans[pos])
            terms = transfer_reward(graphs[k], states[k], nxt, nxt.red_cost_total - states[k].red_cost_total,
                                    alpha_s)
            outs[k].steps.append(Step(observed[pos], None if sampled is None else sampled[pos],
                                      float(row_lp[pos].sum()), float(fwd.value.data[pos]), terms))
            prevs[k], states[k] = states[k], nxt
    for k, o in enumerate(outs):
        o.final = states[k]
    return outs


def greedy_allocations(graphs: Sequence[GameGraph], blue_allocs: Sequence[Allocation], budget: float,
                       store: ParamStore, config: PlannerConfig) -> list[Allocation]:
    with nx.no_grad():
        res = plan_batch(graphs, blue_allocs, [budget] * len(graphs), store, config, "greedy")
    return [decision_to_allocation(d, g.n_nodes) for d, g in zip(res.decisions, graphs)]


# ---------------------------------------------------------------------- logging


class RunLog:
    """Line-delimited training records. Wall-clock time goes to a separate
    file so that the curve itself is reproducible byte for byte."""

    def __init__(self, path: str | Path | None = None, timing_path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.timing_path = Path(timing_path) if timing_path else None
        self.records: list[dict] = []
        self.t0 = time.perf_counter()
        for p in (self.path, self.timing_path):
            if p is not None:
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(record) + "\n")
        if self.timing_path is not None:
            with self.timing_path.open("a") as f:
                f.write(json.dumps({"iteration": record["iteration"],
                                    "wall_time": time.perf_counter() - self.t0}) + "\n")


@dataclass
class TrainResult:
    curve: list[dict]
    skipped: int = 0

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.curve], dtype=float)


def _maybe_checkpoint(store: ParamStore, prefix: str, path, every: int, it: int, phase: str) -> None:
    if path and every and (it + 1) % every == 0:
        nx.save_checkpoint(path, store, prefix, {"phase": phase, "iteration": it + 1})


# ---------------------------------------------------------------------- Phase A / C


def _planner_update(store: ParamStore, pconfig: PlannerConfig, graphs, blue_allocs, budget: float,
                    rng: np.random.Generator, lr: float, return_fn) -> dict:
    """One REINFORCE step with the learned baseline. ``return_fn`` maps the
    sampled decisions to per-instance returns (and extra log fields)."""
    res = plan_batch(graphs, blue_allocs, [budget] * len(graphs), store, pconfig, "sample", rng)
    returns, extra = return_fn(res.decisions)
    base = baseline_value(store, res.global_embedding)
    adv = returns - base.data
    policy_loss = -nx.mean(res.log_prob * Tensor(adv))
    base_loss = nx.mean(nx.square(base - Tensor(returns)))
    nx.backward(policy_loss + base_loss)
    rec = {"mean_return": float(returns.mean()), "policy_loss": policy_loss.item(),
           "baseline_loss": base_loss.item(), **extra}
    try:
        nx.adam_step(store, lr, prefix=PLANNER_PREFIX)
        rec["skipped"] = False
    except NonFiniteGradient as exc:
        log.warning("planner update skipped: %s", exc)
        rec["skipped"] = True
    return rec


def train_planner_reinforce(stream: ScenarioStream, store: ParamStore, pconfig: PlannerConfig,
                            config: LfrtConfig, iters: int | None = None, seed: int = 0,
                            run_log: RunLog | None = None, checkpoint: str | Path | None = None,
                            checkpoint_every: int = 0) -> TrainResult:
    """Phase A: REINFORCE on the allocation-only return."""
    config.validate()
    iters = config.planner_iters if iters is None else iters
    rng = np.random.default_rng(seed)
    run_log = run_log or RunLog()
    skipped = 0
    for it in range(iters):
        graphs = stream.sample(config.planner_batch)
        blue = [blue_rule_planner(g, stream.blue_budget) for g in graphs]

        def returns(decisions):
            r = np.array([planner_return(g, resolve_initial(g, b, decision_to_allocation(d, g.n_nodes)))
                          for g, b, d in zip(graphs, blue, decisions)])
            return r, {}

        rec = _planner_update(store, pconfig, graphs, blue, stream.red_budget, rng, config.planner_lr, returns)
        skipped += rec["skipped"]
        run_log.write({"phase": "a", "iteration": it, **rec})
        _maybe_checkpoint(store, PLANNER_PREFIX, checkpoint, checkpoint_every, it, "a")
    return TrainResult(run_log.records, skipped)


def lfrt_feedback(stream: ScenarioStream, store: ParamStore, pconfig: PlannerConfig, tconfig: TransferConfig,
                  config: LfrtConfig, iters: int | None = None, seed: int = 0,
                  run_log: RunLog | None = None, checkpoint: str | Path | None = None,
                  checkpoint_every: int = 0) -> TrainResult:
    """Phase C: REINFORCE on allocation return + feedback_weight * episode utility,
    the Transfer agent decoding greedily and left untouched."""
    config.validate()
    iters = config.feedback_iters if iters is None else iters
    rng = np.random.default_rng(seed)
    run_log = run_log or RunLog()
    skipped = 0
    for it in range(iters):
        graphs = stream.sample(config.planner_batch)
        blue = [blue_rule_planner(g, stream.blue_budget) for g in graphs]

        def returns(decisions):
            red = [decision_to_allocation(d, g.n_nodes) for d, g in zip(decisions, graphs)]
            r0 = np.array([planner_return(g, resolve_initial(g, b, a)) for g, b, a in zip(graphs, blue, red)])
            outs = rollout_batch(graphs, blue, red, store, tconfig, "greedy", max_rounds=config.max_rounds,
                                 alpha_s=config.alpha_s)
            u = np.array([o.utility.red_utility for o in outs])
            return r0 + config.feedback_weight * u, {"mean_r0": float(r0.mean()), "mean_utility": float(u.mean())}

        rec = _planner_update(store, pconfig, graphs, blue, stream.red_budget, rng, config.planner_lr, returns)
        skipped += rec["skipped"]
        run_log.write({"phase": "c", "iteration": it, **rec})
        _maybe_checkpoint(store, PLANNER_PREFIX, checkpoint, checkpoint_every, it, "c")
    return TrainResult(run_log.records, skipped)


# ---------------------------------------------------------------------- Phase B


@dataclass
class PpoBatch:
    rollouts: list[Rollout]
    advantages: np.ndarray
    returns: np.ndarray
    old_log_prob: np.ndarray


def prepare_ppo_batch(rollouts: list[Rollout], config: PpoConfig) -> PpoBatch:
    adv, ret, lp = [], [], []
    for o in rollouts:
        a, g = compute_gae(o.rewards, [s.value for s in o.steps], config.gamma, config.gae_lambda)
        adv.append(a)
        ret.append(g)
        lp.append([s.log_prob for s in o.steps])
    return PpoBatch(rollouts, np.concatenate(adv), np.concatenate(ret), np.concatenate(lp))


@dataclass
class PpoLoss:
    total: Tensor
    clip_objective: Tensor
    value_loss: Tensor
    entropy: Tensor
    ratio: np.ndarray
    dropped: int
    clip_fraction: float


def ppo_loss(rollouts: Sequence[Rollout], advantages: np.ndarray, returns: np.ndarray, old_log_prob: np.ndarray,
             store: ParamStore, tconfig: TransferConfig, config: PpoConfig) -> PpoLoss:
    """Clipped surrogate over every step of ``rollouts`` (in order)."""
    steps = [s for o in rollouts for s in o.steps]
    graphs = [o.graph for o in rollouts for _ in o.steps]
    batch = make_batch(graphs, [s.observed for s in steps], tconfig.egte)
    fwd = forward(batch, store, tconfig)
    sampled = np.stack([s.sampled for s in steps])
    new_lp = log_density(fwd, sampled, tconfig.noise_std)
    diff = new_lp.data - old_log_prob
    with np.errstate(over="ignore", invalid="ignore"):
        ratio_np = np.exp(diff)
    keep = np.isfinite(ratio_np)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropping %d samples with non-finite ratio", dropped)
    w = keep.astype(float) / max(keep.sum(), 1)
    # dropped samples get a zero exponent and zero weight
    ratio = nx.exp(new_lp - Tensor(np.where(keep, old_log_prob, new_lp.data)))
    a = Tensor(advantages)
    unclipped = ratio * a
    clipped = nx.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * a
    surrogate = nx.sum_(nx.minimum(unclipped, clipped) * Tensor(w))
    value_loss = nx.mean(nx.square(fwd.value - Tensor(returns)))
    ent = nx.mean(entropy(fwd))
    total = -surrogate + nx.scale(value_loss, config.value_coef) - nx.scale(ent, config.entropy_coef)
    clip_frac = float(np.mean(np.abs(ratio_np[keep] - 1.0) > config.clip)) if keep.any() else 0.0
    return PpoLoss(total, surrogate, value_loss, ent, ratio_np, dropped, clip_frac)


def ppo_update(batch: PpoBatch, store: ParamStore, tconfig: TransferConfig, config: PpoConfig) -> list[dict]:
    adv = batch.advantages
    if config.normalize_advantages and adv.size > 1 and adv.std() > 0:
        adv = (adv - adv.mean()) / adv.std()
    bounds = np.cumsum([0] + [len(o.steps) for o in batch.rollouts])
    stats = []
    for epoch in range(config.epochs):
        for lo in range(0, len(batch.rollouts), config.minibatch_episodes):
            hi = min(lo + config.minibatch_episodes, len(batch.rollouts))
            sl = slice(bounds[lo], bounds[hi])
            if bounds[hi] == bounds[lo]:
                continue  # every episode in this minibatch ended at the initial resolution
            loss = ppo_loss(batch.rollouts[lo:hi], adv[sl], batch.returns[sl], batch.old_log_prob[sl],
                            store, tconfig, config)
            nx.backward(loss.total)
            try:
                nx.adam_step(store, config.lr, prefix=TRANSFER_PREFIX)
            except NonFiniteGradient as exc:
                log.warning("transfer update skipped: %s", exc)
            stats.append({"epoch": epoch, "loss": loss.total.item(), "clip_objective": loss.clip_objective.item(),
                          "value_loss": loss.value_loss.item(), "entropy": loss.entropy.item(),
                          "max_ratio_dev": float(np.max(np.abs(loss.ratio - 1.0))), "dropped": loss.dropped,
                          "clip_fraction": loss.clip_fraction})
    return stats


def train_transfer_ppo(stream: ScenarioStream, store: ParamStore, pconfig: PlannerConfig, tconfig: TransferConfig,
                       config: PpoConfig, lconfig: LfrtConfig, iters: int | None = None, seed: int = 0,
                       run_log: RunLog | None = None, checkpoint: str | Path | None = None,
                       checkpoint_every: int = 0) -> TrainResult:
    """Phase B: PPO on the Transfer agent; the Planner allocates greedily and is never updated."""
    config.validate()
    lconfig.validate()
    iters = lconfig.transfer_iters if iters is None else iters
    rng = np.random.default_rng(seed)
    run_log = run_log or RunLog()
    for it in range(iters):
        graphs = stream.sample(config.episodes_per_iter)
        blue = [blue_rule_planner(g, stream.blue_budget) for g in graphs]
        red = greedy_allocations(graphs, blue, stream.red_budget, store, pconfig)
        outs = rollout_batch(graphs, blue, red, store, tconfig, "sample", rng, lconfig.max_rounds, lconfig.alpha_s)
        batch = prepare_ppo_batch(outs, config)
        stats = ppo_update(batch, store, tconfig, config)
        ep_reward = [float(o.rewards.sum()) for o in outs]
        if not stats:  # no episode reached a transfer round
            stats = [{"max_ratio_dev": 0.0, "loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "dropped": 0,
                      "clip_fraction": 0.0}]
        first, last = stats[0], stats[-1]
        run_log.write({
            "phase": "b", "iteration": it,
            "mean_episode_reward": float(np.mean(ep_reward)),
            "mean_delta_control": float(np.mean([sum(s.reward.delta_control for s in o.steps) for o in outs])),
            "mean_resource_ratio": float(np.mean([sum(s.reward.resource_ratio for s in o.steps) for o in outs])),
            "mean_cost_penalty": float(np.mean([sum(s.reward.cost_penalty for s in o.steps) for o in outs])),
            "mean_controlled_value": float(np.mean([o.utility.red_controlled_value for o in outs])),
            "first_epoch_max_ratio_dev": first["max_ratio_dev"],
            "loss": last["loss"], "value_loss": last["value_loss"], "entropy": last["entropy"],
            "dropped": sum(s["dropped"] for s in stats),
            "clip_fraction": last["clip_fraction"],
        })
        _maybe_checkpoint(store, TRANSFER_PREFIX, checkpoint, checkpoint_every, it, "b")
    return TrainResult(run_log.records)
