"""Red's initial-allocation policy: pointer-style sequential node selection.

Each step builds a context from the previously chosen node embedding (a
frozen placeholder at step one), the remaining budget and the graph summary,
scores every node against it, masks already chosen and unaffordable nodes,
and commits exactly Blue's stock at the chosen node (ties go to Red).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .egte import EgteConfig, encode, init_egte, make_batch
from .env import Allocation, GameGraph, GameState
from .numerics import ParamStore, Tensor

PREFIX = "planner"
AFFORD_RTOL = 1e-9


@dataclass(frozen=True)
class PlannerConfig:
    egte: EgteConfig = field(default_factory=EgteConfig)
    score_heads: int = 1
    margin: float = 0.0  # extra amount committed on top of Blue's stock


def init_planner(config: PlannerConfig, seed: int = 0, store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    rng = np.random.default_rng(seed)
    d = config.egte.dim
    if d % config.score_heads:
        raise ValueError("score_heads must divide dim")
    init_egte(store, f"{PREFIX}/egte", config.egte, rng)
    u = nx.init_uniform
    store.add(f"{PREFIX}/dec/w_step", u(rng, (d + 1, d), d + 1))
    store.add(f"{PREFIX}/dec/b_step", u(rng, (d,), d + 1))
    store.add(f"{PREFIX}/dec/w_fix", u(rng, (d, d), d))
    store.add(f"{PREFIX}/dec/h_prev", np.zeros(d), trainable=False)
    store.add(f"{PREFIX}/dec/wq", u(rng, (d, d), d))
    store.add(f"{PREFIX}/dec/wk", u(rng, (d, d), d))
    # value projection exists in the decoder definition but does not enter the scores
    store.add(f"{PREFIX}/dec/wv", u(rng, (d, d), d))
    store.add(f"{PREFIX}/baseline/w", u(rng, (d,), d))
    store.add(f"{PREFIX}/baseline/b", np.zeros(()))
    return store


@dataclass
class PlannerDecision:
    selected: list[int]
    amounts: list[float]
    log_probs: list[float]
    stopped_reason: str  # budget_exhausted | step_limit | no_affordable_node
    step_probs: list[float] = field(default_factory=list)


@dataclass
class PlannerBatchResult:
    decisions: list[PlannerDecision]
    log_prob: Tensor  # (B,) summed log-probability of each decision
    global_embedding: Tensor  # (B, d)
    step_distributions: list[np.ndarray]  # per step, (B, N) probabilities


def decision_to_allocation(decision: PlannerDecision, n_nodes: int) -> Allocation:
    amounts = np.zeros(n_nodes)
    for j, a in zip(decision.selected, decision.amounts):
        amounts[j] = a
    return Allocation(amounts)


def _affordable(cost: np.ndarray, remaining: np.ndarray) -> np.ndarray:
    return cost <= remaining[:, None] * (1 + AFFORD_RTOL) + AFFORD_RTOL


def plan_batch(graphs: Sequence[GameGraph], blue_allocs: Sequence[Allocation], budgets: Sequence[float],
               store: ParamStore, config: PlannerConfig, mode: str = "greedy",
               rng: np.random.Generator | None = None,
               forced: Sequence[Sequence[int]] | None = None) -> PlannerBatchResult:
    """Decode B allocations at once. ``forced`` replays given selection sequences
    (scoring their log-probability) instead of choosing."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None and forced is None:
        raise ValueError("sample mode needs an rng")
    ecfg = config.egte
    b = len(graphs)
    n = graphs[0].n_nodes
    blue = np.stack([a.amounts for a in blue_allocs])
    states = [GameState(red=np.zeros(n), blue=blue[i]) for i in range(b)]
    batch = make_batch(graphs, states, ecfg)
    enc = encode(batch, store, f"{PREFIX}/egte", ecfg)
    h_nodes, h_glob = enc.node_embeddings, enc.global_embedding
    d = ecfg.dim
    heads = config.score_heads
    dh = d // heads

    c_glob = h_glob @ store[f"{PREFIX}/dec/w_fix"]
    keys = h_nodes @ store[f"{PREFIX}/dec/wk"]  # (B, N, d)
    keys = nx.transpose(nx.reshape(keys, (b, n, heads, dh)), (0, 2, 1, 3))  # (B, H, N, dh)
    prev = nx.reshape(store[f"{PREFIX}/dec/h_prev"], (1, d)) + Tensor(np.zeros((b, d)))

    cost = blue + config.margin
    remaining = np.asarray(budgets, dtype=float).copy()
    selected = np.zeros((b, n), dtype=bool)
    done = np.zeros(b, dtype=bool)
    reasons = [""] * b
    picks: list[list[int]] = [[] for _ in range(b)]
    step_lp: list[list[float]] = [[] for _ in range(b)]
    step_p: list[list[float]] = [[] for _ in range(b)]
    dists = []
    total = Tensor(np.zeros(b))
    rows = np.arange(b)

    for step in range(n):
        feasible = ~selected & _affordable(cost, remaining)
        for i in range(b):
            if done[i]:
                continue
            if forced is not None:
                if step >= len(forced[i]):
                    done[i] = True
                    reasons[i] = _reason(selected[i], remaining[i], feasible[i])
                continue
            if selected[i].all():
                done[i], reasons[i] = True, "step_limit"
            elif remaining[i] <= 0:
                done[i], reasons[i] = True, "budget_exhausted"
            elif not feasible[i].any():
                done[i], reasons[i] = True, "no_affordable_node"
        if done.all():
            break
        active = ~done
        r_in = Tensor((remaining / ecfg.resource_scale)[:, None])
        ctx = nx.linear(nx.concat([prev, r_in], axis=-1), store[f"{PREFIX}/dec/w_step"],
                        store[f"{PREFIX}/dec/b_step"]) + c_glob
        q = nx.reshape(ctx @ store[f"{PREFIX}/dec/wq"], (b, heads, dh, 1))
        scores = nx.reshape(keys @ q, (b, heads, n))
        scores = nx.scale(nx.sum_(scores, axis=1), 1.0 / (heads * np.sqrt(dh)))
        mask = feasible.copy()
        mask[~active] = True
        logp = nx.masked_log_softmax(scores, mask)
        probs = np.where(mask, np.exp(logp.data), 0.0)
        dists.append(np.where(active[:, None], probs, 0.0))
        choice = np.zeros(b, dtype=np.int64)
        for i in np.flatnonzero(active):
            if forced is not None:
                j = int(forced[i][step])
                if not feasible[i, j]:
                    raise ValueError(f"forced selection {j} infeasible at step {step} of item {i}")
            elif mode == "greedy":
                j = int(np.argmax(probs[i]))
            else:
                cdf = np.cumsum(probs[i])
                j = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), n - 1))
            choice[i] = j
        picked = nx.index(logp, (rows, choice))
        total = total + picked * Tensor(active.astype(float))
        for i in np.flatnonzero(active):
            j = int(choice[i])
            picks[i].append(j)
            step_lp[i].append(float(logp.data[i, j]))
            step_p[i].append(float(probs[i, j]))
            selected[i, j] = True
            remaining[i] = max(remaining[i] - cost[i, j], 0.0)
        prev = nx.index(h_nodes, (rows, choice))
    for i in range(b):
        if not done[i]:
            reasons[i] = _reason(selected[i], remaining[i], ~selected[i] & _affordable(cost[i:i + 1], remaining[i:i + 1])[0])

    decisions = [
        PlannerDecision(selected=picks[i], amounts=[float(cost[i, j]) for j in picks[i]],
                        log_probs=step_lp[i], stopped_reason=reasons[i], step_probs=step_p[i])
        for i in range(b)
    ]
    return PlannerBatchResult(decisions, total, h_glob, dists)


def _reason(selected: np.ndarray, remaining: float, feasible: np.ndarray) -> str:
    if selected.all():
        return "step_limit"
    if remaining <= 0:
        return "budget_exhausted"
    if not feasible.any():
        return "no_affordable_node"
    return "step_limit"


def plan(graph: GameGraph, blue_alloc: Allocation, budget: float, store: ParamStore,
         config: PlannerConfig, mode: str = "greedy", rng: np.random.Generator | None = None) -> PlannerDecision:
    with nx.no_grad():
        return plan_batch([graph], [blue_alloc], [budget], store, config, mode, rng).decisions[0]


def baseline_value(store: ParamStore, global_embedding: Tensor) -> Tensor:
    """Learned scalar return baseline read from the (detached) graph summary."""
    return nx.detach(global_embedding) @ store[f"{PREFIX}/baseline/w"] + store[f"{PREFIX}/baseline/b"]


class PlannerAgent:
    """Callable allocation policy wrapping trained parameters."""

    def __init__(self, store: ParamStore, config: PlannerConfig | None = None, mode: str = "greedy",
                 seed: int = 0):
        self.store = store
        self.config = config or PlannerConfig()
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.last_decision: PlannerDecision | None = None

    def __call__(self, graph: GameGraph, blue: Allocation, budget: float) -> Allocation:
        self.last_decision = plan(graph, blue, budget, self.store, self.config, self.mode, self.rng)
        return decision_to_allocation(self.last_decision, graph.n_nodes)
