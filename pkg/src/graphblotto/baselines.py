"""Classical comparison strategies for both stages.

Allocation: value-density greedy, simulated annealing over node subsets and
exhaustive enumeration for small graphs. Red always commits exactly Blue's
stock at a node it contests (the cheapest winning amount, as ties go to Red).

Transfer: Red's reactive rule (mirror of Blue's) and a one-round lookahead
search over a coarse proportion grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import (BUDGET_RTOL, Allocation, GameGraph, GameState, TransferPlan, control_value, move,
                  reinforce_lost_neighbors, resolve)

EXACT_MAX_NODES = 20
MYOPIC_MAX_NODES = 12
GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def _fits(cost: float, budget: float) -> bool:
    return cost <= budget * (1 + BUDGET_RTOL) + BUDGET_RTOL


def _claim(blue: np.ndarray, chosen) -> Allocation:
    amounts = np.zeros(blue.shape[0])
    idx = np.asarray(sorted(chosen), dtype=np.int64)
    amounts[idx] = blue[idx]
    return Allocation(amounts)


def greedy_order(graph: GameGraph, blue_alloc: Allocation, order: str = "density") -> list[int]:
    v, s = graph.values, blue_alloc.amounts
    if order == "density":
        with np.errstate(divide="ignore"):
            dens = np.where(s > 0, v / np.where(s > 0, s, 1.0), np.inf)
        return sorted(range(graph.n_nodes), key=lambda i: (-dens[i], -v[i], i))
    if order == "value":
        return sorted(range(graph.n_nodes), key=lambda i: (-v[i], s[i], i))
    raise ValueError(f"unknown order {order!r}")


def greedy_alloc(graph: GameGraph, blue_alloc: Allocation, budget: float, order: str = "density") -> Allocation:
    """Walk nodes by value density (free nodes first), claiming each one that still fits.

    ``order="value"`` ranks by node value instead; it is not the reference
    baseline but is useful when densities are all equal.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    blue = blue_alloc.amounts
    remaining = float(budget)
    chosen = []
    for i in greedy_order(graph, blue_alloc, order):
        if _fits(blue[i], remaining):
            chosen.append(i)
            remaining = max(remaining - blue[i], 0.0)
    return _claim(blue, chosen)


def allocation_value(graph: GameGraph, blue_alloc: Allocation, red_alloc: Allocation) -> float:
    """Value Red holds right after the initial resolution."""
    red, blue = resolve(red_alloc.amounts, blue_alloc.amounts)
    return float(graph.values[red >= blue].sum())


# ---------------------------------------------------------------------- annealing


@dataclass(frozen=True)
class SaConfig:
    initial_temperature: float = 1.0
    cooling_rate: float = 0.995
    iterations: int = 5000
    neighbor_move: str = "swap-node"  # or "shift-amount"

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0 < self.cooling_rate < 1:
            raise ValueError("cooling_rate must lie in (0, 1)")
        if self.initial_temperature < 0:
            raise ValueError("initial_temperature must be nonnegative")
        if self.neighbor_move not in ("swap-node", "shift-amount"):
            raise ValueError(f"unknown neighbor_move {self.neighbor_move!r}")


@dataclass
class SaResult:
    allocation: Allocation
    value: float
    best_curve: np.ndarray  # best-ever objective after each iteration


def anneal(graph: GameGraph, blue_alloc: Allocation, budget: float, config: SaConfig | None = None,
           rng: np.random.Generator | None = None) -> SaResult:
    """Simulated annealing over feasible claim sets.

    ``swap-node`` proposes toggling one node or exchanging a claimed node for
    an unclaimed one; ``shift-amount`` frees one claimed node's amount and
    spends it on randomly ordered affordable nodes.
    """
    config = config or SaConfig()
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    n = graph.n_nodes
    v, cost = graph.values, blue_alloc.amounts

    sel = np.zeros(n, dtype=bool)
    spent = 0.0
    for i in rng.permutation(n):
        if _fits(spent + cost[i], budget):
            sel[i] = True
            spent += cost[i]
    cur = float(v[sel].sum())
    best, best_sel = cur, sel.copy()
    curve = np.empty(config.iterations)
    temp = config.initial_temperature

    for it in range(config.iterations):
        cand = sel.copy()
        if config.neighbor_move == "swap-node":
            i = int(rng.integers(n))
            if cand[i] or rng.random() < 0.5:
                cand[i] = not cand[i]
            else:
                on = np.flatnonzero(cand)
                if on.size:
                    cand[on[rng.integers(on.size)]] = False
                cand[i] = True
        else:
            on = np.flatnonzero(cand)
            if on.size:
                cand[on[rng.integers(on.size)]] = False
            left = budget - float(cost[cand].sum())
            for j in rng.permutation(np.flatnonzero(~cand)):
                if _fits(cost[j], left):
                    cand[j] = True
                    left -= cost[j]
        if _fits(float(cost[cand].sum()), budget):
            new = float(v[cand].sum())
            delta = cur - new
            if delta <= 0 or (temp > 0 and rng.random() < np.exp(-delta / temp)):
                sel, cur = cand, new
                if cur > best:
                    best, best_sel = cur, sel.copy()
        curve[it] = best
        temp *= config.cooling_rate

    return SaResult(_claim(cost, np.flatnonzero(best_sel)), best, curve)


def sa_alloc(graph: GameGraph, blue_alloc: Allocation, budget: float, config: SaConfig | None = None,
             rng: np.random.Generator | None = None) -> Allocation:
    return anneal(graph, blue_alloc, budget, config, rng).allocation


# ---------------------------------------------------------------------- exhaustive


def exact_alloc_small(graph: GameGraph, blue_alloc: Allocation, budget: float,
                      max_nodes: int = EXACT_MAX_NODES) -> tuple[Allocation, float]:
    """Best claim set by enumerating all subsets. Among equal-value optima the
    lexicographically smallest sorted index tuple wins."""
    n = graph.n_nodes
    if n > max_nodes:
        raise ValueError(f"exhaustive search refuses {n} nodes (limit {max_nodes})")
    masks = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(bool)
    cost = masks.astype(float) @ blue_alloc.amounts
    value = masks.astype(float) @ graph.values
    feasible = cost <= budget * (1 + BUDGET_RTOL) + BUDGET_RTOL
    value = np.where(feasible, value, -np.inf)
    top = np.flatnonzero(value == value.max())
    best = min((tuple(np.flatnonzero(masks[k]).tolist()) for k in top))
    alloc = _claim(blue_alloc.amounts, best)
    return alloc, float(graph.values[list(best)].sum())


# ---------------------------------------------------------------------- transfers


def red_rule_transfer(graph: GameGraph, state: GameState, prev_state: GameState,
                      blue_preview: np.ndarray | None = None, beta: float = 0.5) -> TransferPlan:
    """Red-held nodes send ``beta`` toward neighbours Red lost since the previous state."""
    return reinforce_lost_neighbors(graph, state.red, prev_state.red, state.blue, beta)


def _row_options(degree: int, grid=GRID, room: float = 1.0):
    """All grid vectors over ``degree`` neighbours whose total is at most 1 (pruned as it goes)."""
    if degree == 0:
        yield ()
        return
    for g in grid:
        if g <= room + 1e-12:
            for rest in _row_options(degree - 1, grid, room - g):
                yield (g,) + rest


def myopic_transfer_optimizer(graph: GameGraph, state: GameState, blue_preview: np.ndarray | None = None,
                              grid=GRID, max_nodes: int = MYOPIC_MAX_NODES) -> TransferPlan:
    """Per source row, pick the grid row with the best one-round gain
    ``dC - cost / total Red stock`` while every other Red row holds and Blue's
    stock is fixed at ``blue_preview`` (its current stock if omitted).
    Exact only within the grid."""
    n = graph.n_nodes
    if n > max_nodes:
        raise ValueError(f"myopic search refuses {n} nodes (limit {max_nodes})")
    blue = state.blue if blue_preview is None else np.asarray(blue_preview, dtype=float)
    seen = GameState(red=state.red, blue=blue, round=state.round)
    base = control_value(graph, seen)
    total = state.red_total
    mu = np.eye(n)
    hold = TransferPlan.identity(n)
    for i in np.flatnonzero(state.red > 0):
        nbrs = graph.neighbors(i)
        if nbrs.size == 0:
            continue
        best_gain, best_row = 0.0, None
        for combo in _row_options(nbrs.size, grid):
            if not any(combo):
                continue
            m = np.array(hold.mu)
            m[i, nbrs] = combo
            m[i, i] = 1.0 - sum(combo)
            temp, c, _ = move(graph, state.red, TransferPlan(m))
            r, b = resolve(temp, blue)
            gain = float(graph.values[r >= b].sum()) - base - (c / total if total > 0 else 0.0)
            if gain > best_gain + 1e-12:
                best_gain, best_row = gain, m[i]
        if best_row is not None:
            mu[i] = best_row
    return TransferPlan(mu)


def myopic_transfer(graph: GameGraph, state: GameState, prev_state: GameState,
                    blue_preview: np.ndarray | None = None) -> TransferPlan:
    return myopic_transfer_optimizer(graph, state, blue_preview)

