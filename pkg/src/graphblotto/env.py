"""Two-stage graph Blotto dynamics: scenarios, resolution, transfers, utilities.

Resources are continuous. A node belongs to Red whenever Red's stock is at
least Blue's (ties, including 0 vs 0, go to Red); the loser's stock at a
node is wiped out. Transfer costs are scored separately and never deducted
from node stocks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components, shortest_path

BUDGET_RTOL = 1e-9
PLAN_ATOL = 1e-9


class InvalidPlan(ValueError):
    pass


class BudgetViolation(ValueError):
    pass


class EpisodeAborted(RuntimeError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GameGraph:
    """Connected weighted undirected graph with node values.

    ``spd`` holds hop counts (the attention-bias index); ``weighted_spd``
    holds weight-summed shortest path lengths.
    """

    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    weights: np.ndarray  # n x n, 0 where no edge
    values: np.ndarray
    adjacency: np.ndarray = field(repr=False)
    degrees: np.ndarray = field(repr=False)
    spd: np.ndarray = field(repr=False)
    weighted_spd: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, n_nodes: int, edges: Iterable[tuple[int, int, float]], values: Sequence[float]) -> "GameGraph":
        if n_nodes < 1:
            raise ValueError("graph needs at least one node")
        values = np.asarray(values, dtype=float)
        if values.shape != (n_nodes,):
            raise ValueError(f"expected {n_nodes} node values, got shape {values.shape}")
        if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
            raise ValueError("node values must lie in [0, 1]")
        w = np.zeros((n_nodes, n_nodes))
        pairs = set()
        for i, j, wt in edges:
            i, j = int(i), int(j)
            if i == j or not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise ValueError(f"bad edge ({i}, {j})")
            if not wt > 0:
                raise ValueError(f"edge ({i}, {j}) weight must be positive, got {wt}")
            a, b = min(i, j), max(i, j)
            if (a, b) in pairs:
                raise ValueError(f"duplicate edge ({a}, {b})")
            pairs.add((a, b))
            w[a, b] = w[b, a] = float(wt)
        adj = w > 0
        if n_nodes > 1:
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp != 1:
                raise ValueError("graph must be connected")
        hops = shortest_path(adj.astype(float), method="D", directed=False, unweighted=True)
        wspd = shortest_path(w, method="D", directed=False)
        return cls(
            n_nodes=n_nodes,
            edges=tuple(sorted(pairs)),
            weights=_frozen(w),
            values=_frozen(values),
            adjacency=_frozen(adj, bool),
            degrees=_frozen(adj.sum(axis=1), np.int64),
            spd=_frozen(np.rint(hops), np.int64),
            weighted_spd=_frozen(wspd),
        )

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])

    def weight(self, i: int, j: int) -> float:
        return float(self.weights[i, j])


@dataclass(frozen=True)
class ScenarioConfig:
    n_nodes: int = 10
    blue_budget_factor: float = 5.0
    red_budget_ratio: float = 0.5
    topology: str = "erdos-renyi-connected"
    edge_weight_range: tuple[float, float] = (0.1, 1.0)
    max_rounds: int = 20
    rng_seed: int = 0
    edge_prob: float | None = None  # default 2 ln N / N
    geometric_radius: float | None = None

    @property
    def blue_budget(self) -> float:
        return self.blue_budget_factor * self.n_nodes

    @property
    def red_budget(self) -> float:
        return self.red_budget_ratio * self.blue_budget

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise ValueError(f"n_nodes must be >= 2, got {self.n_nodes}")
        if self.topology not in ("erdos-renyi-connected", "random-geometric"):
            raise ValueError(f"unknown topology {self.topology!r}")
        lo, hi = self.edge_weight_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad edge_weight_range {self.edge_weight_range}")
        if not self.red_budget < self.blue_budget:
            raise ValueError("Red's budget must be strictly below Blue's")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")


def derive_seed(master: int, n_nodes: int, index: int, stream: int = 0) -> int:
    """Instance seed as a pure function of (master, size, index); ``stream``
    separates training draws from evaluation suites."""
    key = [master, n_nodes, index] if stream == 0 else [master, n_nodes, index, stream]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0])


def generate_scenario(config: ScenarioConfig, max_retries: int = 50) -> GameGraph:
    """Random connected graph with U[0,1] node values and U[lo,hi] edge weights."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    n = config.n_nodes
    values = rng.uniform(0.0, 1.0, size=n)
    if config.topology == "erdos-renyi-connected":
        p = config.edge_prob if config.edge_prob is not None else min(1.0, 2.0 * np.log(n) / n)
        upper = np.triu(rng.uniform(size=(n, n)) < p, k=1)
        adj = upper | upper.T
        n_comp, labels = connected_components(adj, directed=False)
        if n_comp > 1:
            # union with a random spanning tree
            order = rng.permutation(n)
            for k in range(1, n):
                a, b = order[k], order[rng.integers(0, k)]
                adj[a, b] = adj[b, a] = True
    else:
        radius = config.geometric_radius or np.sqrt(2.0 * np.log(n) / (np.pi * n)) * 1.5
        for _ in range(max_retries):
            pts = rng.uniform(size=(n, 2))
            d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
            adj = (d <= radius) & ~np.eye(n, dtype=bool)
            if connected_components(adj, directed=False)[0] == 1:
                break
            radius *= 1.1
        else:
            raise RuntimeError(f"no connected geometric graph after {max_retries} attempts")
    lo, hi = config.edge_weight_range
    iu, ju = np.nonzero(np.triu(adj, k=1))
    weights = rng.uniform(lo, hi, size=len(iu))
    return GameGraph.build(n, zip(iu.tolist(), ju.tolist(), weights.tolist()), values)


@dataclass(frozen=True)
class Allocation:
    amounts: np.ndarray

    def __post_init__(self):
        a = np.array(self.amounts, dtype=float)
        if a.ndim != 1 or np.any(a < 0) or not np.all(np.isfinite(a)):
            raise BudgetViolation("allocation amounts must be a finite nonnegative vector")
        a.setflags(write=False)
        object.__setattr__(self, "amounts", a)

    @property
    def total(self) -> float:
        return float(self.amounts.sum())

    def check_budget(self, budget: float, who: str = "allocation") -> None:
        if self.total > budget * (1 + BUDGET_RTOL) + BUDGET_RTOL:
            raise BudgetViolation(f"{who} spends {self.total!r} > budget {budget!r}")


@dataclass(frozen=True)
class GameState:
    red: np.ndarray
    blue: np.ndarray
    round: int = 0
    red_cost_total: float = 0.0
    blue_cost_total: float = 0.0

    def __post_init__(self):
        for name in ("red", "blue"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def red_total(self) -> float:
        return float(self.red.sum())

    @property
    def blue_total(self) -> float:
        return float(self.blue.sum())

    def red_controlled(self) -> np.ndarray:
        return self.red >= self.blue


@dataclass(frozen=True)
class TransferPlan:
    """Dense proportion matrix ``mu[i, j]``; the diagonal holds self-retention."""

    mu: np.ndarray

    def __post_init__(self):
        m = np.array(self.mu, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "mu", m)

    @classmethod
    def identity(cls, n: int) -> "TransferPlan":
        return cls(np.eye(n))

    @classmethod
    def from_rows(cls, n: int, rows: dict[int, dict[int, float]]) -> "TransferPlan":
        """Build from ``{i: {j: mu_ij}}`` over neighbours; missing self entries are filled in."""
        mu = np.eye(n)
        for i, row in rows.items():
            mu[i, :] = 0.0
            for j, p in row.items():
                if j != i:
                    mu[i, j] = p
            mu[i, i] = row.get(i, 1.0 - sum(p for j, p in row.items() if j != i))
        return cls(mu)

    def row(self, i: int) -> dict[int, float]:
        return {int(j): float(self.mu[i, j]) for j in np.flatnonzero(self.mu[i])}

    def validate(self, graph: GameGraph) -> None:
        n = graph.n_nodes
        mu = self.mu
        if mu.shape != (n, n):
            raise InvalidPlan(f"plan shape {mu.shape} does not match {n} nodes")
        if not np.all(np.isfinite(mu)) or np.any(mu < -PLAN_ATOL) or np.any(mu > 1 + PLAN_ATOL):
            raise InvalidPlan("proportions must lie in [0, 1]")
        allowed = graph.adjacency | np.eye(n, dtype=bool)
        if np.any(np.abs(mu[~allowed]) > 0):
            bad = np.argwhere(~allowed & (mu != 0))[0]
            raise InvalidPlan(f"transfer {tuple(bad)} is not along an edge")
        off = (mu * graph.adjacency).sum(axis=1)
        if np.any(off > 1 + PLAN_ATOL):
            raise InvalidPlan(f"node {int(np.argmax(off))} sends out more than it holds")
        if np.any(np.abs(np.diag(mu) - (1.0 - off)) > PLAN_ATOL):
            raise InvalidPlan("self-retention must equal 1 - outgoing share")


@dataclass(frozen=True)
class UtilityReport:
    red_utility: float
    blue_utility: float
    red_controlled_value: float
    blue_controlled_value: float
    red_cost: float
    blue_cost: float
    rounds_played: int


# ---------------------------------------------------------------------- dynamics


def resolve(red: np.ndarray, blue: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Winner keeps its stock, loser is zeroed; ties go to Red."""
    red_wins = red >= blue
    return np.where(red_wins, red, 0.0), np.where(red_wins, 0.0, blue)


def resolve_initial(graph: GameGraph, blue: Allocation, red: Allocation,
                    blue_budget: float | None = None, red_budget: float | None = None) -> GameState:
    n = graph.n_nodes
    if blue.amounts.shape != (n,) or red.amounts.shape != (n,):
        raise BudgetViolation(f"allocations must have length {n}")
    if blue_budget is not None:
        blue.check_budget(blue_budget, "Blue")
    if red_budget is not None:
        red.check_budget(red_budget, "Red")
    r, b = resolve(red.amounts, blue.amounts)
    return GameState(red=r, blue=b, round=1)


def move(graph: GameGraph, stock: np.ndarray, plan: TransferPlan) -> tuple[np.ndarray, float, np.ndarray]:
    """Apply one side's plan: returns (temporary levels, round cost, per-edge flow matrix)."""
    off = plan.mu * graph.adjacency
    flows = off * stock[:, None]
    temp = stock - flows.sum(axis=1) + flows.sum(axis=0)
    temp = np.maximum(temp, 0.0)
    cost = float((graph.weights * flows).sum())
    return temp, cost, flows


def apply_transfers(graph: GameGraph, state: GameState, red_plan: TransferPlan,
                    blue_plan: TransferPlan) -> GameState:
    red_plan.validate(graph)
    blue_plan.validate(graph)
    tr, red_cost, _ = move(graph, state.red, red_plan)
    tb, blue_cost, _ = move(graph, state.blue, blue_plan)
    r, b = resolve(tr, tb)
    return GameState(red=r, blue=b, round=state.round + 1,
                     red_cost_total=state.red_cost_total + red_cost,
                     blue_cost_total=state.blue_cost_total + blue_cost)


def control_value(graph: GameGraph, state: GameState) -> float:
    return float(graph.values[state.red >= state.blue].sum())


def compute_utilities(graph: GameGraph, state: GameState) -> UtilityReport:
    red_mask = state.red >= state.blue
    red_val = float(graph.values[red_mask].sum())
    blue_val = float(graph.values[~red_mask].sum())
    return UtilityReport(
        red_utility=red_val - state.red_cost_total,
        blue_utility=blue_val - state.blue_cost_total,
        red_controlled_value=red_val,
        blue_controlled_value=blue_val,
        red_cost=state.red_cost_total,
        blue_cost=state.blue_cost_total,
        rounds_played=max(state.round - 1, 0),
    )


# ---------------------------------------------------------------------- Blue rules


def blue_rule_planner(graph: GameGraph, budget: float) -> Allocation:
    if budget <= 0:
        raise ValueError("budget must be positive")
    v = graph.values
    total = v.sum()
    if total <= 0:
        return Allocation(np.full(graph.n_nodes, budget / graph.n_nodes))
    return Allocation(budget * v / total)


def reinforce_lost_neighbors(graph: GameGraph, own_now: np.ndarray, own_prev: np.ndarray,
                             enemy_now: np.ndarray, beta: float = 0.5) -> TransferPlan:
    """Each held node sends ``beta`` of its stock to neighbours lost since the last state,
    split in proportion to node value (uniformly if those values are all 0)."""
    n = graph.n_nodes
    lost = (own_prev > 0) & (enemy_now > 0) & (own_now <= 0)
    mu = np.eye(n)
    for i in np.flatnonzero(own_now > 0):
        targets = np.flatnonzero(graph.adjacency[i] & lost)
        if targets.size == 0:
            continue
        v = graph.values[targets]
        share = v / v.sum() if v.sum() > 0 else np.full(targets.size, 1.0 / targets.size)
        mu[i, targets] = beta * share
        mu[i, i] = 1.0 - beta
    return TransferPlan(mu)


def blue_rule_transfer(graph: GameGraph, state: GameState, prev_state: GameState,
                       beta: float = 0.5) -> TransferPlan:
    return reinforce_lost_neighbors(graph, state.blue, prev_state.blue, state.red, beta)


# ---------------------------------------------------------------------- episodes


class PlannerPolicy(Protocol):
    def __call__(self, graph: GameGraph, blue: Allocation, budget: float) -> Allocation: ...


class TransferPolicy(Protocol):
    def __call__(self, graph: GameGraph, state: GameState, prev_state: GameState,
                 blue_preview: np.ndarray | None = None) -> TransferPlan: ...


@dataclass(frozen=True)
class RoundRecord:
    round: int
    red: np.ndarray
    blue: np.ndarray
    red_cost_total: float
    blue_cost_total: float
    red_round_cost: float
    blue_round_cost: float

    def to_json(self) -> str:
        return json.dumps({
            "round": self.round,
            "red": [float(x) for x in self.red],
            "blue": [float(x) for x in self.blue],
            "red_cost_total": self.red_cost_total,
            "blue_cost_total": self.blue_cost_total,
            "red_round_cost": self.red_round_cost,
            "blue_round_cost": self.blue_round_cost,
        })


@dataclass
class EpisodeTrace:
    blue_alloc: Allocation
    red_alloc: Allocation
    records: list[RoundRecord] = field(default_factory=list)
    red_plans: list[TransferPlan] = field(default_factory=list)
    blue_plans: list[TransferPlan] = field(default_factory=list)
    red_compute_seconds: float = 0.0

    @property
    def states(self) -> list[GameState]:
        return [GameState(r.red, r.blue, r.round, r.red_cost_total, r.blue_cost_total) for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


def default_blue_transfer(graph, state, prev_state, blue_preview=None):
    return blue_rule_transfer(graph, state, prev_state)


def run_episode(graph: GameGraph, red_planner: PlannerPolicy, red_transfer: TransferPolicy,
                blue_planner: Callable[[GameGraph, float], Allocation] | None = None,
                blue_transfer: TransferPolicy | None = None, max_rounds: int = 20,
                blue_budget: float | None = None, red_budget: float | None = None,
                blue_alloc: Allocation | None = None) -> tuple[UtilityReport, EpisodeTrace]:
    """Play one game: Blue allocates, Red allocates seeing Blue, resolve, then
    rounds of Blue transfer -> Red transfer -> simultaneous update.

    Red's transfer policy additionally receives ``blue_preview``, Blue's stock
    after Blue's move this round. Only Red's policy calls are timed.
    """
    n = graph.n_nodes
    blue_budget = 5.0 * n if blue_budget is None else blue_budget
    red_budget = 0.5 * blue_budget if red_budget is None else red_budget
    blue_planner = blue_planner or blue_rule_planner
    blue_transfer = blue_transfer or default_blue_transfer

    if blue_alloc is None:
        blue_alloc = blue_planner(graph, blue_budget)
    t0 = time.perf_counter()
    red_alloc = red_planner(graph, blue_alloc, red_budget)
    spent = time.perf_counter() - t0
    try:
        state = resolve_initial(graph, blue_alloc, red_alloc, blue_budget, red_budget)
    except BudgetViolation as exc:
        raise EpisodeAborted(f"invalid initial allocation: {exc}") from exc
    prev = GameState(red=red_alloc.amounts, blue=blue_alloc.amounts, round=0)
    trace = EpisodeTrace(blue_alloc, red_alloc)
    trace.records.append(RoundRecord(state.round, state.red, state.blue, 0.0, 0.0, 0.0, 0.0))

    while state.round - 1 < max_rounds and state.red_total > 0 and state.blue_total > 0:
        blue_plan = blue_transfer(graph, state, prev)
        try:
            blue_plan.validate(graph)
        except InvalidPlan as exc:
            raise EpisodeAborted(f"Blue plan invalid at round {state.round}: {exc}") from exc
        preview, _, _ = move(graph, state.blue, blue_plan)
        t0 = time.perf_counter()
        red_plan = red_transfer(graph, state, prev, blue_preview=preview)
        spent += time.perf_counter() - t0
        try:
            nxt = apply_transfers(graph, state, red_plan, blue_plan)
        except InvalidPlan as exc:
            raise EpisodeAborted(f"Red plan invalid at round {state.round}: {exc}") from exc
        trace.red_plans.append(red_plan)
        trace.blue_plans.append(blue_plan)
        trace.records.append(RoundRecord(
            nxt.round, nxt.red, nxt.blue, nxt.red_cost_total, nxt.blue_cost_total,
            nxt.red_cost_total - state.red_cost_total, nxt.blue_cost_total - state.blue_cost_total))
        prev, state = state, nxt

    trace.red_compute_seconds = spent
    return compute_utilities(graph, state), trace


def hold_transfer(graph, state, prev_state, blue_preview=None) -> TransferPlan:
    return TransferPlan.identity(graph.n_nodes)


def observed_state(state: GameState, blue_preview: np.ndarray | None) -> GameState:
    """State as seen by Red after Blue's move: Blue's stocks replaced by the preview."""
    return state if blue_preview is None else replace(state, blue=np.asarray(blue_preview))
