"""Finite-difference and invariant self-checks shared by the CLI and the test suite.

Gradient checks use a small architecture (6 nodes, width 8, 2 heads, 2
layers) so every coordinate can be probed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .egte import EgteConfig, encode, init_egte, make_batch
from .env import (GameState, ScenarioConfig, TransferPlan, apply_transfers, blue_rule_planner,
                  generate_scenario, move, resolve)
from .numerics import ParamStore, Tensor
from .planner import PlannerConfig, baseline_value, init_planner, plan_batch
from .transfer import TransferConfig, entropy, forward, init_transfer, log_density, row_probs, sample_logits

SMALL_EGTE = EgteConfig(layers=2, heads=2, dim=8, ffn_dim=16)
# small step: with h=1e-4 a ReLU pre-activation occasionally crosses zero
PIPELINE_STEP = 1e-5
LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return nx.sum_(t * Tensor(w))


# ---------------------------------------------------------------------- ops


def op_cases():
    """(name, is_linear, input shapes, fn) for each differentiable op."""
    mask = np.array([[True, False, True, True], [True, True, False, True], [False, True, True, True]])
    return [
        ("add", True, [(3, 4), (4,)], lambda a, b: a + b),
        ("sub", True, [(3, 4), (3, 4)], lambda a, b: a - b),
        ("scale", True, [(3, 4)], lambda a: nx.scale(a, -1.7)),
        ("sum", True, [(3, 4)], lambda a: nx.sum_(a, axis=1)),
        ("mean", True, [(3, 4)], lambda a: nx.mean(a, axis=0)),
        ("reshape", True, [(3, 4)], lambda a: nx.reshape(a, (2, 6))),
        ("transpose", True, [(2, 3, 4)], lambda a: nx.transpose(a, (2, 0, 1))),
        ("concat", True, [(3, 2), (3, 4)], lambda a, b: nx.concat([a, b], axis=1)),
        ("index", True, [(5, 4)], lambda a: nx.index(a, (np.array([0, 2, 2, 4]), np.array([1, 1, 3, 0])))),
        ("row_select", True, [(5, 4)], lambda a: nx.row_select(a, np.array([[0, 3], [3, 4]]))),
        ("matmul", False, [(2, 3, 4), (4, 5)], lambda a, b: a @ b),
        ("matmul_vec", False, [(3, 4), (4,)], lambda a, b: a @ b),
        ("mul", False, [(3, 4), (3, 1)], lambda a, b: a * b),
        ("linear", False, [(3, 4), (4, 2), (2,)], lambda x, w, b: nx.linear(x, w, b)),
        ("square", False, [(3, 4)], nx.square),
        ("exp", False, [(3, 4)], nx.exp),
        ("log", False, [(3, 4)], lambda a: nx.log(nx.exp(a) + 1.0)),
        ("tanh", False, [(3, 4)], nx.tanh),
        ("sigmoid", False, [(3, 4)], nx.sigmoid),
        ("relu", False, [(3, 4)], nx.relu),
        ("leaky_relu", False, [(3, 4)], nx.leaky_relu),
        ("minimum", False, [(3, 4), (3, 4)], nx.minimum),
        ("clip", False, [(3, 4)], lambda a: nx.clip(a, -0.5, 0.5)),
        ("layer_norm", False, [(3, 4), (4,), (4,)], lambda x, g, b: nx.layer_norm(x, g, b)),
        ("masked_softmax", False, [(3, 4)], lambda a: nx.masked_softmax(a, mask)),
        ("masked_log_softmax", False, [(3, 4)], lambda a: nx.masked_log_softmax(a, mask)),
    ]


def _away_from_kinks(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, linear, shapes, fn in op_cases():
        store = ParamStore()
        args = []
        for k, shape in enumerate(shapes):
            x = rng.standard_normal(shape)
            if name in ("relu", "leaky_relu"):
                x = _away_from_kinks(x)
            if name == "clip":
                x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.2, x)
            if name == "minimum" and k == 1:
                x = args[0].data + np.where(rng.random(shape) < 0.5, 0.3, -0.3)
            args.append(store.add(f"x{k}", x))
        y0 = fn(*args)
        w = rng.standard_normal(y0.shape)
        report = nx.finite_difference_check(store, lambda: _weighted_sum(fn(*args), w),
                                            LINEAR_TOL if linear else NONLINEAR_TOL, h=1e-5)
        out.append(CheckResult(f"op:{name}", report.max_error, report.tolerance))
    return out


# ---------------------------------------------------------------------- pipelines


def _small_boards(seed: int, n: int = 6, count: int = 2):
    rng = np.random.default_rng(seed)
    graphs, states = [], []
    for k in range(count):
        g = generate_scenario(ScenarioConfig(n_nodes=n, rng_seed=seed * 100 + k))
        red = rng.uniform(0, 6, n) * (rng.random(n) < 0.6)
        blue = rng.uniform(0, 6, n) * (rng.random(n) < 0.6)
        r, b = resolve(red, blue)
        graphs.append(g)
        states.append(GameState(red=r, blue=b, round=1))
    return graphs, states


def check_egte(seed: int = 0, tolerance: float = NONLINEAR_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_egte(store, "egte", SMALL_EGTE, rng)
    # nonzero structural parameters so their gradient paths are exercised
    store["egte/spd_bias"].data = rng.normal(0, 0.5, store["egte/spd_bias"].shape)
    store["egte/virtual"].data = rng.normal(0, 0.5, store["egte/virtual"].shape)
    graphs, states = _small_boards(seed)
    batch = make_batch(graphs, states, SMALL_EGTE)
    wn = rng.standard_normal((len(graphs), 6, SMALL_EGTE.dim))
    wg = rng.standard_normal((len(graphs), SMALL_EGTE.dim))

    def loss():
        out = encode(batch, store, "egte", SMALL_EGTE)
        return _weighted_sum(out.node_embeddings, wn) + _weighted_sum(out.global_embedding, wg)

    rep = nx.finite_difference_check(store, loss, tolerance, PIPELINE_STEP)
    return CheckResult("egte", rep.max_error, tolerance)


def check_planner(seed: int = 0, tolerance: float = NONLINEAR_TOL) -> CheckResult:
    cfg = PlannerConfig(egte=SMALL_EGTE, score_heads=2)
    store = init_planner(cfg, seed)
    rng = np.random.default_rng(seed)
    store["planner/egte/spd_bias"].data = rng.normal(0, 0.5, store["planner/egte/spd_bias"].shape)
    graphs, _ = _small_boards(seed)
    blue = [blue_rule_planner(g, 30.0) for g in graphs]
    budgets = [15.0] * len(graphs)
    with nx.no_grad():
        ref = plan_batch(graphs, blue, budgets, store, cfg, "sample", np.random.default_rng(seed))
    forced = [d.selected for d in ref.decisions]
    target = rng.standard_normal(len(graphs))

    def loss():
        res = plan_batch(graphs, blue, budgets, store, cfg, forced=forced)
        base = baseline_value(store, res.global_embedding)
        return nx.sum_(res.log_prob) + nx.sum_(nx.square(base - Tensor(target)))

    # the baseline reads a detached summary, so the encoder is probed through the policy term only
    policy = [n for n in store.names() if not n.startswith("planner/baseline")]
    rep = nx.finite_difference_check(store, lambda: nx.sum_(
        plan_batch(graphs, blue, budgets, store, cfg, forced=forced).log_prob), tolerance, PIPELINE_STEP, policy)
    rep_b = nx.finite_difference_check(store, loss, tolerance, PIPELINE_STEP, store.names("planner/baseline"))
    return CheckResult("planner", max(rep.max_error, rep_b.max_error), tolerance)


def check_transfer(seed: int = 0, tolerance: float = NONLINEAR_TOL) -> CheckResult:
    cfg = TransferConfig(egte=SMALL_EGTE, gat_heads=2, self_bias_init=0.5)
    store = init_transfer(cfg, seed)
    rng = np.random.default_rng(seed)
    store["transfer/egte/spd_bias"].data = rng.normal(0, 0.5, store["transfer/egte/spd_bias"].shape)
    graphs, states = _small_boards(seed)
    batch = make_batch(graphs, states, cfg.egte)
    with nx.no_grad():
        z = sample_logits(forward(batch, store, cfg), cfg.noise_std, rng)
    wp = rng.standard_normal((len(graphs), 6, 6))

    def policy_loss():
        fwd = forward(batch, store, cfg)
        lp = nx.scale(nx.sum_(log_density(fwd, z, cfg.noise_std)), 1e-2)
        return lp + nx.sum_(entropy(fwd)) + _weighted_sum(row_probs(fwd), wp)

    def full_loss():
        fwd = forward(batch, store, cfg)
        return policy_loss() + nx.sum_(nx.square(fwd.value))

    # the critic reads a detached summary, so only its own weights see the value term
    critic = [n for n in store.names() if n.startswith("transfer/value/")]
    policy = [n for n in store.names() if n not in critic]
    a = nx.finite_difference_check(store, policy_loss, tolerance, PIPELINE_STEP, names=policy)
    b = nx.finite_difference_check(store, full_loss, tolerance, PIPELINE_STEP, names=critic)
    return CheckResult("transfer", max(a.max_error, b.max_error), tolerance)


# ---------------------------------------------------------------------- environment


def check_env_rounds(rounds: int = 10_000, seed: int = 0) -> dict[str, float]:
    """Randomised single rounds: returns the worst violation of each invariant (all should be 0 / tiny)."""
    rng = np.random.default_rng(seed)
    worst = {"conservation": 0.0, "exclusive": 0.0, "tie_to_red": 0.0, "cost_additivity": 0.0,
             "cost_formula": 0.0}
    graphs = [generate_scenario(ScenarioConfig(n_nodes=int(n), rng_seed=int(s)))
              for n, s in zip(rng.integers(2, 13, 40), rng.integers(0, 2**31, 40))]
    for _ in range(rounds):
        g = graphs[int(rng.integers(len(graphs)))]
        n = g.n_nodes
        red = rng.uniform(0, 5, n) * (rng.random(n) < 0.6)
        blue = rng.uniform(0, 5, n) * (rng.random(n) < 0.6)
        ties = rng.random(n) < 0.2
        blue = np.where(ties, red, blue)
        r0, b0 = resolve(red, blue)
        worst["tie_to_red"] = max(worst["tie_to_red"], float(np.sum(ties & (b0 > 0))))
        state = GameState(red=r0, blue=b0, round=1, red_cost_total=float(rng.uniform(0, 3)),
                          blue_cost_total=float(rng.uniform(0, 3)))
        plans = []
        for _side in range(2):
            mu = np.zeros((n, n))
            for i in range(n):
                nb = g.neighbors(i)
                w = rng.random(nb.size + 1) * (rng.random(nb.size + 1) < 0.7)
                w = w / w.sum() if w.sum() > 0 else np.eye(1, nb.size + 1, 0).ravel()
                mu[i, nb] = w[1:]
                mu[i, i] = 1.0 - w[1:].sum()
            plans.append(TransferPlan(mu))
        tr, cr, flows = move(g, state.red, plans[0])
        worst["conservation"] = max(worst["conservation"], abs(tr.sum() - state.red.sum()))
        nxt = apply_transfers(g, state, plans[0], plans[1])
        worst["exclusive"] = max(worst["exclusive"], float(np.sum((nxt.red > 0) & (nxt.blue > 0))))
        direct = sum(g.weights[i, j] * flows[i, j] for i, j in zip(*np.nonzero(flows)))
        worst["cost_formula"] = max(worst["cost_formula"], abs(cr - direct) / max(1.0, abs(direct)))
        _, cb, _ = move(g, state.blue, plans[1])
        worst["cost_additivity"] = max(worst["cost_additivity"], abs(nxt.red_cost_total - (state.red_cost_total + cr)),
                                       abs(nxt.blue_cost_total - (state.blue_cost_total + cb)))
    return worst


# counts must be zero and additivity exact, hence the "< tiny" thresholds
ENV_TOLERANCE = {"conservation": 1e-9, "exclusive": 0.5, "tie_to_red": 0.5, "cost_additivity": 1e-300,
                 "cost_formula": 1e-12}


def run_checks(module: str = "all", seed: int = 0, verbose: bool = True) -> bool:
    results: list[CheckResult] = []
    if module in ("numerics", "all"):
        results += check_ops(seed)
    if module in ("egte", "all"):
        results.append(check_egte(seed))
    if module in ("planner", "all"):
        results.append(check_planner(seed))
    if module in ("transfer", "all"):
        results.append(check_transfer(seed))
    if module in ("env", "all"):
        worst = check_env_rounds(2000, seed)
        results += [CheckResult(f"env:{k}", v, ENV_TOLERANCE[k]) for k, v in worst.items()]
    ok = all(r.passed for r in results)
    if verbose:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.max_error:.3e} < {r.tolerance:.0e}")
    return ok
