"""Experiment driver: seeded scenario suites, policy matchups, aggregation and tables.

Every instance seed is a pure function of (master seed, size, index), so one
instance's outcome never perturbs another's scenario. Timing is kept apart
from the deterministic metrics: ``MetricsRow.latency_mean`` is wall-clock and
is only written to latency outputs.

Config files are YAML::

    sizes: [10, 20]
    n_instances: 100
    master_seed: 0
    max_rounds: 20
    red_planner: greedy          # greedy | greedy-value | sa | exact | planner
    red_transfer: rule           # hold | rule | myopic | transfer
    blue: rule
    mode: greedy                 # decoding mode for the neural agents
    planner_checkpoint: null
    transfer_checkpoint: null
    scenario: {topology: erdos-renyi-connected, blue_budget_factor: 5.0}
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import numerics as nx
from .baselines import SaConfig, exact_alloc_small, greedy_alloc, myopic_transfer, red_rule_transfer, sa_alloc
from .egte import EgteConfig
from .env import (EpisodeAborted, GameGraph, ScenarioConfig, blue_rule_planner, derive_seed, generate_scenario,
                  hold_transfer, run_episode)
from .planner import PREFIX as PLANNER_PREFIX
from .planner import PlannerAgent, PlannerConfig, init_planner
from .transfer import PREFIX as TRANSFER_PREFIX
from .transfer import TransferAgent, TransferConfig, init_transfer

log = logging.getLogger(__name__)

PLANNERS = ("greedy", "greedy-value", "sa", "exact", "planner")
TRANSFERS = ("hold", "rule", "myopic", "transfer")
METRICS = ("U", "C", "E")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    sizes: list[int] = field(default_factory=lambda: [10])
    n_instances: int = 100
    master_seed: int = 0
    max_rounds: int = 20
    red_planner: str = "greedy"
    red_transfer: str = "rule"
    blue: str = "rule"
    mode: str = "greedy"
    planner_checkpoint: str | None = None
    transfer_checkpoint: str | None = None
    scenario: dict = field(default_factory=dict)
    output: str | None = None

    def validate(self) -> None:
        if self.n_instances <= 0:
            raise ConfigError("n_instances must be positive")
        if not self.sizes or any(int(n) < 2 for n in self.sizes):
            raise ConfigError(f"bad sizes {self.sizes}")
        if self.red_planner not in PLANNERS:
            raise ConfigError(f"unknown red_planner {self.red_planner!r} (choose from {', '.join(PLANNERS)})")
        if self.red_transfer not in TRANSFERS:
            raise ConfigError(f"unknown red_transfer {self.red_transfer!r} (choose from {', '.join(TRANSFERS)})")
        if self.blue != "rule":
            raise ConfigError("only the rule-based Blue is available")
        if self.mode not in ("greedy", "sample"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.red_planner == "planner" and not self.planner_checkpoint:
            raise ConfigError("red_planner 'planner' needs planner_checkpoint")
        if self.red_transfer == "transfer" and not self.transfer_checkpoint:
            raise ConfigError("red_transfer 'transfer' needs transfer_checkpoint")
        allowed = {f.name for f in fields(ScenarioConfig)} - {"n_nodes", "rng_seed", "max_rounds"}
        extra = set(self.scenario) - allowed
        if extra:
            raise ConfigError(f"unknown scenario keys {sorted(extra)}")

    @property
    def method(self) -> str:
        return f"{self.red_planner}+{self.red_transfer}"

    def scenario_config(self, n_nodes: int, seed: int) -> ScenarioConfig:
        sc = dict(self.scenario)
        if "edge_weight_range" in sc:
            sc["edge_weight_range"] = tuple(sc["edge_weight_range"])
        return ScenarioConfig(n_nodes=n_nodes, rng_seed=seed, max_rounds=self.max_rounds, **sc)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict({**data, **(overrides or {})})


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    cfg = ExperimentConfig(**data)
    cfg.sizes = [int(n) for n in cfg.sizes]
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------- model loading


def save_model(path: str | Path, store: nx.ParamStore, kind: str, config, extra: dict | None = None) -> None:
    """Checkpoint one agent's parameters with its architecture in the header."""
    prefix = {"planner": PLANNER_PREFIX, "transfer": TRANSFER_PREFIX}[kind]
    meta = {"kind": kind, "config": asdict(config), **(extra or {})}
    nx.save_checkpoint(path, store, prefix, meta)


def _egte_from(d: dict) -> EgteConfig:
    return EgteConfig(**d)


def config_from_meta(meta: dict):
    cfg = dict(meta.get("config", {}))
    egte = _egte_from(cfg.pop("egte", {}))
    if meta.get("kind") == "planner":
        return PlannerConfig(egte=egte, **cfg)
    if meta.get("kind") == "transfer":
        return TransferConfig(egte=egte, **cfg)
    raise ValueError(f"checkpoint kind {meta.get('kind')!r} unknown")


def load_model(path: str | Path, store: nx.ParamStore | None = None):
    """Rebuild the agent described by a checkpoint; returns (store, config)."""
    _, meta = nx.read_checkpoint(path)
    cfg = config_from_meta(meta)
    store = store if store is not None else nx.ParamStore()
    if isinstance(cfg, PlannerConfig):
        init_planner(cfg, 0, store)
        nx.load_checkpoint(path, store, PLANNER_PREFIX)
    else:
        init_transfer(cfg, 0, store)
        nx.load_checkpoint(path, store, TRANSFER_PREFIX)
    return store, cfg


# ---------------------------------------------------------------------- running


@dataclass(frozen=True)
class InstanceResult:
    size: int
    index: int
    seed: int
    method: str
    ok: bool
    controlled_value: float = float("nan")
    cost: float = float("nan")
    utility: float = float("nan")
    rounds: int = 0
    latency: float = float("nan")  # wall-clock, excluded from deterministic logs
    error: str = ""

    def to_json(self, with_latency: bool = False) -> str:
        d = asdict(self)
        if not with_latency:
            d.pop("latency")
        return json.dumps(d)


@dataclass(frozen=True)
class MetricsRow:
    size: int
    method: str
    n_instances: int
    n_failed: int
    utility_mean: float  # controlled value at the end of the game
    utility_sd: float
    cost_mean: float
    cost_sd: float
    latency_mean: float
    net_utility_mean: float

    def __post_init__(self):
        if self.utility_sd < 0 or self.cost_sd < 0:
            raise ValueError("standard deviations must be >= 0")


def _policies(cfg: ExperimentConfig, seed: int):
    rng = np.random.default_rng(seed)
    if cfg.red_planner == "greedy":
        planner = greedy_alloc
    elif cfg.red_planner == "greedy-value":
        def planner(g, b, budget):
            return greedy_alloc(g, b, budget, order="value")
    elif cfg.red_planner == "sa":
        def planner(g, b, budget):
            return sa_alloc(g, b, budget, SaConfig(), rng)
    elif cfg.red_planner == "exact":
        def planner(g, b, budget):
            return exact_alloc_small(g, b, budget)[0]
    else:
        planner = None
    transfer = {"hold": hold_transfer, "rule": red_rule_transfer, "myopic": myopic_transfer}.get(cfg.red_transfer)
    return planner, transfer


def run_instances(cfg: ExperimentConfig) -> list[InstanceResult]:
    """Play every (size, index) instance of the suite; failures are flagged, not raised."""
    cfg.validate()
    neural_planner = neural_transfer = None
    if cfg.red_planner == "planner":
        store, pcfg = load_model(cfg.planner_checkpoint)
        neural_planner = (store, pcfg)
    if cfg.red_transfer == "transfer":
        store, tcfg = load_model(cfg.transfer_checkpoint)
        neural_transfer = (store, tcfg)
    out = []
    for n in cfg.sizes:
        for k in range(cfg.n_instances):
            seed = derive_seed(cfg.master_seed, n, k)
            planner, transfer = _policies(cfg, seed)
            if neural_planner is not None:
                planner = PlannerAgent(neural_planner[0], neural_planner[1], cfg.mode, seed)
            if neural_transfer is not None:
                transfer = TransferAgent(neural_transfer[0], neural_transfer[1], cfg.mode, seed)
            sc = cfg.scenario_config(n, seed)
            try:
                graph = generate_scenario(sc)
                rep, trace = run_episode(graph, planner, transfer, max_rounds=cfg.max_rounds,
                                         blue_budget=sc.blue_budget, red_budget=sc.red_budget,
                                         blue_alloc=blue_rule_planner(graph, sc.blue_budget))
            except (EpisodeAborted, ValueError, FloatingPointError) as exc:
                log.warning("instance size=%d index=%d failed: %s", n, k, exc)
                out.append(InstanceResult(n, k, seed, cfg.method, False, error=str(exc)))
                continue
            out.append(InstanceResult(n, k, seed, cfg.method, True, rep.red_controlled_value, rep.red_cost,
                                      rep.red_utility, rep.rounds_played, trace.red_compute_seconds))
    return out


def aggregate(results: Sequence[InstanceResult]) -> list[MetricsRow]:
    """Per (size, method) means and population standard deviations over successful instances."""
    rows = []
    keys = sorted({(r.size, r.method) for r in results})
    for size, method in keys:
        group = sorted((r for r in results if r.size == size and r.method == method), key=lambda r: r.index)
        ok = [r for r in group if r.ok]
        u = np.array([r.controlled_value for r in ok])
        c = np.array([r.cost for r in ok])
        e = np.array([r.latency for r in ok])
        net = np.array([r.utility for r in ok])

        def stat(x, f):
            return float(f(x)) if x.size else float("nan")

        rows.append(MetricsRow(size, method, len(group), len(group) - len(ok), stat(u, np.mean), stat(u, np.std),
                               stat(c, np.mean), stat(c, np.std), stat(e, np.mean), stat(net, np.mean)))
    return rows


def run_suite(cfg: ExperimentConfig) -> list[MetricsRow]:
    return aggregate(run_instances(cfg))


# ---------------------------------------------------------------------- tables


@dataclass
class Table:
    columns: list[str]
    records: list[list]

    def __eq__(self, other):
        return (isinstance(other, Table) and self.columns == other.columns
                and [[_cell(x) for x in r] for r in self.records] == [[_cell(x) for x in r] for r in other.records])


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _uncell(s: str):
    if s == "":
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def tabulate(rows: Sequence[MetricsRow], metrics: Sequence[str] = METRICS) -> Table:
    """Wide layout: one block per size, one line per metric, mean and sd per method."""
    if not rows:
        raise ValueError("no rows to tabulate")
    methods = list(dict.fromkeys(r.method for r in rows))
    columns = ["Size", "Metric"]
    for m in methods:
        columns += [f"{m} mean", f"{m} sd"]
    by_key = {(r.size, r.method): r for r in rows}
    records = []
    for size in sorted({r.size for r in rows}):
        for metric in metrics:
            line = [size, metric]
            for m in methods:
                r = by_key.get((size, m))
                if r is None:
                    line += [None, None]
                elif metric == "U":
                    line += [r.utility_mean, r.utility_sd]
                elif metric == "C":
                    line += [r.cost_mean, r.cost_sd]
                elif metric == "E":
                    line += [r.latency_mean, None]
                else:
                    raise ValueError(f"unknown metric {metric!r}")
            records.append(line)
    return Table(columns, records)


def format_table(table: Table, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.columns)
        for r in table.records:
            w.writerow([_cell(x) for x in r])
        return buf.getvalue()
    if fmt == "json-lines":
        return "".join(json.dumps(dict(zip(table.columns, r))) + "\n" for r in table.records)
    if fmt == "text":
        cells = [table.columns] + [[_cell(x) for x in r] for r in table.records]
        widths = [max(len(row[i]) for row in cells) for i in range(len(table.columns))]
        return "".join("  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in cells)
    raise ValueError(f"unknown table format {fmt!r}")


def parse_table(text: str, fmt: str) -> Table:
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty table")
        return Table(rows[0], [[_uncell(x) for x in r] for r in rows[1:]])
    if fmt == "json-lines":
        objs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not objs:
            raise ValueError("empty table")
        cols = list(objs[0])
        return Table(cols, [[o[c] for c in cols] for o in objs])
    if fmt == "text":
        raise ValueError("aligned text is for reading only")
    raise ValueError(f"unknown table format {fmt!r}")


def emit_tables(rows: Sequence[MetricsRow], fmt: str = "csv", path: str | Path | None = None,
                metrics: Sequence[str] = METRICS) -> str:
    text = format_table(tabulate(rows, metrics), fmt)
    if path is not None:
        Path(path).write_text(text)
    return text


DETERMINISTIC_METRICS = ("U", "C")


def write_eval_outputs(out_dir: str | Path, cfg: ExperimentConfig, results: Sequence[InstanceResult],
                       fmt: str = "csv") -> list[MetricsRow]:
    """Write the run directory. Everything except ``latency.*`` is reproducible byte for byte."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = aggregate(results)
    ext = {"csv": "csv", "json-lines": "jsonl", "text": "txt"}[fmt]
    (out / "config.yaml").write_text(dump_config(cfg))
    emit_tables(rows, fmt, out / f"metrics.{ext}", DETERMINISTIC_METRICS)
    emit_tables(rows, fmt, out / f"latency.{ext}", ("E",))
    (out / "instances.jsonl").write_text("".join(r.to_json() + "\n" for r in results))
    (out / "latency.jsonl").write_text("".join(
        json.dumps({"size": r.size, "index": r.index, "latency": r.latency}) + "\n" for r in results))
    return rows


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    out = replace(cfg, **{k: v for k, v in kw.items() if v is not None})
    out.validate()
    return out


def instance_graph(cfg: ExperimentConfig, n_nodes: int, index: int) -> GameGraph:
    return generate_scenario(cfg.scenario_config(n_nodes, derive_seed(cfg.master_seed, n_nodes, index)))
