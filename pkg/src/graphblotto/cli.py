"""Command line entry point: ``graphblotto {gen,train,eval,oracle,check}``.

Global flags ``--seed``, ``--config`` and ``--out`` go before the subcommand.
Exit codes: 0 success, 1 failed run or check, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import numerics as nx
from .baselines import SaConfig, anneal, exact_alloc_small, greedy_alloc, myopic_transfer_optimizer
from .egte import EgteConfig
from .env import ScenarioConfig, blue_rule_planner, derive_seed, generate_scenario, resolve_initial
from .formats import load_scenario, save_scenario
from .harness import (ConfigError, config_from_dict, emit_tables, load_model, run_instances, save_model,
                      write_eval_outputs)
from .planner import PlannerConfig, init_planner
from .training import LfrtConfig, PpoConfig, RunLog, ScenarioStream, lfrt_feedback, train_planner_reinforce, \
    train_transfer_ppo
from .transfer import TransferConfig, init_transfer

def _sizes(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphblotto", description="Two-stage graph Blotto experiments.")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--out", type=Path, help="output file or run directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a scenario suite")
    g.add_argument("--sizes", type=_sizes, default=[10])
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--topology", default="erdos-renyi-connected",
                   choices=["erdos-renyi-connected", "random-geometric"])

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", choices=["a", "b", "c"], required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--size", type=int, default=10)
    t.add_argument("--planner-checkpoint", type=Path)
    t.add_argument("--transfer-checkpoint", type=Path)
    t.add_argument("--checkpoint-every", type=int, default=0)

    e = sub.add_parser("eval", help="run a policy matchup over a seeded suite")
    e.add_argument("--red", help="Red planner: greedy, greedy-value, sa, exact, planner")
    e.add_argument("--red-transfer", help="Red transfer: hold, rule, myopic, transfer")
    e.add_argument("--blue", help="Blue policy (rule)")
    e.add_argument("--sizes", type=_sizes)
    e.add_argument("--instances", type=int)
    e.add_argument("--rounds", type=int)
    e.add_argument("--planner-checkpoint")
    e.add_argument("--transfer-checkpoint")
    e.add_argument("--sample", action="store_true", help="sample the neural agents instead of greedy decoding")
    e.add_argument("--format", choices=["csv", "json-lines", "text"], default="csv")

    o = sub.add_parser("oracle", help="exhaustive allocation optimum and myopic transfer grids")
    o.add_argument("--scenario", type=Path, help="scenario file; otherwise a seeded suite")
    o.add_argument("--sizes", type=_sizes, default=[6])
    o.add_argument("--count", type=int, default=10)
    o.add_argument("--myopic", action="store_true", help="also print the myopic transfer plan after allocation")

    c = sub.add_parser("check", help="gradient and invariant self-checks")
    c.add_argument("--module", choices=["numerics", "env", "egte", "planner", "transfer", "all"], default="all")
    return p


def _read_yaml(path: Path | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return data


# ---------------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    out = args.out or Path("scenarios")
    out.mkdir(parents=True, exist_ok=True)
    for n in args.sizes:
        for k in range(args.count):
            seed = derive_seed(args.seed, n, k)
            sc = ScenarioConfig(n_nodes=n, rng_seed=seed, topology=args.topology)
            g = generate_scenario(sc)
            save_scenario(out / f"n{n}_{k:04d}.txt", g, {"seed": seed, "blue_budget": sc.blue_budget,
                                                         "red_budget": sc.red_budget, "topology": sc.topology})
    print(f"wrote {len(args.sizes) * args.count} scenarios to {out}")
    return 0


# ---------------------------------------------------------------------- train


def _model_configs(data: dict) -> tuple[PlannerConfig, TransferConfig, LfrtConfig, PpoConfig]:
    model = dict(data.get("model", {}))
    egte = EgteConfig(**model.pop("egte", {}))
    pcfg = PlannerConfig(egte=egte, **model.pop("planner", {}))
    tcfg = TransferConfig(egte=egte, **model.pop("transfer", {}))
    if model:
        raise ConfigError(f"unknown model keys {sorted(model)}")
    lcfg = LfrtConfig(**data.get("lfrt", {}))
    ppo = PpoConfig(**data.get("ppo", {}))
    return pcfg, tcfg, lcfg, ppo


def cmd_train(args) -> int:
    data = _read_yaml(args.config)
    extra = set(data) - {"model", "lfrt", "ppo"}
    if extra:
        raise ConfigError(f"unknown train config keys {sorted(extra)}")
    pcfg, tcfg, lcfg, ppo = _model_configs(data)
    out = args.out or Path(f"run_phase_{args.phase}")
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"phase": args.phase, "seed": args.seed, "size": args.size, "iters": args.iters,
                "model": {"planner": asdict(pcfg), "transfer": asdict(tcfg)},
                "lfrt": asdict(lcfg), "ppo": asdict(ppo)}
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    stream = ScenarioStream(args.size, seed=args.seed)
    run_log = RunLog(out / "curve.jsonl", out / "timing.jsonl")
    store = nx.ParamStore()

    if args.phase == "a":
        init_planner(pcfg, args.seed, store)
        train_planner_reinforce(stream, store, pcfg, lcfg, args.iters, args.seed, run_log,
                                out / "planner.ckpt" if args.checkpoint_every else None, args.checkpoint_every)
        save_model(out / "planner.ckpt", store, "planner", pcfg)
    elif args.phase == "b":
        if args.planner_checkpoint is None:
            raise ConfigError("phase b needs --planner-checkpoint")
        store, pcfg = load_model(args.planner_checkpoint, store)
        init_transfer(tcfg, args.seed, store)
        before = store.checksum("planner")
        train_transfer_ppo(stream, store, pcfg, tcfg, ppo, lcfg, args.iters, args.seed, run_log)
        if store.checksum("planner") != before:
            raise RuntimeError("planner parameters changed during transfer training")
        save_model(out / "transfer.ckpt", store, "transfer", tcfg)
    else:
        if args.planner_checkpoint is None or args.transfer_checkpoint is None:
            raise ConfigError("phase c needs --planner-checkpoint and --transfer-checkpoint")
        store, pcfg = load_model(args.planner_checkpoint, store)
        store, tcfg = load_model(args.transfer_checkpoint, store)
        before = store.checksum("transfer")
        lfrt_feedback(stream, store, pcfg, tcfg, lcfg, args.iters, args.seed, run_log)
        if store.checksum("transfer") != before:
            raise RuntimeError("transfer parameters changed during feedback training")
        save_model(out / "planner.ckpt", store, "planner", pcfg, {"phase": "c"})
    print(f"phase {args.phase}: {len(run_log.records)} iterations, outputs in {out}")
    return 0


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    data = _read_yaml(args.config)
    over = {"sizes": args.sizes, "n_instances": args.instances, "max_rounds": args.rounds,
            "red_planner": args.red, "red_transfer": args.red_transfer, "blue": args.blue,
            "planner_checkpoint": args.planner_checkpoint, "transfer_checkpoint": args.transfer_checkpoint,
            "mode": "sample" if args.sample else None}
    data.update({k: v for k, v in over.items() if v is not None})
    if args.seed_given or "master_seed" not in data:
        data["master_seed"] = args.seed
    cfg = config_from_dict(data)
    results = run_instances(cfg)
    out = args.out or Path("eval_run")
    rows = write_eval_outputs(out, cfg, results, args.format)
    sys.stdout.write(emit_tables(rows, "text", metrics=("U", "C")))
    failed = sum(r.n_failed for r in rows)
    if failed:
        print(f"{failed} instance(s) failed; see {out / 'instances.jsonl'}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------- oracle


def cmd_oracle(args) -> int:
    lines = ["source,n_nodes,exact_value,greedy_value,sa_value"]
    items = []
    if args.scenario is not None:
        g, meta = load_scenario(args.scenario)
        items.append((str(args.scenario), g, float(meta.get("blue_budget", 5.0 * g.n_nodes)),
                      float(meta.get("red_budget", 2.5 * g.n_nodes))))
    else:
        for n in args.sizes:
            for k in range(args.count):
                sc = ScenarioConfig(n_nodes=n, rng_seed=derive_seed(args.seed, n, k))
                items.append((f"seed:{sc.rng_seed}", generate_scenario(sc), sc.blue_budget, sc.red_budget))
    plans = []
    for name, g, bb, rb in items:
        blue = blue_rule_planner(g, bb)
        alloc, best = exact_alloc_small(g, blue, rb)
        gv = float(g.values[greedy_alloc(g, blue, rb).amounts > 0].sum())
        sa = anneal(g, blue, rb, SaConfig(), np.random.default_rng(args.seed))
        lines.append(f"{name},{g.n_nodes},{best!r},{gv!r},{sa.value!r}")
        if args.myopic:
            state = resolve_initial(g, blue, alloc)
            plan = myopic_transfer_optimizer(g, state)
            plans.append(json.dumps({"source": name, "mu": plan.mu.tolist()}))
    text = "\n".join(lines) + "\n"
    if args.out:
        args.out.write_text(text)
        if plans:
            args.out.with_suffix(".myopic.jsonl").write_text("\n".join(plans) + "\n")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------- check


def cmd_check(args) -> int:
    from .selfcheck import run_checks

    ok = run_checks(args.module, seed=args.seed)
    return 0 if ok else 1


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle, "check": cmd_check}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on unknown flags
    args.seed_given = args.seed is not None
    args.seed = args.seed if args.seed_given else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError, nx.ShapeError) as exc:
        print(f"graphblotto {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
