"""Plain-text scenario files and JSON-lines episode traces.

Scenario file schema (one record per line, ``#`` starts a comment)::

    format graphblotto-scenario 1
    n_nodes <int>
    <key> <value>          # free metadata, e.g. blue_budget 50.0
    value <i> <v_i>
    edge <i> <j> <w_ij>

Floats are written with ``repr`` so a load/save round trip is exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .env import EpisodeTrace, GameGraph

FORMAT_TAG = "graphblotto-scenario"
FORMAT_VERSION = 1


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    s = str(x)
    if not s or any(c.isspace() for c in s):
        raise ValueError(f"metadata value {x!r} must be a single non-empty token")
    return s


def _parse(token: str):
    if token in ("true", "false"):
        return token == "true"
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            pass
    return token


def dumps_scenario(graph: GameGraph, meta: dict | None = None) -> str:
    lines = [f"format {FORMAT_TAG} {FORMAT_VERSION}", f"n_nodes {graph.n_nodes}"]
    for k in sorted(meta or {}):
        if k in ("format", "n_nodes", "value", "edge"):
            raise ValueError(f"reserved metadata key {k!r}")
        lines.append(f"{k} {_fmt(meta[k])}")
    for i, v in enumerate(graph.values):
        lines.append(f"value {i} {_fmt(float(v))}")
    for i, j in graph.edges:
        lines.append(f"edge {i} {j} {_fmt(graph.weight(i, j))}")
    return "\n".join(lines) + "\n"


def loads_scenario(text: str) -> tuple[GameGraph, dict]:
    n = None
    values: dict[int, float] = {}
    edges = []
    meta: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "format":
                if parts[1] != FORMAT_TAG or int(parts[2]) != FORMAT_VERSION:
                    raise ValueError(f"unsupported format {' '.join(parts[1:])}")
            elif key == "n_nodes":
                n = int(parts[1])
            elif key == "value":
                values[int(parts[1])] = float(parts[2])
            elif key == "edge":
                edges.append((int(parts[1]), int(parts[2]), float(parts[3])))
            elif len(parts) == 2:
                meta[key] = _parse(parts[1])
            else:
                raise ValueError(f"cannot parse {raw!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if n is None:
        raise ValueError("scenario lacks n_nodes")
    if sorted(values) != list(range(n)):
        raise ValueError("scenario must give exactly one value per node")
    return GameGraph.build(n, edges, [values[i] for i in range(n)]), meta


def save_scenario(path: str | Path, graph: GameGraph, meta: dict | None = None) -> None:
    Path(path).write_text(dumps_scenario(graph, meta))


def load_scenario(path: str | Path) -> tuple[GameGraph, dict]:
    return loads_scenario(Path(path).read_text())


def save_trace(path: str | Path, trace: EpisodeTrace) -> None:
    Path(path).write_text(trace.to_jsonl())
