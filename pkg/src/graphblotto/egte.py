"""Graph transformer encoder with shortest-path attention bias and a virtual node.

Node features ``[v_i, s_i^r, s_i^b]`` are lifted by a two-layer MLP and summed
with a per-degree embedding. A virtual node (stored as the last token) joins
every attention layer at hop distance 1 from all real nodes; its final row is
the graph summary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .env import GameGraph, GameState
from .numerics import ParamStore, Tensor


@dataclass(frozen=True)
class EgteConfig:
    layers: int = 3
    heads: int = 4
    dim: int = 32
    ffn_dim: int = 64
    max_spd: int = 8
    max_degree: int = 69
    resource_scale: float = 5.0  # stocks are divided by this before the MLP

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class GraphBatch:
    """Dense per-batch arrays for B graphs of equal size N."""

    features: np.ndarray  # (B, N, 3)
    degrees: np.ndarray  # (B, N) int
    spd_index: np.ndarray  # (B, N+1, N+1) int, virtual node last
    neighborhood: np.ndarray  # (B, N, N) bool, adjacency plus self
    adjacency: np.ndarray  # (B, N, N) bool
    red: np.ndarray  # (B, N) raw stocks
    blue: np.ndarray  # (B, N)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.features.shape[1]


def node_features(graph: GameGraph, state: GameState, scale: float) -> np.ndarray:
    return np.stack([graph.values, state.red / scale, state.blue / scale], axis=-1)


def spd_with_virtual(graph: GameGraph, max_spd: int) -> np.ndarray:
    n = graph.n_nodes
    out = np.ones((n + 1, n + 1), dtype=np.int64)
    out[:n, :n] = np.minimum(graph.spd, max_spd)
    out[n, n] = 0
    return out


def make_batch(graphs: Sequence[GameGraph], states: Sequence[GameState], config: EgteConfig) -> GraphBatch:
    sizes = {g.n_nodes for g in graphs}
    if len(sizes) != 1:
        raise ValueError(f"batched graphs must share a size, got {sorted(sizes)}")
    n = sizes.pop()
    for g in graphs:
        if g.degrees.max(initial=0) > config.max_degree:
            raise ValueError(f"degree {g.degrees.max()} exceeds embedding table ({config.max_degree})")
    eye = np.eye(n, dtype=bool)
    return GraphBatch(
        features=np.stack([node_features(g, s, config.resource_scale) for g, s in zip(graphs, states)]),
        degrees=np.stack([g.degrees for g in graphs]),
        spd_index=np.stack([spd_with_virtual(g, config.max_spd) for g in graphs]),
        neighborhood=np.stack([g.adjacency | eye for g in graphs]),
        adjacency=np.stack([np.asarray(g.adjacency) for g in graphs]),
        red=np.stack([s.red for s in states]),
        blue=np.stack([s.blue for s in states]),
    )


def init_egte(store: ParamStore, prefix: str, config: EgteConfig, rng: np.random.Generator) -> None:
    d, f = config.dim, config.ffn_dim
    u = nx.init_uniform
    store.add(f"{prefix}/mlp1/w1", u(rng, (3, d), 3))
    store.add(f"{prefix}/mlp1/b1", u(rng, (d,), 3))
    store.add(f"{prefix}/mlp1/w2", u(rng, (d, d), d))
    store.add(f"{prefix}/mlp1/b2", u(rng, (d,), d))
    store.add(f"{prefix}/deg_emb", u(rng, (config.max_degree + 1, d), d))
    store.add(f"{prefix}/spd_bias", np.zeros(config.max_spd + 1))
    store.add(f"{prefix}/virtual", np.zeros(d))
    for layer in range(config.layers):
        p = f"{prefix}/layer{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}/{name}", u(rng, (d, d), d))
        store.add(f"{p}/bo", u(rng, (d,), d))
        store.add(f"{p}/ln1_g", np.ones(d))
        store.add(f"{p}/ln1_b", np.zeros(d))
        store.add(f"{p}/ffn_w1", u(rng, (d, f), d))
        store.add(f"{p}/ffn_b1", u(rng, (f,), d))
        store.add(f"{p}/ffn_w2", u(rng, (f, d), f))
        store.add(f"{p}/ffn_b2", u(rng, (d,), f))
        store.add(f"{p}/ln2_g", np.ones(d))
        store.add(f"{p}/ln2_b", np.zeros(d))


@dataclass
class EgteOutput:
    node_embeddings: Tensor  # (B, N, d)
    global_embedding: Tensor  # (B, d)
    attention: list[np.ndarray]  # per layer, (B, H, N+1, N+1)


def init_features(batch: GraphBatch, store: ParamStore, prefix: str, config: EgteConfig) -> Tensor:
    """Token matrix (B, N+1, d): lifted node features plus degree embedding, virtual row last."""
    b = batch.size
    x = Tensor(batch.features)
    h = nx.relu(nx.linear(x, store[f"{prefix}/mlp1/w1"], store[f"{prefix}/mlp1/b1"]))
    h = nx.linear(h, store[f"{prefix}/mlp1/w2"], store[f"{prefix}/mlp1/b2"])
    h = h + nx.row_select(store[f"{prefix}/deg_emb"], batch.degrees)
    virtual = nx.reshape(store[f"{prefix}/virtual"], (1, 1, config.dim))
    virtual = virtual + Tensor(np.zeros((b, 1, config.dim)))
    return nx.concat([h, virtual], axis=1)


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in EGTE {where}")


def encode(batch: GraphBatch, store: ParamStore, prefix: str, config: EgteConfig,
           spd_bias: bool = True) -> EgteOutput:
    n, d, heads = batch.n_nodes, config.dim, config.heads
    dh = d // heads
    b = batch.size
    m = n + 1
    h = init_features(batch, store, prefix, config)
    _check_finite(h, "input features")
    bias = None
    if spd_bias:
        bias = nx.reshape(nx.row_select(store[f"{prefix}/spd_bias"], batch.spd_index), (b, 1, m, m))
    attn_maps = []
    for layer in range(config.layers):
        p = f"{prefix}/layer{layer}"

        def split(t):
            return nx.transpose(nx.reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

        q = split(h @ store[f"{p}/wq"])
        k = nx.transpose(nx.reshape(h @ store[f"{p}/wk"], (b, m, heads, dh)), (0, 2, 3, 1))
        v = split(h @ store[f"{p}/wv"])
        scores = nx.scale(q @ k, 1.0 / np.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        att = nx.softmax(scores)
        bad = ~np.isfinite(att.data).all(axis=(0, 2, 3))
        if bad.any():
            raise FloatingPointError(f"non-finite attention in EGTE layer {layer} head(s) {np.flatnonzero(bad).tolist()}")
        attn_maps.append(att.data)
        o = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (b, m, d))
        o = nx.linear(o, store[f"{p}/wo"], store[f"{p}/bo"])
        h1 = nx.layer_norm(h + o, store[f"{p}/ln1_g"], store[f"{p}/ln1_b"])
        f = nx.relu(nx.linear(h1, store[f"{p}/ffn_w1"], store[f"{p}/ffn_b1"]))
        f = nx.linear(f, store[f"{p}/ffn_w2"], store[f"{p}/ffn_b2"])
        h = nx.layer_norm(h1 + f, store[f"{p}/ln2_g"], store[f"{p}/ln2_b"])
        _check_finite(h, f"layer {layer} output")
    return EgteOutput(node_embeddings=h[:, :n], global_embedding=h[:, n], attention=attn_maps)


def encode_one(graph: GameGraph, state: GameState, store: ParamStore, prefix: str,
               config: EgteConfig) -> EgteOutput:
    return encode(make_batch([graph], [state], config), store, prefix, config)
