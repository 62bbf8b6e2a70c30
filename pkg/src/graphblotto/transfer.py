"""Red's per-round transfer policy.

Two encoders read the same board: the graph transformer (global view) and a
one-layer GATv2 over the lifted node features (local view). Their node
embeddings are summed, their graph summaries fused, and each Red-held source
node scores its neighbours plus itself. The softmax of a row is that node's
proportional transfer row; the self entry is the retained share.

In sample mode the row logits are perturbed with Gaussian noise and the
Gaussian log-density of the perturbed logits is the action log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .egte import EgteConfig, GraphBatch, encode, init_egte, make_batch
from .env import GameGraph, GameState, TransferPlan, observed_state
from .numerics import ParamStore, Tensor

PREFIX = "transfer"
LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


@dataclass(frozen=True)
class TransferConfig:
    egte: EgteConfig = field(default_factory=EgteConfig)
    gat_heads: int = 4
    noise_std: float = 0.5  # logit noise of the sampled policy
    # learnable logit offset on the self entry; 0 gives a plain softmax over N_i + {i}
    self_bias_init: float = 0.0


def init_transfer(config: TransferConfig, seed: int = 0, store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    rng = np.random.default_rng(seed)
    d = config.egte.dim
    u = nx.init_uniform
    init_egte(store, f"{PREFIX}/egte", config.egte, rng)
    store.add(f"{PREFIX}/gat/w_g", u(rng, (3, d), 3))
    for h in range(config.gat_heads):
        store.add(f"{PREFIX}/gat/head{h}/w_l", u(rng, (d, d), d))
        store.add(f"{PREFIX}/gat/head{h}/w_r", u(rng, (d, d), d))
        store.add(f"{PREFIX}/gat/head{h}/a", u(rng, (d,), d))
    store.add(f"{PREFIX}/gat/h_va", u(rng, (d,), d))
    store.add(f"{PREFIX}/fuse/w_a", u(rng, (2 * d, d), 2 * d))
    store.add(f"{PREFIX}/dec/wq", u(rng, (2 * d, d), 2 * d))
    store.add(f"{PREFIX}/dec/wk", u(rng, (d, d), d))
    store.add(f"{PREFIX}/dec/self_bias", np.array(float(config.self_bias_init)))
    store.add(f"{PREFIX}/value/w1", u(rng, (d, d), d))
    store.add(f"{PREFIX}/value/b1", np.zeros(d))
    store.add(f"{PREFIX}/value/w2", u(rng, (d,), d))
    store.add(f"{PREFIX}/value/b2", np.zeros(()))
    return store


@dataclass
class GatOutput:
    local: Tensor  # (B, N, d)
    glob: Tensor  # (B, d)
    attention: np.ndarray  # (B, H, N, N), head-wise weights


@dataclass
class DualScaleEmbedding:
    node_final: Tensor  # (B, N, d)
    graph_final: Tensor  # (B, d)


def gat_local_encode(batch: GraphBatch, store: ParamStore, config: TransferConfig) -> GatOutput:
    p = f"{PREFIX}/gat"
    b, n = batch.size, batch.n_nodes
    d = config.egte.dim
    z = Tensor(batch.features) @ store[f"{p}/w_g"]
    agg = None
    maps = []
    for h in range(config.gat_heads):
        zl = nx.reshape(z @ store[f"{p}/head{h}/w_l"], (b, n, 1, d))
        zr = nx.reshape(z @ store[f"{p}/head{h}/w_r"], (b, 1, n, d))
        e = nx.leaky_relu(zl + zr) @ store[f"{p}/head{h}/a"]  # (B, N, N)
        att = nx.masked_softmax(e, batch.neighborhood)
        maps.append(att.data)
        out = att @ z
        agg = out if agg is None else agg + out
    local = nx.tanh(nx.scale(agg, 1.0 / config.gat_heads))
    sim = local @ store[f"{p}/h_va"]  # (B, N)
    pool = nx.reshape(nx.softmax(sim), (b, 1, n))
    glob = nx.reshape(pool @ local, (b, d))
    return GatOutput(local, glob, np.stack(maps, axis=1))


def fuse(node_global: Tensor, graph_global: Tensor, gat: GatOutput, store: ParamStore) -> DualScaleEmbedding:
    node = node_global + gat.local
    graph = nx.concat([graph_global, gat.glob], axis=-1) @ store[f"{PREFIX}/fuse/w_a"]
    return DualScaleEmbedding(node, graph)


@dataclass
class TransferForward:
    logits: Tensor  # (B, N, N), meaningful on candidate entries only
    candidates: np.ndarray  # (B, N, N) bool, neighbourhood plus self
    active: np.ndarray  # (B, N) bool, rows that the policy controls
    value: Tensor  # (B,)
    embedding: DualScaleEmbedding


def forward(batch: GraphBatch, store: ParamStore, config: TransferConfig) -> TransferForward:
    b, n = batch.size, batch.n_nodes
    d = config.egte.dim
    enc = encode(batch, store, f"{PREFIX}/egte", config.egte)
    emb = fuse(enc.node_embeddings, enc.global_embedding, gat_local_encode(batch, store, config), store)
    g = nx.reshape(emb.graph_final, (b, 1, d)) + Tensor(np.zeros((b, n, d)))
    q = nx.concat([emb.node_final, g], axis=-1) @ store[f"{PREFIX}/dec/wq"]
    k = emb.node_final @ store[f"{PREFIX}/dec/wk"]
    logits = nx.scale(q @ nx.swapaxes(k, 1, 2), 1.0 / np.sqrt(d))
    logits = logits + store[f"{PREFIX}/dec/self_bias"] * Tensor(np.eye(n))
    value = value_head(store, emb.graph_final)
    active = (batch.red > 0) & batch.adjacency.any(axis=-1)
    return TransferForward(logits, batch.neighborhood, active, value, emb)


def value_head(store: ParamStore, graph_final: Tensor) -> Tensor:
    """Critic on the detached fused summary: the value loss trains only this head,
    so it cannot move the shared encoders outside the clipped policy objective."""
    h = nx.tanh(nx.linear(nx.detach(graph_final), store[f"{PREFIX}/value/w1"], store[f"{PREFIX}/value/b1"]))
    return h @ store[f"{PREFIX}/value/w2"] + store[f"{PREFIX}/value/b2"]


def row_probs(fwd: TransferForward, logits: Tensor | None = None) -> Tensor:
    return nx.masked_softmax(fwd.logits if logits is None else logits, fwd.candidates)


def sample_logits(fwd: TransferForward, std: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(fwd.logits.shape)
    return np.where(fwd.candidates, fwd.logits.data + std * noise, 0.0)


def log_density(fwd: TransferForward, sampled: np.ndarray, std: float) -> Tensor:
    """Per-item Gaussian log-density of ``sampled`` logits, summed over active rows."""
    weight = fwd.candidates & fwd.active[..., None]
    dev = nx.scale(Tensor(sampled) - fwd.logits, 1.0 / std)
    per_entry = nx.scale(nx.square(dev), -0.5) - (np.log(std) + LOG_SQRT_2PI)
    return nx.sum_(per_entry * Tensor(weight.astype(float)), axis=(1, 2))


def row_log_density(fwd: TransferForward, sampled: np.ndarray, std: float) -> np.ndarray:
    weight = fwd.candidates & fwd.active[..., None]
    dev = (sampled - fwd.logits.data) / std
    per = -0.5 * dev ** 2 - (np.log(std) + LOG_SQRT_2PI)
    return np.where(weight, per, 0.0).sum(axis=-1)


def entropy(fwd: TransferForward) -> Tensor:
    """Mean entropy of the noise-free row distributions over active rows (0 if none)."""
    logp = nx.masked_log_softmax(fwd.logits, fwd.candidates)
    p = nx.masked_softmax(fwd.logits, fwd.candidates)
    per_row = -nx.sum_(p * logp, axis=-1)  # (B, N)
    w = fwd.active.astype(float)
    count = np.maximum(w.sum(axis=-1), 1.0)
    return nx.sum_(per_row * Tensor(w / count[:, None]), axis=-1)


def plans_from_probs(mu: np.ndarray, active: np.ndarray, adjacency: np.ndarray) -> list[TransferPlan]:
    """Turn row distributions into plans: inactive rows hold, the diagonal is 1 - outgoing."""
    out = []
    n = mu.shape[-1]
    eye = np.eye(n, dtype=bool)
    for m, a, adj in zip(mu, active, adjacency):
        rows = np.where(a[:, None], np.where(adj, m, 0.0), 0.0)
        rows[eye] = 1.0 - rows.sum(axis=1)
        out.append(TransferPlan(rows))
    return out


def decode_transfers(fwd: TransferForward, adjacency: np.ndarray, config: TransferConfig,
                     mode: str = "greedy", rng: np.random.Generator | None = None
                     ) -> tuple[list[TransferPlan], np.ndarray, np.ndarray | None]:
    """Returns (plans, per-node log-densities (B, N), sampled logits or None)."""
    if mode == "greedy":
        mu = row_probs(fwd).data
        return plans_from_probs(mu, fwd.active, adjacency), np.zeros(fwd.active.shape), None
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode needs an rng")
    z = sample_logits(fwd, config.noise_std, rng)
    with nx.no_grad():
        mu = nx.masked_softmax(Tensor(z), fwd.candidates).data
    return plans_from_probs(mu, fwd.active, adjacency), row_log_density(fwd, z, config.noise_std), z


def act(graph: GameGraph, state: GameState, store: ParamStore, config: TransferConfig,
        mode: str = "greedy", rng: np.random.Generator | None = None) -> tuple[TransferPlan, np.ndarray, float]:
    """Single-board policy call: (plan, per-node log-probs, value estimate)."""
    with nx.no_grad():
        batch = make_batch([graph], [state], config.egte)
        fwd = forward(batch, store, config)
        plans, lp, _ = decode_transfers(fwd, batch.adjacency, config, mode, rng)
    return plans[0], lp[0], float(fwd.value.data[0])


class TransferAgent:
    """Transfer policy callable with the episode-runner signature."""

    def __init__(self, store: ParamStore, config: TransferConfig | None = None, mode: str = "greedy",
                 seed: int = 0):
        self.store = store
        self.config = config or TransferConfig()
        self.mode = mode
        self.rng = np.random.default_rng(seed)

    def __call__(self, graph: GameGraph, state: GameState, prev_state: GameState,
                 blue_preview: np.ndarray | None = None) -> TransferPlan:
        plan, _, _ = act(graph, observed_state(state, blue_preview), self.store, self.config,
                         self.mode, self.rng)
        return plan
