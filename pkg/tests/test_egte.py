import numpy as np
import pytest

from graphblotto import numerics as nx
from graphblotto.egte import EgteConfig, encode, encode_one, init_egte, make_batch, spd_with_virtual
from graphblotto.env import GameGraph, GameState, ScenarioConfig, generate_scenario
from graphblotto.numerics import ParamStore
from graphblotto.selfcheck import NONLINEAR_TOL, check_egte

SMALL = EgteConfig(layers=2, heads=2, dim=8, ffn_dim=16)


def make_store(cfg=SMALL, seed=0, spd_scale=0.0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    init_egte(store, "e", cfg, rng)
    if spd_scale:
        store["e/spd_bias"].data = rng.normal(0, spd_scale, store["e/spd_bias"].shape)
        store["e/virtual"].data = rng.normal(0, spd_scale, cfg.dim)
    return store


def random_board(n, seed):
    g = generate_scenario(ScenarioConfig(n_nodes=n, rng_seed=seed))
    rng = np.random.default_rng(seed + 1)
    red = rng.uniform(0, 5, n) * (rng.random(n) < 0.5)
    blue = np.where(red > 0, 0.0, rng.uniform(0, 5, n))
    return g, GameState(red=red, blue=blue)


def permute_graph(g, perm):
    inv = np.argsort(perm)  # new index of old node
    edges = [(inv[i], inv[j], g.weights[i, j]) for i, j in g.edges]
    return GameGraph.build(g.n_nodes, edges, g.values[perm])


def reference_encoder(graph, state, store, cfg):
    """Plain numpy transformer stack with no distance bias."""
    p = lambda k: store[f"e/{k}"].data  # noqa: E731
    x = np.stack([graph.values, state.red / cfg.resource_scale, state.blue / cfg.resource_scale], -1)
    h = np.maximum(x @ p("mlp1/w1") + p("mlp1/b1"), 0) @ p("mlp1/w2") + p("mlp1/b2")
    h = h + p("deg_emb")[graph.degrees]
    h = np.vstack([h, p("virtual")])
    dh = cfg.dim // cfg.heads

    def ln(z, g, b):
        mu = z.mean(-1, keepdims=True)
        var = ((z - mu) ** 2).mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-5) * g + b

    for layer in range(cfg.layers):
        q = lambda k: p(f"layer{layer}/{k}")  # noqa: E731
        heads = []
        for k in range(cfg.heads):
            sl = slice(k * dh, (k + 1) * dh)
            qq, kk, vv = (h @ q("wq"))[:, sl], (h @ q("wk"))[:, sl], (h @ q("wv"))[:, sl]
            s = qq @ kk.T / np.sqrt(dh)
            a = np.exp(s - s.max(-1, keepdims=True))
            heads.append((a / a.sum(-1, keepdims=True)) @ vv)
        o = np.concatenate(heads, -1) @ q("wo") + q("bo")
        h1 = ln(h + o, q("ln1_g"), q("ln1_b"))
        f = np.maximum(h1 @ q("ffn_w1") + q("ffn_b1"), 0) @ q("ffn_w2") + q("ffn_b2")
        h = ln(h1 + f, q("ln2_g"), q("ln2_b"))
    return h[:-1], h[-1]


def test_zero_bias_matches_reference_transformer():
    store = make_store(EgteConfig(), seed=2)
    g, s = random_board(9, 4)
    out = encode_one(g, s, store, "e", EgteConfig())
    ref_nodes, ref_glob = reference_encoder(g, s, store, EgteConfig())
    assert np.max(np.abs(out.node_embeddings.data[0] - ref_nodes)) < 1e-10
    assert np.max(np.abs(out.global_embedding.data[0] - ref_glob)) < 1e-10


def test_nonzero_bias_changes_output():
    g, s = random_board(7, 1)
    a = encode_one(g, s, make_store(seed=3), "e", SMALL).global_embedding.data
    b = encode_one(g, s, make_store(seed=3, spd_scale=0.5), "e", SMALL).global_embedding.data
    assert not np.allclose(a, b)


def test_spd_index_layout():
    g = GameGraph.build(4, [(0, 1, 1), (1, 2, 1), (2, 3, 1)], [0.1] * 4)
    idx = spd_with_virtual(g, max_spd=2)
    assert idx[0, 3] == 2  # true distance 3 is clipped
    assert np.all(idx[4, :4] == 1) and np.all(idx[:4, 4] == 1) and idx[4, 4] == 0
    assert np.all(np.diag(idx) == 0)


@pytest.mark.parametrize("seed", range(10))
def test_permutation_equivariance(seed):
    cfg = SMALL
    store = make_store(cfg, seed, spd_scale=0.5)
    g, s = random_board(8, seed)
    perm = np.random.default_rng(seed).permutation(8)
    gp = permute_graph(g, perm)
    sp = GameState(red=s.red[perm], blue=s.blue[perm])
    a = encode_one(g, s, store, "e", cfg)
    b = encode_one(gp, sp, store, "e", cfg)
    assert np.max(np.abs(a.node_embeddings.data[0][perm] - b.node_embeddings.data[0])) < 1e-9
    assert np.max(np.abs(a.global_embedding.data[0] - b.global_embedding.data[0])) < 1e-9


def test_attention_rows_sum_to_one():
    store = make_store(spd_scale=0.5)
    g, s = random_board(6, 0)
    out = encode_one(g, s, store, "e", SMALL)
    for att in out.attention:
        assert np.max(np.abs(att.sum(-1) - 1.0)) < 1e-9


def test_single_node_with_virtual():
    g = GameGraph.build(1, [], [0.4])
    out = encode_one(g, GameState(red=[1.0], blue=[0.0]), make_store(), "e", SMALL)
    assert out.attention[0].shape[-1] == 2
    assert np.allclose(out.attention[0].sum(-1), 1.0, atol=1e-12)


def test_identical_nodes_identical_inputs():
    # star: all leaves share value, stock and degree
    g = GameGraph.build(4, [(0, 1, 1), (0, 2, 1), (0, 3, 1)], [0.9, 0.3, 0.3, 0.3])
    out = encode_one(g, GameState(red=[0, 1, 1, 1], blue=[2, 0, 0, 0]), make_store(), "e", SMALL)
    h = out.node_embeddings.data[0]
    assert np.array_equal(h[1], h[2]) and np.array_equal(h[2], h[3])
    assert not np.allclose(h[0], h[1])


def test_path_degree_embeddings_differ():
    g = GameGraph.build(3, [(0, 1, 1), (1, 2, 1)], [0.5] * 3)
    store = make_store()
    s = GameState(red=[0.0] * 3, blue=[0.0] * 3)
    h = encode_one(g, s, store, "e", SMALL).node_embeddings.data[0]
    assert np.array_equal(h[0], h[2]) and not np.allclose(h[0], h[1])


def test_degree_outside_table_rejected():
    cfg = EgteConfig(layers=1, heads=1, dim=4, ffn_dim=4, max_degree=2)
    g = GameGraph.build(4, [(0, 1, 1), (0, 2, 1), (0, 3, 1)], [0.5] * 4)
    with pytest.raises(ValueError, match="degree"):
        make_batch([g], [GameState(red=[0] * 4, blue=[0] * 4)], cfg)


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        EgteConfig(dim=10, heads=4)


def test_batched_equals_single():
    store = make_store(spd_scale=0.3)
    boards = [random_board(6, k) for k in range(3)]
    batch = make_batch([b[0] for b in boards], [b[1] for b in boards], SMALL)
    out = encode(batch, store, "e", SMALL)
    for k, (g, s) in enumerate(boards):
        one = encode_one(g, s, store, "e", SMALL)
        assert np.allclose(out.node_embeddings.data[k], one.node_embeddings.data[0], atol=1e-12)


def test_gradient_check_full_encoder():
    res = check_egte(seed=1)
    assert res.max_error < NONLINEAR_TOL


def test_forward_is_deterministic():
    store = make_store(spd_scale=0.3)
    g, s = random_board(10, 3)
    with nx.no_grad():
        a = encode_one(g, s, store, "e", SMALL).global_embedding.data
        b = encode_one(g, s, store, "e", SMALL).global_embedding.data
    assert a.tobytes() == b.tobytes()
