import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtdqn.errors import DegenerateInputError, DimensionError, ValidationError
from mtdqn.numerics import Tape, Tensor, finite_diff_grad, reduce_sum, relative_error
from mtdqn.temporal_graph import (
    InteractionEvent,
    TgnnConfig,
    aggregate,
    behavior_weight,
    build_graph,
    init_node_embedding,
    init_tgnn_params,
    node_timeline,
    normalized_propagation,
    snapshot,
    temporal_attention,
    tgcn_layer,
    tgnn_forward,
    window_bounds,
)

FORWARD_ONLY = dict(reverse_edges=False, self_loops=False)


def random_events(rng, n_users, n_videos, n_events, t_max=10.0):
    events = []
    for _ in range(n_events):
        if rng.random() < 0.2 and n_users > 1:
            a, b = rng.choice(n_users, size=2, replace=False)
            events.append(InteractionEvent(int(a), int(b), "follow", float(rng.integers(0, t_max)), 1.0))
        else:
            kind = str(rng.choice(["watch", "like", "comment", "share"]))
            frac = float(rng.random())
            events.append(InteractionEvent(
                int(rng.integers(n_users)), int(rng.integers(n_videos)), kind,
                float(rng.integers(0, t_max)), behavior_weight(kind, frac),
            ))
    return events


def dense_oracle_layer(adj, h, w, b):
    """Per-node loop over in-neighbours, written independently of the library."""
    n = adj.shape[0]
    out = np.zeros((n, w.shape[1]))
    for v in range(n):
        acc = np.zeros(w.shape[1])
        d_in = sum(adj[u, v] for u in range(n))
        for u in range(n):
            if adj[u, v] == 0:
                continue
            d_out = sum(adj[u, x] for x in range(n))
            acc += adj[u, v] / np.sqrt(d_out * d_in) * (h[u] @ w)
        out[v] = np.maximum(acc + b, 0.0)
    return out


def test_behavior_weights():
    assert behavior_weight("watch", 0.4) == 0.4
    assert [behavior_weight(b) for b in ("like", "comment", "share")] == [1.0, 1.5, 2.0]
    with pytest.raises(ValidationError):
        behavior_weight("dislike")


def test_build_graph_examples():
    g = build_graph([], 3, 4)
    assert g.n_nodes == 7 and g.n_edges == 0
    ev = [InteractionEvent(0, 1, "like", float(t), 1.0) for t in range(3)]
    assert build_graph(ev, 2, 2).n_edges == 3
    rng = np.random.default_rng(0)
    events = random_events(rng, 5, 7, 40)
    assert build_graph(events, 5, 7).n_edges == len(events)


def test_build_graph_reports_offending_index():
    ev = [InteractionEvent(0, 0, "like", 0.0, 1.0), InteractionEvent(0, 9, "like", 1.0, 1.0)]
    with pytest.raises(ValidationError, match="event 1"):
        build_graph(ev, 2, 3)
    with pytest.raises(ValidationError, match="event 0"):
        build_graph([InteractionEvent(5, 0, "like", 0.0, 1.0)], 2, 3)


def test_snapshot_examples():
    ev = [
        InteractionEvent(0, 0, "like", 1.0, 1.0),
        InteractionEvent(0, 0, "share", 2.0, 2.0),
        InteractionEvent(1, 0, "watch", 3.0, 0.5),
    ]
    g = build_graph(ev, 2, 1)
    assert not snapshot(g, 10.0, 20.0).any()
    full = snapshot(g, 0.0, 4.0)
    assert full[0, 2] == 3.0 and full[1, 2] == 0.5 and full.sum() == 3.5
    assert snapshot(g, 1.0, 3.0)[1, 2] == 0.0
    with pytest.raises(ValidationError):
        snapshot(g, 3.0, 3.0)


def test_edge_permutation_invariance():
    rng = np.random.default_rng(1)
    events = random_events(rng, 4, 5, 30)
    g1 = build_graph(events, 4, 5)
    g2 = build_graph([events[i] for i in rng.permutation(len(events))], 4, 5)
    for a, b in ((g1.src, g2.src), (g1.dst, g2.dst), (g1.timestamp, g2.timestamp), (g1.weight, g2.weight)):
        assert a.tobytes() == b.tobytes()
    assert snapshot(g1, 0.0, 5.0).tobytes() == snapshot(g2, 0.0, 5.0).tobytes()


def test_tgcn_empty_neighbourhood_and_hand_case():
    cfg = TgnnConfig(widths=(1,), d_g=1, **FORWARD_ONLY)
    params = init_tgnn_params(cfg, np.random.default_rng(2))
    params.tensors["gcn0.W"] = Tensor(np.array([[1.0]]))
    params.tensors["gcn0.b"] = Tensor(np.array([0.0]))
    adj = np.array([[0.0, 2.0], [0.0, 0.0]])
    h = Tensor(np.array([[3.0], [5.0]]))
    out = tgcn_layer(normalized_propagation(adj), h, params, 0).data
    # node 1: 2 / sqrt(2 * 2) * 3 = 3; node 0 has no in-neighbours -> relu(b) = 0
    np.testing.assert_array_equal(out, [[0.0], [3.0]])
    params.tensors["gcn0.b"] = Tensor(np.array([0.7]))
    out = tgcn_layer(normalized_propagation(np.zeros((2, 2))), h, params, 0).data
    np.testing.assert_array_equal(out, [[0.7], [0.7]])


def test_tgcn_width_mismatch():
    params = init_tgnn_params(TgnnConfig(widths=(3,), d_g=2), np.random.default_rng(3))
    with pytest.raises(DimensionError):
        tgcn_layer(np.eye(4), Tensor(np.ones((4, 3))), params, 0)


def test_tgcn_matches_dense_oracle_on_1000_graphs():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        adj = np.where(rng.random((n, n)) < 0.35, rng.uniform(0.1, 2.0, (n, n)), 0.0)
        d_in, d_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cfg = TgnnConfig(widths=(d_out,), d_g=d_in, **FORWARD_ONLY)
        params = init_tgnn_params(cfg, rng)
        h = rng.normal(size=(n, d_in))
        got = tgcn_layer(normalized_propagation(adj), Tensor(h), params, 0).data
        ref = dense_oracle_layer(adj, h, params["gcn0.W"].data, params["gcn0.b"].data)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    assert worst < 1e-10


def test_normalized_propagation_with_reverse_and_loops():
    adj = np.array([[0.0, 1.0], [0.0, 0.0]])
    m = normalized_propagation(adj, reverse_edges=True, self_loops=True)
    # P = [[1, 1], [1, 1]], all degrees 2
    np.testing.assert_allclose(m, np.full((2, 2), 0.5), atol=1e-15)


def test_window_bounds():
    assert window_bounds(10.0, 3, 2.0) == [(4.0, 6.0), (6.0, 8.0), (8.0, 10.0)]
    with pytest.raises(DegenerateInputError):
        window_bounds(10.0, 0, 1.0)


def _setup(seed, **cfg_kw):
    rng = np.random.default_rng(seed)
    cfg = TgnnConfig(widths=(3, 2), d_g=3, n_windows=3, window_len=2.0, **cfg_kw)
    params = init_tgnn_params(cfg, rng)
    events = random_events(rng, 3, 4, 25, t_max=6.0)
    graph = build_graph(events, 3, 4)
    base = init_node_embedding(graph.n_nodes, cfg.d_g, rng)
    return cfg, params, graph, base, events


def test_node_timeline_shape_and_inactive_cascade():
    cfg, params, graph, base, _ = _setup(5, **FORWARD_ONLY)
    tl = node_timeline(graph, 1, 6.0, base, params)
    assert len(tl) == 3 and all(h.shape == (2,) for h in tl)
    # a window with no events at all: every node follows the sigma(b) cascade
    tl = node_timeline(graph, 1, 100.0, base, params)
    b0, b1 = params["gcn0.b"].data, params["gcn1.b"].data
    expected = np.maximum(np.maximum(b0, 0.0) @ np.zeros((3, 2)) + b1, 0.0)
    for h in tl:
        np.testing.assert_array_equal(h.data, expected)


def test_time_translation_invariance_bitwise():
    cfg, params, graph, base, events = _setup(6)
    shifted = [InteractionEvent(e.actor, e.target, e.behavior, e.timestamp + 1024.0, e.weight) for e in events]
    g2 = build_graph(shifted, 3, 4)
    for node in range(graph.n_nodes):
        a, _ = tgnn_forward(graph, node, 6.0, base, params)
        b, _ = tgnn_forward(g2, node, 6.0 + 1024.0, base, params)
        assert a.data.tobytes() == b.data.tobytes()


def test_temporal_attention_examples():
    cfg = TgnnConfig(widths=(2,), d_g=2)
    rng = np.random.default_rng(7)
    params = init_tgnn_params(cfg, rng)
    h = Tensor(rng.normal(size=2))
    alpha = temporal_attention([h] * 4, params)
    np.testing.assert_allclose(alpha.data, 0.25, atol=1e-15)

    h1, h2 = rng.normal(size=2), rng.normal(size=2)
    W, b, q = params["tatt.W"].data, params["tatt.b"].data, params["tatt.q"].data
    s = [float(q @ np.tanh(x @ W + b)) for x in (h1, h2)]
    expected = np.exp(s) / np.sum(np.exp(s))
    alpha = temporal_attention([Tensor(h1), Tensor(h2)], params)
    np.testing.assert_allclose(alpha.data, expected, atol=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_temporal_weights_are_distribution(seed, T):
    rng = np.random.default_rng(seed)
    params = init_tgnn_params(TgnnConfig(widths=(3,), d_g=3), rng)
    alpha = temporal_attention([Tensor(rng.normal(size=3) * 5) for _ in range(T)], params).data
    assert np.all(alpha >= 0) and abs(alpha.sum() - 1.0) <= 1e-9


def test_aggregate_examples():
    tl = [Tensor(np.array([1.0])), Tensor(np.array([11.0]))]
    np.testing.assert_allclose(aggregate(Tensor(np.array([0.7, 0.3])), tl).data, [4.0], atol=1e-14)
    np.testing.assert_array_equal(aggregate(Tensor(np.array([1.0, 0.0])), tl).data, [1.0])
    np.testing.assert_allclose(aggregate(Tensor(np.array([0.5, 0.5])), tl).data, [6.0])
    with pytest.raises(DimensionError):
        aggregate(Tensor(np.array([1.0])), tl)


def test_tgnn_forward_shape_and_determinism():
    cfg, params, graph, base, _ = _setup(8)
    a, alpha = tgnn_forward(graph, 4, 6.0, base, params)
    b, _ = tgnn_forward(graph, 4, 6.0, base, params)
    assert a.shape == (cfg.out_width,) and a.data.tobytes() == b.data.tobytes()
    assert abs(alpha.data.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("point", range(10))
@pytest.mark.parametrize("forward_only", [True, False])
def test_tgnn_forward_gradient(point, forward_only):
    kw = FORWARD_ONLY if forward_only else {}
    cfg, params, graph, base, _ = _setup(200 + point, **kw)
    # shift biases positive so few ReLUs sit at the kink
    for name, t in params.tensors.items():
        if name.startswith("gcn") and name.endswith(".b"):
            t.data = t.data + 0.3
    node = point % graph.n_nodes
    readout = np.random.default_rng(point).normal(size=cfg.out_width)
    leaves = dict(params.tensors, base=base)

    def value():
        h, _ = tgnn_forward(graph, node, 6.0, base, params)
        return float(h.data @ readout)

    with Tape() as tape:
        h, _ = tgnn_forward(graph, node, 6.0, base, params)
        loss = reduce_sum(h * Tensor(readout))
    tape.backward(loss)
    for name, t in leaves.items():
        def f(x, t=t):
            saved = t.data
            t.data = x
            try:
                return value()
            finally:
                t.data = saved

        numeric = finite_diff_grad(f, t.data.copy())
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert relative_error(analytic, numeric) < 1e-5, name
