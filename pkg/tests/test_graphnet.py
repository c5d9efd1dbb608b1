import numpy as np
import pytest

from conftest import fd_relative_error, graph_item, micro_model, small_batch

from pdegnn import graphnet as gn
from pdegnn.dataset import edge_features
from pdegnn.fem import PdeSpec
from pdegnn.mesh import build_mesh, periodic_square, unit_square


def test_layer_dimensions():
    m = gn.MpgnnModel(4, 1, 2).init(0)
    phi0, gamma0 = m.layer_dims(0)
    assert phi0[0] == 2 * 5 + 2 and phi0[1:] == [128, 128, 128]
    assert gamma0 == [5 + 128, 128, 128, 64]
    assert m.layer_dims(2)[1][-1] == 1
    assert m.layer_dims(1)[0][0] == 2 * 64 + 2
    assert len(m.params) == 12 * 3
    # layers 1 and 2 share shapes but not values
    assert not np.array_equal(m.params[12], m.params[24])


def test_zero_model_outputs_denormalised_zero():
    m = gn.MpgnnModel(2, 1, 2, K=2, latent=3, hidden=4).init(0)
    m.params = [np.zeros_like(p) for p in m.params]
    m.norm = gn.Normalizer(5.0, 2.0)
    out = gn.forward(m, small_batch())
    assert np.all(out == 5.0)


def test_hand_computed_two_node_graph():
    # K = 1, hidden width 1, every weight set by hand
    m = gn.MpgnnModel(1, 1, 1, K=1, latent=1, hidden=1)
    W1 = np.array([[0.5], [-1.0], [2.0], [0.0], [1.5]])  # u_i(2) | u_j(2) | e(1)
    b1 = np.array([0.1])
    W2, b2 = np.array([[2.0]]), np.array([-0.2])
    W3, b3 = np.array([[-1.0]]), np.array([0.3])
    G1, c1 = np.array([[1.0], [0.5], [2.0]]), np.array([0.0])  # u_i(2) | agg(1)
    G2, c2 = np.array([[3.0]]), np.array([0.1])
    G3, c3 = np.array([[0.5]]), np.array([-1.0])
    m.params = [W1, b1, W2, b2, W3, b3, G1, c1, G2, c2, G3, c3]
    m.norm = gn.Normalizer(0.0, 1.0, np.zeros(1), np.ones(1))
    x = np.array([[1.0, 0.0], [-2.0, 1.0]])
    edges = np.array([[0, 1], [1, 0]])
    e = np.array([[0.4], [-0.4]])
    out = gn.forward(m, gn.make_batch([(x, edges, e, None)]))

    relu = lambda v: max(v, 0.0)

    def phi(ui, uj, eij):
        z = 0.5 * ui[0] - 1.0 * ui[1] + 2.0 * uj[0] + 0.0 * uj[1] + 1.5 * eij + 0.1
        return -1.0 * relu(2.0 * relu(z) - 0.2) + 0.3

    def gamma(ui, agg):
        y = relu(1.0 * ui[0] + 0.5 * ui[1] + 2.0 * agg)
        return 0.5 * relu(3.0 * y + 0.1) - 1.0

    expect = [gamma(x[0], phi(x[0], x[1], 0.4)), gamma(x[1], phi(x[1], x[0], -0.4))]
    assert np.allclose(out[:, 0], expect, rtol=0, atol=1e-15)


def test_isolated_node_named():
    x = np.zeros((3, 2))
    edges = np.array([[0, 1], [1, 0]])
    with pytest.raises(ValueError, match="isolated node 2"):
        gn.make_batch([(x, edges, np.zeros((2, 2)), None)])


def test_loss_examples():
    assert gn.loss_mse(np.ones((4, 1)), np.ones((4, 1))) == 0.0
    assert gn.loss_mse(np.array([[3.0]]), np.array([[1.0]])) == 4.0
    with pytest.raises(ValueError):
        gn.loss_mse(np.zeros((3, 1)), np.zeros((3, 2)))
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))
    ptr = np.array([0, 3, 7])
    manual = 0.0
    for a, b in [(0, 3), (3, 7)]:
        s = 0.0
        for i in range(a, b):
            for j in range(2):
                s += (p[i, j] - t[i, j]) ** 2
        manual += s / ((b - a) * 2)
    assert gn.loss_mse(p, t, ptr) == pytest.approx(manual / 2, rel=1e-14)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("kw", [{}, {"aggregation": "sum"}, {"residual": True}, {"n_out": 2}])
def test_gradients_match_finite_differences(seed, kw):
    model = micro_model(seed, **kw)
    batch = small_batch(seed, n_out=kw.get("n_out", 1))
    assert fd_relative_error(model, batch) <= 1e-5


def test_zero_model_gradients():
    # all-zero parameters and targets give a zero residual, hence zero gradients
    m = gn.MpgnnModel(2, 1, 2, K=2, latent=3, hidden=4).init(0)
    m.params = [np.zeros_like(p) for p in m.params]
    b = small_batch()
    b.targets = np.zeros_like(b.targets)
    loss, grads = gn.backward(m, b)
    assert loss == 0.0
    assert all(not g.any() for g in grads)
    assert fd_relative_error(m, b) == 0.0


def test_scaled_loss_scales_gradients():
    m = micro_model(1)
    b = small_batch(1)
    l1, g1 = gn.backward(m, b)
    l2, g2 = gn.backward(m, b, scale=2.0)
    assert l2 == 2 * l1
    for a, c in zip(g1, g2):
        assert np.allclose(c, 2 * a, rtol=1e-15, atol=0)


def test_float32_compute_close_to_float64():
    m = micro_model(2)
    b = small_batch(2)
    out64 = gn.forward(m, b)
    m.dtype = "float32"
    out32 = gn.forward(m, b)
    assert out32.dtype == np.float64
    assert np.allclose(out32, out64, rtol=1e-5, atol=1e-5)
    loss, grads = gn.backward(m, b)
    assert all(g.dtype == np.float64 for g in grads)


def permuted(graph_item_, perm):
    x, edges, e, t = graph_item_
    inv = np.argsort(perm)
    return x[perm], inv[edges], e, t[perm]


def test_permutation_equivariance_exact():
    rng = np.random.default_rng(3)
    g = build_mesh(unit_square(), 60, 3)
    item = graph_item(g, rng)
    model = micro_model(3, latent=8, hidden=16, K=3)
    base = gn.forward(model, gn.make_batch([item]))
    for k in range(5):
        perm = np.random.default_rng(k).permutation(g.n_nodes)
        x, edges, e, t = permuted(item, perm)
        shuffle = np.random.default_rng(100 + k).permutation(len(edges))
        out = gn.forward(model, gn.make_batch([(x, edges[shuffle], e[shuffle], t)]))
        assert np.array_equal(out, base[perm])


def test_translation_invariance_bitwise():
    # dyadic coordinates and a dyadic shift keep every subtraction exact
    rng = np.random.default_rng(4)
    pts = rng.integers(0, 1024, size=(80, 2)) / 1024.0
    pts = np.unique(pts, axis=0)
    from pdegnn.mesh import triangulate
    g1 = triangulate(pts)
    g2 = triangulate(pts + np.array([3.0, -5.0]))
    assert np.array_equal(g1.edges, g2.edges)
    x = np.column_stack([rng.normal(size=(g1.n_nodes, 2)), g1.flags])
    model = micro_model(4)
    o1 = gn.forward(model, gn.make_batch([(x, g1.edges, g1.displacements(), None)]))
    o2 = gn.forward(model, gn.make_batch([(x, g2.edges, g2.displacements(), None)]))
    assert np.array_equal(o1, o2)


def hop_distance(graph, src):
    dist = np.full(graph.n_nodes, -1)
    dist[src] = 0
    frontier = [src]
    adj = [[] for _ in range(graph.n_nodes)]
    for i, j in graph.edges:
        adj[i].append(j)
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def test_receptive_field_k_hops():
    rng = np.random.default_rng(5)
    g = build_mesh(unit_square(), 150, 5)
    model = micro_model(5, K=3)
    item = graph_item(g, rng)
    base = gn.forward(model, gn.make_batch([item]))
    for node in (0, 40, 100):
        d = hop_distance(g, node)
        far = d >= 4
        assert far.any()
        x = item[0].copy()
        x[far] = 0.0
        out = gn.forward(model, gn.make_batch([(x, item[1], item[2], None)]))
        assert out[node, 0] == base[node, 0]
        # a node exactly K hops away does influence the prediction
        x = item[0].copy()
        x[d == 3] += 1.0
        out = gn.forward(model, gn.make_batch([(x, item[1], item[2], None)]))
        assert out[node, 0] != base[node, 0]


def test_periodic_edge_features_minimum_image():
    g = build_mesh(periodic_square(), 120, 6)
    e = edge_features(g, PdeSpec("heat"))
    L = 2 * np.pi
    raw = g.positions[g.edges[:, 1]] - g.positions[g.edges[:, 0]]
    shifts = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)]) * L
    best = np.min(np.linalg.norm(raw[:, None] + shifts[None], axis=2), axis=1)
    assert np.allclose(np.linalg.norm(e, axis=1), best, atol=1e-12)
    assert np.all(np.abs(e) < L / 2)


def test_batch_equals_individual_graphs():
    rng = np.random.default_rng(6)
    items = [graph_item(build_mesh(unit_square(), 20 + k, k), rng) for k in range(3)]
    model = micro_model(6)
    together = gn.forward(model, gn.make_batch(items))
    ptr = np.cumsum([0] + [len(i[0]) for i in items])
    for k, it in enumerate(items):
        alone = gn.forward(model, gn.make_batch([it]))
        assert np.allclose(together[ptr[k]:ptr[k + 1]], alone, rtol=1e-13, atol=1e-13)


def test_adam_examples():
    p = [np.array([1.0, -2.0])]
    st = gn.AdamState.zeros_like(p)
    gn.adam_step(p, [np.zeros(2)], st, 1e-3)
    assert np.array_equal(p[0], [1.0, -2.0])

    q = [np.array([0.5])]
    st = gn.AdamState.zeros_like(q)
    gn.adam_step(q, [np.array([1.0])], st, 1e-3)
    # m_hat = 1, v_hat = 1 after bias correction
    assert q[0][0] == 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8)


def test_adam_resume_through_checkpoint():
    m = micro_model(7)
    b = small_batch(7)
    st = gn.AdamState.zeros_like(m.params)
    twin = gn.checkpoint_from_bytes(gn.checkpoint_bytes(m, st))[0]
    twin_state = gn.AdamState.zeros_like(twin.params)
    for _ in range(2):
        gn.adam_step(m.params, gn.backward(m, b)[1], st, 1e-3)
    gn.adam_step(twin.params, gn.backward(twin, b)[1], twin_state, 1e-3)
    twin, twin_state, *_ = gn.checkpoint_from_bytes(gn.checkpoint_bytes(twin, twin_state))
    gn.adam_step(twin.params, gn.backward(twin, b)[1], twin_state, 1e-3)
    for a, c in zip(m.params, twin.params):
        assert np.array_equal(a, c)


def test_lr_schedule():
    assert gn.lr_schedule(0) == 1e-3
    assert gn.lr_schedule(5) == pytest.approx(2e-4, rel=1e-15)
    assert gn.lr_schedule(7) == pytest.approx(2e-4, rel=1e-15)
    assert gn.lr_schedule(12) == pytest.approx(4e-5, rel=1e-15)


def test_checkpoint_round_trip_bitwise():
    m = micro_model(8, residual=True, dtype="float32")
    st = gn.AdamState.zeros_like(m.params)
    gn.adam_step(m.params, gn.backward(m, small_batch(8))[1], st, 1e-3)
    rng_state = np.random.default_rng(1).bit_generator.state
    data = gn.checkpoint_bytes(m, st, 3, rng_state, {"note": "x"})
    m2, st2, epoch, rs, meta = gn.checkpoint_from_bytes(data)
    assert (epoch, rs, meta) == (3, rng_state, {"note": "x"})
    assert (m2.residual, m2.dtype, m2.aggregation) == (True, "float32", "mean")
    for a, c in zip(m.params + st.m + st.v, m2.params + st2.m + st2.v):
        assert np.array_equal(a, c)
    assert st2.t == st.t
    b = small_batch(9)
    assert np.array_equal(gn.forward(m, b), gn.forward(m2, b))
    assert gn.checkpoint_bytes(m2, st2, 3, rs, meta) == data


def test_checkpoint_errors():
    data = gn.checkpoint_bytes(micro_model(0))
    with pytest.raises(gn.CheckpointError, match="magic"):
        gn.checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(gn.CheckpointError):
        gn.checkpoint_from_bytes(data[:-10])
    body = bytearray(data[:-4])
    body[4] = 9  # version
    import struct
    import zlib
    bad = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(gn.CheckpointError, match="version"):
        gn.checkpoint_from_bytes(bad)


def test_checkpoint_model_runs_on_any_graph(tmp_path):
    m = gn.MpgnnModel(2, 1, 2, K=3, latent=4, hidden=8).init(0)
    path = tmp_path / "m.pmp"
    gn.save_checkpoint(path, m)
    m2 = gn.load_checkpoint(path)[0]
    rng = np.random.default_rng(0)
    for n in (30, 90):
        g = build_mesh(unit_square(), n, 1)
        out = gn.forward(m2, gn.make_batch([graph_item(g, rng)]))
        assert out.shape == (g.n_nodes, 1) and np.isfinite(out).all()
