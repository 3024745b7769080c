import struct

import numpy as np
import pytest

from skilltopo import autograd as ag
from skilltopo import mmgt
from skilltopo.mmgt import MmgtParams, ModelDims, ShapeError
from skilltopo.rng import stream
from skilltopo.topology import candidate_edges

SMALL = ModelDims(text_dim=8, image_dim=6, hidden=8, layers=2)


def inputs(dims, n=4, p=3, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=dims.text_dim), rng.normal(size=(p, dims.image_dim)),
            rng.normal(size=(n, dims.text_dim)))


def leaves(params, grad=False):
    return mmgt._Leaves(params, grad)


def test_init_bounds_and_canonical_order():
    dims = ModelDims(text_dim=16, image_dim=8, hidden=16, layers=2)
    params = MmgtParams.init(dims, stream(0, 1))
    assert params.names() == list(mmgt.parameter_shapes(dims))
    for name, t in params.tensors.items():
        if name.endswith("gamma"):
            assert np.all(t == 1.0)
        elif name.rsplit(".", 1)[1] in ("beta", "b1", "b2", "b"):
            assert np.all(t == 0.0)
        else:
            assert np.abs(t).max() <= 1.0 / np.sqrt(mmgt._fan_in(name, t.shape))
    assert params["select.W_g"].shape == (16, 32)
    assert params["gtl0.ffn.W1"].shape == (16, 64)
    assert params["edge.b"].shape == ()


def test_params_reject_bad_shapes_and_nonfinite():
    params = MmgtParams.zeros(SMALL)
    with pytest.raises(ShapeError):
        params.replace(query__W_t=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        params.replace(edge__b=np.array(np.nan))


def test_digest_depends_on_values_only():
    a = MmgtParams.init(SMALL, stream(3))
    b = MmgtParams.init(SMALL, stream(3))
    assert a.digest() == b.digest()
    assert a.replace(edge__b=np.array(0.1)).digest() != a.digest()


def test_encode_query_zero_params_gives_zero_vector():
    q, patches, _ = inputs(SMALL)
    v, _ = mmgt.encode_query(ag.constant(q[None]), ag.constant(patches), leaves(MmgtParams.zeros(SMALL)))
    assert np.all(v.data == 0.0)


def test_single_patch_attention_weight_is_one():
    params = MmgtParams.init(SMALL, stream(1))
    lv = leaves(params)
    q, patches, _ = inputs(SMALL, p=1)
    img = ag.constant(patches) @ lv["query.W_img"].T
    _, weights = mmgt.cross_attention(ag.constant(q[None]) @ lv["query.W_t"].T, img, lv, "query.attn")
    assert weights.data.shape == (1, 1) and weights.data[0, 0] == 1.0


def test_encode_query_gradient_wrt_W_t():
    params = MmgtParams.init(SMALL, stream(2))
    q, patches, _ = inputs(SMALL, seed=2)
    w = np.random.default_rng(5).normal(size=(1, SMALL.hidden))

    def loss(W_t):
        lv = leaves(params.replace(query__W_t=W_t))
        v, _ = mmgt.encode_query(ag.constant(q[None]), ag.constant(patches), lv)
        return float(np.sum(w * v.data))

    lv = leaves(params, grad=True)
    v, _ = mmgt.encode_query(ag.constant(q[None]), ag.constant(patches), lv)
    ag.backward(v, w)
    W = params["query.W_t"]
    eps = 1e-4
    for idx in [(0, 0), (3, 5), (7, 7)]:
        e = np.zeros_like(W)
        e[idx] = eps
        numeric = (loss(W + e) - loss(W - e)) / (2 * eps)
        analytic = lv["query.W_t"].grad[idx]
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-9)


def test_project_nodes_zero_weights():
    _, _, x = inputs(SMALL)
    h0 = mmgt.project_nodes(ag.constant(x), leaves(MmgtParams.zeros(SMALL)))
    assert np.all(h0.data == 0.0)


def test_project_nodes_row_equivariance():
    params = MmgtParams.init(SMALL, stream(4))
    _, _, x = inputs(SMALL)
    perm = np.array([2, 0, 3, 1])
    a = mmgt.project_nodes(ag.constant(x), leaves(params)).data
    b = mmgt.project_nodes(ag.constant(x[perm]), leaves(params)).data
    np.testing.assert_array_equal(a[perm], b)


def test_zero_gate_matrix_gives_half_gates():
    params = MmgtParams.init(SMALL, stream(5)).replace(select__W_g=np.zeros((8, 16)))
    lv = leaves(params)
    rng = np.random.default_rng(0)
    h0, v, img = (ag.constant(rng.normal(size=s)) for s in [(4, 8), (1, 8), (3, 8)])
    _, gates, gated = mmgt.selective_image_attention(h0, v, img, lv)
    assert np.all(gates.data == 0.5)
    np.testing.assert_allclose(gated.data, h0.data + 0.5 * v.data, rtol=0, atol=1e-15)


def test_zero_value_projection_preserves_residual():
    params = MmgtParams.init(SMALL, stream(6)).replace(select__attn__W_V=np.zeros((8, 8)))
    lv = leaves(params)
    rng = np.random.default_rng(1)
    h0, v, img = (ag.constant(rng.normal(size=s)) for s in [(4, 8), (1, 8), (3, 8)])
    h1, gates, _ = mmgt.selective_image_attention(h0, v, img, lv)
    expected = lv.ln(h0, "select.ln").data
    np.testing.assert_allclose(h1.data, expected, atol=1e-12)
    assert np.all((gates.data > 0) & (gates.data < 1))


def test_role_bias():
    complete = candidate_edges("Complete", 3)
    assert np.all(mmgt.role_bias(complete.role_pairs, 3) == 0.0)
    linear = candidate_edges("Linear", 4)
    bias = mmgt.role_bias(linear.role_pairs, 4)
    assert set(np.unique(bias)) == {0.0, -1e4}
    for i in range(4):
        for j in range(4):
            assert (bias[i, j] == 0.0) == ((i, j) in linear.role_pairs)


def test_excluded_pair_attention_weight_is_negligible():
    pairs = {(1, 0), (1, 1)}
    bias = mmgt.role_bias(pairs, 3)
    weights = ag.softmax(ag.constant(np.zeros((1, 3)) + bias[1:2])).data
    assert weights[0, 2] < 1e-100 and np.isfinite(weights).all()
    assert weights[0, 2] < 1e-100 * weights[0, 0]


def test_gtl_zero_weights_zero_input():
    h = mmgt.gtl_layer(ag.constant(np.zeros((3, 8))), np.zeros((3, 3)), leaves(MmgtParams.zeros(SMALL)), 0)
    assert np.all(h.data == 0.0)


def test_gtl_identical_rows_uniform_attention():
    params = MmgtParams.init(SMALL, stream(7))
    h = ag.constant(np.tile(np.random.default_rng(0).normal(size=8), (4, 1)))
    _, weights = mmgt.cross_attention(h, h, leaves(params), "gtl0.attn", np.zeros((4, 4)))
    np.testing.assert_allclose(weights.data, np.full((4, 4), 0.25), rtol=1e-12)


def test_grnl_single_agent_zero_weights():
    v, h = mmgt.grnl_layer(ag.constant(np.zeros((1, 8))), ag.constant(np.zeros((1, 8))),
                           leaves(MmgtParams.zeros(SMALL)), 0)
    assert np.all(v.data == 0.0) and np.all(h.data == 0.0)


def test_grnl_scatter_single_key_weight_is_one():
    params = MmgtParams.init(SMALL, stream(8))
    rng = np.random.default_rng(2)
    _, weights = mmgt.cross_attention(ag.constant(rng.normal(size=(4, 8))),
                                      ag.constant(rng.normal(size=(1, 8))),
                                      leaves(params), "grnl0.scatter")
    assert np.all(weights.data == 1.0)


def test_edge_logits_zero_and_directionality():
    params = MmgtParams.zeros(SMALL)
    h = ag.constant(np.random.default_rng(0).normal(size=(4, 8)))
    _, norm = mmgt.edge_logits(h, leaves(params))
    assert np.all(norm.data == 0.0)
    W = np.zeros((8, 8))
    W[0, 1] = 1.0
    h = ag.constant(np.eye(8)[:2])
    raw, _ = mmgt.edge_logits(h, leaves(params.replace(edge__W_edge=W)))
    assert raw.data[0, 1] == 1.0 and raw.data[1, 0] == 0.0


def test_forward_shape_range_determinism():
    dims = ModelDims(text_dim=16, image_dim=8, hidden=16, layers=2)
    params = MmgtParams.init(dims, stream(9))
    q, patches, x = inputs(dims, n=4, p=4)
    prior = candidate_edges("Complete", 4)
    a = mmgt.forward(q, patches, x, prior.role_pairs, params)
    b = mmgt.forward(q, patches, x, prior.role_pairs, params)
    assert a.logits.shape == (4, 4)
    assert np.array_equal(a.logits, b.logits)
    assert np.all(np.abs(a.logits) <= 1.0)
    assert len(a.v) == dims.layers + 1 and len(a.h_layers) == dims.layers
    assert a.gates.shape == (4, 16) and a.gated_queries.shape == (4, 16)


def test_forward_range_under_extreme_inputs():
    params = MmgtParams.init(SMALL, stream(10))
    params = params.replace(edge__W_edge=params["edge.W_edge"] * 1e6)
    q, patches, x = inputs(SMALL)
    out = mmgt.forward(q * 1e3, patches * 1e3, x, candidate_edges("Complete", 4).role_pairs, params)
    assert np.all(np.abs(out.logits) <= 1.0) and np.all(np.isfinite(out.logits))


@pytest.mark.parametrize("seed", range(3))
def test_forward_permutation_equivariance(seed):
    params = MmgtParams.init(SMALL, stream(11, seed))
    q, patches, x = inputs(SMALL, n=5, seed=seed)
    prior = candidate_edges("Random", 5, 0.5, seed)
    perm = np.random.default_rng(seed).permutation(5)
    inv = np.argsort(perm)
    pairs_p = {(int(inv[i]), int(inv[j])) for i, j in prior.role_pairs}
    a = mmgt.forward(q, patches, x, prior.role_pairs, params, requires_grad=False).logits
    b = mmgt.forward(q, patches, x[perm], pairs_p, params, requires_grad=False).logits
    np.testing.assert_allclose(a[np.ix_(perm, perm)], b, atol=1e-12)


def _trace():
    params = MmgtParams.init(SMALL, stream(12))
    q, patches, x = inputs(SMALL)
    prior = candidate_edges("Linear", 4)
    return params, prior, mmgt.forward(q, patches, x, prior.role_pairs, params)


def test_backward_zero_upstream():
    params, prior, trace = _trace()
    grads = mmgt.backward(trace, np.zeros((4, 4)), prior.candidate_mask(), params)
    assert all(not g.any() for g in grads.values())


def test_backward_non_candidate_upstream_ignored():
    params, prior, trace = _trace()
    up = np.zeros((4, 4))
    up[3, 0] = 1.0  # not a Linear candidate
    up[2, 2] = 1.0  # diagonal
    grads = mmgt.backward(trace, up, prior.candidate_mask(), params)
    assert all(not g.any() for g in grads.values())


def test_backward_rejects_other_params():
    params, prior, trace = _trace()
    with pytest.raises(ValueError):
        mmgt.backward(trace, np.ones((4, 4)), prior.candidate_mask(), MmgtParams.zeros(SMALL))


def test_checkpoint_round_trip(tmp_path):
    params = MmgtParams.init(SMALL, stream(13))
    path = tmp_path / "p.mmgt"
    params.save(path)
    loaded = MmgtParams.load(path)
    assert loaded.dims == SMALL and loaded.digest() == params.digest()


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "t.mmgt"
    mmgt.write_tensors(path, {"ab": np.array([[1.5, -2.0]]), "s": np.array(3.0)})
    expected = (b"MMGT" + bytes([1])
                + struct.pack("<I", 2) + b"ab" + struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.5, -2.0)
                + struct.pack("<I", 1) + b"s" + struct.pack("<I", 0) + struct.pack("<d", 3.0))
    assert path.read_bytes() == expected


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.mmgt"
    path.write_bytes(b"NOPE\x01")
    with pytest.raises(ValueError):
        mmgt.read_tensors(path)
    path.write_bytes(b"MMGT\x01" + struct.pack("<I", 50) + b"x")
    with pytest.raises(ValueError):
        mmgt.read_tensors(path)


def test_patch_file_layout(tmp_path):
    path = tmp_path / "p.bin"
    arr = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    mmgt.write_patch_file(path, arr)
    assert path.read_bytes() == struct.pack("<ii", 2, 3) + struct.pack("<6f", *arr.ravel())
    np.testing.assert_array_equal(mmgt.read_patch_file(path), arr)
    path.write_bytes(struct.pack("<ii", 2, 3) + b"\0" * 4)
    with pytest.raises(ValueError):
        mmgt.read_patch_file(path)


def test_forward_shape_errors():
    params = MmgtParams.init(SMALL, stream(14))
    q, patches, x = inputs(SMALL)
    pairs = candidate_edges("Complete", 4).role_pairs
    with pytest.raises(ShapeError):
        mmgt.forward(q[:-1], patches, x, pairs, params)
    with pytest.raises(ShapeError):
        mmgt.forward(q, patches[:, :-1], x, pairs, params)
