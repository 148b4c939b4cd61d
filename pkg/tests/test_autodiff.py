"""Engine tests: every op kind against a central finite-difference oracle,
the worked examples, tape/shape error contracts, and store serialization."""

import numpy as np
import pytest

from spenseq import autodiff as ad
from spenseq.container import ContainerError, read_container, write_container

RNG = np.random.default_rng(20240817)


def fd_oracle(fn, arrays, eps=1e-6):
    """Independent central-difference gradient of fn(list-of-arrays) -> float."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat_base = base.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_base.size):
            orig = flat_base[i]
            flat_base[i] = orig + eps
            up = fn(arrays)
            flat_base[i] = orig - eps
            down = fn(arrays)
            flat_base[i] = orig
            flat_g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def check_op_grads(build, arrays, rtol=1e-6, atol=1e-8):
    """build(tensors) -> output Tensor; compares taped grads with the oracle
    through a fixed random projection of the output."""
    proj = RNG.normal(size=np.asarray(build([ad.constant(a) for a in arrays]).values).shape)

    def scalar(arrs):
        out = build([ad.constant(a) for a in arrs]).values
        return float((out * proj).sum())

    tensors = [ad.constant(a) for a in arrays]
    with ad.Tape():
        out = build(tensors)
        loss = ad.sum_all(ad.multiply(out, ad.constant(proj))) if out.values.shape != () \
            else ad.scale(out, float(proj))
        analytic = ad.gradients(loss, tensors)
    numeric = fd_oracle(scalar, [a.copy() for a in arrays])
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


# ---------------------------------------------------------------------------
# per-kind oracle checks
# ---------------------------------------------------------------------------

def test_elementwise_binary_grads():
    for kind_fn in (ad.add, ad.subtract, ad.multiply):
        a = RNG.normal(size=(4, 3))
        b = RNG.normal(size=(4, 3))
        check_op_grads(lambda ts, f=kind_fn: f(ts[0], ts[1]), [a, b])


def test_broadcast_binary_grads():
    for kind_fn in (ad.add, ad.subtract, ad.multiply):
        check_op_grads(lambda ts, f=kind_fn: f(ts[0], ts[1]),
                       [RNG.normal(size=(5, 3)), RNG.normal(size=(3,))])
        check_op_grads(lambda ts, f=kind_fn: f(ts[0], ts[1]),
                       [RNG.normal(size=(4,)), np.asarray(RNG.normal())])


def test_matmul_grads():
    check_op_grads(lambda ts: ad.matmul(ts[0], ts[1]),
                   [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))])
    check_op_grads(lambda ts: ad.matmul(ts[0], ts[1]),
                   [RNG.normal(size=(4,)), RNG.normal(size=(4, 2))])
    check_op_grads(lambda ts: ad.matmul(ts[0], ts[1]),
                   [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))])


def test_dot_grad():
    check_op_grads(lambda ts: ad.dot(ts[0], ts[1]),
                   [RNG.normal(size=(6,)), RNG.normal(size=(6,))])


def test_concat_and_stack_grads():
    check_op_grads(lambda ts: ad.concat_last(ts),
                   [RNG.normal(size=(3, 2)), RNG.normal(size=(3, 4))])
    check_op_grads(lambda ts: ad.concat_last(ts),
                   [RNG.normal(size=(2,)), RNG.normal(size=(5,))])
    check_op_grads(lambda ts: ad.concat_rows(ts),
                   [RNG.normal(size=(2, 3)), RNG.normal(size=(4, 3))])
    check_op_grads(lambda ts: ad.stack_rows(ts),
                   [RNG.normal(size=(4,)), RNG.normal(size=(4,)), RNG.normal(size=(4,))])


def test_gather_grads():
    check_op_grads(lambda ts: ad.row(ts[0], 2), [RNG.normal(size=(4, 3))])
    check_op_grads(lambda ts: ad.slice_rows(ts[0], 1, 3), [RNG.normal(size=(5, 2))])
    check_op_grads(lambda ts: ad.slice_rows(ts[0], 2, 5), [RNG.normal(size=(6,))])


def test_unary_grads():
    x = RNG.normal(size=(3, 4))
    check_op_grads(lambda ts: ad.row_softmax(ts[0]), [x])
    check_op_grads(lambda ts: ad.row_softmax(ts[0]), [RNG.normal(size=(5,))])
    check_op_grads(lambda ts: ad.row_sum(ts[0]), [x])
    check_op_grads(lambda ts: ad.exp(ts[0]), [x])
    check_op_grads(lambda ts: ad.tanh(ts[0]), [x])
    check_op_grads(lambda ts: ad.sigmoid(ts[0]), [x])
    check_op_grads(lambda ts: ad.log(ts[0]), [RNG.uniform(0.2, 3.0, size=(3, 4))])
    # keep hinge inputs away from the kink
    h = RNG.normal(size=(3, 4))
    h[np.abs(h) < 0.05] = 0.5
    check_op_grads(lambda ts: ad.hinge(ts[0]), [h])


def test_reduction_and_scale_grads():
    x = RNG.normal(size=(4, 3))
    check_op_grads(lambda ts: ad.sum_all(ts[0]), [x])
    check_op_grads(lambda ts: ad.mean_all(ts[0]), [x])
    check_op_grads(lambda ts: ad.scale(ts[0], -2.5), [x])


def test_l1_distance_grad():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(3, 4))
    # keep away from ties
    close = np.abs(a - b) < 0.05
    a[close] += 0.5
    check_op_grads(lambda ts: ad.l1_distance(ts[0], ts[1]), [a, b])


def test_embedding_grad():
    table = RNG.normal(size=(6, 3))
    idx = [0, 2, 2, 5]
    check_op_grads(lambda ts: ad.embedding(ts[0], idx), [table])


def test_composite_pipeline_matches_oracle():
    # softmax(W x + b) . target through log: a miniature classifier loss
    w = RNG.normal(size=(4, 5))
    x = RNG.normal(size=(5,))
    b = RNG.normal(size=(4,))
    target = np.abs(RNG.normal(size=(4,))) + 0.1

    def build(ts):
        logits = ad.add(ad.matmul(ts[0], ts[1]), ts[2])
        return ad.log(ad.dot(ad.row_softmax(logits), ts[3]))

    check_op_grads(build, [w, x, b, target])


def test_forward_dispatch_covers_all_kinds():
    a = ad.constant(RNG.normal(size=(3, 2)))
    b = ad.constant(RNG.normal(size=(3, 2)))
    v = ad.constant(RNG.normal(size=(4,)))
    pos = ad.constant(RNG.uniform(0.5, 2.0, size=(3, 2)))
    table = ad.constant(RNG.normal(size=(5, 2)))
    calls = {
        "add": ([a, b], {}),
        "subtract": ([a, b], {}),
        "elementwise-multiply": ([a, b], {}),
        "matrix-multiply": ([a, ad.constant(RNG.normal(size=(2, 4)))], {}),
        "concat-last-axis": ([a, b], {}),
        "concat-rows": ([a, b], {}),
        "stack-rows": ([v, v], {}),
        "row": ([a], {"index": 1}),
        "slice-rows": ([a], {"start": 0, "stop": 2}),
        "row-softmax": ([a], {}),
        "row-sum": ([a], {}),
        "log": ([pos], {}),
        "exp": ([a], {}),
        "tanh": ([a], {}),
        "sigmoid": ([a], {}),
        "hinge": ([a], {}),
        "sum": ([a], {}),
        "mean": ([a], {}),
        "dot": ([v, v], {}),
        "scalar-multiply": ([a], {"coeff": 2.0}),
        "L1-distance": ([a, b], {}),
        "embedding-lookup": ([table], {"indices": [0, 4, 2]}),
    }
    assert set(calls) == set(ad.OP_KINDS)
    for kind, (inputs, attrs) in calls.items():
        out = ad.forward(kind, inputs, **attrs)
        assert isinstance(out, ad.Tensor)
        assert np.all(np.isfinite(out.values))


# ---------------------------------------------------------------------------
# worked examples and algebraic properties
# ---------------------------------------------------------------------------

def test_row_softmax_of_zeros_is_uniform():
    out = ad.row_softmax(ad.constant(np.zeros((3, 4))))
    np.testing.assert_allclose(out.values, np.full((3, 4), 0.25))


def test_row_softmax_rows_are_stochastic():
    for _ in range(25):
        x = RNG.normal(scale=5.0, size=(4, 6))
        out = ad.row_softmax(ad.constant(x)).values
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-12)


def test_hinge_zero_region_blocks_gradient():
    c = ad.constant(np.array(-1.0))
    with ad.Tape():
        loss = ad.hinge(c)
        (g,) = ad.gradients(loss, [c])
    assert g == 0.0
    assert loss.values == 0.0


def test_hinge_subgradient_zero_at_zero():
    c = ad.constant(np.array(0.0))
    with ad.Tape():
        (g,) = ad.gradients(ad.hinge(c), [c])
    assert g == 0.0


def test_sum_backward_is_ones():
    x = ad.constant(RNG.normal(size=(2, 3)))
    with ad.Tape():
        (g,) = ad.gradients(ad.sum_all(x), [x])
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_matmul_identity_preserves():
    x = RNG.normal(size=(4, 4))
    out = ad.matmul(ad.constant(x), ad.constant(np.eye(4)))
    np.testing.assert_allclose(out.values, x)


def test_l1_distance_examples():
    p = ad.constant(np.array([[0.5, 0.5]]))
    y = ad.constant(np.array([[1.0, 0.0]]))
    assert ad.l1_distance(p, y).item() == pytest.approx(1.0)
    same = ad.constant(np.array([1.0, 2.0]))
    assert ad.l1_distance(same, same).item() == 0.0


def test_backward_linearity():
    w = RNG.normal(size=(3, 3))

    def grads_of(fn):
        t = ad.constant(w.copy())
        with ad.Tape():
            (g,) = ad.gradients(fn(t), [t])
        return g

    g1 = grads_of(lambda t: ad.sum_all(ad.tanh(t)))
    g2 = grads_of(lambda t: ad.sum_all(ad.multiply(t, t)))
    g_sum = grads_of(lambda t: ad.add(ad.sum_all(ad.tanh(t)), ad.sum_all(ad.multiply(t, t))))
    np.testing.assert_allclose(g_sum, g1 + g2, rtol=1e-12)


def test_gradient_blocking_by_group():
    store = ad.ParamStore()
    wa = store.add("wa", RNG.normal(size=(3,)), "cost_augmented")
    wb = store.add("wb", RNG.normal(size=(3,)), "test_time")
    with ad.Tape():
        loss = ad.add(ad.sum_all(ad.tanh(wa)), ad.sum_all(ad.tanh(wb)))
        grads = ad.backward(loss, store, groups=("cost_augmented",))
    assert set(grads) == {"wa"}
    assert np.any(grads["wa"] != 0)
    assert wb.grad is None


def test_group_param_unused_in_graph_gets_zero_grad():
    store = ad.ParamStore()
    wa = store.add("wa", RNG.normal(size=(3,)), "energy")
    store.add("unused", RNG.normal(size=(2, 2)), "energy")
    with ad.Tape():
        grads = ad.backward(ad.sum_all(wa), store, groups=("energy",))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_param_reused_across_tapes_gets_fresh_grads():
    store = ad.ParamStore()
    w = store.add("w", np.array([1.0, 2.0]), "energy")
    for coeff in (1.0, 3.0):
        with ad.Tape():
            loss = ad.sum_all(ad.scale(w, coeff))
            ad.backward(loss, store)
        np.testing.assert_allclose(w.grad, np.full(2, coeff))


# ---------------------------------------------------------------------------
# error contracts
# ---------------------------------------------------------------------------

def test_shape_mismatch_names_kind_and_shapes():
    with pytest.raises(ad.OpError, match=r"add.*\(2, 3\).*\(3, 2\)"):
        ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))
    with pytest.raises(ad.OpError, match="matrix-multiply"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))
    with pytest.raises(ad.OpError, match="dot"):
        ad.dot(ad.constant(np.zeros(3)), ad.constant(np.zeros(4)))


def test_log_domain_violation_is_an_error():
    with pytest.raises(ad.OpError, match="log"):
        ad.log(ad.constant(np.array([0.5, 0.0])))
    with pytest.raises(ad.OpError, match="log"):
        ad.log(ad.constant(np.array([-1.0])))


def test_log_floored_handles_tiny_values():
    out = ad.log_floored(ad.constant(np.array([1e-20, 0.5])), 1e-12)
    np.testing.assert_allclose(out.values, [np.log(1e-12), np.log(0.5)])


def test_embedding_index_out_of_range():
    with pytest.raises(ad.OpError, match="embedding-lookup"):
        ad.embedding(ad.constant(np.zeros((3, 2))), [0, 3])


def test_backward_requires_scalar_loss():
    x = ad.constant(np.zeros((2, 2)))
    store = ad.ParamStore()
    with ad.Tape():
        out = ad.tanh(x)
        with pytest.raises(ad.TapeError, match="scalar"):
            ad.backward(out, store)


def test_backward_on_constant_loss_is_an_error():
    store = ad.ParamStore()
    with pytest.raises(ad.TapeError, match="constant"):
        ad.backward(ad.constant(np.array(1.0)), store)


def test_tape_cannot_be_swept_twice():
    store = ad.ParamStore()
    w = store.add("w", np.ones(2), "energy")
    with ad.Tape():
        loss = ad.sum_all(w)
        ad.backward(loss, store)
        with pytest.raises(ad.TapeError, match="consumed"):
            ad.backward(loss, store)


def test_nested_tapes_rejected():
    with ad.Tape():
        with pytest.raises(ad.TapeError, match="already active"):
            with ad.Tape():
                pass


def test_unknown_forward_kind_rejected():
    with pytest.raises(ad.OpError, match="unknown op kind"):
        ad.forward("transpose", [ad.constant(np.zeros((2, 2)))])


# ---------------------------------------------------------------------------
# ParamStore and serialization
# ---------------------------------------------------------------------------

def test_param_store_group_bookkeeping():
    store = ad.ParamStore()
    store.add("u", np.zeros((2, 3)), "energy")
    store.add("w", np.zeros((3,)), "cost_augmented")
    store.add("v", np.zeros((4,)), "test_time")
    assert store.names(("energy",)) == ["u"]
    assert store.n_values() == 13
    assert store.n_values(("energy",)) == 6
    with pytest.raises(ValueError, match="duplicate"):
        store.add("u", np.zeros(1), "energy")
    with pytest.raises(ValueError, match="unknown parameter group"):
        store.add("x", np.zeros(1), "theta")


def test_param_store_save_load_round_trip(tmp_path):
    store = ad.ParamStore()
    store.add("emb", RNG.normal(size=(5, 3)), "energy")
    store.add("w_out", RNG.normal(size=(3, 2)), "cost_augmented")
    store.add("bias", RNG.normal(size=(2,)), "test_time")
    path = str(tmp_path / "model.params")
    store.save(path)
    loaded = ad.ParamStore.load(path)
    assert loaded.names() == store.names()
    for name in store.names():
        np.testing.assert_array_equal(loaded.get(name).values, store.get(name).values)
        assert loaded.group_of(name) == store.group_of(name)
    # byte-identical rewrite
    path2 = str(tmp_path / "model2.params")
    loaded.save(path2)
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_container_rejects_corruption(tmp_path):
    path = str(tmp_path / "c.bin")
    write_container(path, b"PST1", [("a", np.arange(4.0))])
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-5])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(path, b"PST1")
    open(path, "wb").write(raw + b"xx")
    with pytest.raises(ContainerError, match="trailing"):
        read_container(path, b"PST1")
    open(path, "wb").write(b"XXXX" + raw[4:])
    with pytest.raises(ContainerError, match="bad tag"):
        read_container(path, b"PST1")


def test_snapshot_restore_bitwise():
    store = ad.ParamStore()
    w = store.add("w", RNG.normal(size=(3, 3)), "energy")
    snap = store.snapshot()
    w.values += 1.0
    store.restore(snap)
    np.testing.assert_array_equal(w.values, snap["w"])


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

def test_grad_check_passes_on_smooth_function():
    store = ad.ParamStore()
    store.add("w", RNG.normal(size=(3, 2)), "energy")
    store.add("b", RNG.normal(size=(2,)), "energy")

    def f(s):
        x = ad.constant(np.array([0.3, -0.7, 1.1]))
        return ad.sum_all(ad.tanh(ad.add(ad.matmul(x, s.get("w")), s.get("b"))))

    report = ad.grad_check(f, store)
    assert report.ok
    assert report.worst_rel_err <= 1e-4


def test_grad_check_constant_function_reports_zeros():
    store = ad.ParamStore()
    store.add("w", RNG.normal(size=(2,)), "energy")
    report = ad.grad_check(lambda s: ad.constant(np.array(3.0)), store)
    assert report.ok
    assert report.worst_rel_err == 0.0


def test_grad_check_catches_wrong_backward(monkeypatch):
    store = ad.ParamStore()
    store.add("w", RNG.normal(size=(4,)), "energy")

    def broken_tanh(t):
        out = np.tanh(t.values)
        return ad._apply("tanh", (t,), out, lambda g: (g * (1.0 - 0.5 * out * out),))

    monkeypatch.setattr(ad, "tanh", broken_tanh)
    report = ad.grad_check(lambda s: ad.sum_all(ad.tanh(s.get("w"))), store)
    assert not report.ok
