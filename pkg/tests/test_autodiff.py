import numpy as np
import pytest

from mqformer import autodiff as ad
from mqformer.autodiff import Tensor
from oracles import additive_mask_attention, central_diff, logsumexp_ce, rel_err


def leaf(a):
    return Tensor(a, requires_grad=True)


def check_grad(build, arrays, n_tol=1e-4):
    """Compare autodiff against central differences for ``sum(w * build(*tensors))``."""
    tensors = [leaf(a.copy()) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(99).normal(size=out.shape)
    loss = ad.sum_all(ad.mul(out, Tensor(w)))
    ad.backward(loss)
    for t in tensors:
        def f():
            with ad.no_grad():
                return float((build(*tensors).data * w).sum())
        num = central_diff(f, t.data)
        assert rel_err(t.grad, num) < n_tol, rel_err(t.grad, num)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_col():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_sum_grad_is_ones_bt():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(5, 7))), Tensor(rng.normal(size=(7, 3)))
    ad.backward(ad.sum_all(ad.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, rtol=1e-12)
    with ad.no_grad():
        num = central_diff(lambda: float(ad.matmul(a, b).data.sum()), a.data)
    assert rel_err(a.grad, num) < 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (Tensor(rng.normal(size=s)) for s in [(4, 5), (5, 6), (6, 3)])
        left = ad.matmul(ad.matmul(a, b), c).data
        right = ad.matmul(a, ad.matmul(b, c)).data
        np.testing.assert_allclose(left, right, atol=1e-9)


def test_batched_matmul_grads():
    rng = np.random.default_rng(2)
    check_grad(ad.matmul, [rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))])
    check_grad(ad.matmul, [rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 5, 2))])


# -- softmax -----------------------------------------------------------------


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_nan_propagates():
    assert np.isnan(ad.softmax(Tensor([np.nan, 1.0])).data).all()


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    y = ad.softmax(Tensor(rng.normal(scale=30, size=(50, 9))), axis=1).data
    assert np.all(np.abs(y.sum(axis=1) - 1) < 1e-12)
    assert y.min() >= 0 and y.max() <= 1


def test_softmax_jacobian_matches_fd():
    rng = np.random.default_rng(4)
    x = rng.normal(size=4)
    t = leaf(x.copy())
    y = ad.softmax(t)
    for i in range(4):
        t.grad = None
        ad.backward(ad.slice_axis(y, 0, i, i + 1))
        with ad.no_grad():
            num = central_diff(lambda: float(ad.softmax(Tensor(t.data)).data[i]), t.data)
        assert rel_err(t.grad, num) < 1e-6


# -- layer norm --------------------------------------------------------------


def test_layer_norm_cases():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(ad.layer_norm(Tensor([[5.0, 5.0]]), one, zero).data, [[0.0, 0.0]])
    np.testing.assert_allclose(ad.layer_norm(Tensor([[1.0, 3.0]]), one, zero, eps=1e-15).data, [[-1, 1]], atol=1e-7)


def test_layer_norm_grad():
    rng = np.random.default_rng(5)
    check_grad(ad.layer_norm, [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)])


# -- cross entropy -----------------------------------------------------------


def test_cross_entropy_cases():
    assert ad.cross_entropy_logits(Tensor([[100.0, 0, 0]]), [0]).item() < 1e-12
    assert abs(ad.cross_entropy_logits(Tensor(np.zeros((2, 4))), [1, 3]).item() - np.log(4)) < 1e-12
    assert ad.cross_entropy_logits(Tensor(np.zeros((2, 4))), [-100, -100]).item() == 0.0
    with pytest.raises(IndexError):
        ad.cross_entropy_logits(Tensor(np.zeros((1, 4))), [4])


def test_cross_entropy_matches_lse_oracle():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(3, 5))
    targets = [4, -100, 1]
    t = leaf(logits.copy())
    loss = ad.cross_entropy_logits(t, targets)
    assert rel_err(loss.item(), logsumexp_ce(logits, targets)) < 1e-6
    ad.backward(loss)
    num = central_diff(lambda: logsumexp_ce(t.data, targets), t.data)
    assert rel_err(t.grad, num) < 1e-6


# -- attention ---------------------------------------------------------------


def test_attention_identity_mask():
    rng = np.random.default_rng(7)
    q, k, v = (Tensor(rng.normal(size=(5, 8))) for _ in range(3))
    out = ad.masked_attention(q, k, v, np.eye(5, dtype=bool), heads=2)
    np.testing.assert_allclose(out.data, v.data, atol=1e-15)


def test_attention_uniform_gives_mean():
    rng = np.random.default_rng(8)
    v = Tensor(rng.normal(size=(4, 6)))
    q = k = Tensor(np.ones((4, 6)))
    out = ad.masked_attention(q, k, v, np.ones((4, 4), bool), heads=3)
    np.testing.assert_allclose(out.data, np.tile(v.data.mean(0), (4, 1)), atol=1e-14)


def test_attention_matches_additive_oracle():
    rng = np.random.default_rng(9)
    q, k, v = (rng.normal(size=(6, 8)) for _ in range(3))
    mask = rng.random((6, 6)) < 0.6
    mask[np.arange(6), np.arange(6)] = True
    out = ad.masked_attention(Tensor(q), Tensor(k), Tensor(v), mask, heads=2)
    assert np.max(np.abs(out.data - additive_mask_attention(q, k, v, mask, 2))) < 1e-9


def test_attention_empty_row_is_zero():
    rng = np.random.default_rng(10)
    mask = np.ones((3, 3), bool)
    mask[1] = False
    q, k, v = (leaf(rng.normal(size=(3, 4))) for _ in range(3))
    out = ad.masked_attention(q, k, v, mask, heads=1)
    assert np.all(out.data[1] == 0) and np.isfinite(out.data).all()
    ad.backward(ad.sum_all(out))
    assert np.isfinite(q.grad).all() and np.all(q.grad[1] == 0)


def test_attention_zero_keys():
    q = Tensor(np.ones((2, 3, 4)))
    kv = Tensor(np.zeros((2, 0, 4)))
    out = ad.masked_attention(q, kv, kv, np.zeros((2, 3, 0), bool), heads=2)
    assert out.shape == (2, 3, 4) and np.all(out.data == 0)


def test_attention_mask_size_mismatch():
    x = Tensor(np.ones((3, 4)))
    with pytest.raises(ad.ShapeError):
        ad.masked_attention(x, x, x, np.ones((4, 4), bool), heads=2)


def test_attention_grad():
    rng = np.random.default_rng(11)
    mask = rng.random((2, 5, 4)) < 0.7
    mask[0, 2] = False

    def f(q, k, v):
        return ad.masked_attention(q, k, v, mask, heads=2)

    check_grad(f, [rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 4, 6))])


# -- backward ----------------------------------------------------------------


def test_backward_sum_and_square():
    x = leaf([1.0, 2.0])
    grads = ad.backward(ad.sum_all(x), {"x": x})
    np.testing.assert_array_equal(grads["x"], [1, 1])
    y = leaf([1.0, 2.0])
    ad.backward(ad.sum_all(ad.mul(y, y)))
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_rejects_nonscalar_and_zeros_unreachable():
    x, z = leaf(np.ones(3)), leaf(np.ones(2))
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.scale(x, 2.0))
    grads = ad.backward(ad.sum_all(x), {"x": x, "z": z})
    np.testing.assert_array_equal(grads["z"], [0, 0])


def test_tape_is_topological():
    x = leaf(np.ones(2))
    y = ad.relu(ad.scale(x, 2.0))
    loss = ad.sum_all(ad.add(y, x))
    tape = ad.Tape.from_root(loss)
    position = {n.node_id: i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert position[p.node_id] < position[node.node_id]


# -- finite-difference sweep across every differentiable op ------------------

OPS = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "mul_scalar": (lambda a, b: ad.mul(a, b), [(3, 4), ()]),
    "div_scalar": (lambda a, b: ad.div(a, ad.add(ad.mul(b, b), Tensor(1.0))), [(3, 4), ()]),
    "scale": (lambda a: ad.scale(a, -1.7), [(3, 4)]),
    "relu": (lambda a: ad.relu(a), [(3, 4)]),
    "clip": (lambda a: ad.clip(a, -0.8, 0.8), [(3, 4)]),
    "add_bias": (lambda a, b: ad.add_bias(a, b), [(2, 3, 4), (4,)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "transpose": (lambda a: ad.transpose(a), [(2, 3, 4)]),
    "transpose_perm": (lambda a: ad.transpose(a, (1, 2, 0)), [(2, 3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (6, 4)), [(2, 3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3, 4), (2, 2, 4)]),
    "slice": (lambda a: ad.slice_axis(a, 1, 1, 3), [(2, 4, 3)]),
    "gather_rows": (lambda a: ad.gather_rows(a, [2, 0]), [(2, 4, 3)]),
    "mean_pool": (lambda a: ad.mean_pool(a, 1), [(2, 4, 3)]),
    "sum_all": (lambda a: ad.sum_all(a), [(2, 4, 3)]),
    "softmax": (lambda a: ad.softmax(a, axis=-1), [(3, 5)]),
    "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), [(3, 5)]),
    "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [(3, 5), (5,), (5,)]),
    "l2_normalize": (lambda a: ad.l2_normalize(a), [(3, 5)]),
    "embedding": (lambda t: ad.embedding_lookup(t, [[0, 2, 2], [1, 0, 3]]), [(4, 3)]),
    "cross_entropy": (lambda a: ad.cross_entropy_logits(a, [1, 0, -100, 4]), [(4, 5)]),
    "attention": (
        lambda q, k, v: ad.masked_attention(q, k, v, np.tril(np.ones((4, 4), bool)), heads=2),
        [(4, 6), (4, 6), (4, 6)],
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("instance", range(20))
def test_op_gradients_fd(name, instance):
    build, shapes = OPS[name]
    rng = np.random.default_rng(1000 * instance + len(name))
    arrays = [rng.normal(size=s) for s in shapes]
    if name == "relu":
        arrays[0] = np.where(np.abs(arrays[0]) < 1e-3, 0.5, arrays[0])
    if name == "clip":  # keep clear of the kinks at the bounds
        arrays[0] = np.where(np.abs(np.abs(arrays[0]) - 0.8) < 1e-3, 0.3, arrays[0])
    check_grad(build, arrays)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        x = leaf(rng.normal(size=(4, 8)))
        w = leaf(rng.normal(size=(8, 8)))
        y = ad.softmax(ad.matmul(x, w))
        ad.backward(ad.sum_all(ad.mul(y, y)))
        return y.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()
