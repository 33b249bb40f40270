import numpy as np
import pytest

from stlab import autodiff as ad
from fdcheck import check_grads, rel_err, numeric_grad


def rand(rng, *shape):
    return ad.tensor(rng.uniform(-2, 2, size=shape))


def test_matmul_identity():
    a = ad.tensor(np.eye(2))
    b = ad.tensor([[3.0, 4.0], [5.0, 6.0]])
    out = ad.matmul(a, b)
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_1x1():
    out = ad.matmul(ad.tensor([[2.0]]), ad.tensor([[3.0]]))
    assert out.data[0, 0] == 6.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = rand(rng, 3, 4)
    b = rand(rng, 4, 2)
    worst = check_grads(lambda: ad.sum_all(ad.matmul(a, b)), [a, b], rng, tol=1e-6)
    assert worst < 1e-6


def test_softmax_symmetry():
    out = ad.softmax(ad.tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, 1 / 3)


def test_softmax_analytic():
    out = ad.softmax(ad.tensor([0.0, np.log(2.0)]))
    assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, size=7)
    for c in (-3.0, 0.5, 11.0):
        a = ad.softmax(ad.tensor(x)).data
        b = ad.softmax(ad.tensor(x + c)).data
        assert np.abs(a - b).max() < 1e-12


def test_mean_pool_basic():
    h = ad.tensor([[1.0, 1.0], [3.0, 3.0]])
    out = ad.mean_pool(h, 0, 2)
    assert np.array_equal(out.data, [2.0, 2.0])


def test_mean_pool_single_row_identity():
    h = ad.tensor([[1.0, 2.0], [5.0, 7.0]])
    out = ad.mean_pool(h, 1, 2)
    assert np.array_equal(out.data, [5.0, 7.0])


def test_mean_pool_empty_span_rejected():
    h = ad.tensor(np.zeros((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.mean_pool(h, 2, 2)


def test_mean_pool_gradient():
    rng = np.random.default_rng(2)
    h = rand(rng, 6, 3)
    worst = check_grads(lambda: ad.sum_all(ad.mean_pool(h, 1, 4)), [h], rng, tol=1e-6)
    assert worst < 1e-6


def test_layer_norm_constant_vector_zero():
    out = ad.layer_norm(ad.tensor([4.0, 4.0, 4.0, 4.0]))
    assert np.abs(out.data).max() == 0.0


def test_conv2d_downsamples_100_to_25():
    # ceil(100/2) = 50, ceil(50/2) = 25 under same padding
    rng = np.random.default_rng(3)
    x = ad.tensor(rng.normal(size=(1, 100, 8)))
    w = ad.tensor(rng.normal(size=(4, 1, 3, 3)))
    y1 = ad.conv2d(x, w)
    assert y1.data.shape == (4, 50, 4)
    w2 = ad.tensor(rng.normal(size=(4, 4, 3, 3)))
    y2 = ad.conv2d(y1, w2)
    assert y2.data.shape == (4, 25, 2)


def test_conv2d_odd_length():
    rng = np.random.default_rng(4)
    x = ad.tensor(rng.normal(size=(2, 7, 5)))
    w = ad.tensor(rng.normal(size=(3, 2, 3, 3)))
    assert ad.conv2d(x, w).data.shape == (3, 4, 3)


def test_backward_visits_each_node_once():
    rng = np.random.default_rng(5)
    x = rand(rng, 4)
    # diamond: x feeds two branches that rejoin
    a = ad.relu(x)
    b = ad.scale(x, 2.0)
    c = ad.add(a, b)
    root = ad.sum_all(ad.mul(c, c))
    root.backward()
    for node in (x, a, b, c, root):
        assert node.visit_count == 1


def test_backward_root_grad_is_ones_and_leaves_populated():
    rng = np.random.default_rng(6)
    x = rand(rng, 3, 3)
    y = rand(rng, 3, 3)
    root = ad.sum_all(ad.matmul(x, y))
    root.backward()
    assert np.array_equal(root.grad, np.ones_like(root.data))
    assert x.grad is not None and x.grad.shape == x.data.shape
    assert y.grad is not None and y.grad.shape == y.data.shape


def test_second_backward_raises_until_reset():
    x = ad.tensor([1.0, 2.0])
    root = ad.sum_all(x)
    root.backward()
    with pytest.raises(ad.GraphError):
        root.backward()
    ad.reset_grads(root)
    root.backward()
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_forward_determinism():
    rng1 = np.random.default_rng(7)
    rng2 = np.random.default_rng(7)

    def run(rng):
        x = ad.tensor(rng.normal(size=(5, 4)))
        w = ad.tensor(rng.normal(size=(4, 4)))
        h = ad.gelu(ad.linear(x, w))
        return ad.softmax(h, axis=-1).data

    assert np.array_equal(run(rng1), run(rng2))


def test_dropout_eval_mode_is_noop():
    x = ad.tensor([1.0, 2.0, 3.0])
    out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
    assert out is x


def test_dropout_mask_seeded_and_scaled():
    x = ad.tensor(np.ones(1000))
    out = ad.dropout(x, 0.25, np.random.default_rng(11), training=True)
    kept = out.data != 0
    assert np.allclose(out.data[kept], 1 / 0.75)
    again = ad.dropout(x, 0.25, np.random.default_rng(11), training=True)
    assert np.array_equal(out.data, again.data)


def test_embedding_lookup_and_grad_scatter():
    table = ad.tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    out = ad.embedding_lookup(table, [2, 0, 2])
    assert np.array_equal(out.data, [[2.0, 2.0], [1.0, 0.0], [2.0, 2.0]])
    ad.sum_all(out).backward()
    assert np.array_equal(table.grad, [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])


GRADIENT_CASES = {
    "add": lambda rng: ((lambda a, b: ad.add(a, b)), [(3, 4), (3, 4)]),
    "add_broadcast": lambda rng: ((lambda a, b: ad.add(a, b)), [(3, 4), (4,)]),
    "mul": lambda rng: ((lambda a, b: ad.mul(a, b)), [(2, 5), (2, 5)]),
    "scale": lambda rng: ((lambda a: ad.scale(a, -1.7)), [(4, 3)]),
    "matmul": lambda rng: ((lambda a, b: ad.matmul(a, b)), [(3, 4), (4, 2)]),
    "matmul_batched": lambda rng: ((lambda a, b: ad.matmul(a, b)), [(2, 3, 4), (2, 4, 3)]),
    "linear": lambda rng: ((lambda x, w, b: ad.linear(x, w, b)), [(5, 3), (3, 4), (4,)]),
    "softmax": lambda rng: ((lambda a: ad.softmax(a, axis=-1)), [(3, 6)]),
    "log_softmax": lambda rng: ((lambda a: ad.log_softmax(a, axis=-1)), [(3, 6)]),
    "log": lambda rng: ((lambda a: ad.log(a)), [(4, 4)]),
    "relu": lambda rng: ((lambda a: ad.relu(a)), [(5, 5)]),
    "gelu": lambda rng: ((lambda a: ad.gelu(a)), [(5, 5)]),
    "abs": lambda rng: ((lambda a: ad.abs_(a)), [(5, 5)]),
    "layer_norm": lambda rng: ((lambda x, g, b: ad.layer_norm(x, g, b)), [(4, 6), (6,), (6,)]),
    "mean_pool": lambda rng: ((lambda h: ad.mean_pool(h, 1, 4)), [(6, 3)]),
    "reshape": lambda rng: ((lambda a: ad.reshape(a, (2, 6))), [(3, 4)]),
    "transpose": lambda rng: ((lambda a: ad.transpose(a, (1, 0, 2))), [(2, 3, 4)]),
    "take": lambda rng: ((lambda a: ad.take(a, [0, 2, 2, 5])), [(7,)]),
    "pick": lambda rng: ((lambda a: ad.pick(a, [1, 0, 3])), [(3, 4)]),
    "conv2d": lambda rng: ((lambda x, w, b: ad.conv2d(x, w, b)), [(2, 6, 5), (3, 2, 3, 3), (3,)]),
    "stack_sum": lambda rng: ((lambda a, b: ad.stack_rows([a, b])), [(4,), (4,)]),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_finite_difference_suite(name):
    """Every differentiable op: analytic vs central differences, 100 trials."""
    rng = np.random.default_rng(hash(name) % (2**32))
    for _ in range(100):
        build, shapes = GRADIENT_CASES[name](rng)
        leaves = [rand(rng, *s) for s in shapes]
        if name == "log":
            for leaf in leaves:  # keep away from the floor kink
                leaf.data = np.abs(leaf.data) + 0.1
        if name in ("relu", "abs"):
            for leaf in leaves:  # keep away from the kink at zero
                leaf.data += np.sign(leaf.data) * 0.05
        check_grads(lambda: ad.sum_all(build(*leaves)), leaves, rng, n_coords=2, tol=1e-4)


def test_dropout_gradient():
    rng = np.random.default_rng(21)
    x = rand(rng, 8, 8)
    mask_rng_seed = 5

    def forward():
        return ad.sum_all(ad.dropout(x, 0.3, np.random.default_rng(mask_rng_seed), training=True))

    check_grads(forward, [x], rng, n_coords=4, tol=1e-6)


def test_embedding_gradient():
    rng = np.random.default_rng(22)
    table = rand(rng, 6, 3)
    ids = [0, 5, 5, 2]
    check_grads(lambda: ad.sum_all(ad.embedding_lookup(table, ids)), [table], rng, tol=1e-6)
