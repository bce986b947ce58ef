import numpy as np
import pytest

from openworldseg import tensor as T
from openworldseg.tensor import SGD, GradientError, ShapeMismatch, Tensor


def central_diff(fn, arrays, h=1e-3):
    """Finite-difference gradients of scalar fn(*arrays), accumulated in f64.

    Independent of the tape: perturbs raw numpy inputs and re-evaluates.
    """
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros(base.shape, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            args_p = [a.copy() for a in arrays]
            args_m = [a.copy() for a in arrays]
            args_p[i].reshape(-1)[j] += h
            args_m[i].reshape(-1)[j] -= h
            flat[j] = (float(fn(*args_p)) - float(fn(*args_m))) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, fd, rtol=1e-3):
    scale = max(float(np.max(np.abs(fd))), 1e-6)
    err = float(np.max(np.abs(analytic.astype(np.float64) - fd)))
    assert err / scale < rtol, f"gradient error {err / scale:.2e} exceeds {rtol}"


def test_relu_forward():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, np.array([0.0, 0.0, 2.0], dtype=np.float32))


def test_conv_zero_input_gives_zero_map():
    x = Tensor(np.zeros((1, 2, 8, 8)))
    w = Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)))
    out = T.conv2d(x, w, padding=1)
    assert out.shape == (1, 3, 8, 8)
    assert np.all(out.data == 0.0)


def test_conv_1x1_identity_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float32))
    ident = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32).reshape(2, 2, 1, 1)
    out = T.conv2d(x, Tensor(ident), padding=0)
    assert np.array_equal(out.data, x.data)


def test_elementwise_shape_mismatch_names_shapes():
    with pytest.raises(ShapeMismatch) as exc:
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError):
        T.backward(T.relu(x))


def test_grad_of_sum_is_ones():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_grad_of_sum_of_squares():
    # d/dx sum(x*x) = 2x; at x=[3] the gradient is [6]
    x = Tensor(np.array([3.0]), requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert np.allclose(x.grad, [6.0])


def test_grad_accumulates_until_zeroed():
    x = Tensor(np.ones(4), requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    T.backward(T.tsum(T.mul(x, x)))
    assert np.allclose(x.grad, 4.0 * np.ones(4))
    x.zero_grad()
    assert x.grad is None


def _softmax64(a, ax):
    e = np.exp(a - a.max(axis=ax, keepdims=True))
    return e / e.sum(axis=ax, keepdims=True)


def _log_softmax64(a, ax):
    z = a - a.max(axis=ax, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=ax, keepdims=True))


# (tape builder, independent float64 reference, arity)
COMPOSITE_OPS = [
    ("add", lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))),
     lambda a, b: np.sum((a + b) ** 2), 2),
    ("sub", lambda a, b: T.tsum(T.mul(T.sub(a, b), T.sub(a, b))),
     lambda a, b: np.sum((a - b) ** 2), 2),
    ("mul", lambda a, b: T.tsum(T.mul(a, b)),
     lambda a, b: np.sum(a * b), 2),
    ("relu", lambda a: T.tsum(T.mul(T.relu(a), T.relu(a))),
     lambda a: np.sum(np.maximum(a, 0.0) ** 2), 1),
    ("softmax", lambda a: T.tsum(T.mul(T.softmax(a), T.softmax(a))),
     lambda a: np.sum(_softmax64(a, 1 if a.ndim == 4 else 0) ** 2), 1),
    ("log_softmax", lambda a: T.tsum(T.mul(T.log_softmax(a), T.log_softmax(a))),
     lambda a: np.sum(_log_softmax64(a, 1 if a.ndim == 4 else 0) ** 2), 1),
    ("mean", lambda a: T.tmean(T.mul(a, a)),
     lambda a: np.mean(a ** 2), 1),
]


def test_gradients_match_finite_differences():
    # 100 seeded trials over random small tensors, h = 1e-3 on a float64
    # reference implementation of each composite.
    rng = np.random.default_rng(7)
    trials = 0
    while trials < 100:
        name, build, ref, arity = COMPOSITE_OPS[trials % len(COMPOSITE_OPS)]
        shape = tuple(rng.integers(2, 5, size=rng.integers(1, 4)))
        if np.prod(shape) > 64:
            continue
        arrays = [rng.normal(size=shape) for _ in range(arity)]
        if name == "relu":
            # keep samples away from the kink where FD is undefined
            arrays = [np.where(np.abs(a) < 0.05, 0.1, a) for a in arrays]

        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        T.backward(build(*tensors))

        fd = central_diff(ref, arrays)
        for t, g in zip(tensors, fd):
            assert_grads_close(t.grad, g)
        trials += 1


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))

    def loss(aa, bb):
        ta, tb = Tensor(aa, requires_grad=True), Tensor(bb, requires_grad=True)
        out = T.tsum(T.mul(T.matmul(ta, tb), T.matmul(ta, tb)))
        return ta, tb, out

    ta, tb, out = loss(a, b)
    T.backward(out)
    fd = central_diff(lambda x, y: loss(x, y)[2].item(), [a, b])
    assert_grads_close(ta.grad, fd[0])
    assert_grads_close(tb.grad, fd[1])


def test_conv_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    for kh, pad in ((3, 1), (1, 0)):
        x = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(3, 2, kh, kh))
        b = rng.normal(size=(3,))

        def loss(xx, ww, bb):
            tx = Tensor(xx, requires_grad=True)
            tw = Tensor(ww, requires_grad=True)
            tb = Tensor(bb, requires_grad=True)
            out = T.conv2d(tx, tw, tb, padding=pad)
            return tx, tw, tb, T.tsum(T.mul(out, out))

        tx, tw, tb, out = loss(x, w, b)
        T.backward(out)
        fd = central_diff(lambda *args: loss(*args)[3].item(), [x, w, b])
        assert_grads_close(tx.grad, fd[0])
        assert_grads_close(tw.grad, fd[1])
        assert_grads_close(tb.grad, fd[2])


def test_sqdist_gradient_matches_finite_differences():
    rng = np.random.default_rng(17)
    f = rng.normal(size=(3, 2, 2))
    m = rng.normal(size=(4, 3))

    def loss(ff, mm):
        tf = Tensor(ff, requires_grad=True)
        tm = Tensor(mm, requires_grad=True)
        return tf, tm, T.tsum(T.mul(T.sqdist(tf, tm), Tensor(rng0)))

    rng0 = np.random.default_rng(18).normal(size=(4, 2, 2)).astype(np.float32)
    tf, tm, out = loss(f, m)
    T.backward(out)
    fd = central_diff(lambda a, b: loss(a, b)[2].item(), [f, m])
    assert_grads_close(tf.grad, fd[0])
    assert_grads_close(tm.grad, fd[1])


def test_conv_transpose_identity_on_explicit_matrix():
    # Build the explicit conv matrix column by column on a 4x4 input; the
    # gradient of sum(output) must equal that matrix transposed applied to
    # ones.
    rng = np.random.default_rng(19)
    w = Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32))
    n_in, n_out = 16, 2 * 16
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for j in range(n_in):
        basis = np.zeros((1, 1, 4, 4), dtype=np.float32)
        basis.reshape(-1)[j] = 1.0
        mat[:, j] = T.conv2d(Tensor(basis), w, padding=1).data.reshape(-1)

    x = Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32), requires_grad=True)
    T.backward(T.tsum(T.conv2d(x, w, padding=1)))
    expected = mat.T @ np.ones(n_out)
    assert np.allclose(x.grad.reshape(-1), expected, atol=1e-4)


def test_debug_finite_check_catches_injected_inf():
    x = Tensor(np.array([1.0, np.inf], dtype=np.float32))
    y = Tensor(np.ones(2, dtype=np.float32))
    T.DEBUG_CHECK_FINITE = True
    try:
        with pytest.raises(FloatingPointError):
            T.add(x, y)
        # finite inputs stay silent
        T.add(y, y)
    finally:
        T.DEBUG_CHECK_FINITE = False


def test_forward_deterministic():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)


def test_sgd_plain_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0], dtype=np.float32)
    SGD([p], lr=0.1).step()
    assert np.allclose(p.data, [0.8])


def test_sgd_zero_grad_leaves_param():
    p = Tensor(np.array([1.5]), requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    SGD([p], lr=0.5).step()
    assert np.allclose(p.data, [1.5])


def test_sgd_momentum_recursion():
    # momentum 0.9, lr 1, constant grad 1: p goes 0 -> -1 -> -2.9
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = SGD([p], lr=1.0, momentum=0.9)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert np.allclose(p.data, [-1.0])
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert np.allclose(p.data, [-2.9])


def test_sgd_missing_grad_raises():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(GradientError):
        SGD([p], lr=0.1).step()


def test_sgd_leaves_grads_for_caller():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0], dtype=np.float32)
    opt = SGD([p], lr=0.1)
    opt.step()
    assert np.allclose(p.grad, [2.0])
    opt.zero_grad()
    assert p.grad is None
