"""Kernel correctness: forward oracles, tape mechanics, finite differences."""

import numpy as np
import pytest

from fedrecover import tensor as T
from fedrecover.tensor import Tensor, backward, check_gradients


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m, k, n = rng.integers(1, 7, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        got = T.matmul(Tensor(a), Tensor(b)).data
        want = np.zeros((m, n))
        for i in range(m):
            for j in range(n):
                for t in range(k):
                    want[i, j] += a[i, t] * b[t, j]
        assert np.abs(got - want).max() <= 1e-12


def test_batched_matmul_matches_per_item():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 3, 4))
    b = rng.normal(size=(4, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(5):
        assert np.allclose(got[i], a[i] @ b)
    c = rng.normal(size=(5, 2, 3))
    got2 = T.matmul(Tensor(c), Tensor(a)).data
    for i in range(5):
        assert np.allclose(got2[i], c[i] @ a[i])


def test_softmax_rows_properties():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 5)) * 3
    y = T.softmax_rows(Tensor(x)).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y > 0).all()
    # large inputs stay finite thanks to per-row max subtraction
    big = T.softmax_rows(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.isfinite(big).all()
    assert big[0, 0] > 0.999


def test_cross_entropy_uniform_logits():
    # equal logits over c classes give loss ln(c) exactly
    logits = Tensor(np.zeros((7, 4)))
    loss = T.cross_entropy(logits, np.arange(7) % 4)
    assert abs(loss.item() - np.log(4.0)) <= 1e-12


def test_cross_entropy_scalar_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 6)) * 2
    labels = rng.integers(0, 6, size=5)
    loss = T.cross_entropy(Tensor(logits), labels).item()
    per = []
    for i in range(5):
        row = logits[i]
        per.append(np.log(np.exp(row).sum()) - row[labels[i]])
    assert abs(loss - np.mean(per)) <= 1e-12


def test_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.array([0, 1, 4]))
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.array([-1, 0, 0]))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([[-1.0, 0.0, 2.0]]))
    y = T.relu(x)
    backward(T.sum_all(y))
    assert np.array_equal(x.grad, np.array([[0.0, 0.0, 1.0]]))


def test_layer_norm_is_standardized_pre_affine():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 4, 8)) * 2 + 1
    g = Tensor(np.ones(8))
    b = Tensor(np.zeros(8))
    y = T.layer_norm(Tensor(x), g, b).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() <= 1e-10


def test_topo_order_visits_each_node_once():
    x = Tensor(np.ones((2, 2)))
    y = T.mul(x, x)  # diamond: x feeds y twice
    z = T.add(y, y)
    s = T.sum_all(z)
    order = T.topo_order(s)
    ids = [id(n) for n in order]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] > pos[id(node)]  # parents come after children
    backward(s)
    # d/dx of sum(2 * x^2) = 4x
    assert np.allclose(x.grad, 4.0 * x.data)


def test_unused_leaf_has_zero_adjoint():
    x = Tensor(np.ones(3))
    unused = Tensor(np.ones(3))
    backward(T.sum_all(x))
    assert unused.grad is None
    assert x.grad is not None


def test_backward_requires_scalar_root():
    with pytest.raises(ValueError):
        backward(Tensor(np.ones(2)))


def test_no_grad_blocks_recording():
    x = Tensor(np.ones((2, 2)))
    with T.no_grad():
        y = T.mul(x, x)
    assert y._parents == ()


def test_primitive_gradients_against_central_differences():
    # every primitive op, many random smooth cases, full coordinate probes
    rng = np.random.default_rng(5)
    cases = []
    for _ in range(15):
        m, k, n = (int(v) for v in rng.integers(2, 5, size=3))
        b = Tensor(rng.normal(size=(k, n)))
        cases.append(((m, k), lambda t, b=b: T.sum_all(T.matmul(t, b))))
        w = Tensor(rng.normal(size=(m, k)))
        cases.append(((k, n), lambda t, w=w: T.mean_all(T.matmul(w, t))))
        sw = Tensor(rng.normal(size=(m, n)))
        cases.append(((m, n), lambda t, sw=sw: T.sum_all(T.mul(T.softmax_rows(t), sw))))
        cases.append(((m, n), lambda t: T.mean_all(T.mul(t, t))))
        cases.append(((m, n), lambda t: T.sum_all(T.transpose_last(t))))
        # width >= 3: a 2-wide layer norm is piecewise constant, so its
        # gradient vanishes and finite differences only see noise
        nw = n + 2
        g = Tensor(rng.normal(size=nw) + 2.0)
        c = Tensor(rng.normal(size=nw))
        cases.append(((m, k, nw), lambda t, g=g, c=c: T.sum_all(T.layer_norm(t, g, c))))
        bias = Tensor(rng.normal(size=n))
        cases.append(((m, n), lambda t, bias=bias: T.sum_all(T.add(t, bias))))
        other = Tensor(rng.normal(size=(m, n)))
        cases.append(((m, n), lambda t, o=other: T.sum_all(T.sub(t, o))))
        cases.append(
            (
                (m, n),
                lambda t, m=m, n=n: T.sum_all(
                    T.broadcast_to(T.reshape(t, (m, 1, n)), (m, 3, n))
                ),
            )
        )
        cases.append(((2, m, n), lambda t: T.sum_all(T.take_token0(t))))
        labels = rng.integers(0, n, size=m)
        cases.append(((m, n), lambda t, lab=labels: T.cross_entropy(t, lab)))
        cases.append(
            ((m, n), lambda t, o=other: T.mean_all(T.concat_last([t, o])))
        )
    assert len(cases) >= 100
    worst = 0.0
    for shape, f in cases:
        x = Tensor(rng.normal(size=shape))
        # keep relu cases away from the kink; other ops are smooth
        worst = max(worst, check_gradients(f, x, eps=1e-5))
    assert worst <= 1e-5


def test_relu_gradient_off_kink():
    rng = np.random.default_rng(6)
    for _ in range(10):
        x = Tensor(np.sign(rng.normal(size=(3, 4))) * (0.5 + rng.random((3, 4))))
        err = check_gradients(lambda t: T.sum_all(T.relu(t)), x, eps=1e-5)
        assert err <= 1e-5


def test_composed_matmul_cross_entropy_check():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(3, 5)))
    labels = rng.integers(0, 5, size=4)

    def f(t):
        return T.cross_entropy(T.matmul(t, w), labels)

    x = Tensor(rng.normal(size=(4, 3)))
    assert check_gradients(f, x, eps=1e-5) <= 1e-5


def test_kernel_outputs_finite_on_bounded_inputs():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 6)) * 50)
    for out in (
        T.softmax_rows(x),
        T.relu(x),
        T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))),
        T.matmul(x, T.transpose_last(x)),
    ):
        assert np.isfinite(out.data).all()
