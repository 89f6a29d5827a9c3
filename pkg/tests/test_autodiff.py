import numpy as np
import pytest

import autodiff as ad
from autodiff import Graph, Tensor
from errors import DegenerateVarianceError, DomainError, NumericError, ShapeError, ValidationError


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


@pytest.mark.parametrize(
    "fn, shapes",
    [
        (lambda a, b: a + b, [(3, 4), (4,)]),
        (lambda a, b: a - b, [(3, 4), (3, 1)]),
        (lambda a, b: a * b, [(3, 4), (3, 4)]),
        (lambda a, b: a @ b, [(3, 4), (4, 2)]),
        (lambda a: ad.tanh(a), [(5,)]),
        (lambda a: ad.sigmoid(a), [(2, 3)]),
        (lambda a: ad.exp(a), [(2, 3)]),
        (lambda a: ad.softmax(a, axis=1), [(3, 4)]),
        (lambda a: ad.log_softmax(a, axis=1), [(3, 4)]),
        (lambda a: a.sum(axis=0), [(3, 4)]),
        (lambda a: a.mean(axis=1, keepdims=True), [(3, 4)]),
        (lambda a: a.reshape(2, 6), [(3, 4)]),
        (lambda a: a[:, 1:3], [(3, 4)]),
        (lambda a: a[[0, 0, 2]], [(3, 4)]),
        (lambda a, b: ad.stack([a, b], axis=1), [(3, 2), (3, 2)]),
        (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 5)]),
        (lambda x, k: ad.conv1d(x, k), [(2, 3, 9), (4, 3, 3)]),
        (lambda x, k: ad.conv1d(x, k, stride=2), [(3, 9), (2, 3, 3)]),
    ],
)
def test_ops_match_finite_differences(rng, fn, shapes):
    inputs = [leaf(rng, *shape) for shape in shapes]
    assert ad.check_gradients(fn, inputs) < 1e-4


def test_division_and_log_gradients(rng):
    a = leaf(rng, 3, 3)
    b = leaf(rng, 3, 3, low=0.5, high=2.0)
    assert ad.check_gradients(lambda a, b: a / b, [a, b]) < 1e-4
    assert ad.check_gradients(lambda b: ad.log(b), [b]) < 1e-4


def test_relu_family_gradients_away_from_kink(rng):
    x = Tensor(rng.choice([-1.0, 1.0], size=(4, 5)) * rng.uniform(0.1, 1.0, size=(4, 5)), requires_grad=True)
    assert ad.check_gradients(ad.relu, [x]) < 1e-4
    assert ad.check_gradients(lambda x: ad.leaky_relu(x, 0.3), [x]) < 1e-4


def test_maxpool_gradient_with_distinct_values(rng):
    x = Tensor(rng.permutation(24).reshape(2, 2, 6) / 10.0, requires_grad=True)
    assert ad.check_gradients(lambda x: ad.maxpool1d(x, 2, 2), [x]) < 1e-4


def test_batchnorm_training_gradient(rng):
    x = leaf(rng, 6, 3, 5)
    gamma = leaf(rng, 3, low=0.5, high=1.5)
    beta = leaf(rng, 3)
    fn = lambda x, g, b: ad.batchnorm1d(x, g, b, np.zeros(3), np.ones(3), training=True)
    assert ad.check_gradients(fn, [x, gamma, beta]) < 1e-4


def test_losses_gradients(rng):
    logits = leaf(rng, 4, 3)
    targets = ad.one_hot([0, 2, 1, 2])
    assert ad.check_gradients(lambda z: ad.cross_entropy(z, targets), [logits]) < 1e-4
    a, b = leaf(rng, 4, 2, 3), leaf(rng, 4, 2, 3)
    assert ad.check_gradients(ad.mse, [a, b]) < 1e-4


def test_mse_is_batch_mean_of_squared_norms():
    a = Tensor([[1.0, 2.0], [0.0, 0.0]])
    b = Tensor([[0.0, 0.0], [3.0, 4.0]])
    assert ad.mse(a, b).item() == pytest.approx((5.0 + 25.0) / 2)


def test_cross_entropy_matches_direct_formula(rng):
    logits = rng.normal(size=(5, 3))
    labels = [0, 1, 2, 1, 0]
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(probs[np.arange(5), labels]))
    assert ad.cross_entropy(Tensor(logits), ad.one_hot(labels)).item() == pytest.approx(expected, abs=1e-12)


def test_reused_tensor_accumulates_gradient():
    x = Tensor([1.5, -2.0], requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_is_deterministic(rng):
    w = rng.normal(size=(4, 3))

    def run():
        a = Tensor(w, requires_grad=True)
        (ad.tanh(a @ a.data.T) * 3.0).sum().backward()
        return a.grad

    np.testing.assert_array_equal(run(), run())


def test_graph_is_in_creation_order():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    z = y + x
    graph = Graph.from_root(z)
    assert [node._seq for node in graph.nodes] == sorted(node._seq for node in graph.nodes)
    assert graph.nodes[-1] is z


def test_non_scalar_backward_needs_seed():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0], requires_grad=True).backward()


def test_matmul_shape_mismatch_is_reported():
    with pytest.raises(ShapeError, match=r"cannot multiply \(2, 3\) by \(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_log_of_non_positive_value():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        ad.softmax(Tensor([[0.0, np.nan]]))


def test_softmax_is_stable_for_large_inputs():
    out = ad.softmax(Tensor([[1000.0, 0.0, -1000.0]]), axis=1).data
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_cross_entropy_requires_one_hot_rows():
    with pytest.raises(ValidationError, match="label row 1"):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([[1.0, 0, 0], [0.5, 0.5, 0]]))


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_batchnorm_normalizes_and_tracks_running_stats(rng):
    x = Tensor(rng.normal(3.0, 10.0, size=(64, 2, 7)))
    running_mean, running_var = np.zeros(2), np.ones(2)
    out = ad.batchnorm1d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), running_mean, running_var, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2)), 1.0, atol=1e-6)
    np.testing.assert_allclose(running_mean, 0.1 * x.data.mean(axis=(0, 2)))


def test_batchnorm_needs_two_samples_in_training():
    with pytest.raises(DegenerateVarianceError):
        ad.batchnorm1d(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), training=True)


def test_dropout_is_identity_in_eval_and_scaled_in_training(rng):
    x = Tensor(np.ones((200, 50)))
    assert ad.dropout(x, 0.5, training=False, rng=rng) is x
    out = ad.dropout(x, 0.5, training=True, rng=rng).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert out.mean() == pytest.approx(1.0, abs=0.05)


def test_conv1d_rejects_short_input():
    with pytest.raises(ShapeError):
        ad.conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 3))))


def test_elementwise_dispatch():
    np.testing.assert_allclose(ad.elementwise("tanh", Tensor([0.5])).data, np.tanh([0.5]))
    with pytest.raises(ValidationError):
        ad.elementwise("cosh", Tensor([0.5]))
