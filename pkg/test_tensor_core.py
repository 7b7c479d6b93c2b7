import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import DomainError, NonFiniteError, ShapeError, SpikeHarqError
from tensor_core import (MAX_CHECK_ENTRIES, Adam, ParamGroup, Tensor, adam_step, add, add_bias, avg_pool2,
                         binary_entropy, clamp, concat, conv2d, finite_diff_check, flatten, global_avg_pool,
                         linear, mean, mul, no_grad, relu, reshape, scale, sigmoid, sign_quantize, softmax,
                         softmax_cross_entropy, spike_fire, squared_error, surrogate_forward, take_channels,
                         zero_pad)


def leaf(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


class TestForwardBackward:
    def test_squared_error_scalar(self):
        x = Tensor(3.0, requires_grad=True)
        loss = squared_error(x, 1.0)
        loss.backward()
        assert loss.item() == 4.0
        assert x.grad == 4.0

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self):
        z = Tensor(np.array([[0.3, -1.2, 2.0, 0.1, 0.0]]), requires_grad=True)
        softmax_cross_entropy(z, [2]).backward()
        expected = softmax(z.data)
        expected[0, 2] -= 1.0
        assert_allclose(z.grad, expected, rtol=1e-12, atol=1e-15)

    def test_repeated_backward_is_bit_identical(self):
        rng = np.random.default_rng(0)
        x_values = rng.normal(size=(4, 3))
        w_values = rng.normal(size=(2, 3))
        grads = []
        for _ in range(2):
            w = Tensor(w_values, requires_grad=True)
            loss = mean(sigmoid(linear(Tensor(x_values), w)))
            loss.backward()
            grads.append(w.grad)
        assert_array_equal(grads[0], grads[1])

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = mul(x, x)
        add(y, y).backward()
        assert x.grad == 8.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as excinfo:
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        assert '(3,)' in str(excinfo.value) and '(4,)' in str(excinfo.value)

    def test_linear_rejects_mismatched_inner_dimension(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_conv_rejects_unsupported_kernel(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 5))))

    def test_non_finite_output_raises(self):
        with pytest.raises(NonFiniteError):
            scale(Tensor([np.nan, 1.0]), 2.0)

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = scale(w, 2.0)
        assert not out.requires_grad

    def test_item_requires_single_entry(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(2)).item()


class TestRegisteredOpGradients:
    """Central differences against every registered op on small random tensors."""

    def check(self, loss_fn, params):
        report = finite_diff_check(loss_fn, params)
        assert report.passed, f"max rel error {report.max_rel_error}, failing {report.failing[:5]}"

    def test_linear(self):
        rng = np.random.default_rng(1)
        x, w = leaf(rng, (3, 4)), leaf(rng, (2, 4))
        target = rng.normal(size=(3, 2))
        self.check(lambda: squared_error(linear(x, w), target), {'x': x, 'w': w})

    @pytest.mark.parametrize('kernel', [1, 3])
    def test_conv2d_with_bias(self, kernel):
        rng = np.random.default_rng(2 + kernel)
        x, w, b = leaf(rng, (2, 2, 3, 3)), leaf(rng, (3, 2, kernel, kernel)), leaf(rng, (3,))
        target = rng.normal(size=(2, 3, 3, 3))
        self.check(lambda: squared_error(add_bias(conv2d(x, w), b), target), {'x': x, 'w': w, 'b': b})

    def test_elementwise_and_activations(self):
        rng = np.random.default_rng(4)
        a, b = leaf(rng, (2, 5)), leaf(rng, (2, 5))
        self.check(lambda: mean(mul(sigmoid(a), add(b, scale(a, 0.5)))), {'a': a, 'b': b})

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(5)
        values = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        x = Tensor(values, requires_grad=True)
        self.check(lambda: mean(mul(relu(x), x)), {'x': x})

    def test_shape_ops(self):
        rng = np.random.default_rng(6)
        a, b = leaf(rng, (2, 2, 2, 2)), leaf(rng, (2, 1, 2, 2))
        target = rng.normal(size=(2, 5, 2, 2))

        def loss():
            joined = zero_pad(concat([a, b], axis=1), 5, axis=1)
            picked = take_channels(joined, 0, 5)
            return squared_error(reshape(flatten(picked), (2, 5, 2, 2)), target)

        self.check(loss, {'a': a, 'b': b})

    def test_pooling_and_mean_over_axes(self):
        rng = np.random.default_rng(7)
        x = leaf(rng, (2, 3, 4, 4))
        self.check(lambda: mean(mul(global_avg_pool(avg_pool2(x)), mean(x, axis=(2, 3)))), {'x': x})

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(8)
        z = leaf(rng, (4, 5), -2.0, 2.0)
        self.check(lambda: softmax_cross_entropy(z, [0, 3, 4, 1]), {'z': z})

    def test_binary_entropy_inside_unit_interval(self):
        rng = np.random.default_rng(9)
        q = leaf(rng, (6,), 0.1, 0.9)
        self.check(lambda: mean(binary_entropy(q)), {'q': q})

    def test_clamp_inside_bounds(self):
        rng = np.random.default_rng(10)
        x = leaf(rng, (5,), -0.8, 0.8)
        self.check(lambda: mean(mul(clamp(x, -1.0, 1.0), x)), {'x': x})

    def test_spike_fire_uses_surrogate_derivative(self):
        rng = np.random.default_rng(11)
        m = leaf(rng, (8,), 0.0, 2.0)
        self.check(lambda: mean(spike_fire(m, 1.0, 4.0)), {'m': m})

    def test_sign_quantize_straight_through_inside_unit_box(self):
        rng = np.random.default_rng(12)
        x = leaf(rng, (6,), -0.9, 0.9)
        self.check(lambda: mean(mul(sign_quantize(x), x)), {'x': x})


class TestFiniteDiffCheck:
    def test_identity_graph_has_zero_error(self):
        x = Tensor(np.zeros(()), requires_grad=True)
        report = finite_diff_check(lambda: x, {'x': x})
        assert report.max_rel_error == 0.0
        assert report.passed

    def test_reports_failing_indices_for_a_wrong_gradient(self):
        x = Tensor(np.array([0.5, -0.3]), requires_grad=True)
        # a negative tolerance fails every entry
        report = finite_diff_check(lambda: mean(mul(x, x)), {'x': x}, tolerance=-1.0)
        assert not report.passed
        assert {idx for _, idx in report.failing} == {(0,), (1,)}

    def test_cost_guard(self):
        x = Tensor(np.zeros(MAX_CHECK_ENTRIES + 1), requires_grad=True)
        with pytest.raises(SpikeHarqError):
            finite_diff_check(lambda: mean(x), {'x': x})


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        param = np.array([1.0, -2.0])
        new, _, _ = adam_step(param, np.zeros(2), np.zeros(2), np.zeros(2), 1)
        assert_array_equal(new, param)

    def test_single_step_moves_by_lr(self):
        new, m, v = adam_step(np.array(1.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, lr=0.1)
        assert_allclose(new, 0.9, rtol=1e-7)
        assert_allclose(m, 0.1)
        assert_allclose(v, 0.001)

    def test_non_finite_gradient_names_layer(self):
        group = ParamGroup('alpha')
        group.add('enc1.weight', np.ones(2))
        group['enc1.weight'].grad = np.array([np.nan, 0.0])
        with pytest.raises(NonFiniteError, match='alpha/enc1.weight'):
            Adam([group]).step()

    def test_identical_runs_give_identical_params(self):
        def train():
            rng = np.random.default_rng(3)
            group = ParamGroup('phi')
            group.add_linear('fc', 3, 1, rng)
            x = rng.normal(size=(16, 3))
            y = x @ np.array([1.0, -2.0, 0.5]) + 0.3
            optimizer = Adam([group], lr=0.05)
            for _ in range(20):
                optimizer.zero_grad()
                pred = reshape(add_bias(linear(Tensor(x), group['fc.weight']), group['fc.bias']), (16,))
                squared_error(pred, y).backward()
                optimizer.step()
            return group

        first, second = train(), train()
        assert first.checksum() == second.checksum()


class TestParamGroup:
    def test_unknown_tag_rejected(self):
        with pytest.raises(DomainError):
            ParamGroup('delta')

    def test_kaiming_bound_and_zero_bias(self):
        group = ParamGroup('mu')
        group.add_conv('conv', 4, 3, 3, np.random.default_rng(0))
        bound = np.sqrt(6.0 / (4 * 3 * 3))
        assert np.all(np.abs(group['conv.weight'].data) <= bound)
        assert_array_equal(group['conv.bias'].data, np.zeros(3))
        assert group.num_entries() == 3 * 4 * 9 + 3

    def test_freezing_drops_gradients(self):
        group = ParamGroup('beta')
        group.add('w', np.ones(2))
        group['w'].grad = np.ones(2)
        group.set_requires_grad(False)
        assert group['w'].grad is None and not group['w'].requires_grad


def test_surrogate_forward_is_scoped():
    m = Tensor(np.array([0.5, 1.5]))
    with surrogate_forward():
        smooth = spike_fire(m, 1.0, 4.0).data
    hard = spike_fire(m, 1.0, 4.0).data
    assert_array_equal(hard, [0.0, 1.0])
    assert np.all((smooth > 0.0) & (smooth < 1.0))
