import numpy as np
from django.test import SimpleTestCase

from .exceptions import ConfigurationError, ContractViolation, GradientCheckError
from .gradcheck import grad_check
from . import ops
from .tensor import Graph, Tensor, inject_gradient_fault


def param(values, name=None):
    return Tensor(values, name=name, requires_grad=True)


class Conv2dTests(SimpleTestCase):
    def test_unit_kernel_doubles_input(self):
        x = np.random.default_rng(0).standard_normal((3, 5, 4))
        kernel = np.zeros((3, 3, 1, 1))
        for c in range(3):
            kernel[c, c] = 2.0
        out = ops.conv2d(x, kernel, np.zeros(3))
        np.testing.assert_allclose(out.data, 2 * x.astype(np.float32), rtol=1e-6)

    def test_all_ones_kernel_counts_neighbours(self):
        out = ops.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), pad=1)
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
        np.testing.assert_array_equal(out.data[0], expected)

    def test_zero_kernel_gives_bias(self):
        out = ops.conv2d(np.ones((2, 6, 6)), np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]), pad=1)
        for channel, value in enumerate([1.0, -2.0, 0.5]):
            self.assertTrue(np.all(out.data[channel] == np.float32(value)))

    def test_output_size_with_stride(self):
        out = ops.conv2d(np.ones((1, 9, 7)), np.ones((2, 1, 3, 3)), np.zeros(2), pad=0, stride=2)
        self.assertEqual(out.shape, (2, 4, 3))

    def test_same_padding_preserves_shape(self):
        for size in (1, 3, 5):
            out = ops.conv2d(np.ones((1, 11, 8)), np.ones((1, 1, size, size)), np.zeros(1), pad=size // 2)
            self.assertEqual(out.shape, (1, 11, 8))

    def test_channel_mismatch_is_configuration_error(self):
        with self.assertRaises(ConfigurationError):
            ops.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))


class DenseTests(SimpleTestCase):
    def test_identity_weight(self):
        x = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(ops.dense(x, np.eye(3), np.zeros(3)).data, x.astype(np.float32))

    def test_zero_weight_gives_bias(self):
        out = ops.dense(np.ones(4), np.zeros((2, 4)), np.array([0.5, -1.0]))
        np.testing.assert_array_equal(out.data, np.array([0.5, -1.0], dtype=np.float32))

    def test_hand_product(self):
        out = ops.dense(np.array([3.0, 4.0]), np.array([[1.0, 2.0]]), np.zeros(1))
        self.assertEqual(out.item(), 11.0)

    def test_dimension_mismatch(self):
        with self.assertRaises(ConfigurationError):
            ops.dense(np.ones(3), np.ones((2, 4)), np.zeros(2))


class LayerNormTests(SimpleTestCase):
    def test_constant_input_normalizes_to_zero(self):
        out = ops.layer_norm(np.full((3, 4, 4), 7.0), np.ones(3), np.zeros(3), eps=1e-5)
        self.assertLessEqual(np.abs(out.data).max(), 1e-3)

    def test_unit_variance_pair(self):
        out = ops.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_zero_gain_gives_bias(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 3))
        out = ops.layer_norm(x, np.zeros(2), np.array([0.25, -4.0]))
        self.assertTrue(np.all(out.data[0] == np.float32(0.25)))
        self.assertTrue(np.all(out.data[1] == np.float32(-4.0)))


class ActivationTests(SimpleTestCase):
    def test_elu_values(self):
        self.assertEqual(ops.elu(np.array([0.0])).item(), 0.0)
        self.assertEqual(ops.elu(np.array([1.0])).item(), 1.0)
        with_double = Tensor([-20.0], dtype=np.float64)
        self.assertAlmostEqual(ops.elu(with_double).item(), -1.0, delta=1e-8)

    def test_sigmoid_at_zero(self):
        self.assertEqual(ops.sigmoid(np.array([0.0])).item(), 0.5)


class PoolingAndUpsamplingTests(SimpleTestCase):
    def test_max_of_block(self):
        out = ops.max_pool2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        self.assertEqual(out.data.tolist(), [[[4.0]]])

    def test_repeated_pooling_shape_chain(self):
        x = Tensor(np.zeros((1, 78, 40)))
        shapes = []
        for _ in range(4):
            x = ops.max_pool2(x)
            shapes.append(x.shape[1:])
        self.assertEqual(shapes, [(39, 20), (19, 10), (9, 5), (4, 2)])

    def test_pool_too_small(self):
        with self.assertRaises(ConfigurationError):
            ops.max_pool2(np.ones((1, 1, 4)))

    def test_half_pixel_upsampling(self):
        out = ops.bilinear_upsample2(np.array([[[1.0, 2.0]]]))
        self.assertEqual(out.shape, (1, 2, 4))
        np.testing.assert_allclose(out.data[0, 0], [1.0, 1.25, 1.75, 2.0])
        np.testing.assert_allclose(out.data[0, 1], [1.0, 1.25, 1.75, 2.0])

    def test_single_pixel_upsampling(self):
        out = ops.bilinear_upsample2(np.array([[[3.5]]]))
        self.assertTrue(np.all(out.data == np.float32(3.5)))

    def test_pool_of_upsampled_constant_is_identity(self):
        x = np.full((2, 5, 3), 0.75)
        out = ops.max_pool2(ops.bilinear_upsample2(x))
        np.testing.assert_array_equal(out.data, x.astype(np.float32))


class LSTMTests(SimpleTestCase):
    def zero_weights(self, units=128, inputs=32):
        return ops.LSTMWeights(np.zeros((4 * units, inputs)), np.zeros((4 * units, units)), np.zeros(4 * units))

    def test_zero_state_stays_zero(self):
        h, c = ops.lstm_step(np.zeros(32), np.zeros(128), np.zeros(128), self.zero_weights())
        self.assertTrue(np.all(h.data == 0) and np.all(c.data == 0))

    def test_cell_state_halves(self):
        c0 = np.linspace(-2, 2, 128)
        _, c = ops.lstm_step(np.ones(32), np.zeros(128), c0, self.zero_weights())
        np.testing.assert_allclose(c.data, 0.5 * c0, rtol=1e-6)

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(3)
        weights = ops.LSTMWeights(rng.normal(0, 3, (512, 32)), rng.normal(0, 3, (512, 128)), rng.normal(0, 3, 512))
        h, _ = ops.lstm_step(rng.normal(0, 5, 32), rng.uniform(-1, 1, 128), rng.normal(0, 5, 128), weights)
        self.assertTrue(np.all(np.abs(h.data) < 1))


class BackwardTests(SimpleTestCase):
    def test_linear_gradient(self):
        x = param(np.arange(6.0).reshape(2, 3))
        with Graph() as graph:
            loss = ops.total(ops.scale(x, 2.0))
        grads = graph.backward(loss, [x])
        np.testing.assert_array_equal(grads[x], np.full((2, 3), 2.0, dtype=np.float32))

    def test_sigmoid_gradient_at_zero_weights(self):
        x = Tensor([1.0, -2.0, 3.0])
        w = param(np.zeros((1, 3)))
        with Graph() as graph:
            loss = ops.total(ops.sigmoid(ops.matvec(w, x)))
        grads = graph.backward(loss, [w])
        np.testing.assert_allclose(grads[w][0], 0.25 * x.data)

    def test_detached_branch_has_no_gradient(self):
        x = param([1.0, 2.0])
        with Graph() as graph:
            loss = ops.total(ops.add(ops.mul(x, x).detach(), x))
        grads = graph.backward(loss, [x])
        np.testing.assert_array_equal(grads[x], [1.0, 1.0])

    def test_unreachable_parameter_gets_zero(self):
        x, unused = param([1.0]), param([[1.0, 2.0]])
        with Graph() as graph:
            loss = ops.total(ops.scale(x, 3.0))
        grads = graph.backward(loss, [x, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros((1, 2), dtype=np.float32))

    def test_non_scalar_loss_rejected(self):
        x = param([1.0, 2.0])
        with Graph() as graph:
            out = ops.scale(x, 2.0)
        with self.assertRaises(ContractViolation):
            graph.backward(out)

    def test_no_recording_outside_graph(self):
        out = ops.scale(param([1.0]), 2.0)
        self.assertFalse(out.requires_grad)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(5)
        x, k, b = rng.standard_normal((2, 9, 9)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        first = ops.conv2d(x, k, b, pad=1).data
        second = ops.conv2d(x, k, b, pad=1).data
        self.assertEqual(first.tobytes(), second.tobytes())


class GradCheckTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)

    def normal(self, *shape):
        return self.rng.standard_normal(shape)

    def test_primitives(self):
        cases = {
            "conv2d": (lambda x, k, b: ops.conv2d(x, k, b, pad=1), [self.normal(2, 5, 6), self.normal(3, 2, 3, 3), self.normal(3)]),
            "conv2d_stride": (lambda x, k, b: ops.conv2d(x, k, b, pad=0, stride=2), [self.normal(2, 7, 6), self.normal(2, 2, 3, 3), self.normal(2)]),
            "dense": (ops.dense, [self.normal(5), self.normal(4, 5), self.normal(4)]),
            "layer_norm_conv": (ops.layer_norm, [self.normal(3, 4, 5), self.normal(3), self.normal(3)]),
            "layer_norm_vector": (ops.layer_norm, [self.normal(7), self.normal(7), self.normal(7)]),
            "elu": (ops.elu, [self.normal(4, 6)]),
            "sigmoid": (ops.sigmoid, [self.normal(4, 6)]),
            "tanh": (ops.tanh, [self.normal(4, 6)]),
            "max_pool2": (ops.max_pool2, [self.normal(2, 7, 5)]),
            "bilinear_upsample2": (ops.bilinear_upsample2, [self.normal(2, 3, 4)]),
            "channel_affine": (ops.channel_affine, [self.normal(3, 4, 4), self.normal(3), self.normal(3)]),
            "divide": (ops.divide, [self.normal(5), self.rng.uniform(1, 2, 5)]),
            "concat": (lambda a, b: ops.concat([a, b]), [self.normal(2, 3, 3), self.normal(1, 3, 3)]),
            "crop": (lambda x: ops.crop(x, 3, 2), [self.normal(2, 5, 4)]),
        }
        for name, (fn, inputs) in cases.items():
            with self.subTest(op=name):
                report = grad_check(fn, inputs, step=1e-3, tol=1e-4, name=name)
                self.assertLess(report.max_rel_error, 1e-4)

    def test_lstm_step(self):
        def step(x, h, c, w_ih, w_hh, bias):
            h_next, c_next = ops.lstm_step(x, h, c, ops.LSTMWeights(w_ih, w_hh, bias))
            return ops.concat([h_next, c_next])

        inputs = [self.normal(4), self.normal(3), self.normal(3), self.normal(12, 4), self.normal(12, 3), self.normal(12)]
        report = grad_check(step, inputs, name="lstm_step")
        self.assertTrue(report.passed)

    def test_linear_op_is_exact(self):
        report = grad_check(lambda x: ops.scale(x, 3.0, 1.0), [self.normal(10)], atol=0.0)
        self.assertLess(report.max_rel_error, 1e-9)

    def test_broken_gradient_is_reported(self):
        with inject_gradient_fault("tanh", 1.5):
            with self.assertRaises(GradientCheckError) as ctx:
                grad_check(ops.tanh, [self.normal(5)], name="tanh")
        self.assertFalse(ctx.exception.report.passed)
        self.assertTrue(ctx.exception.report.offending)

    def test_unfiltered_error_includes_coordinates_within_atol(self):
        report = grad_check(ops.tanh, [self.normal(6)], step=1e-1, tol=1.0, atol=1.0, name="tanh")
        self.assertEqual(report.max_rel_error, 0.0)
        self.assertGreater(report.max_rel_error_all, 0.0)
        self.assertIn("unfiltered", report.summary())

        report = grad_check(ops.tanh, [self.normal(6)], step=1e-1, tol=1.0, atol=0.0, name="tanh")
        self.assertEqual(report.max_rel_error, report.max_rel_error_all)
