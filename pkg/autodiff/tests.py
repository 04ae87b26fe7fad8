import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from cord_lab.exceptions import NonDeterministicLossError, NonFiniteError, ShapeError

from . import ops
from .gradcheck import grad_check
from .optim import OptimState, global_grad_norm, optimizer_step
from .tensor import Tensor, backward, no_grad


class LogSoftmaxTestCase(SimpleTestCase):
    """Test cases for log_softmax"""

    def test_symmetric_pair(self):
        """Equal logits give ln 0.5 each"""
        out = ops.log_softmax(Tensor([0.0, 0.0]))
        assert_allclose(out.data, [np.log(0.5), np.log(0.5)], rtol=0, atol=1e-15)

    def test_constant_shift(self):
        """Any constant vector of length 3 gives ln(1/3)"""
        out = ops.log_softmax(Tensor([7.5, 7.5, 7.5]))
        assert_allclose(out.data, np.full(3, np.log(1.0 / 3.0)), rtol=0, atol=1e-15)

    def test_known_values(self):
        """[1, 2] matches the high-precision evaluation"""
        out = ops.log_softmax(Tensor([1.0, 2.0]))
        assert_allclose(out.data, [-1.3132616875182228, -0.31326168751822286], rtol=1e-14)

    def test_large_magnitude_inputs(self):
        """Inputs up to 1e4 still normalize"""
        out = ops.log_softmax(Tensor([1e4, -1e4, 5e3, 9999.0]))
        self.assertAlmostEqual(float(np.sum(np.exp(out.data))), 1.0, delta=1e-6)

    def test_rows_normalize_f32(self):
        """Each row of an f32 matrix normalizes"""
        logits = np.random.default_rng(3).normal(size=(4, 9)).astype(np.float32)
        out = ops.log_softmax(Tensor(logits))
        self.assertEqual(out.dtype, np.float32)
        assert_allclose(np.exp(out.data.astype(np.float64)).sum(axis=1), np.ones(4), atol=1e-6)

    def test_non_finite_input_rejected(self):
        """Overflow inside an op is a hard error"""
        with self.assertRaises(NonFiniteError):
            ops.exp(Tensor([1000.0]))


class BackwardTestCase(SimpleTestCase):
    """Test cases for reverse-mode accumulation"""

    def test_square(self):
        """d(x^2)/dx at 3 is 6"""
        x = Tensor(3.0, requires_grad=True)
        grads = backward(x * x)
        self.assertEqual(float(grads[x]), 6.0)
        self.assertEqual(float(x.grad), 6.0)

    def test_stop_gradient_contributes_nothing(self):
        """sum(stop_gradient(x) * y) leaves x without gradient"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        grads = backward(ops.total(ops.mul(ops.stop_gradient(x), y)))
        self.assertNotIn(x, grads)
        self.assertIsNone(x.grad)
        assert_array_equal(y.grad, [1.0, 2.0])

    def test_non_scalar_root(self):
        """A vector root is rejected"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(ShapeError):
            backward(ops.scale(x, 2.0))

    def test_gradients_accumulate(self):
        """Two backward passes add into leaf.grad"""
        x = Tensor([1.0, -1.0], requires_grad=True)
        backward(ops.total(ops.scale(x, 3.0)))
        backward(ops.total(ops.scale(x, 3.0)))
        assert_array_equal(x.grad, [6.0, 6.0])

    def test_shared_embedding_rows(self):
        """Repeated gather indices sum their gradients"""
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        backward(ops.total(ops.gather_rows(table, [0, 2, 2])))
        assert_array_equal(table.grad, [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])

    def test_no_grad_records_nothing(self):
        """Ops under no_grad produce constants"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = ops.scale(x, 2.0)
        self.assertFalse(y.requires_grad)
        self.assertEqual(backward(ops.total(y)), {})

    def test_causal_softmax_masks_future(self):
        """Upper triangle is zero and rows sum to 1"""
        scores = Tensor(np.random.default_rng(1).normal(size=(5, 5)))
        probs = ops.causal_softmax(scores).data
        assert_array_equal(np.triu(probs, k=1), np.zeros((5, 5)))
        assert_allclose(probs.sum(axis=1), np.ones(5), atol=1e-12)


class GradCheckTestCase(SimpleTestCase):
    """Test cases for the finite-difference oracle"""

    def setUp(self):
        self.inputs = Tensor(np.arange(1.0, 16.0).reshape(5, 3) / 10.0)
        self.targets = Tensor(np.ones((5, 1)))

    def _linear_params(self, dtype=np.float64):
        return {
            'w': Tensor(np.zeros((3, 1), dtype=dtype), requires_grad=True),
            'unused': Tensor(np.ones(2, dtype=dtype), requires_grad=True),
        }

    def _squared_loss(self, params, inputs, targets):
        def build():
            residual = ops.sub(ops.matmul(inputs, params['w']), targets)
            return ops.total(ops.mul(residual, residual))
        return build

    def test_linear_squared_loss(self):
        """Closed-form gradient is matched to 1e-10"""
        params = self._linear_params()
        report = grad_check(self._squared_loss(params, self.inputs, self.targets), params, eps=1e-4, tolerance=1e-10)
        self.assertTrue(report.passed, report.summary_lines())
        expected = -2.0 * self.inputs.data.T @ self.targets.data
        assert_allclose(report.checks[0].analytic, expected.reshape(-1), rtol=1e-12)

    def test_constant_parameter(self):
        """A parameter the loss ignores has zero analytic and numeric gradient"""
        params = self._linear_params()
        report = grad_check(self._squared_loss(params, self.inputs, self.targets), params)
        unused = report.checks[1]
        assert_array_equal(unused.analytic, np.zeros(2))
        assert_array_equal(unused.numeric, np.zeros(2))
        self.assertEqual(unused.max_rel_error, 0.0)

    def test_non_deterministic_loss(self):
        """A builder whose value drifts is rejected"""
        w = Tensor([1.0], requires_grad=True)
        calls = []

        def build():
            calls.append(1)
            return ops.total(ops.scale(w, float(len(calls))))

        with self.assertRaises(NonDeterministicLossError):
            grad_check(build, {'w': w})

    def test_linear_squared_loss_f32(self):
        """Single precision passes at the looser tolerance"""
        params = self._linear_params(np.float32)
        inputs = Tensor(self.inputs.data.astype(np.float32))
        targets = Tensor(self.targets.data.astype(np.float32))
        report = grad_check(self._squared_loss(params, inputs, targets), params, eps=1e-2, tolerance=1e-3)
        self.assertTrue(report.passed, report.summary_lines())

    def test_f32_against_f64_reference(self):
        """f32 analytic gradients are judged against f64 central differences"""
        params = self._linear_params(np.float32)
        inputs = Tensor(self.inputs.data.astype(np.float32))
        targets = Tensor(self.targets.data.astype(np.float32))
        reference = self._linear_params()
        report = grad_check(
            self._squared_loss(params, inputs, targets), params, eps=1e-5, tolerance=1e-5,
            reference=(self._squared_loss(reference, self.inputs, self.targets), reference),
        )
        self.assertTrue(report.passed, report.summary_lines())
        expected = -2.0 * self.inputs.data.T @ self.targets.data
        assert_allclose(report.checks[0].numeric, expected.reshape(-1), rtol=1e-8)
        self.assertEqual(params['w'].data.dtype, np.float32)

    def test_reference_names_must_match(self):
        """A reference keyed differently from the checked parameters is rejected"""
        params = self._linear_params()
        reference = {'w': self._linear_params()['w']}
        with self.assertRaises(ShapeError):
            grad_check(self._squared_loss(params, self.inputs, self.targets), params,
                       reference=(self._squared_loss(reference, self.inputs, self.targets), reference))

    def test_composite_ops(self):
        """Every supported op composed into one loss passes at 1e-5"""
        rng = np.random.default_rng(0)
        params = {
            'emb': Tensor(rng.normal(scale=0.5, size=(6, 4)), requires_grad=True),
            'gamma': Tensor(1.0 + rng.normal(scale=0.1, size=4), requires_grad=True),
            'beta': Tensor(rng.normal(scale=0.1, size=4), requires_grad=True),
            'w': Tensor(rng.normal(scale=0.5, size=(4, 5)), requires_grad=True),
            'b': Tensor(rng.normal(scale=0.1, size=5), requires_grad=True),
        }
        column_weights = rng.uniform(0.5, 1.5, size=(5, 2))

        def build():
            h = ops.gather_rows(params['emb'], [0, 3, 3, 5, 1])
            h = ops.layer_norm(h, params['gamma'], params['beta'])
            attention = ops.causal_softmax(ops.scale(ops.matmul(h, ops.transpose(h)), 0.5))
            mixed = ops.add(ops.matmul(attention, h), h)
            hidden = ops.gelu(ops.add_bias(ops.matmul(mixed, params['w']), params['b']))
            log_probs = ops.log_softmax(hidden)
            nll = ops.scale(ops.total(ops.pick(log_probs, [1, 0, 4, 2, 2])), -1.0)
            head = ops.mean(ops.exp(ops.rows(log_probs, 0, 2)))
            side = ops.weighted_sum(ops.columns(hidden, 1, 3), column_weights)
            tail = ops.total(ops.row_sum(ops.concat_rows([ops.rows(hidden, 0, 1), ops.rows(hidden, 3, 5)])))
            wide = ops.total(ops.concat_columns([ops.columns(hidden, 0, 1), ops.columns(hidden, 4, 5)]))
            return nll + head + side + ops.scale(tail, 0.1) + ops.scale(wide, 0.2)

        report = grad_check(build, params, eps=1e-5, tolerance=1e-5)
        self.assertTrue(report.passed, report.summary_lines())


class OptimizerTestCase(SimpleTestCase):
    """Test cases for AdamW"""

    def setUp(self):
        self.values = np.array([1.0, -2.0, 0.5])

    def _params(self):
        return {'w': Tensor(self.values.copy(), requires_grad=True)}

    def test_decay_only(self):
        """Zero gradient scales the weights by (1 - lr * wd)"""
        params = self._params()
        state = OptimState(lr=0.1, weight_decay=0.01)
        optimizer_step(params, {'w': np.zeros(3)}, state)
        assert_array_equal(params['w'].data, self.values * (1.0 - 0.1 * 0.01))
        self.assertEqual(state.step, 1)

    def test_first_step_moves_against_gradient(self):
        """Bias-corrected first step is -lr * g / (|g| + eps), close to -lr * sign(g)"""
        params = self._params()
        state = OptimState(lr=1e-3, weight_decay=0.0)
        grads = {'w': np.array([0.5, -2.0, 3e-3])}
        optimizer_step(params, grads, state)
        step = params['w'].data - self.values
        assert_allclose(step, -1e-3 * grads['w'] / (np.abs(grads['w']) + 1e-8), rtol=0, atol=1e-14)
        assert_allclose(step, -1e-3 * np.sign(grads['w']), rtol=0, atol=1e-8)

    def test_zero_learning_rate(self):
        """lr = 0 leaves the weights untouched"""
        params = self._params()
        optimizer_step(params, {'w': np.array([1.0, 2.0, 3.0])}, OptimState(lr=0.0))
        assert_array_equal(params['w'].data, self.values)

    def test_deterministic(self):
        """Identical inputs give bit-identical updates"""
        grads = {'w': np.array([0.3, -0.1, 0.7])}
        first, second = self._params(), self._params()
        state_a, state_b = OptimState(lr=0.01), OptimState(lr=0.01)
        for _ in range(3):
            optimizer_step(first, grads, state_a)
            optimizer_step(second, grads, state_b)
        assert_array_equal(first['w'].data, second['w'].data)
        self.assertEqual(state_a.step, 3)

    def test_shape_mismatch(self):
        """A gradient of the wrong shape is rejected"""
        with self.assertRaises(ShapeError):
            optimizer_step(self._params(), {'w': np.zeros(4)}, OptimState())

    def test_missing_gradient(self):
        """Every parameter needs a gradient"""
        with self.assertRaises(ShapeError):
            optimizer_step(self._params(), {}, OptimState())

    def test_grad_norm(self):
        """Global norm covers every array"""
        self.assertEqual(global_grad_norm({'a': np.array([3.0]), 'b': np.array([[4.0]])}), 5.0)
