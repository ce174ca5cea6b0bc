import itertools
import os
import tempfile
import unittest

import numpy as np
from scipy import sparse

from src.engine import ops
from src.engine.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.engine.gradcheck import check_gradients
from src.engine.optim import Adam, StepDecay, adam_step, OptimizerState
from src.engine.tensor import (Parameter, Tensor, get_default_dtype, no_grad, precision, set_debug,
                               set_default_dtype)
from src.utils.errors import CheckpointError, GradientError, OptimizerError, ShapeError

KERNEL_TOLERANCE = 1e-4


class Float64TestCase(unittest.TestCase):
    """Runs every test with float64 tensors."""

    def setUp(self):
        self.previous_dtype = get_default_dtype()
        set_default_dtype(np.float64)
        self.rng = np.random.default_rng(0)
        self.names = itertools.count()

    def tearDown(self):
        set_default_dtype(self.previous_dtype)

    def param(self, *shape, scale=1.0):
        return Parameter(self.rng.normal(0.0, scale, size=shape), name=f"t{next(self.names)}")

    def assertGradientsMatch(self, fn, tensors, tolerance=KERNEL_TOLERANCE):
        errors = check_gradients(fn, tensors)
        for name, error in errors.items():
            self.assertLess(error, tolerance, msg=f"{name}: relative error {error:.2e}")


class TestKernelGradients(Float64TestCase):
    def test_elementwise(self):
        a, b = self.param(3, 4), self.param(4)
        b.data += 3.0
        self.assertGradientsMatch(lambda: ((a * b + a / b - b) ** 2).sum(), [a, b])
        self.assertGradientsMatch(lambda: (a.tanh() * (b.abs() + 1.0).sqrt()).mean(), [a, b])

    def test_matmul_broadcasts(self):
        a, b = self.param(2, 3, 4), self.param(4, 5)
        weights = self.rng.normal(size=(2, 3, 5))
        self.assertGradientsMatch(lambda: (ops.matmul(a, b) * weights).sum(), [a, b])

    def test_linear(self):
        x, w, bias = self.param(2, 6, 3), self.param(3, 4), self.param(4)
        weights = self.rng.normal(size=(2, 6, 4))
        self.assertGradientsMatch(lambda: (ops.linear(x, w, bias) * weights).sum(), [x, w, bias])

    def test_concat_and_stack(self):
        a, b = self.param(2, 3), self.param(2, 5)
        weights = self.rng.normal(size=(2, 8))
        self.assertGradientsMatch(lambda: (ops.concat([a, b], axis=-1) * weights).sum(), [a, b])
        c = self.param(2, 3)
        weights2 = self.rng.normal(size=(2, 2, 3))
        self.assertGradientsMatch(lambda: (ops.stack_tensors([a, c], axis=1) * weights2).sum(), [a, c])

    def test_masked_softmax(self):
        x = self.param(2, 3, 5)
        keep = self.rng.uniform(size=(2, 3, 5)) > 0.3
        keep[..., 0] = True
        weights = self.rng.normal(size=(2, 3, 5))
        self.assertGradientsMatch(lambda: (ops.softmax_lastdim(ops.masked_fill(x, keep)) * weights).sum(), [x])

    def test_layer_norm(self):
        x, gain, bias = self.param(2, 4, 6), self.param(6), self.param(6)
        weights = self.rng.normal(size=(2, 4, 6))
        self.assertGradientsMatch(lambda: (ops.layer_norm(x, gain, bias) * weights).sum(), [x, gain, bias])

    def test_gelu_and_norm(self):
        x = self.param(3, 7)
        self.assertGradientsMatch(lambda: ops.gelu(x).sum(), [x])
        self.assertGradientsMatch(lambda: ops.norm_lastdim(x).sum(), [x])
        self.assertGradientsMatch(lambda: (ops.norm_lastdim(x, keepdims=True) * x).sum(), [x])

    def test_gather_rows_with_pads_and_repeats(self):
        x = self.param(2, 5, 3)
        indices = np.array([[0, 1, -1], [4, 4, 2], [3, -1, -1]])
        weights = self.rng.normal(size=(2, 3, 3, 3))
        self.assertGradientsMatch(lambda: (ops.gather_rows(x, indices) * weights).sum(), [x])

    def test_sparse_apply(self):
        x = self.param(2, 4, 3)
        matrix = sparse.csr_matrix(self.rng.uniform(size=(6, 4)) * (self.rng.uniform(size=(6, 4)) > 0.4))
        weights = self.rng.normal(size=(2, 6, 3))
        self.assertGradientsMatch(lambda: (ops.sparse_apply(matrix, x) * weights).sum(), [x])

    def test_conv2d(self):
        x, w, bias = self.param(2, 3, 6, 6), self.param(4, 3, 3, 3), self.param(4)
        weights = self.rng.normal(size=(2, 4, 3, 3))
        self.assertGradientsMatch(lambda: (ops.conv2d(x, w, bias, stride=2, padding=1) * weights).sum(),
                                  [x, w, bias])

    def test_upsample_nearest(self):
        x = self.param(1, 2, 3, 3)
        weights = self.rng.normal(size=(1, 2, 6, 6))
        self.assertGradientsMatch(lambda: (ops.upsample_nearest(x) * weights).sum(), [x])

    def test_bilinear_sample(self):
        fm = self.param(2, 3, 5, 6)
        # keep points away from texel boundaries where the map is only piecewise smooth
        points = Parameter(np.array([[[0.13, -0.41], [-0.77, 0.52]], [[0.35, 0.09], [0.61, -0.66]]]), name='pts')
        weights = self.rng.normal(size=(2, 2, 3))
        self.assertGradientsMatch(lambda: (ops.bilinear_sample(fm, points) * weights).sum(), [fm, points])

    def test_shape_ops(self):
        x = self.param(2, 3, 4)
        weights = self.rng.normal(size=(4, 6))
        self.assertGradientsMatch(lambda: (x.transpose(2, 0, 1).reshape(4, 6) * weights).sum(), [x])
        self.assertGradientsMatch(lambda: (x[:, 1:, ::2] * 2.0).sum() + x.swapaxes(0, 2).mean(axis=1).sum(), [x])


class TestKernelValues(Float64TestCase):
    def test_masked_softmax_rows(self):
        x = Tensor(self.rng.normal(size=(4, 6)))
        keep = np.ones((4, 6), dtype=bool)
        keep[:, 3:] = False
        y = ops.softmax_lastdim(ops.masked_fill(x, keep)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        self.assertTrue(np.all(y[:, 3:] == 0.0))

    def test_gather_pads_are_zero(self):
        x = Tensor(self.rng.normal(size=(3, 2)))
        out = ops.gather_rows(x, [[2, -1]]).data
        np.testing.assert_array_equal(out[0, 1], [0.0, 0.0])
        np.testing.assert_array_equal(out[0, 0], x.data[2])
        with self.assertRaises(ShapeError):
            ops.gather_rows(x, [[3]])

    def test_bilinear_corners(self):
        fm = Tensor(np.arange(12, dtype=np.float64).reshape(1, 1, 3, 4))
        points = Tensor(np.array([[[-1.0, -1.0], [1.0, 1.0], [1.0, -1.0], [5.0, 0.0]]]))
        out = ops.bilinear_sample(fm, points).data[0, :, 0]
        np.testing.assert_allclose(out, [0.0, 11.0, 3.0, 7.0])

    def test_matmul_shape_errors(self):
        with self.assertRaises(ShapeError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with self.assertRaises(ShapeError):
            ops.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_backward_needs_scalar(self):
        x = self.param(3)
        with self.assertRaises(GradientError):
            (x * 2.0).backward()

    def test_gradients_accumulate_on_shared_leaves(self):
        x = Parameter(np.array([1.0, 2.0]), name='x')
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0, 5.0])

    def test_trainable_mask_zeroes_gradient(self):
        x = Parameter(np.ones((2, 2)), name='x', trainable_mask=[[True, False], [False, True]])
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [[3.0, 0.0], [0.0, 3.0]])

    def test_no_grad_builds_no_graph(self):
        x = self.param(2)
        with no_grad():
            y = (x * 2.0).sum()
        self.assertFalse(y.requires_grad)

    def test_debug_mode_catches_nan(self):
        set_debug(True)
        self.addCleanup(set_debug, False)
        x = self.param(2)
        with self.assertRaises(GradientError):
            (x * np.nan).sum()

    def test_precision_context(self):
        with precision(np.float32):
            self.assertEqual(Tensor([1.0]).data.dtype, np.float32)
        self.assertEqual(Tensor([1.0]).data.dtype, np.float64)


class TestGradientCheck(Float64TestCase):
    def test_frozen_entries_are_skipped(self):
        mask = np.array([[True, False, True], [False, True, False]])
        w = Parameter(self.rng.normal(size=(2, 3)), name='w', trainable_mask=mask)
        weights = self.rng.normal(size=(2, 3))
        errors = check_gradients(lambda: (w * weights).sum(), [w])
        self.assertLess(errors['w'], KERNEL_TOLERANCE)

    def test_fully_frozen_tensor_is_not_reported(self):
        w = Parameter(np.ones((2, 2)), name='w', trainable_mask=np.zeros((2, 2), dtype=bool))
        x = self.param(2, 2)
        errors = check_gradients(lambda: (w * x).sum(), [w, x])
        self.assertEqual(set(errors), {x.name})

    def test_shift_invariant_bias_has_zero_error(self):
        x, bias = self.param(3, 5), self.param(1)
        target = self.rng.normal(size=(3, 5))
        errors = check_gradients(lambda: (ops.softmax_lastdim(x + bias) * target).sum(), [x, bias])
        self.assertLess(errors[bias.name], KERNEL_TOLERANCE)
        self.assertLess(errors[x.name], KERNEL_TOLERANCE)

    def test_wrong_gradient_is_caught(self):
        x = self.param(4)
        def detached_square():
            # the copy carries no gradient, so backprop sees half the true derivative
            return (x * Tensor(x.data.copy())).sum()

        errors = check_gradients(detached_square, [x])
        self.assertGreater(errors[x.name], 0.1)


class TestOptimizer(Float64TestCase):
    def test_adam_minimises_quadratic(self):
        x = Parameter(np.array([3.0, -2.0]), name='x')
        optimizer = Adam([x], lr=0.1)
        for lr in (0.1, 0.01):
            optimizer.set_lr(lr)
            for _ in range(200):
                optimizer.zero_grad()
                ((x - 1.0) ** 2).sum().backward()
                optimizer.step()
        np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-2)

    def test_masked_entries_never_move(self):
        x = Parameter(np.array([0.0, 5.0]), name='x', trainable_mask=[True, False])
        state = OptimizerState(lr=0.5, weight_decay=0.1)
        for _ in range(10):
            x.grad = None
            (x * x).sum().backward()
            adam_step([x], state)
        self.assertEqual(x.data[1], 5.0)

    def test_missing_gradient(self):
        with self.assertRaises(OptimizerError):
            adam_step([Parameter(np.ones(2), name='w')], OptimizerState())

    def test_duplicate_names_rejected(self):
        with self.assertRaises(OptimizerError):
            Adam([Parameter(np.ones(1), name='w'), Parameter(np.ones(1), name='w')])

    def test_gradient_clipping(self):
        x = Parameter(np.zeros(2), name='x')
        x.grad = np.array([30.0, 40.0])
        state = OptimizerState(lr=0.0, grad_clip=5.0)
        adam_step([x], state)
        np.testing.assert_allclose(np.linalg.norm(x.grad), 5.0)

    def test_step_decay(self):
        schedule = StepDecay(1e-3, decay_epoch=38)
        self.assertEqual(schedule.lr_at(37), 1e-3)
        self.assertAlmostEqual(schedule.lr_at(38), 1e-4)
        self.assertEqual(StepDecay(1e-3, None).lr_at(100), 1e-3)


class TestCheckpoint(Float64TestCase):
    def setUp(self):
        super().setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_round_trip(self):
        params = {'a.weight': self.rng.normal(size=(3, 4)).astype(np.float32), 'b': np.arange(5.0)}
        checkpoint = Checkpoint(params, {'a.weight': np.ones((3, 4), np.float32)}, {}, {'epoch': 3})
        save_checkpoint(checkpoint, self.tmp.name)
        loaded = load_checkpoint(self.tmp.name)
        self.assertEqual(loaded.meta, {'epoch': 3})
        for name, value in params.items():
            self.assertEqual(loaded.params[name].dtype, value.dtype)
            np.testing.assert_array_equal(loaded.params[name], value)
        np.testing.assert_array_equal(loaded.first_moments['a.weight'], np.ones((3, 4)))

    def test_missing_files(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.tmp.name, 'nowhere'))

    def test_truncated_tensor_file(self):
        save_checkpoint(Checkpoint({'w': np.ones(8)}), self.tmp.name)
        with open(os.path.join(self.tmp.name, 'tensors.bin'), 'r+b') as f:
            f.truncate(16)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.tmp.name)

    def test_unsupported_dtype(self):
        with self.assertRaises(CheckpointError):
            save_checkpoint(Checkpoint({'w': np.ones(2, dtype=np.int32)}), self.tmp.name)


if __name__ == '__main__':
    unittest.main()
