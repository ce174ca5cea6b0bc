import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from src.losses.metrics import (AUC_THRESHOLDS_MM, METRIC_KEYS, compute_metrics, f_score, mpjpe_mpvpe,
                                pck_auc, pck_curve, procrustes_align)
from src.utils.errors import MetricError, ProcrustesError, ShapeError


def similarity(points, rng):
    rotation = Rotation.random(random_state=rng).as_matrix()
    return rng.uniform(0.5, 2.0) * points @ rotation.T + rng.normal(0.0, 50.0, size=3)


class TestMetrics(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.joints = self.rng.normal(0.0, 40.0, size=(4, 21, 3))
        self.vertices = self.rng.normal(0.0, 40.0, size=(4, 120, 3))

    def test_identity(self):
        metrics = compute_metrics(self.vertices, self.vertices, self.joints, self.joints)
        self.assertEqual(set(metrics), set(METRIC_KEYS))
        for key in ('mpjpe', 'mpvpe', 'pa_mpjpe', 'pa_mpvpe'):
            self.assertAlmostEqual(metrics[key], 0.0, places=9)
        for key in ('auc_3d', 'f5', 'f15'):
            self.assertAlmostEqual(metrics[key], 1.0)

    def test_aligned_errors_ignore_similarity_transforms(self):
        moved = np.stack([similarity(j, self.rng) for j in self.joints])
        self.assertLess(mpjpe_mpvpe(moved, self.joints, aligned=True), 1e-6)
        self.assertGreater(mpjpe_mpvpe(moved, self.joints), 1.0)
        self.assertAlmostEqual(pck_auc(moved, self.joints), 1.0)

    def test_alignment_never_hurts(self):
        noisy = self.joints + self.rng.normal(0.0, 5.0, size=self.joints.shape)
        self.assertLessEqual(mpjpe_mpvpe(noisy, self.joints, aligned=True),
                             mpjpe_mpvpe(noisy, self.joints) + 1e-9)

    def test_procrustes_does_not_reflect(self):
        mirrored = self.joints[0] * np.array([1.0, 1.0, -1.0])
        aligned = procrustes_align(mirrored, self.joints[0])
        centered = aligned - aligned.mean(axis=0)
        source = mirrored - mirrored.mean(axis=0)
        # a proper rotation keeps the handedness of the source
        self.assertGreater(np.linalg.det(np.linalg.lstsq(source, centered, rcond=None)[0]), 0.0)

    def test_degenerate_alignment(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with self.assertRaises(ProcrustesError):
            procrustes_align(line, self.joints[0][:5])
        with self.assertRaises(ProcrustesError):
            procrustes_align(self.joints[0][:2], self.joints[0][:2])


class TestPck(unittest.TestCase):
    def test_single_error_of_25mm(self):
        gt = np.zeros((1, 1, 3))
        pred = np.array([[[25.0, 0.0, 0.0]]])
        curve = pck_curve(pred, gt, aligned=False)
        self.assertTrue(np.all(curve[AUC_THRESHOLDS_MM < 25.0] == 0.0))
        self.assertTrue(np.all(curve[AUC_THRESHOLDS_MM >= 25.0] == 1.0))
        step = AUC_THRESHOLDS_MM[1] - AUC_THRESHOLDS_MM[0]
        self.assertAlmostEqual(pck_auc(pred, gt, aligned=False), 0.5, delta=step / 50.0)

    def test_errors_beyond_the_range(self):
        gt = np.zeros((2, 3, 3))
        self.assertEqual(pck_auc(gt + 60.0, gt, aligned=False), 0.0)

    def test_monotone(self):
        gt = np.zeros((1, 21, 3))
        errors = np.random.default_rng(1).uniform(0.0, 60.0, size=(1, 21, 1)) * np.array([1.0, 0.0, 0.0])
        self.assertGreaterEqual(pck_auc(gt + 0.5 * errors, gt, aligned=False),
                                pck_auc(gt + errors, gt, aligned=False))

    def test_threshold_grid(self):
        gt = np.zeros((1, 4, 3))
        with self.assertRaises(MetricError):
            pck_curve(gt, gt, thresholds=[], aligned=False)
        with self.assertRaises(MetricError):
            pck_curve(gt, gt, thresholds=[5.0, 1.0], aligned=False)
        self.assertEqual(pck_auc(gt, gt, thresholds=[10.0], aligned=False), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            pck_curve(np.zeros((1, 4, 3)), np.zeros((1, 5, 3)))


class TestFScore(unittest.TestCase):
    def test_partial_overlap(self):
        gt = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
        pred = np.array([[1.0, 0.0, 0.0], [200.0, 0.0, 0.0]])
        # precision 1/2, recall 1/2
        self.assertAlmostEqual(f_score(pred, gt, 5.0), 0.5)
        self.assertEqual(f_score(pred + 1000.0, gt, 5.0), 0.0)

    def test_empty(self):
        with self.assertRaises(MetricError):
            f_score(np.zeros((0, 3)), np.zeros((2, 3)), 5.0)


if __name__ == '__main__':
    unittest.main()
