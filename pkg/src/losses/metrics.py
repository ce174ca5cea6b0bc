"""Evaluation metrics in millimetres.

Joint and vertex errors are reported raw and after Procrustes
(similarity) alignment; PCK/AUC use the aligned joints.
"""
import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist

from src.utils.errors import MetricError, ProcrustesError, ShapeError

AUC_THRESHOLDS_MM = np.linspace(0.0, 50.0, 101)
METRIC_KEYS = ('mpjpe', 'mpvpe', 'pa_mpjpe', 'pa_mpvpe', 'auc_3d', 'f5', 'f15')


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} must match as [..., N, 3]")
    return pred, gt


def procrustes_align(X, Y):
    """Similarity transform of X (N x 3) that best matches Y in least squares."""
    X, Y = _check_pair(X, Y)
    if X.ndim != 2 or len(X) < 3:
        raise ProcrustesError(f"alignment needs at least 3 points, got shape {X.shape}")
    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    X0, Y0 = X - mu_x, Y - mu_y
    if np.linalg.matrix_rank(X0, tol=1e-9 * max(1.0, np.abs(X0).max())) < 2:
        raise ProcrustesError("source points are collinear or coincident")
    var_x = (X0 * X0).sum()
    U, s, Vt = np.linalg.svd(X0.T @ Y0)
    Z = np.eye(3)
    # reflection guard
    Z[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = Vt.T @ Z @ U.T
    scale = np.trace(np.diag(s) @ Z) / var_x
    return scale * X0 @ R.T + mu_y


def _batched(pred, gt):
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        return pred[None], gt[None]
    return pred.reshape(-1, *pred.shape[-2:]), gt.reshape(-1, *gt.shape[-2:])


def align_batch(pred, gt):
    pred, gt = _batched(pred, gt)
    return np.stack([procrustes_align(p, g) for p, g in zip(pred, gt)])


def point_errors(pred, gt, aligned=False):
    """[B, N] Euclidean distances, optionally after per-sample alignment."""
    pred, gt = _batched(pred, gt)
    if aligned:
        pred = align_batch(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe_mpvpe(pred, gt, aligned=False):
    return float(point_errors(pred, gt, aligned).mean())


def pck_curve(pred, gt, thresholds=AUC_THRESHOLDS_MM, aligned=True):
    """Per-threshold fraction of points within the threshold, averaged per joint."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise MetricError("empty threshold grid")
    if np.any(np.diff(thresholds) <= 0):
        raise MetricError("threshold grid must be strictly ascending")
    errors = point_errors(pred, gt, aligned)
    per_joint = (errors[:, :, None] <= thresholds).mean(axis=0)
    return per_joint.mean(axis=0)


def pck_auc(pred, gt, thresholds=AUC_THRESHOLDS_MM, aligned=True):
    thresholds = np.asarray(thresholds, dtype=np.float64)
    curve = pck_curve(pred, gt, thresholds, aligned)
    if thresholds.size == 1:
        return float(curve[0])
    return float(trapezoid(curve, thresholds) / (thresholds[-1] - thresholds[0]))


def f_score(pred_vertices, gt_vertices, threshold):
    """Harmonic mean of precision and recall at ``threshold`` mm (vertex to vertex)."""
    pred = np.asarray(pred_vertices, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_vertices, dtype=np.float64).reshape(-1, 3)
    if not len(pred) or not len(gt):
        raise MetricError("f-score needs non-empty vertex sets")
    distances = cdist(pred, gt)
    precision = float((distances.min(axis=1) <= threshold).mean())
    recall = float((distances.min(axis=0) <= threshold).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(pred_vertices, gt_vertices, pred_joints, gt_joints):
    """The seven-key report; F-scores are on aligned meshes, averaged over samples."""
    pred_vertices, gt_vertices = _batched(pred_vertices, gt_vertices)
    aligned_vertices = align_batch(pred_vertices, gt_vertices)
    f5 = np.mean([f_score(p, g, 5.0) for p, g in zip(aligned_vertices, gt_vertices)])
    f15 = np.mean([f_score(p, g, 15.0) for p, g in zip(aligned_vertices, gt_vertices)])
    return {
        'mpjpe': mpjpe_mpvpe(pred_joints, gt_joints),
        'mpvpe': mpjpe_mpvpe(pred_vertices, gt_vertices),
        'pa_mpjpe': mpjpe_mpvpe(pred_joints, gt_joints, aligned=True),
        'pa_mpvpe': float(np.linalg.norm(aligned_vertices - gt_vertices, axis=-1).mean()),
        'auc_3d': pck_auc(pred_joints, gt_joints),
        'f5': float(f5),
        'f15': float(f15),
    }
