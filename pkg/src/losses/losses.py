"""Training losses. Every L1 term is a mean so weights do not depend on batch size."""
import logging
from dataclasses import dataclass, field

import numpy as np

from src.engine import ops
from src.engine.tensor import Tensor, as_tensor
from src.utils.config_utils import dataclass_from_dict
from src.utils.errors import ShapeError

logger = logging.getLogger(__name__)

# face edges as (i, j) corner pairs
_FACE_EDGES = ((0, 1), (1, 2), (2, 0))
ZERO_EDGE_LENGTH = 1e-12


@dataclass
class LossWeights:
    normal: float = 0.05
    edge: float = 0.5
    mesh: float = 1.0
    pose2d: float = 1.0
    consistency3d: float = 1.0
    consistency2d: float = 1.0


@dataclass
class LossTerms:
    mesh: object = 0.0
    pose2d: object = 0.0
    normal: object = 0.0
    edge: object = 0.0
    consistency3d: object = 0.0
    consistency2d: object = 0.0
    diagnostics: dict = field(default_factory=dict)

    def names(self):
        return ('mesh', 'pose2d', 'normal', 'edge', 'consistency3d', 'consistency2d')

    def values(self):
        """Plain floats per term."""
        out = {}
        for name in self.names():
            term = getattr(self, name)
            out[name] = float(term.data) if isinstance(term, Tensor) else float(term)
        return out


@dataclass
class ViewPair:
    """Relative camera motion between two renders of one mesh."""
    rotation: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.rotation.shape[-2:] != (3, 3) or self.affine.shape[-2:] != (2, 3):
            raise ShapeError("view pair needs a 3x3 rotation and a 2x3 affine")
        R = self.rotation.reshape(-1, 3, 3)
        orthogonal = np.abs(R @ np.swapaxes(R, -1, -2) - np.eye(3)).max() < 1e-6
        proper = np.all(np.abs(np.linalg.det(R) - 1.0) < 1e-6)
        if not (orthogonal and proper):
            raise ShapeError("view pair rotation is not a proper rotation")


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def l1_mean(a, b):
    return (a - b).abs().mean()


def mesh_and_pose_loss(vertices, gt_vertices, pose, gt_pose):
    vertices, pose = as_tensor(vertices), as_tensor(pose)
    _same_shape(vertices, gt_vertices, "mesh loss")
    _same_shape(pose, gt_pose, "pose loss")
    return l1_mean(vertices, gt_vertices), l1_mean(pose, gt_pose)


def _edge_vectors(vertices, faces):
    """[..., F, 3 edges, 3] edge vectors V_i - V_j for each face edge (i, j)."""
    faces = np.asarray(faces)
    first = faces[:, [i for i, _ in _FACE_EDGES]]
    second = faces[:, [j for _, j in _FACE_EDGES]]
    return ops.gather_rows(vertices, first) - ops.gather_rows(vertices, second)


def normal_loss(vertices, faces, gt_normals, diagnostics=None):
    """Mean |unit(V_i - V_j) . n_c| over every edge of every face."""
    vertices = as_tensor(vertices)
    gt_normals = np.asarray(gt_normals)
    edges = _edge_vectors(vertices, faces)
    lengths = ops.norm_lastdim(edges, keepdims=True)
    valid = lengths.data > ZERO_EDGE_LENGTH
    skipped = int(valid.size - valid.sum())
    if skipped:
        logger.warning("normal loss skipped %d zero-length predicted edges", skipped)
    if diagnostics is not None:
        diagnostics['zero_length_edges'] = diagnostics.get('zero_length_edges', 0) + skipped
    safe_lengths = lengths + np.where(valid, 0.0, 1.0)
    directions = edges / safe_lengths
    cosines = (directions * gt_normals[..., None, :]).sum(axis=-1).abs()
    count = max(int(valid.sum()), 1)
    return (cosines * valid[..., 0]).sum() * (1.0 / count)


def edge_loss(vertices, gt_vertices, faces):
    """Mean | |V_i - V_j| - |V_i^gt - V_j^gt| | over every edge of every face."""
    vertices = as_tensor(vertices)
    _same_shape(vertices, gt_vertices, "edge loss")
    predicted = ops.norm_lastdim(_edge_vectors(vertices, faces))
    target = ops.norm_lastdim(_edge_vectors(as_tensor(gt_vertices), faces))
    return (predicted - target.data).abs().mean()


def consistency_losses(pair, vertices1, vertices2, pose1, pose2):
    """3D term mean|R V1 - V2| and 2D term mean|T [P1; 1] - P2|."""
    vertices1, vertices2 = as_tensor(vertices1), as_tensor(vertices2)
    pose1, pose2 = as_tensor(pose1), as_tensor(pose2)
    _same_shape(vertices1, vertices2, "3D consistency")
    _same_shape(pose1, pose2, "2D consistency")
    rotation = np.swapaxes(pair.rotation, -1, -2)
    affine = pair.affine
    rotated = ops.matmul(vertices1, rotation)
    linear = np.swapaxes(affine[..., :, :2], -1, -2)
    translation = affine[..., :, 2]
    if translation.ndim == 2:
        translation = translation[:, None, :]
    moved = ops.matmul(pose1, linear) + translation
    return l1_mean(rotated, vertices2), l1_mean(moved, pose2)


def total_loss(terms, weights=None):
    weights = weights or LossWeights()
    total = 0.0
    for name in terms.names():
        total = total + getattr(terms, name) * getattr(weights, name)
    return total


def loss_weights_from_dict(data):
    return dataclass_from_dict(LossWeights, data or {})
