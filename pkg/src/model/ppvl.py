"""Pose-to-vertex lifting: a learnable coarse-vertex x joint matrix.

Rows are coarse mesh vertices, columns are the 16 skeletal nodes followed
by the 5 fingertips. Node columns start from thresholded skinning weights,
fingertip columns from a constant on the vertices around each tip. Entries
that start at zero are frozen there.
"""
import json
import logging
from dataclasses import dataclass

import numpy as np

from src.engine import ops
from src.engine.tensor import Parameter
from src.model.layers import Module, uniform
from src.utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

SKIN_THRESHOLD = 0.2
FINGERTIP_WEIGHT = 0.2
NUM_FINGERTIPS = 5


@dataclass
class SkinningAssets:
    weights: np.ndarray
    coarse_index_map: np.ndarray
    fingertip_neighbors: list


class LiftMatrix(Module):
    def __init__(self, initial, trainable_mask=None):
        self.initial = np.array(initial, dtype=np.float64)
        self.weight = Parameter(self.initial, trainable_mask=trainable_mask)

    @property
    def shape(self):
        return self.weight.shape

    @property
    def structural_zeros(self):
        """True where the entry is pinned at zero."""
        mask = self.weight.trainable_mask
        return np.zeros(self.shape, dtype=bool) if mask is None else ~mask

    def forward(self, pose_features):
        return ppvl_lift(self, pose_features)


def build_ppvl_matrix(skin_weights, coarse_index_map, fingertip_neighbors):
    skin_weights = np.asarray(skin_weights, dtype=np.float64)
    coarse_index_map = np.asarray(coarse_index_map, dtype=np.int64)
    if skin_weights.ndim != 2:
        raise ShapeError(f"skinning weights must be a matrix, got shape {skin_weights.shape}")
    if coarse_index_map.min() < 0 or coarse_index_map.max() >= len(skin_weights):
        raise ShapeError(f"coarse index map references vertices outside 0..{len(skin_weights) - 1}")
    if len(fingertip_neighbors) != NUM_FINGERTIPS:
        raise ConfigError(f"expected {NUM_FINGERTIPS} fingertip neighbour lists, got {len(fingertip_neighbors)}")

    V0 = len(coarse_index_map)
    node_part = skin_weights[coarse_index_map]
    node_part = np.where(node_part > SKIN_THRESHOLD, node_part, 0.0)
    tip_part = np.zeros((V0, NUM_FINGERTIPS))
    for tip, neighbors in enumerate(fingertip_neighbors):
        if len(neighbors) == 0:
            raise ConfigError(f"fingertip {tip} has no neighbouring coarse vertices")
        neighbors = np.asarray(neighbors, dtype=np.int64)
        if neighbors.min() < 0 or neighbors.max() >= V0:
            raise ShapeError(f"fingertip {tip} neighbour outside 0..{V0 - 1}")
        tip_part[neighbors, tip] = FINGERTIP_WEIGHT

    initial = np.concatenate([node_part, tip_part], axis=1)
    lift = LiftMatrix(initial, trainable_mask=initial != 0.0)
    logger.debug("Lift matrix %s with %d learnable entries", initial.shape, int((initial != 0).sum()))
    return lift


def random_lift_matrix(coarse_count, num_joints, rng):
    """Dense, fully learnable lift matrix with no skinning prior."""
    return LiftMatrix(uniform(rng, num_joints, (coarse_count, num_joints)))


def ppvl_lift(lift, pose_features):
    """[B, N, C] joint features -> [B, V0, C] coarse vertex features."""
    V0, N = lift.shape
    if pose_features.shape[-2] != N:
        raise ShapeError(f"lift matrix expects {N} joints, got features of shape {pose_features.shape}")
    return ops.matmul(lift.weight, pose_features)


def load_skinning_assets(path):
    """Read user-supplied skinning data.

    The JSON holds ``weights`` (V x 16, row-major), ``coarse_index_map``
    and ``fingertip_neighbors`` (5 lists of coarse vertex indices).
    """
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"skinning asset file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid skinning asset JSON {path}: {e}")
    missing = [k for k in ('weights', 'coarse_index_map', 'fingertip_neighbors') if k not in data]
    if missing:
        raise ConfigError(f"skinning asset file lacks {', '.join(missing)}")
    weights = np.asarray(data['weights'], dtype=np.float64)
    if not np.allclose(weights.sum(axis=1), 1.0, atol=1e-6):
        raise ConfigError("skinning weight rows must sum to 1")
    return SkinningAssets(weights=weights,
                          coarse_index_map=np.asarray(data['coarse_index_map'], dtype=np.int64),
                          fingertip_neighbors=[list(map(int, n)) for n in data['fingertip_neighbors']])
