"""The full image-to-mesh network.

2D encoding (pyramid + joint regressor), 2D-to-3D mapping (pose feature
sampling + lift matrix) and 3D decoding (spiral transformer regressor).
"""
import logging

from src.model.encoder import Encoder
from src.model.layers import Module
from src.model.pose import JointRegressor2D, MultiScalePoseFeatures
from src.model.ppvl import build_ppvl_matrix, random_lift_matrix
from src.model.spiral_transformer import MeshRegressor, decoder_tables
from src.utils.errors import ConfigMismatchError

logger = logging.getLogger(__name__)


class STMR(Module):
    def __init__(self, cfg, hierarchy, assets, rng):
        if hierarchy.vertex_counts[::-1] != list(cfg.vertex_counts):
            raise ConfigMismatchError(f"hierarchy levels {hierarchy.vertex_counts} do not match "
                                      f"config {cfg.vertex_counts}")
        self.cfg = cfg
        self.hierarchy = hierarchy
        self.encoder = Encoder(cfg, rng)
        self.joint_regressor = JointRegressor2D(cfg, rng)
        self.pose_features = MultiScalePoseFeatures(cfg, rng, single_scale=not cfg.use_mspfe)
        if cfg.use_ppvl:
            self.lift = build_ppvl_matrix(assets.weights, assets.coarse_index_map, assets.fingertip_neighbors)
        else:
            self.lift = random_lift_matrix(cfg.coarse_vertex_count, cfg.num_joints, rng)
        if self.lift.shape != (cfg.coarse_vertex_count, cfg.num_joints):
            raise ConfigMismatchError(f"lift matrix {self.lift.shape} does not match "
                                      f"({cfg.coarse_vertex_count}, {cfg.num_joints})")
        tables = decoder_tables(cfg.decoder, hierarchy.spiral_tables[::-1])
        self.regressor = MeshRegressor(cfg, tables, hierarchy.up_transforms[::-1], rng)
        logger.info("STMR (%s decoder, mspfe=%s, ppvl=%s) with %d parameters",
                    cfg.decoder, cfg.use_mspfe, cfg.use_ppvl, self.parameter_count())

    def forward(self, image):
        pyramid = self.encoder(image)
        pose = self.joint_regressor(pyramid.d2)
        joint_features = self.pose_features(pyramid, pose)
        vertex_features = self.lift(joint_features)
        vertices = self.regressor(vertex_features)
        return pose, vertices
