"""2D joint regression and multi-scale pose feature sampling."""
from src.engine import ops
from src.model.layers import MLP, Conv2d, Module
from src.utils.errors import ShapeError


class JointRegressor2D(Module):
    """1x1 conv to one map per joint, flatten each map, shared MLP, tanh.

    Output coordinates are (x, y) in [-1, 1] image space.
    """

    def __init__(self, cfg, rng):
        self.num_joints = cfg.num_joints
        self.channels = cfg.encoder_channels[2]
        h, w = cfg.level_extent(2)
        self.map_size = h * w
        self.heatmaps = Conv2d(self.channels, cfg.num_joints, 1, rng)
        self.mlp = MLP(self.map_size, cfg.regressor_hidden, 2, rng)

    def forward(self, d2):
        B, C, H, W = d2.shape
        if C != self.channels or H * W != self.map_size:
            raise ShapeError(f"joint regressor expects [B,{self.channels},*,*] with {self.map_size} "
                             f"texels, got {d2.shape}")
        maps = self.heatmaps(d2).reshape(B, self.num_joints, H * W)
        return self.mlp(maps).tanh()


class MultiScalePoseFeatures(Module):
    """Per-joint features sampled from every pyramid level, mixed by an MLP.

    With ``single_scale`` only the stride-8 decoder map is sampled.
    """

    def __init__(self, cfg, rng, single_scale=False):
        c = cfg.encoder_channels
        self.single_scale = single_scale
        self.in_channels = c[2] if single_scale else sum(c) + c[3] + c[2]
        self.mlp = MLP(self.in_channels, cfg.mspfe_hidden, cfg.pose_feature_channels, rng)

    def forward(self, pyramid, pose):
        maps = [pyramid.d2] if self.single_scale else pyramid.sampling_maps()
        sampled = [ops.bilinear_sample(m, pose) for m in maps]
        features = ops.concat(sampled, axis=-1) if len(sampled) > 1 else sampled[0]
        if features.shape[-1] != self.in_channels:
            raise ShapeError(f"sampled {features.shape[-1]} channels, expected {self.in_channels}")
        return self.mlp(features)
