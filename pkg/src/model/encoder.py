"""Convolutional feature pyramid.

Five stride-2 stages give encoder maps at strides 2..32; a top-down pass
with additive skip connections produces the stride-16 and stride-8
decoder maps shared by the 2D joint regressor and the pose sampler.
"""
from dataclasses import dataclass

from src.engine import ops
from src.model.layers import Conv2d, Module
from src.utils.errors import ShapeError


@dataclass
class FeaturePyramid:
    encoder: list
    d3: object
    d2: object

    def sampling_maps(self):
        """E0..E4, D3, D2 in concatenation order."""
        return list(self.encoder) + [self.d3, self.d2]


class _TopDown(Module):
    """Upsample a coarser map, add the lateral skip, refine with a 3x3 conv."""

    def __init__(self, coarse_channels, skip_channels, rng):
        self.lateral = Conv2d(coarse_channels, skip_channels, 1, rng)
        self.refine = Conv2d(skip_channels, skip_channels, 3, rng, padding=1)

    def forward(self, coarse, skip):
        merged = ops.upsample_nearest(self.lateral(coarse), 2) + skip
        return ops.gelu(self.refine(merged))


class Encoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        channels = [3] + list(cfg.encoder_channels)
        self.stages = [Conv2d(channels[i], channels[i + 1], 3, rng, stride=2, padding=1)
                       for i in range(len(cfg.encoder_channels))]
        c2, c3, c4 = cfg.encoder_channels[2:5]
        self.up3 = _TopDown(c4, c3, rng)
        self.up2 = _TopDown(c3, c2, rng)

    def forward(self, image):
        B, C, H, W = image.shape
        if C != 3 or (H, W) != (self.cfg.image_height, self.cfg.image_width):
            raise ShapeError(f"expected images of shape [B,3,{self.cfg.image_height},{self.cfg.image_width}], "
                             f"got {image.shape}")
        features = []
        x = image
        for stage in self.stages:
            x = ops.gelu(stage(x))
            features.append(x)
        d3 = self.up3(features[4], features[3])
        d2 = self.up2(d3, features[2])
        return FeaturePyramid(encoder=features, d3=d3, d2=d2)
