"""Coarse-to-fine mesh regression with spiral-window transformer blocks.

Each level adds sinusoidal positional encodings, runs its blocks, is
lifted to the next vertex count by the fixed sparse up-transform of the
hierarchy, and has its channels adjusted by an MLP. A linear head emits
millimetre coordinates on the finest level.
"""
import logging

import numpy as np

from src.engine import ops
from src.engine.tensor import Parameter
from src.mesh.spiral_topology import global_table
from src.model.layers import MLP, LayerNorm, Linear, Module, uniform
from src.utils.errors import ConfigMismatchError, ShapeError, UnknownVariantError

logger = logging.getLogger(__name__)


def positional_encoding(vertex_count, channels):
    """[V, C] table: column 2i is sin(pos / 10000^(2i/C)), column 2i+1 the cosine."""
    if channels % 2:
        raise ShapeError(f"positional encoding needs an even channel count, got {channels}")
    position = np.arange(vertex_count, dtype=np.float64)[:, None]
    frequency = 10000.0 ** (-np.arange(0, channels, 2, dtype=np.float64) / channels)
    table = np.empty((vertex_count, channels))
    table[:, 0::2] = np.sin(position * frequency)
    table[:, 1::2] = np.cos(position * frequency)
    return table


def _check_table(x, table):
    if table.vertex_count != x.shape[-2]:
        raise ShapeError(f"spiral table has {table.vertex_count} rows for {x.shape[-2]} vertices")


class SpiralWindowAttention(Module):
    """Multi-head attention where vertex v attends to the tokens on its spiral."""

    def __init__(self, channels, num_heads, rng):
        if channels % num_heads:
            raise ShapeError(f"{channels} channels do not split into {num_heads} heads")
        self.channels = channels
        self.num_heads = num_heads
        self.query = Linear(channels, channels, rng)
        self.key = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng)
        self.proj = Linear(channels, channels, rng)

    def attend(self, x, table):
        """Output [B, V, C] and the [B, V, M, K] attention weights over each window."""
        _check_table(x, table)
        B, V, C = x.shape
        M, K = self.num_heads, table.K
        head = C // M
        q = self.query(x).reshape(B, V, M, 1, head)
        k = ops.gather_rows(self.key(x), table.indices, table.pad_sentinel)
        v = ops.gather_rows(self.value(x), table.indices, table.pad_sentinel)
        k = k.reshape(B, V, K, M, head).transpose(0, 1, 3, 4, 2)
        v = v.reshape(B, V, K, M, head).transpose(0, 1, 3, 2, 4)
        logits = ops.matmul(q, k) * (1.0 / np.sqrt(head))
        logits = ops.masked_fill(logits, table.mask[None, :, None, None, :])
        attention = ops.softmax_lastdim(logits)
        out = ops.matmul(attention, v).reshape(B, V, C)
        return self.proj(out), attention.data[:, :, :, 0, :]

    def forward(self, x, table):
        return self.attend(x, table)[0]


class SpiralConvMixer(Module):
    """Concatenate the spiral's tokens and apply one linear layer."""

    def __init__(self, channels, spiral_length, rng):
        self.mix = Linear(channels * spiral_length, channels, rng)

    def forward(self, x, table):
        _check_table(x, table)
        B, V, C = x.shape
        gathered = ops.gather_rows(x, table.indices, table.pad_sentinel)
        return self.mix(gathered.reshape(B, V, table.K * C))


class DepthwiseSpiralMixer(Module):
    """Per-channel weights over spiral positions followed by a pointwise linear layer."""

    def __init__(self, channels, spiral_length, rng):
        self.depthwise = Parameter(uniform(rng, spiral_length, (spiral_length, channels)))
        self.pointwise = Linear(channels, channels, rng)

    def forward(self, x, table):
        _check_table(x, table)
        gathered = ops.gather_rows(x, table.indices, table.pad_sentinel)
        return self.pointwise((gathered * self.depthwise).sum(axis=-2))


def build_mixer(kind, channels, num_heads, spiral_length, rng):
    if kind in ('sw_msa', 'global_msa'):
        return SpiralWindowAttention(channels, num_heads, rng)
    if kind == 'spiral_conv':
        return SpiralConvMixer(channels, spiral_length, rng)
    if kind == 'depthwise_conv':
        return DepthwiseSpiralMixer(channels, spiral_length, rng)
    raise UnknownVariantError(f"unknown decoder variant '{kind}'")


class SpiralTransformerBlock(Module):
    """Pre-norm residual block: x + mix(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, channels, num_heads, spiral_length, rng, mixer='sw_msa', mlp_ratio=2):
        self.norm1 = LayerNorm(channels)
        self.mixer = build_mixer(mixer, channels, num_heads, spiral_length, rng)
        self.norm2 = LayerNorm(channels)
        self.mlp = MLP(channels, mlp_ratio * channels, channels, rng)

    def forward(self, z, table):
        z = z + self.mixer(self.norm1(z), table)
        return z + self.mlp(self.norm2(z))


class MeshRegressor(Module):
    """Coarse vertex features [B, V0, C0] -> fine vertices [B, V, 3] in mm.

    ``tables`` and ``up_transforms`` are ordered coarse to fine;
    ``up_transforms[i]`` maps level i to level i + 1.
    """

    def __init__(self, cfg, tables, up_transforms, rng):
        counts = [t.vertex_count for t in tables]
        if counts != list(cfg.vertex_counts):
            raise ConfigMismatchError(f"hierarchy levels {counts} do not match config {cfg.vertex_counts}")
        self.cfg = cfg
        self.tables = tables
        self.up_transforms = up_transforms
        channels = cfg.level_channels
        self.blocks = []
        for level, width in enumerate(channels):
            for _ in range(cfg.blocks_per_level):
                self.blocks.append(SpiralTransformerBlock(width, cfg.num_heads, tables[level].K, rng,
                                                          mixer=cfg.decoder, mlp_ratio=cfg.mlp_ratio))
        self.level_mlps = [MLP(channels[i], channels[i + 1], channels[i + 1], rng)
                           for i in range(len(channels) - 1)]
        self.head = Linear(channels[-1], 3, rng)
        self.encodings = [positional_encoding(count, width) for count, width in zip(counts, channels)]

    def level_features(self, x):
        """Features after each level's blocks, coarse to fine."""
        if x.shape[-2:] != (self.cfg.coarse_vertex_count, self.cfg.level_channels[0]):
            raise ShapeError(f"regressor expects [B,{self.cfg.coarse_vertex_count},"
                             f"{self.cfg.level_channels[0]}], got {x.shape}")
        per_level = self.cfg.blocks_per_level
        features = []
        for level, table in enumerate(self.tables):
            x = x + self.encodings[level]
            for block in self.blocks[level * per_level:(level + 1) * per_level]:
                x = block(x, table)
            features.append(x)
            if level + 1 < len(self.tables):
                x = ops.sparse_apply(self.up_transforms[level], x)
                x = self.level_mlps[level](x)
        return features

    def forward(self, x):
        return self.head(self.level_features(x)[-1]) * self.cfg.vertex_scale_mm


def decoder_tables(kind, spiral_tables):
    """Attention windows per level for a decoder variant."""
    if kind == 'global_msa':
        return [global_table(t.vertex_count) for t in spiral_tables]
    return list(spiral_tables)
