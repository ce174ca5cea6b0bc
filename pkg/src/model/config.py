import dataclasses
from dataclasses import dataclass, field

from src.utils.config_utils import dataclass_from_dict, load_json_config
from src.utils.errors import ConfigError

DECODER_VARIANTS = ('sw_msa', 'global_msa', 'spiral_conv', 'depthwise_conv')
ENCODER_LEVELS = 5


@dataclass
class ModelConfig:
    """Network shape. ``vertex_counts`` and ``level_channels`` run coarse to fine."""
    image_height: int = 128
    image_width: int = 128
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    num_joints: int = 21
    vertex_counts: list = field(default_factory=lambda: [49, 98, 195, 389, 778])
    spiral_length: int = 9
    num_heads: int = 4
    level_channels: list = field(default_factory=lambda: [256, 128, 64, 32, 16])
    blocks_per_level: int = 1
    mlp_ratio: int = 2
    regressor_hidden: int = 64
    mspfe_hidden: int = 256
    vertex_scale_mm: float = 100.0
    decoder: str = 'sw_msa'
    use_mspfe: bool = True
    use_ppvl: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_height % 32 or self.image_width % 32:
            raise ConfigError(f"image size {self.image_height}x{self.image_width} must be divisible by 32")
        if len(self.encoder_channels) != ENCODER_LEVELS:
            raise ConfigError(f"encoder needs {ENCODER_LEVELS} channel counts, got {len(self.encoder_channels)}")
        if len(self.level_channels) != len(self.vertex_counts):
            raise ConfigError("level_channels and vertex_counts must have the same length")
        if list(self.vertex_counts) != sorted(self.vertex_counts):
            raise ConfigError("vertex_counts must run coarse to fine")
        if self.decoder not in DECODER_VARIANTS:
            raise ConfigError(f"unknown decoder '{self.decoder}'; expected one of {', '.join(DECODER_VARIANTS)}")
        for channels in self.level_channels:
            if channels % 2:
                raise ConfigError(f"level channels must be even for positional encoding, got {channels}")
            if self.decoder in ('sw_msa', 'global_msa') and channels % self.num_heads:
                raise ConfigError(f"{channels} channels do not split into {self.num_heads} heads")
        if self.spiral_length < 1:
            raise ConfigError("spiral_length must be positive")

    @property
    def pose_feature_channels(self):
        return self.level_channels[0]

    @property
    def coarse_vertex_count(self):
        return self.vertex_counts[0]

    @property
    def fine_vertex_count(self):
        return self.vertex_counts[-1]

    def level_extent(self, level):
        """Spatial size of encoder level ``level`` (stride 2^(level+1))."""
        stride = 2 ** (level + 1)
        return self.image_height // stride, self.image_width // stride

    def with_overrides(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data)

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_json_config(path))
