## segmentation/network/config.py

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

from segmentation.exceptions import ConfigError

logger = logging.getLogger(__name__)

POOL_FACTOR = 32

DESK_CHANNELS = (8, 16, 32, 32, 32)
DESK_CONVS = (2, 2, 2, 2, 2)
VGG16_CHANNELS = (64, 128, 256, 512, 512)
VGG16_CONVS = (2, 2, 3, 3, 3)
PYRAMID_RATES = ((1, 2), (2, 4), (4, 8))
AGGREGATION_MODES = ("learned", "mean")


@dataclass(frozen=True)
class BackboneConfig:
    """Topology of the fusion network.

    Args:
        stage_channels: Output channels of the five conv stages.
        convs_per_stage: Number of 3x3 convs in each stage.
        input_size: (height, width) the network is built for.
        desk_scale: True for the reduced-channel preset.
        path_rates: Dilation rates (component a, component b) of the CSM
            block in each of the three paths.
        aggregation: "learned" 1x1 merge of the three fused maps or plain "mean".
    """

    stage_channels: Tuple[int, ...] = DESK_CHANNELS
    convs_per_stage: Tuple[int, ...] = DESK_CONVS
    input_size: Tuple[int, int] = (224, 224)
    desk_scale: bool = True
    path_rates: Tuple[Tuple[int, int], ...] = PYRAMID_RATES
    aggregation: str = "learned"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "convs_per_stage", tuple(int(c) for c in self.convs_per_stage))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        object.__setattr__(
            self, "path_rates", tuple(tuple(int(r) for r in pair) for pair in self.path_rates)
        )
        self.validate()

    @classmethod
    def desk(cls, input_size: Tuple[int, int] = (224, 224), **kwargs) -> "BackboneConfig":
        return cls(DESK_CHANNELS, DESK_CONVS, input_size, True, **kwargs)

    @classmethod
    def full(cls, input_size: Tuple[int, int] = (224, 224), **kwargs) -> "BackboneConfig":
        return cls(VGG16_CHANNELS, VGG16_CONVS, input_size, False, **kwargs)

    @classmethod
    def preset(cls, name: str, input_size: Tuple[int, int] = (224, 224), **kwargs):
        if name == "desk":
            return cls.desk(input_size, **kwargs)
        if name == "full":
            return cls.full(input_size, **kwargs)
        raise ConfigError([f"Unknown network preset '{name}', expected desk or full"])

    def validate(self) -> None:
        issues = []

        if len(self.stage_channels) != 5:
            issues.append(f"stage_channels needs 5 entries, got {len(self.stage_channels)}")
        if len(self.convs_per_stage) != 5:
            issues.append(f"convs_per_stage needs 5 entries, got {len(self.convs_per_stage)}")
        if any(c < 1 for c in self.stage_channels + self.convs_per_stage):
            issues.append("stage channels and conv counts must be positive")
        if len(self.input_size) != 2:
            issues.append(f"input_size must be (height, width), got {self.input_size}")
        elif any(s < POOL_FACTOR or s % POOL_FACTOR for s in self.input_size):
            issues.append(
                f"input_size {self.input_size} must be divisible by {POOL_FACTOR}"
            )
        if len(self.path_rates) != 3 or any(len(p) != 2 for p in self.path_rates):
            issues.append(f"path_rates needs 3 (rate_a, rate_b) pairs, got {self.path_rates}")
        elif any(r < 1 for pair in self.path_rates for r in pair):
            issues.append("dilation rates must be positive")
        if self.aggregation not in AGGREGATION_MODES:
            issues.append(f"aggregation must be one of {AGGREGATION_MODES}")

        if issues:
            logger.error(f"BackboneConfig validation failed: {issues}")
            raise ConfigError(issues)

    @property
    def tap_channels(self) -> Dict[int, int]:
        """Channels of the conv3_1, conv4_1, conv5_1 taps feeding branches 1..3."""
        return {i: self.stage_channels[i + 1] for i in (1, 2, 3)}

    @property
    def pool5_size(self) -> Tuple[int, int]:
        return self.input_size[0] // POOL_FACTOR, self.input_size[1] // POOL_FACTOR

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["stage_channels"] = list(self.stage_channels)
        data["convs_per_stage"] = list(self.convs_per_stage)
        data["input_size"] = list(self.input_size)
        data["path_rates"] = [list(p) for p in self.path_rates]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "BackboneConfig":
        return cls(
            stage_channels=tuple(data["stage_channels"]),
            convs_per_stage=tuple(data["convs_per_stage"]),
            input_size=tuple(data["input_size"]),
            desk_scale=bool(data.get("desk_scale", True)),
            path_rates=tuple(tuple(p) for p in data.get("path_rates", PYRAMID_RATES)),
            aggregation=data.get("aggregation", "learned"),
        )
