## segmentation/network/params.py

import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from segmentation.autodiff import Tensor
from segmentation.exceptions import PreconditionError, ShapeError
from segmentation.network.config import BackboneConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerShape:
    name: str
    kind: str
    out_channels: int
    in_channels: int
    kernel: int

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    kind: str


def layer_shapes(config: BackboneConfig) -> List[LayerShape]:
    """Every learnable layer of the network, in build order."""
    shapes = []

    in_channels = 3
    for stage, (channels, convs) in enumerate(
        zip(config.stage_channels, config.convs_per_stage), start=1
    ):
        for k in range(1, convs + 1):
            shapes.append(LayerShape(f"conv{stage}_{k}", "backbone", channels, in_channels, 3))
            in_channels = channels

    for i, channels in config.tap_channels.items():
        shapes.append(LayerShape(f"branch{i}_conv1", "side_branch", channels, channels, 3))
        shapes.append(LayerShape(f"branch{i}_conv2", "side_branch", channels, channels, 3))
        shapes.append(LayerShape(f"branch{i}_score", "side_branch", 1, channels, 1))

    top = config.stage_channels[-1]
    for i in (1, 2, 3):
        for component in ("a", "b"):
            shapes.append(LayerShape(f"csm{i}_{component}_dilated", "csm_block", top, top, 3))
            shapes.append(LayerShape(f"csm{i}_{component}_pointwise", "csm_block", top, top, 1))
        shapes.append(LayerShape(f"path{i}_score", "path_head", 1, top, 1))

    for i in (1, 2, 3):
        shapes.append(LayerShape(f"fuse{i}", "fusion", 1, 2, 1))

    if config.aggregation == "learned":
        shapes.append(LayerShape("final", "aggregation", 1, 3, 1))

    return shapes


class NetworkParams:
    """Named weight/bias pairs of every fusion network layer."""

    def __init__(self, config: BackboneConfig, layers: "OrderedDict[str, Layer]"):
        self.config = config
        self.layers = layers
        self._validate()

    def _validate(self):
        expected = {s.name: s for s in layer_shapes(self.config)}
        missing = [name for name in expected if name not in self.layers]
        unknown = [name for name in self.layers if name not in expected]
        if missing or unknown:
            raise PreconditionError(
                f"Layer inventory mismatch, missing={missing} unknown={unknown}"
            )
        for name, layer in self.layers.items():
            shape = expected[name]
            if layer.weight.shape != shape.weight_shape:
                raise ShapeError("weight shape", shape.weight_shape, layer.weight.shape, name)
            if layer.bias.shape != (shape.out_channels,):
                raise ShapeError("bias shape", (shape.out_channels,), layer.bias.shape, name)

    def __getitem__(self, name: str) -> Layer:
        try:
            return self.layers[name]
        except KeyError:
            raise PreconditionError(f"No layer named '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def __iter__(self) -> Iterator[str]:
        return iter(self.layers)

    def tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for name, layer in self.layers.items():
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def inventory(self) -> Dict[str, int]:
        """Layer counts by kind, plus one pooling stage per backbone stage."""
        counts = Counter(layer.kind for layer in self.layers.values())
        return {
            "backbone_conv": counts["backbone"],
            "pool": len(self.config.convs_per_stage),
            "side_branch": counts["side_branch"] // 3,
            "csm_block": counts["csm_block"] // 4,
            "path_head": counts["path_head"],
            "fusion": counts["fusion"],
            "aggregation": counts["aggregation"],
        }

    def zero_grad(self):
        for _, tensor in self.tensors():
            tensor.zero_grad()

    def copy(self, requires_grad: bool = True) -> "NetworkParams":
        layers = OrderedDict(
            (
                name,
                Layer(
                    Tensor(layer.weight.data.copy(), requires_grad, f"{name}.weight"),
                    Tensor(layer.bias.data.copy(), requires_grad, f"{name}.bias"),
                    layer.kind,
                ),
            )
            for name, layer in self.layers.items()
        )
        return NetworkParams(self.config, layers)

    def map_layers(self, fn) -> "NetworkParams":
        """New params with ``fn(name, layer) -> (weight, bias)`` arrays per layer."""
        layers = OrderedDict()
        for name, layer in self.layers.items():
            weight, bias = fn(name, layer)
            layers[name] = Layer(
                Tensor(weight, True, f"{name}.weight"),
                Tensor(bias, True, f"{name}.bias"),
                layer.kind,
            )
        return NetworkParams(self.config, layers)

    def equals(self, other: "NetworkParams") -> bool:
        """Bit-exact comparison of every tensor and of the config."""
        if self.config != other.config or list(self.layers) != list(other.layers):
            return False
        return all(
            np.array_equal(a.data, b.data)
            for (_, a), (_, b) in zip(self.tensors(), other.tensors())
        )


def _initial_weight(shape: LayerShape, rng: np.random.Generator) -> np.ndarray:
    if shape.kind == "fusion":
        return np.full(shape.weight_shape, 0.5)
    if shape.kind == "aggregation":
        return np.full(shape.weight_shape, 1.0 / 3.0)
    std = np.sqrt(2.0 / shape.fan_in)
    return rng.normal(0.0, std, size=shape.weight_shape)


def build_network(config: BackboneConfig, seed: int = 0) -> NetworkParams:
    """Seeded fan-in scaled normal init; fusion and merge layers start balanced."""
    config.validate()
    rng = np.random.default_rng(seed)

    layers = OrderedDict()
    for shape in layer_shapes(config):
        layers[shape.name] = Layer(
            Tensor(_initial_weight(shape, rng), True, f"{shape.name}.weight"),
            Tensor(np.zeros(shape.out_channels), True, f"{shape.name}.bias"),
            shape.kind,
        )

    params = NetworkParams(config, layers)
    preset = "desk" if config.desk_scale else "full"
    logger.info(
        f"Built {preset} network {config.input_size}, "
        f"{len(layers)} layers, {params.parameter_count()} parameters"
    )
    return params


def zero_network(config: BackboneConfig) -> NetworkParams:
    """Network with every weight and bias set to zero."""
    layers = OrderedDict(
        (
            s.name,
            Layer(
                Tensor(np.zeros(s.weight_shape), True, f"{s.name}.weight"),
                Tensor(np.zeros(s.out_channels), True, f"{s.name}.bias"),
                s.kind,
            ),
        )
        for s in layer_shapes(config)
    )
    return NetworkParams(config, layers)
