## segmentation/network/fusion.py

"""Forward pass of the multi-path fusion network.

Backbone taps conv3_1, conv4_1 and conv5_1 feed three side branches;
three dilated coupled-structure paths sit on pool5. Each path is fused with
its branch by a 1x1 conv, and the three fused maps are merged into the final
logits.
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Tuple, Union

import numpy as np

from segmentation.autodiff import (
    ConvSpec,
    Tensor,
    add,
    concat_channels,
    conv2d,
    max_pool2d,
    no_grad,
    relu,
    scale,
    sigmoid,
    upsample_bilinear,
)
from segmentation.exceptions import PreconditionError, ShapeError
from segmentation.maps import ProbabilityMap
from segmentation.network.config import POOL_FACTOR
from segmentation.network.params import NetworkParams

logger = logging.getLogger(__name__)

TAP_LAYERS = {1: "conv3_1", 2: "conv4_1", 3: "conv5_1"}


@dataclass
class ForwardOutputs:
    paths: List[Tensor]
    branches: List[Tensor]
    fused: List[Tensor]
    final_logits: Tensor
    probability: Tensor


def _conv(params: NetworkParams, name: str, x: Tensor, padding: int = 0, dilation: int = 1):
    layer = params[name]
    spec = ConvSpec(layer.weight, stride=1, padding=padding, dilation=dilation)
    return conv2d(x, spec, layer.bias)


def _check_index(index: int, what: str):
    if index not in (1, 2, 3):
        raise PreconditionError(f"{what} index must be 1, 2 or 3, got {index}")


def _as_image(image: Union[Tensor, np.ndarray]) -> Tensor:
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim == 3 and not image.requires_grad:
        image = Tensor(image.data[None])
    return image


# ------------------ BACKBONE ------------------


def backbone_forward(params: NetworkParams, image: Tensor) -> Dict[str, Tensor]:
    """Run the five conv stages and return the conv3_1/conv4_1/conv5_1/pool5 taps.

    Taps are the post-ReLU activations of the named convs.
    """
    image = _as_image(image)
    if image.ndim != 4:
        raise ShapeError("rank", 4, image.ndim, "backbone_forward")
    n, c, h, w = image.shape
    if n != 1:
        raise ShapeError("batch", 1, n, "backbone_forward")
    if c != 3:
        raise ShapeError("channels", 3, c, "backbone_forward")
    for dimension, size in (("height", h), ("width", w)):
        if size < POOL_FACTOR or size % POOL_FACTOR:
            raise ShapeError(
                dimension, f"a multiple of {POOL_FACTOR}", size, "backbone_forward"
            )

    config = params.config
    taps = {}
    x = image
    for stage, convs in enumerate(config.convs_per_stage, start=1):
        for k in range(1, convs + 1):
            name = f"conv{stage}_{k}"
            x = relu(_conv(params, name, x, padding=1))
            if name in TAP_LAYERS.values():
                taps[name] = x
        x = max_pool2d(x)
    taps["pool5"] = x
    return taps


# ------------------ BRANCHES / PATHS ------------------


def side_branch_forward(
    params: NetworkParams, tap: Tensor, branch_index: int, out_size: Tuple[int, int]
) -> Tensor:
    """3x3 conv + ReLU, 3x3 conv + ReLU, 1x1 score conv, bilinear upsample."""
    _check_index(branch_index, "branch")
    x = relu(_conv(params, f"branch{branch_index}_conv1", tap, padding=1))
    x = relu(_conv(params, f"branch{branch_index}_conv2", x, padding=1))
    x = _conv(params, f"branch{branch_index}_score", x)
    return upsample_bilinear(x, *out_size)


def csm_forward(params: NetworkParams, x: Tensor, block_index: int) -> Tensor:
    """Coupled structure module: two dilated components summed elementwise."""
    _check_index(block_index, "csm block")
    expected = params[f"csm{block_index}_a_dilated"].weight.shape[1]
    if x.ndim != 4:
        raise ShapeError("rank", 4, x.ndim, "csm_forward")
    if x.shape[1] != expected:
        raise ShapeError("channels", expected, x.shape[1], f"csm{block_index}")

    outputs = []
    for component, rate in zip(("a", "b"), params.config.path_rates[block_index - 1]):
        prefix = f"csm{block_index}_{component}"
        y = relu(_conv(params, f"{prefix}_dilated", x, padding=rate, dilation=rate))
        outputs.append(relu(_conv(params, f"{prefix}_pointwise", y)))
    return add(outputs[0], outputs[1])


def path_forward(
    params: NetworkParams, pool5: Tensor, path_index: int, out_size: Tuple[int, int]
) -> Tensor:
    _check_index(path_index, "path")
    x = csm_forward(params, pool5, path_index)
    x = _conv(params, f"path{path_index}_score", x)
    return upsample_bilinear(x, *out_size)


# ------------------ FUSION ------------------


def _check_same_size(maps: List[Tensor], context: str):
    for m in maps:
        if m.ndim != 4 or m.shape[1] != 1:
            raise ShapeError("map shape", "(1, 1, H, W)", m.shape, context)
    first = maps[0].shape
    for m in maps[1:]:
        if m.shape != first:
            raise ShapeError("spatial size", first[2:], m.shape[2:], context)


def fuse_path(params: NetworkParams, p: Tensor, b: Tensor, path_index: int) -> Tensor:
    """1x1 conv over concat(path, branch), path channel first; no nonlinearity."""
    _check_index(path_index, "path")
    _check_same_size([p, b], f"fuse{path_index}")
    return _conv(params, f"fuse{path_index}", concat_channels(p, b))


def aggregate_final(params: NetworkParams, f1: Tensor, f2: Tensor, f3: Tensor) -> Tensor:
    _check_same_size([f1, f2, f3], "aggregate_final")
    if params.config.aggregation == "mean":
        return scale(add(add(f1, f2), f3), 1.0 / 3.0)
    return _conv(params, "final", concat_channels(concat_channels(f1, f2), f3))


def forward(params: NetworkParams, image: Tensor) -> ForwardOutputs:
    image = _as_image(image)
    taps = backbone_forward(params, image)
    out_size = image.shape[2:]

    branches = [
        side_branch_forward(params, taps[TAP_LAYERS[i]], i, out_size) for i in (1, 2, 3)
    ]
    paths = [path_forward(params, taps["pool5"], i, out_size) for i in (1, 2, 3)]
    fused = [fuse_path(params, paths[i - 1], branches[i - 1], i) for i in (1, 2, 3)]
    final_logits = aggregate_final(params, *fused)

    return ForwardOutputs(
        paths=paths,
        branches=branches,
        fused=fused,
        final_logits=final_logits,
        probability=sigmoid(final_logits),
    )


def infer_probability_map(
    params: NetworkParams, image: Union[Tensor, np.ndarray], source_size=None
) -> ProbabilityMap:
    """Full forward pass without recording gradients."""
    start = time.perf_counter()
    with no_grad():
        outputs = forward(params, image)
    elapsed = time.perf_counter() - start

    values = outputs.probability.data[0, 0]
    logger.debug(f"Inference {values.shape} took {elapsed:.3f}s")
    return ProbabilityMap(values.copy(), source_size=source_size)
