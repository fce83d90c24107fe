from segmentation.network.config import BackboneConfig
from segmentation.network.params import (
    Layer,
    NetworkParams,
    build_network,
    layer_shapes,
    zero_network,
)
from segmentation.network.fusion import (
    ForwardOutputs,
    aggregate_final,
    backbone_forward,
    csm_forward,
    forward,
    fuse_path,
    infer_probability_map,
    path_forward,
    side_branch_forward,
)
from segmentation.network.checkpoint import (
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
