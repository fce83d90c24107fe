from segmentation.autodiff.tensor import (
    Tape,
    Tensor,
    backward,
    current_tape,
    named_tensors,
    no_grad,
)
from segmentation.autodiff.ops import (
    ConvSpec,
    add,
    bilinear_weights,
    clamp,
    concat_channels,
    conv2d,
    log,
    max_pool2d,
    mul,
    relu,
    scale,
    sigmoid,
    slice_channels,
    sub,
    sum_all,
    upsample_bilinear,
)
from segmentation.autodiff.gradcheck import (
    GradientCheckReport,
    finite_difference_check,
    gradient_check_report,
)
