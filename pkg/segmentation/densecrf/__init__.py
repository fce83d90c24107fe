from segmentation.densecrf.potentials import (
    POTTS,
    CrfParams,
    PixelFeatures,
    UnaryField,
    kernel_matrix,
    pairwise_weight,
    unary_from_probability,
)
from segmentation.densecrf.inference import (
    MarginalField,
    crf_refine,
    exact_energy,
    mean_field_inference,
)
