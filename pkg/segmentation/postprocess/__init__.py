from segmentation.postprocess.threshold import histogram_bins, otsu_threshold
from segmentation.postprocess.morphology import (
    StructuringElement,
    close,
    dilate,
    erode,
    fill_holes,
    morphology,
)
from segmentation.postprocess.regions import (
    ComponentStats,
    connected_components,
    label_components,
    select_primary_region,
)
from segmentation.postprocess.chain import postprocess_pipeline
