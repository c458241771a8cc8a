"""Airway-tree segmentation toolkit: CT preparation, probability-map fusion,
skeleton graphs, fragment reconnection, tree metrics and synthetic fixtures."""
from .errors import (
    AerotreeError,
    BoundsError,
    ConfigError,
    ConsistencyError,
    EmptyMaskError,
    FormatError,
    ParameterError,
    ShapeError,
    SpecError,
    UndefinedMetricError,
    UnsupportedError,
)
from .fusion import FusionParams, ensemble_max, threshold
from .metrics import (
    ConfusionCounts,
    MetricParams,
    MetricsReport,
    aggregate,
    branch_detected,
    confusion,
    dsc,
    evaluate_case,
    precision,
    sensitivity,
    specificity,
    tree_length_detected,
)
from .postprocess import (
    ReconnectParams,
    endpoint_directions,
    identify_main_tree,
    match_segments,
    rasterize_tube,
    refine,
)
from .preprocess import (
    PreprocessParams,
    clip_normalize,
    clip_trachea_at_lung_top,
    crop,
    lung_bbox,
    resample_isotropic,
)
from .synth import (
    SynthTreeSpec,
    SynthTreeTruth,
    add_noise_blob,
    cut_branch,
    displace_fragment,
    generate,
    lung_surrogate,
)
from .topology import (
    CenterlineGraph,
    RadiusField,
    Skeleton,
    build_graph,
    connected_components,
    radius_field,
    skeletonize,
)
from .volume import BoundingBox, VoxelGrid, read_nifti, write_nifti

__version__ = "0.1.0"
