"""EDANet-family segmentation networks: from-scratch inference and static
architecture analysis."""

from .analyzer import (
    AnalysisReport,
    LayerReport,
    analyze,
    count_multiply_adds,
    count_params,
    effective_kernel,
    receptive_field,
    render_report,
    trace_shapes,
)
from .netdef import (
    LayerSpec,
    NetspecError,
    NetworkSpec,
    VARIANTS,
    build_variant,
    parse_netspec,
    serialize_netspec,
)
from .runtime import (
    FoldedNetwork,
    WeightStore,
    fold_batch_norm,
    forward,
    infer_image,
    init_weights,
    load_weights,
    save_weights,
)
from .schedmetrics import ClassFrequencies, class_weights, mean_iou, poly_lr
from .tensorops import BnParams, Kernel, LabelMap, ShapeError, Tensor

__version__ = "0.1.0"
