"""Binary-descriptor stereo matching with an int8 descriptor network toolkit."""

from .errors import CapacityError, DimensionError, FormatError, StereoError, ValidationError
from .model import (
    Activation,
    ConvLayer,
    DescriptorMap,
    FeatureMap,
    FloatModel,
    ImageBuf,
    ModelStats,
    binarize,
    census_transform,
    conv_forward,
    mccnn_preset,
    model_stats,
    single_layer_preset,
)
from .quant import (
    CalibrationSet,
    QuantConfig,
    QuantizedLayer,
    QuantizedModel,
    descriptor_flip_rate,
    forward_quantized,
    quant_act,
    quant_conv,
    quant_distance,
    quantize_model,
    quantize_weights,
    requant,
)
from .stereo import (
    CostVolume,
    DisparityMap,
    PipelineConfig,
    SgmParams,
    box_filter,
    build_cost_volume,
    derive_right_volume,
    hamming,
    lr_consistency,
    median_filter,
    run_pipeline,
    select_disparity,
    sgm_aggregate,
)
from .metrics import GroundTruth, MetricsReport, evaluate, fill_dense, format_table

__version__ = "0.1.0"
