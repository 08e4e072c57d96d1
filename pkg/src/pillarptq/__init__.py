"""Post-training INT8 quantization toolkit for a miniature pillar-based BEV
detector: calibration (max-min / entropy / grid search), scale fine-tuning
against float-model pseudo-labels, and adaptive weight rounding."""

from .quant import (
    EPS_SCALE,
    QuantError,
    QuantParams,
    RoundingOffsets,
    dequantize,
    fake_quant,
    quantize,
    round_half_away,
    round_trip_error_bound,
    scale_from_range,
)
from .calib import (
    CalibError,
    Histogram,
    SearchConfig,
    build_histogram,
    calibrate_layer,
    entropy_threshold,
    grid_search_detail,
    grid_search_scale,
    kl_divergence,
    maxmin_range,
    merge_histograms,
)
from .network import LayerSpec, Network, NetworkError, fold_batchnorm
from .detector import (
    Box3D,
    DetectorOutput,
    GridConfig,
    PillarGrid,
    PointCloud,
    build_detector,
    decode_boxes,
    detector_forward,
    nms_bev,
    pillarize,
)
from .losses import (
    LossWeights,
    PseudoLabels,
    focal_loss,
    l1_reg_loss,
    local_recon_loss,
    make_pseudo_labels,
    pseudo_label_loss,
    render_targets,
    total_loss,
)
from .scenegen import SceneSpec, generate_scene
from .dataset import Dataset, FileAudit, generate_dataset, load_point_cloud, save_point_cloud
from .modelio import load_model, save_model
from .evalharness import EvalReport, evaluate, evaluate_model, range_ablation
from .config import ConfigError, GenConfig, PipelineConfig, TrainConfig
from .pipeline import (
    PipelineError,
    RunLog,
    run_baseline_calibration,
    run_lidar_ptq,
    sample_calibration_set,
    train_fp_baseline,
)

__version__ = "0.1.0"
