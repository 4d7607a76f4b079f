"""unitslab: a desk-scale lab for three-stage detector training.

Pre-train on a synthetic toy domain, insert an unsupervised intermediate
stage that learns from unlabeled "real" images via pseudo-label consistency
(single- or double-branch), then fine-tune on labeled real data; evaluate
with IoU-matched precision/recall/F and reproduce the ablations directionally.
"""

from .augment import AugSpec, GeoTransform, WeakJitter, apply_geo, color_jitter, sample_strong, transport_map
from .config import ConfigError, ExperimentConfig, load_config
from .detector import (
    Box,
    DetectorConfig,
    ProbMap,
    binarize,
    det_loss,
    extract_boxes,
    init_detector,
    predict,
    predict_batch,
)
from .evalkit import MatchResult, MetricsReport, evaluate, iou, match_detections
from .params import CheckpointError, ParamSet, checkpoint_load, checkpoint_save, sgd_step
from .pipeline import StagePlan, derive_stage_plans, gen_data, run_ablation, run_full
from .scene import (
    DatasetError,
    Domain,
    DomainConfig,
    LabeledSample,
    UnlabeledSample,
    gen_sample,
    load_manifest,
    load_sample,
    strip_labels,
    write_dataset,
)
from .tensor import Tape, Tensor, backward, detach
from .units import (
    BranchPair,
    PseudoLabel,
    Strategy,
    UnitsHyper,
    dbds_step,
    dbss_step,
    make_pseudo_label,
    sbss_step,
    select_init,
    units_loss,
)

__version__ = "0.1.0"
