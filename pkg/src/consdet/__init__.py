"""Single-shot detection toolkit with consistent (refined-anchor) optimization."""

from .anchors import AnchorConfig, AnchorSet, generate_anchors, iou_matrix
from .config import ConfigError, ExperimentConfig, load_config, parse_config_text
from .detector import DetectorModel, DetectorOutputs, ModelConfig, training_step
from .evaluation import EvalResult, evaluate, pr_curve
from .geometry import Box, Offsets, clip, decode, encode, iou
from .inference import Detection, InferenceConfig, decode_detections, nms
from .losses import LossConfig, LossReport, consistent_cls_loss, consistent_reg_loss, focal_loss, smooth_l1
from .synthdata import Scene, SceneSpec, dataset, generate
from .targets import MatchThresholds, TargetAssignment, assign, refine_anchors

__version__ = "0.1.0"
