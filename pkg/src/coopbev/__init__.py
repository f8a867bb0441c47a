"""Desk-scale cooperative BEV perception.

Two simulated vehicles exchange BEV feature maps over a lossy channel;
a dual-mode network either passes the ego features through untouched
(individual perception) or fuses them with the warped neighbor map via
a learned complementary weight map (cooperative perception). One shared
detection head serves both modes and both are trained jointly.
"""

from .autodiff import Tensor, gradcheck
from .boxes import DetectionBox, rotated_iou, rotated_nms
from .comms import FeatureMessage, decode_message, encode_message
from .config import ExperimentConfig, config_hash, default_config, load_config
from .detection import build_model, infer, train_joint
from .errors import CoopBevError
from .fusion import forward_dual
from .geometry import BEVFeatureMap, GridSpec, Pose2D, relative_transform, warp_feature_map
from .metrics import EvalResult, average_precision, late_fusion_baseline
from .scene import SyntheticScene, generate_scene, rasterize_bev, raycast_visible_points

__version__ = "0.1.0"

__all__ = [
    "Tensor", "gradcheck",
    "DetectionBox", "rotated_iou", "rotated_nms",
    "FeatureMessage", "decode_message", "encode_message",
    "ExperimentConfig", "config_hash", "default_config", "load_config",
    "build_model", "infer", "train_joint",
    "CoopBevError",
    "forward_dual",
    "BEVFeatureMap", "GridSpec", "Pose2D", "relative_transform", "warp_feature_map",
    "EvalResult", "average_precision", "late_fusion_baseline",
    "SyntheticScene", "generate_scene", "rasterize_bev", "raycast_visible_points",
    "__version__",
]
