"""Keypoint-guided conditional diffusion for SAR-to-optical aircraft translation."""

from .cagm import CAGMConfig, CAGMUNet, ConditionSet
from .config import CPU_DESK, RunConfig, load_config
from .detector import DetectorConfig, KeypointDetector
from .diffusion import NoiseSchedule, build_linear_schedule, sample
from .evaluation import EvalReport
from .geometry import KeypointAnnotation, keypoints_to_angle

__version__ = "0.1.0"

__all__ = [
    "CAGMConfig", "CAGMUNet", "ConditionSet", "CPU_DESK", "RunConfig", "load_config", "DetectorConfig",
    "KeypointDetector", "NoiseSchedule", "build_linear_schedule", "sample", "EvalReport",
    "KeypointAnnotation", "keypoints_to_angle",
]
