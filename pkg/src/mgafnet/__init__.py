"""Dual-pathway video interaction recognition with object-track guided attention fusion."""
from .estimator import InteractionClassifier, TrackTensorizer, check_clips
from .fusion import MgafWeights, attend, gate, mgaf_forward
from .metrics import MetricsReport, compute_metrics
from .pathways import MODES, DualPathwayNet, PathwayConfig, count_parameters, joint_loss
from .tracks import Detection, TrackEncoder, TrackEncoderConfig, build_object_tensor

__version__ = "0.1.0"

__all__ = [
    "InteractionClassifier", "TrackTensorizer", "check_clips",
    "MgafWeights", "attend", "gate", "mgaf_forward",
    "MetricsReport", "compute_metrics",
    "MODES", "DualPathwayNet", "PathwayConfig", "count_parameters", "joint_loss",
    "Detection", "TrackEncoder", "TrackEncoderConfig", "build_object_tensor",
]
