"""Multi-task face recognition: ArcFace identity loss plus a mask-usage head."""
from .errors import MTArcFaceError
from .loss import mtarcface_loss, total_loss
from .model import BackboneConfig, ArcHeadParams, MTArcFaceNet, build_model, load_checkpoint
from .trainer import TrainConfig, train

__all__ = [
    "ArcHeadParams",
    "BackboneConfig",
    "MTArcFaceError",
    "MTArcFaceNet",
    "TrainConfig",
    "build_model",
    "load_checkpoint",
    "mtarcface_loss",
    "total_loss",
    "train",
]
__version__ = "0.1.0"
