"""Correlation-filter tracking as a trainable convolution with residual branches."""

from .model import CrestModel, gaussian_label, train_init, train_update
from .tracker import BBox, CrestTracker, TrackerConfig

__all__ = ["BBox", "CrestModel", "CrestTracker", "TrackerConfig", "gaussian_label",
           "train_init", "train_update"]
__version__ = "0.1.0"
