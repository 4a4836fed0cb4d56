"""Edge-cloud continuous learning control plane with a deterministic simulator."""

from .clock import SimClock, WallClock
from .core import (EdgeSyncError, FilterConfig, HyperParams, InferenceOutput, InvariantError,
                   ModelParams, Sample, ScoredSample)

__all__ = ["EdgeSyncError", "FilterConfig", "HyperParams", "InferenceOutput", "InvariantError",
           "ModelParams", "Sample", "ScoredSample", "SimClock", "WallClock"]
