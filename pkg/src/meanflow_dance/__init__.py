"""Few-step mean-velocity flow model for music-conditioned dance generation."""

from .estimator import MeanFlowDancer, MotionFeatureExtractor, check_motion, check_music

__version__ = "0.1.0"

__all__ = ["MeanFlowDancer", "MotionFeatureExtractor", "check_motion", "check_music", "__version__"]
