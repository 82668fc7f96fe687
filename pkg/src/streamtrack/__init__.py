"""streamtrack: online point tracking with transformer memory, on numpy."""

__version__ = "0.1.0"

from . import numerics
from .metrics import EvalResult, evaluate_queried_first, video_metrics
from .model import OnlineSession, QuerySpec, TrackerConfig, TrackerModel
from .synth import SceneConfig, generate_clip
from .tracks import TrackRecord, TrackSet
from .train import TrainConfig, train

_ESTIMATORS = ("OnlinePointTracker", "CorrelationProbe", "validate_video",
               "validate_clips", "validate_queries")

__all__ = ["numerics", "__version__",
           "EvalResult", "evaluate_queried_first", "video_metrics",
           "OnlineSession", "QuerySpec", "TrackerConfig", "TrackerModel",
           "SceneConfig", "generate_clip",
           "TrackRecord", "TrackSet",
           "TrainConfig", "train",
           *_ESTIMATORS]


def __getattr__(name):
    # the estimator layer pulls in scikit-learn; loading it lazily keeps
    # plain tracking and the command line free of that import cost
    if name in _ESTIMATORS:
        from . import estimators
        return getattr(estimators, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
