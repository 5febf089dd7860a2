"""Center-point multi-object tracking with motion-aware dynamic searchers, on numpy."""

from .metrics import MetricReport, evaluate
from .nets import Detection, Frame, SearchTrackNet
from .scenegen import SceneConfig, crossing_preset, generate, static_preset
from .tracker import Tracker, TrackerConfig, TrainConfig, track_sequence, train

__version__ = "0.1.0"
