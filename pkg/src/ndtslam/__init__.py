"""2D radar SLAM with intensity-augmented NDT submaps.

Sliding-window motion estimation fusing NDT registration, gyro yaw, and a
constant-velocity motion model under an annealed adaptive robust loss;
loop closure via a polar intensity descriptor gated by the Cauchy-Schwarz
divergence; global consistency through a pose graph.
"""

from .pipeline import ScanResult, SessionConfig, SlamSession, load_config, preset
from .se2 import Pose2, Twist2

__version__ = "0.1.0"

__all__ = [
    "Pose2",
    "Twist2",
    "ScanResult",
    "SessionConfig",
    "SlamSession",
    "load_config",
    "preset",
    "__version__",
]
