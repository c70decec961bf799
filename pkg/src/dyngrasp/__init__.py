"""dyngrasp: distance-field shape reconstruction, SE(3) mixture models, and
reactive controllers for grasping moving objects."""

from dyngrasp.se3 import Pose

__all__ = ["Pose"]
__version__ = "0.1.0"
