"""Synthesize robot demonstrations from one tracked object-part trajectory."""

from .errors import DemoForgeError
from .geom import Pose
from .urdfkin import KinematicModel, load_urdf, parse_urdf

__all__ = ["DemoForgeError", "KinematicModel", "Pose", "load_urdf", "parse_urdf"]
__version__ = "0.1.0"
