"""3-D shape refinement from forward-scan sonar images with multipath-aware registration."""

from .geom import SonarGeometry, SonarPose
from .mesh import TriangleMesh, load_obj, save_obj
from .metrics import nve
from .refine import RefineConfig, View, run

__all__ = ["SonarGeometry", "SonarPose", "TriangleMesh", "load_obj", "save_obj", "nve",
           "RefineConfig", "View", "run"]
__version__ = "0.1.0"
