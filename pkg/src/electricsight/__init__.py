"""Power-line clearance measurement from a monocular frame and a survey point cloud."""
from .cloud import PointCloud
from .errors import ElectricSightError
from .estimators import ClearanceMonitor, KeypointExtractor, PoseRegistration
from .geometry import CameraModel, Plane, Polyline3, Ray, RigidTransform
from .keypoints import BoundingBox, KeypointSet
from .measurement import MeasurementReport

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "CameraModel", "ClearanceMonitor", "ElectricSightError", "KeypointExtractor",
    "KeypointSet", "MeasurementReport", "Plane", "PointCloud", "Polyline3", "PoseRegistration",
    "Ray", "RigidTransform",
]
