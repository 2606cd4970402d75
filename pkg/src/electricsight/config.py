"""Numerical tolerances and pipeline defaults."""
from dataclasses import dataclass

# geometry
EPS_GEOMETRY = 1e-9
EPS_PARALLEL = 1e-9
EPS_UNIT = 1e-12
EPS_REPROJECTION_PX = 1e-6

# measurement
DEFAULT_THRESHOLD_M = 10.0
DEFAULT_SEARCH_RADIUS_PX = 5.0
MIN_GROUND_SEPARATION_M = 0.05
MAX_PARALLEL_ANGLE_DEG = 1.0

# ground plane
RANSAC_ITERATIONS = 500
RANSAC_INLIER_THRESHOLD_M = 0.10
GROUND_RADIUS_M = 8.0
GROUND_BAND_M = 1.0
GROUND_MAX_POINTS = 4000

# keypoints
GMM_COMPONENTS = 2
GMM_TOL = 1e-6
GMM_MAX_ITER = 200
HOUGH_ANGLE_BINS = 180
HOUGH_RHO_RESOLUTION_PX = 1.0
MIN_VOTE_SHARE = 0.15

# registration
SPLAT_RADIUS_PX = 1
ZBUFFER_TIE_M = 1e-6
LM_INITIAL_DAMPING = 1e-3
LM_DAMPING_FACTOR = 10.0


@dataclass(frozen=True)
class Tolerances:
    geometry: float = EPS_GEOMETRY
    parallel: float = EPS_PARALLEL
    unit: float = EPS_UNIT
    reprojection_px: float = EPS_REPROJECTION_PX


TOLERANCES = Tolerances()
