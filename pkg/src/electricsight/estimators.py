"""scikit-learn style estimators over the functional pipeline.

``ClearanceMonitor`` is fitted once per camera/survey pair (building the
correspondence table) and then predicts clearances frame by frame.
``PoseRegistration`` fits the extrinsics from 2D-3D pairs.
``KeypointExtractor`` is a stateless transformer from detections to
keypoints.
"""
import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import config
from ._validation import check_cloud, check_detections, check_points
from .baselines import FlatGroundModel, baseline_min_distance
from .errors import ElectricSightError
from .geometry import Polyline3, project_points
from .keypoints import CRANE_LIKE, LIFT_LIKE, extract_keypoints, find_arm_box
from .measurement import (
    as_polylines,
    build_correspondence_table,
    estimate_ground_plane,
    measure_hazard,
)
from .registration import (
    estimate_pose_pnp,
    refine_pose_se3,
    reprojection_cost,
    rms_reprojection_error,
)

log = logging.getLogger(__name__)

METHODS = ("ours", "mobileye")


class KeypointExtractor(TransformerMixin, BaseEstimator):
    """Detections to :class:`~electricsight.keypoints.KeypointSet` objects."""

    def __init__(self, use_arm_box=True, use_gmm_ht=True, k_components=config.GMM_COMPONENTS,
                 angle_bins=config.HOUGH_ANGLE_BINS,
                 rho_resolution=config.HOUGH_RHO_RESOLUTION_PX,
                 min_vote_share=config.MIN_VOTE_SHARE, seed=0):
        self.use_arm_box = use_arm_box
        self.use_gmm_ht = use_gmm_ht
        self.k_components = k_components
        self.angle_bins = angle_bins
        self.rho_resolution = rho_resolution
        self.min_vote_share = min_vote_share
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def fit_transform(self, X, y=None, image=None):
        return self.fit(X).transform(X, image)

    def transform(self, X, image=None):
        """Keypoints for every hazard detection in ``X`` (arm boxes are consumed)."""
        dets = check_detections(X)
        out = []
        for hid, box, parent in dets:
            if box.cls not in CRANE_LIKE + LIFT_LIKE:
                continue
            arm = find_arm_box(box, [(i, b, p) for i, b, p in dets], hid) \
                if box.cls in CRANE_LIKE else None
            out.append((hid, box, extract_keypoints(
                box, image, arm, use_arm_box=self.use_arm_box, use_gmm_ht=self.use_gmm_ht,
                k_components=self.k_components, angle_bins=self.angle_bins,
                rho_resolution=self.rho_resolution, min_vote_share=self.min_vote_share,
                seed=self.seed)))
        return out


class ClearanceMonitor(BaseEstimator):
    """Hazard-to-power-line clearance from a single camera frame.

    Parameters
    ----------
    method : {"ours", "mobileye"}
        Depth from the survey-cloud constraint, or the flat-ground baseline.
    d_thres : float
        Alarm threshold in meters.
    use_depth_constraint, use_arm_box, use_gmm_ht : bool
        Ablation switches.
    search_radius : float
        Hole-filling radius (px) for table lookups.
    segments : bool
        Measure against line segments instead of line points.
    """

    def __init__(self, method="ours", d_thres=config.DEFAULT_THRESHOLD_M,
                 use_depth_constraint=True, use_arm_box=True, use_gmm_ht=True,
                 search_radius=config.DEFAULT_SEARCH_RADIUS_PX, segments=False,
                 ransac_iterations=config.RANSAC_ITERATIONS,
                 ransac_threshold=config.RANSAC_INLIER_THRESHOLD_M,
                 ground_radius=config.GROUND_RADIUS_M, ground_band=config.GROUND_BAND_M,
                 k_components=config.GMM_COMPONENTS, angle_bins=config.HOUGH_ANGLE_BINS,
                 rho_resolution=config.HOUGH_RHO_RESOLUTION_PX,
                 min_vote_share=config.MIN_VOTE_SHARE, seed=0):
        self.method = method
        self.d_thres = d_thres
        self.use_depth_constraint = use_depth_constraint
        self.use_arm_box = use_arm_box
        self.use_gmm_ht = use_gmm_ht
        self.search_radius = search_radius
        self.segments = segments
        self.ransac_iterations = ransac_iterations
        self.ransac_threshold = ransac_threshold
        self.ground_radius = ground_radius
        self.ground_band = ground_band
        self.k_components = k_components
        self.angle_bins = angle_bins
        self.rho_resolution = rho_resolution
        self.min_vote_share = min_vote_share
        self.seed = seed

    def fit(self, X, y=None, *, camera, extrinsics, power_lines, intensity=None,
            camera_height=None):
        """Project the survey cloud ``X`` into a correspondence table.

        ``X`` is an ``(n, 3)`` array or a :class:`PointCloud`.  For the
        flat-ground method the camera height above ground is measured from
        the cloud around the camera foot unless ``camera_height`` is given.
        """
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        cloud = check_cloud(X, intensity)
        self.cloud_ = cloud
        self.camera_ = camera
        self.extrinsics_ = extrinsics
        self.power_lines_ = as_polylines(power_lines)
        self.table_ = build_correspondence_table(cloud, camera, extrinsics)
        self.flat_model_ = None
        if self.method == "mobileye":
            self.flat_model_ = self._flat_model(cloud, camera, extrinsics, camera_height)
        log.debug("fitted table: %d occupied cells", int(self.table_.occupied().sum()))
        return self

    def _flat_model(self, cloud, camera, extrinsics, camera_height):
        center = extrinsics.center
        if camera_height is not None:
            return FlatGroundModel.from_extrinsics(camera, extrinsics, center[2] - camera_height)
        # the survey may start a few meters ahead of the camera, so widen the
        # footprint until it holds enough points
        for radius in (self.ground_radius, 2 * self.ground_radius, 4 * self.ground_radius):
            try:
                plane = estimate_ground_plane(cloud.xyz, center, center, radius=radius,
                                              band=self.ground_band,
                                              iterations=self.ransac_iterations,
                                              inlier_threshold=self.ransac_threshold,
                                              seed=self.seed)
                break
            except ElectricSightError:
                if radius == 4 * self.ground_radius:
                    raise
        n, p = plane.normal, plane.point
        z = p[2] - (n[0] * (center[0] - p[0]) + n[1] * (center[1] - p[1])) / n[2]
        return FlatGroundModel.from_extrinsics(camera, extrinsics, z)

    def _ground_kwargs(self):
        return {"radius": self.ground_radius, "band": self.ground_band,
                "iterations": self.ransac_iterations,
                "inlier_threshold": self.ransac_threshold, "seed": self.seed}

    def keypoints(self, detections, image=None):
        return KeypointExtractor(
            use_arm_box=self.use_arm_box, use_gmm_ht=self.use_gmm_ht,
            k_components=self.k_components, angle_bins=self.angle_bins,
            rho_resolution=self.rho_resolution, min_vote_share=self.min_vote_share,
            seed=self.seed).transform(detections, image)

    def measure(self, detections, image=None):
        """One :class:`MeasurementReport` per hazard detection."""
        check_is_fitted(self, "table_")
        reports = []
        for hid, box, kp in self.keypoints(detections, image):
            if self.method == "mobileye":
                rep = baseline_min_distance(kp, self.flat_model_, self.camera_,
                                            self.extrinsics_, self.power_lines_,
                                            self.d_thres, hazard_id=hid, cls=box.cls)
            else:
                rep = measure_hazard(self.table_, None, kp, self.camera_, self.extrinsics_,
                                     self.power_lines_, self.d_thres, hazard_id=hid,
                                     cls=box.cls,
                                     use_depth_constraint=self.use_depth_constraint,
                                     search_radius=self.search_radius, segments=self.segments,
                                     ground_kwargs=self._ground_kwargs())
            for err in rep.stage_errors:
                log.info("hazard %s: %s stage fell back (%s)", hid, err["stage"], err["error"])
            reports.append(rep)
        return reports

    def predict(self, X, image=None):
        """Minimum clearance (m) per hazard detection in ``X``."""
        return np.array([r.d_min for r in self.measure(X, image)])

    def predict_alarm(self, X, image=None):
        return self.predict(X, image) < self.d_thres

    def _is_fitted_to(self, cloud, camera, extrinsics, power_lines):
        if getattr(self, "table_", None) is None:
            return False
        lines = as_polylines(power_lines)
        return (self.cloud_ is cloud and self.camera_ == camera
                and self.extrinsics_ == extrinsics
                and len(lines) == len(self.power_lines_)
                and all(np.array_equal(a.vertices, b.vertices)
                        for a, b in zip(lines, self.power_lines_)))

    def refit_if_needed(self, cloud, camera, extrinsics, power_lines):
        """Fit unless already fitted to this very cloud, camera, pose and lines."""
        if not self._is_fitted_to(cloud, camera, extrinsics, power_lines):
            self.fit(cloud, camera=camera, extrinsics=extrinsics, power_lines=power_lines)
        return self

    def measure_scene(self, scene):
        """Measure a simulated :class:`~electricsight.scenesim.Scene`.

        The table is rebuilt only when the scene's survey or pose differs
        from the fitted one.
        """
        self.refit_if_needed(scene.cloud, scene.camera, scene.extrinsics, scene.power_line)
        return self.measure(scene.detections, scene.image)


class PoseRegistration(BaseEstimator):
    """Extrinsics from 2D-3D correspondences: linear PnP, then SE(3) refinement.

    ``fit(X, y)`` takes pixels ``X`` of shape ``(n, 2)`` and point-cloud
    coordinates ``y`` of shape ``(n, 3)``.
    """

    def __init__(self, camera=None, refine=True, max_iters=50, convergence_tol=1e-10,
                 initial_pose=None):
        self.camera = camera
        self.refine = refine
        self.max_iters = max_iters
        self.convergence_tol = convergence_tol
        self.initial_pose = initial_pose

    def fit(self, X, y, sample_weight=None):
        if self.camera is None:
            raise ValueError("PoseRegistration needs a camera model")
        pixels = check_points(X, 2, "X", min_samples=0)
        world = check_points(y, 3, "y", min_samples=0)
        if len(pixels) != len(world):
            raise ValueError("X and y differ in length")
        weights = np.ones(len(pixels)) if sample_weight is None else \
            np.asarray(sample_weight, dtype=float)
        corr = (pixels, world, weights)
        self.pnp_pose_ = estimate_pose_pnp(corr, self.camera)
        pose = self.pnp_pose_
        cost = reprojection_cost(pose, self.camera, corr)
        if self.refine:
            starts = [self.pnp_pose_]
            if self.initial_pose is not None:
                starts.append(self.initial_pose)
            best = None
            for start in starts:
                cand = refine_pose_se3(start, corr, self.camera, self.max_iters,
                                       self.convergence_tol)
                if best is None or cand[1] < best[1]:
                    best = cand
            pose, cost = best
        self.pose_ = pose
        self.cost_ = cost
        self.rms_ = rms_reprojection_error(pose, self.camera, corr)
        self.n_correspondences_ = len(pixels)
        return self

    def predict(self, X):
        """Project point-cloud coordinates ``X`` with the fitted pose."""
        check_is_fitted(self, "pose_")
        uv, _ = project_points(self.camera, self.pose_, check_points(X, 3))
        return uv

    def score(self, X, y, sample_weight=None):
        """Negative RMS reprojection error (higher is better)."""
        check_is_fitted(self, "pose_")
        return -rms_reprojection_error(self.pose_, self.camera,
                                       (check_points(X, 2), check_points(y, 3), sample_weight))


__all__ = ["ClearanceMonitor", "KeypointExtractor", "PoseRegistration", "Polyline3"]
