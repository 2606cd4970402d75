"""Flat-ground monocular depth baseline.

Assumes a level ground plane a known height ``H`` below the camera.  A
ground contact at image row ``v`` lies at depth ``Z = f H / (v - v_h)``
where ``v_h`` is the horizon row.  The apex is then placed at the same
depth as its ground contact.
"""
from dataclasses import dataclass

import numpy as np

from . import config
from .errors import AboveHorizon, SingularDenominator
from .measurement import MeasurementReport, as_polylines


@dataclass(frozen=True)
class FlatGroundModel:
    f: float
    H: float
    horizon_row: float

    def __post_init__(self):
        if not (self.f > 0 and self.H > 0):
            raise ValueError("focal length and camera height must be positive")

    @classmethod
    def from_extrinsics(cls, camera, extrinsics, ground_height, up=(0.0, 0.0, 1.0)):
        """Model for a roll-free camera above a level ground at ``ground_height``.

        The focal length is divided by the cosine of the camera pitch, which
        makes ``Z = f H / y`` exact for camera depth on a truly flat ground.
        """
        up = np.asarray(up, dtype=float)
        forward = extrinsics.rotation.T @ np.array([0.0, 0.0, 1.0])
        pitch = np.arcsin(np.clip(-forward @ up, -1.0, 1.0))
        H = float(extrinsics.center @ up - ground_height)
        horizon = camera.cy - camera.fy * np.tan(pitch)
        return cls(camera.fy / np.cos(pitch), H, float(horizon))


def depth_from_ground_point(model, ground_pixel_row):
    y = ground_pixel_row - model.horizon_row
    if y <= 0:
        raise AboveHorizon(f"row {ground_pixel_row:.2f} is not below the horizon "
                           f"({model.horizon_row:.2f})", stage="baseline")
    return model.f * model.H / y


def depth_error_model(model, Z, n):
    """Depth error ``f H / (y + n) - Z`` caused by ``n`` pixels of row error.

    Here ``y = f H / Z`` is the true row offset.  Positive ``n`` (row pushed
    away from the horizon) shortens the estimate, so the sign is ``-sign(n)``.
    """
    fH = model.f * model.H
    if fH + n * Z == 0:
        raise SingularDenominator("f H + n Z vanishes")
    y = fH / Z
    return fH / (y + n) - Z


def depth_error_magnitude(model, Z, n):
    """``|n| Z^2 / |f H + n Z|``, the closed-form size of the error."""
    fH = model.f * model.H
    denom = fH + n * Z
    if denom == 0:
        raise SingularDenominator("f H + n Z vanishes")
    return abs(n) * Z * Z / abs(denom)


def baseline_apex_point(keypoints, model, camera, extrinsics):
    """Apex placed at the flat-ground depth of the ground contact."""
    Z = depth_from_ground_point(model, keypoints.ground_mid[1])
    u, v = keypoints.apex
    p_cam = Z * (camera.K_inv @ np.array([u, v, 1.0]))
    return extrinsics.inverse().apply(p_cam)


def baseline_min_distance(keypoints, model, camera, extrinsics, power_lines,
                          d_thres=config.DEFAULT_THRESHOLD_M, hazard_id="", cls=""):
    """Clearance from the flat-ground apex estimate to the line points."""
    apex = baseline_apex_point(keypoints, model, camera, extrinsics)
    best = (np.inf, 0, 0)
    for k, line in enumerate(as_polylines(power_lines)):
        d = np.linalg.norm(line.vertices - apex, axis=1)
        i = int(np.argmin(d))
        if d[i] < best[0]:
            best = (float(d[i]), k, i)
    d_min, k, i = best
    return MeasurementReport(hazard_id=hazard_id, cls=cls, d_min=d_min, d_thres=d_thres,
                             alarm=bool(d_min < d_thres), method="mobileye",
                             argmin_line=k, argmin_vertex=i, s_d=apex,
                             low_vote_apex=bool(keypoints.low_confidence),
                             apex_pixel=np.asarray(keypoints.apex, dtype=float))
