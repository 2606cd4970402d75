"""Input validation shared by the estimators."""
import numpy as np
from sklearn.utils import check_array

from .cloud import PointCloud
from .errors import EmptyCloud
from .keypoints import BoundingBox


def check_points(X, dims=3, name="X", min_samples=1):
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples, input_name=name)
    if X.shape[1] != dims:
        raise ValueError(f"{name} must have {dims} columns, got {X.shape[1]}")
    return X


def check_cloud(X, intensity=None):
    if isinstance(X, PointCloud):
        cloud = X
    else:
        try:
            xyz = check_points(X, 3, "cloud")
        except ValueError as exc:
            if np.size(X) == 0:
                raise EmptyCloud("point cloud is empty") from exc
            raise
        cloud = PointCloud(xyz, intensity=intensity)
    if len(cloud) == 0:
        raise EmptyCloud("point cloud is empty")
    return cloud


def check_detections(detections):
    """Normalise detections to ``[(hazard_id, BoundingBox, parent), ...]``.

    Accepts scene ``Detection`` objects, dicts with ``id``/``class``/``box``
    (and optional ``parent``), or bare :class:`BoundingBox` instances.
    """
    out = []
    for k, det in enumerate(detections):
        if isinstance(det, BoundingBox):
            out.append((f"h{k}", det, None))
        elif isinstance(det, dict):
            u0, v0, u1, v1 = det["box"]
            out.append((str(det.get("id", f"h{k}")), BoundingBox(det["class"], u0, v0, u1, v1),
                        det.get("parent")))
        else:
            out.append((det.hazard_id, det.box, getattr(det, "parent", None)))
    return out
