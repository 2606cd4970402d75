"""Core geometric types and exact operations.

Conventions
-----------
Points are plain ``numpy`` arrays of shape ``(3,)`` (or ``(n, 3)`` for
batches) in meters; pixels are arrays of shape ``(2,)`` holding ``(u, v)``.
The camera frame is x right, y down, z forward, so a visible point has
positive depth.  A :class:`RigidTransform` maps point-cloud coordinates to
camera coordinates.
"""
from dataclasses import dataclass

import numpy as np

from .config import EPS_GEOMETRY, EPS_PARALLEL
from .errors import (
    BehindCamera,
    DegenerateInput,
    EmptyPolyline,
    IntersectionBehind,
    ParallelRay,
)


def _frozen(a, shape=None, dtype=float):
    a = np.array(a, dtype=dtype)
    if shape is not None and a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise DegenerateInput("cannot normalize a zero or non-finite vector")
    return v / n


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def contains(self, pixel):
        u, v = pixel
        return 0.0 <= u <= self.width - 1 and 0.0 <= v <= self.height - 1

    def to_dict(self):
        return {"fx": float(self.fx), "fy": float(self.fy),
                "cx": float(self.cx), "cy": float(self.cy),
                "width": int(self.width), "height": int(self.height)}


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > EPS_GEOMETRY or \
                abs(np.linalg.det(R) - 1.0) > EPS_GEOMETRY:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_camera_pose(cls, center, forward, up=(0.0, 0.0, 1.0)):
        """Extrinsics for a camera at ``center`` looking along ``forward``.

        The image x axis is kept horizontal (no roll) with respect to ``up``.
        """
        f = _unit(forward)
        right = np.cross(f, np.asarray(up, dtype=float))
        right = _unit(right)
        down = np.cross(f, right)
        R = np.vstack([right, down, f])
        return cls(R, -R @ np.asarray(center, dtype=float))

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    @property
    def center(self):
        """Origin of the target frame expressed in the source frame."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {"rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True, eq=False)
class Ray:
    """Half-line ``origin + t * direction`` for ``t > 0``."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _frozen(self.origin, (3,))
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", _frozen(_unit(d), (3,)))

    def at(self, t):
        t = np.asarray(t, dtype=float)
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True, eq=False)
class Plane:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", _frozen(self.point, (3,)))
        object.__setattr__(self, "normal", _frozen(_unit(self.normal), (3,)))

    def signed_distance(self, points):
        return (np.asarray(points, dtype=float) - self.point) @ self.normal


class Polyline3:
    """Ordered 3D vertices; consecutive duplicates are dropped."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        if len(v) == 0:
            raise EmptyPolyline("polyline needs at least one vertex")
        if not np.all(np.isfinite(v)):
            raise ValueError("polyline vertices must be finite")
        keep = np.ones(len(v), dtype=bool)
        keep[1:] = np.any(v[1:] != v[:-1], axis=1)
        self.vertices = _frozen(v[keep])

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"Polyline3(n={len(self)})"


def project(camera, extrinsics, world_point):
    """Project a point-cloud-frame point to ``(pixel, depth)``.

    Raises
    ------
    BehindCamera
        If the camera-frame depth is not positive.
    """
    X, Y, Z = extrinsics.apply(world_point)
    if not Z > 0.0:
        raise BehindCamera(f"point has depth {Z:.6g} <= 0")
    pixel = np.array([camera.fx * X / Z + camera.cx,
                      camera.fy * Y / Z + camera.cy])
    return pixel, float(Z)


def project_points(camera, extrinsics, points):
    """Vectorised projection; returns ``(pixels, depths)``.

    Points behind the camera get NaN pixels; callers filter on ``depth > 0``.
    """
    P = extrinsics.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    Z = P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(Z > 0, 1.0 / Z, np.nan)
    uv = np.column_stack([camera.fx * P[:, 0] * inv + camera.cx,
                          camera.fy * P[:, 1] * inv + camera.cy])
    return uv, Z


def backproject_ray(camera, extrinsics, pixel):
    """Ray from the optical center through ``pixel``, in the point-cloud frame."""
    u, v = np.asarray(pixel, dtype=float)
    d_cam = camera.K_inv @ np.array([u, v, 1.0])
    direction = extrinsics.rotation.T @ d_cam
    return Ray(extrinsics.center, direction)


def intersect_ray_plane(ray, plane, eps_parallel=EPS_PARALLEL):
    denom = float(ray.direction @ plane.normal)
    if abs(denom) <= eps_parallel:
        raise ParallelRay("ray is parallel to the plane")
    t = float((plane.point - ray.origin) @ plane.normal) / denom
    if t <= 0.0:
        raise IntersectionBehind(f"intersection at t={t:.6g} is not ahead of the origin")
    return ray.origin + t * ray.direction


def distances_to_ray(points, ray):
    """Distance from each point to the closed half-line (vectorised)."""
    # explicit per-coordinate arithmetic keeps each result independent of
    # batch size and order (BLAS reductions are not)
    diff = np.asarray(points, dtype=float).reshape(-1, 3) - ray.origin
    d = ray.direction
    t = np.maximum(diff[:, 0] * d[0] + diff[:, 1] * d[1] + diff[:, 2] * d[2], 0.0)
    r = diff - t[:, None] * d
    return np.sqrt(r[:, 0] * r[:, 0] + r[:, 1] * r[:, 1] + r[:, 2] * r[:, 2])


def distance_point_to_ray(point, ray):
    return float(distances_to_ray(point, ray)[0])


def _segment_ray_distances(a, b, ray):
    """Distance between each segment ``[a_i, b_i]`` and the half-line."""
    # minimise |a + s e - o - t d|^2 over s in [0,1], t >= 0; the optimum
    # lies on the boundary or at the interior stationary point
    d = ray.direction
    e = b - a
    w = a - ray.origin
    ee = np.einsum("ij,ij->i", e, e)
    ed = e @ d
    we = np.einsum("ij,ij->i", w, e)
    wd = w @ d
    best = np.minimum(distances_to_ray(a, ray), distances_to_ray(b, ray))
    # origin against the segment
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = np.clip(np.where(ee > 0, -we / ee, 0.0), 0.0, 1.0)
    best = np.minimum(best, np.linalg.norm(w + s0[:, None] * e, axis=1))
    denom = ee - ed * ed
    ok = denom > 1e-15 * np.maximum(ee, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(ok, (ed * wd - we) / denom, -1.0)
        t = wd + s * ed
    inside = ok & (s > 0.0) & (s < 1.0) & (t > 0.0)
    if np.any(inside):
        gap = w[inside] + s[inside, None] * e[inside] - t[inside, None] * d
        best[inside] = np.minimum(best[inside], np.linalg.norm(gap, axis=1))
    return best


def min_distance_polyline_to_ray(line, ray, segments=False):
    """Minimum distance between a polyline and a ray.

    By default the polyline is treated as its vertex set; ``segments=True``
    measures against the piecewise-linear curve instead.

    Returns
    -------
    d_min : float
    index : int
        Vertex (or segment start) index achieving the minimum; ties go to the
        lowest index.
    """
    if not isinstance(line, Polyline3):
        line = Polyline3(line)
    V = line.vertices
    if segments and len(V) > 1:
        dist = _segment_ray_distances(V[:-1], V[1:], ray)
    else:
        dist = distances_to_ray(V, ray)
    i = int(np.argmin(dist))
    return float(dist[i]), i


def fit_plane_lstsq(points, up=None):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    if up is not None and normal @ np.asarray(up, dtype=float) < 0:
        normal = -normal
    return Plane(centroid, normal)


def fit_plane_ransac(points, iterations=500, inlier_threshold=0.10, seed=0,
                     up=(0.0, 0.0, 1.0)):
    """Robust plane fit: best-consensus triple, then least squares on inliers.

    Candidate triples are drawn from ``numpy.random.default_rng(seed)`` so the
    result is reproducible bit for bit.  The returned normal is flipped to
    point along ``up`` (pass ``up=None`` to keep the raw SVD sign).
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(P)
    if n < 3:
        raise DegenerateInput("need at least three points")
    rng = np.random.default_rng(seed)
    if n == 3:
        triples = np.array([[0, 1, 2]])
    else:
        triples = np.array([rng.choice(n, size=3, replace=False)
                            for _ in range(iterations)])
    a, b, c = P[triples[:, 0]], P[triples[:, 1]], P[triples[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    scale = np.maximum(np.linalg.norm(b - a, axis=1) * np.linalg.norm(c - a, axis=1), 1e-300)
    valid = norms > 1e-9 * scale
    if not np.any(valid):
        # fall back to an exhaustive check before declaring collinearity
        centered = P - P.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise DegenerateInput("all candidate triples are collinear")
        return fit_plane_lstsq(P, up)
    normals = normals[valid] / norms[valid, None]
    offsets = np.einsum("ij,ij->i", normals, a[valid])
    counts = np.empty(len(normals), dtype=np.int64)
    chunk = max(1, 2_000_000 // n)
    for s in range(0, len(normals), chunk):
        res = np.abs(P @ normals[s:s + chunk].T - offsets[s:s + chunk])
        counts[s:s + chunk] = np.count_nonzero(res <= inlier_threshold, axis=0)
    best = int(np.argmax(counts))
    inliers = np.abs(P @ normals[best] - offsets[best]) <= inlier_threshold
    plane = fit_plane_lstsq(P[inliers], up)
    if up is None and plane.normal @ normals[best] < 0:
        plane = Plane(plane.point, -plane.normal)
    return plane


def plane_inliers(plane, points, threshold):
    return np.abs(plane.signed_distance(points)) <= threshold
