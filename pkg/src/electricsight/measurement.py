"""Clearance measurement from a monocular detection and a prior point cloud.

Steps per hazard:

1. project the environmental cloud into a per-pixel correspondence table;
2. cast the apex ray from the optical center;
3. look up the two ground keypoints in the table and build the vertical
   constraint plane through them, using the local ground normal;
4. move the ray origin to where the ray crosses that plane;
5. take the minimum distance between the power-line points and the
   re-anchored ray and compare it with the alarm threshold.
"""
from dataclasses import dataclass, field

import numpy as np

from . import config
from .cloud import require_points, zbuffer_winners
from .errors import (
    DegenerateGroundPoints,
    ElectricSightError,
    IntersectionBehind,
    NoCorrespondence,
    ParallelRay,
    ParallelToNormal,
)
from .geometry import (
    Plane,
    Polyline3,
    Ray,
    backproject_ray,
    fit_plane_ransac,
    intersect_ray_plane,
    min_distance_polyline_to_ray,
    project_points,
)


@dataclass(frozen=True, eq=False)
class CorrespondenceTable:
    """Per-pixel nearest cloud point.

    ``index[row, col]`` is the position of the winning point in ``points`` or
    -1 for an empty cell; ``depth`` holds its camera depth (``inf`` when
    empty).
    """

    index: np.ndarray
    depth: np.ndarray
    points: np.ndarray
    camera: object
    extrinsics: object

    @property
    def shape(self):
        return self.index.shape

    def occupied(self):
        return self.index >= 0

    def world_point(self, row, col):
        i = self.index[row, col]
        if i < 0:
            return None
        return self.points[i]


def build_correspondence_table(cloud, camera, extrinsics):
    """Z-buffer the cloud into pixel cells (nearest point per cell)."""
    require_points(cloud)
    W, H = camera.width, camera.height
    xyz = cloud.xyz
    uv, z = project_points(camera, extrinsics, xyz)
    col = np.floor(uv[:, 0] + 0.5)
    row = np.floor(uv[:, 1] + 0.5)
    keep = np.flatnonzero((z > 0) & (col >= 0) & (col < W) & (row >= 0) & (row < H))
    pix = row[keep].astype(np.int64) * W + col[keep].astype(np.int64)
    index = np.full(H * W, -1, dtype=np.int64)
    depth = np.full(H * W, np.inf)
    if len(keep):
        cells, win = zbuffer_winners(pix, z[keep])
        index[cells] = keep[win]
        depth[cells] = z[keep[win]]
    index = index.reshape(H, W)
    depth = depth.reshape(H, W)
    index.setflags(write=False)
    depth.setflags(write=False)
    return CorrespondenceTable(index, depth, xyz, camera, extrinsics)


def lookup_3d(table, pixel, search_radius=config.DEFAULT_SEARCH_RADIUS_PX):
    """3D point for ``pixel`` from the table.

    Returns ``(point, hole_filled)``.  The cell at the rounded pixel is used
    when occupied; otherwise the nearest occupied cell within
    ``search_radius`` pixels (ties: smaller row, then smaller column) and
    ``hole_filled`` is True.
    """
    H, W = table.shape
    u, v = pixel
    col = int(np.floor(u + 0.5))
    row = int(np.floor(v + 0.5))
    if not (0 <= col < W and 0 <= row < H):
        raise NoCorrespondence(f"pixel ({u:.2f}, {v:.2f}) lies outside the image",
                               stage="lookup")
    if table.index[row, col] >= 0:
        return table.points[table.index[row, col]].copy(), False
    r = int(np.floor(search_radius))
    r0, r1 = max(row - r, 0), min(row + r + 1, H)
    c0, c1 = max(col - r, 0), min(col + r + 1, W)
    window = table.index[r0:r1, c0:c1]
    rr, cc = np.nonzero(window >= 0)
    if len(rr):
        rr = rr + r0
        cc = cc + c0
        d2 = (rr - row) ** 2 + (cc - col) ** 2
        ok = d2 <= search_radius ** 2
        if np.any(ok):
            rr, cc, d2 = rr[ok], cc[ok], d2[ok]
            best = np.lexsort((cc, rr, d2))[0]
            return table.points[table.index[rr[best], cc[best]]].copy(), True
    raise NoCorrespondence(
        f"no occupied cell within {search_radius} px of ({u:.2f}, {v:.2f})", stage="lookup")


def build_constraint_plane(A, B, ground_normal,
                           min_separation=config.MIN_GROUND_SEPARATION_M,
                           max_parallel_deg=config.MAX_PARALLEL_ANGLE_DEG):
    """Plane through ``A`` and ``B`` that contains the ground normal.

    Its normal is ``(B - A) x n_G``, so the plane stands upright on the
    ground along the footprint line ``AB``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = np.asarray(ground_normal, dtype=float)
    n = n / np.linalg.norm(n)
    ab = B - A
    length = np.linalg.norm(ab)
    if length <= min_separation:
        raise DegenerateGroundPoints(
            f"ground points are {length:.3g} m apart (need > {min_separation})",
            stage="constraint_plane")
    cross = np.cross(ab, n)
    sin_angle = np.linalg.norm(cross) / length
    if sin_angle <= np.sin(np.radians(max_parallel_deg)):
        raise ParallelToNormal("footprint line is parallel to the ground normal",
                               stage="constraint_plane")
    return Plane(A, cross)


def plane_predicate(A, B, ground_normal, X):
    """Residual of ``((B - A) x n_G) . (X - A)``."""
    A = np.asarray(A, dtype=float)
    return float(np.cross(np.asarray(B, dtype=float) - A, ground_normal)
                 @ (np.asarray(X, dtype=float) - A))


def constrain_ray(ray, plane):
    """Re-anchor ``ray`` where it crosses ``plane``.

    Returns ``(constrained_ray, S_d)``.  Raises :class:`ParallelRay` or
    :class:`IntersectionBehind` for the caller to fall back on.
    """
    s_d = intersect_ray_plane(ray, plane)
    return Ray(s_d, ray.direction), s_d


def estimate_ground_plane(points, A, B, radius=config.GROUND_RADIUS_M,
                          band=config.GROUND_BAND_M,
                          iterations=config.RANSAC_ITERATIONS,
                          inlier_threshold=config.RANSAC_INLIER_THRESHOLD_M,
                          max_points=config.GROUND_MAX_POINTS, seed=0,
                          up=(0.0, 0.0, 1.0)):
    """RANSAC ground plane around the hazard footprint.

    Uses cloud points within ``radius`` (horizontal) of the midpoint of
    ``A`` and ``B``, keeps those within ``band`` meters above the local 5th
    percentile height, subsamples to ``max_points`` and fits a plane.
    """
    P = np.asarray(points, dtype=float)
    up = np.asarray(up, dtype=float)
    center = 0.5 * (np.asarray(A, dtype=float) + np.asarray(B, dtype=float))
    rel = P - center
    h = rel @ up
    horiz = rel - np.outer(h, up)
    local = np.flatnonzero(np.einsum("ij,ij->i", horiz, horiz) <= radius ** 2)
    if len(local) < 3:
        raise NoCorrespondence("too few cloud points around the footprint", stage="ground_plane")
    if band is not None:
        hl = h[local]
        local = local[hl <= np.percentile(hl, 5) + band]
    rng = np.random.default_rng(seed)
    if len(local) > max_points:
        local = np.sort(rng.choice(local, size=max_points, replace=False))
    return fit_plane_ransac(P[local], iterations=iterations,
                            inlier_threshold=inlier_threshold, seed=seed, up=up)


@dataclass
class MeasurementReport:
    hazard_id: str
    cls: str
    d_min: float
    d_thres: float
    alarm: bool
    method: str = "ours"
    argmin_vertex: int = None
    argmin_line: int = 0
    s_d: np.ndarray = None
    constraint_applied: bool = False
    low_vote_apex: bool = False
    table_hole_fill: bool = False
    parallel_plane_fallback: bool = False
    apex_pixel: np.ndarray = None
    ground_points: tuple = None
    ground_normal: np.ndarray = None
    stage_errors: list = field(default_factory=list)

    def __post_init__(self):
        if self.d_min is not None and self.d_min < 0:
            raise ValueError("d_min must be non-negative")

    @property
    def flags(self):
        return {"low_vote_apex": self.low_vote_apex,
                "table_hole_fill": self.table_hole_fill,
                "parallel_plane_fallback": self.parallel_plane_fallback}

    def to_dict(self):
        def vec(a):
            return None if a is None else [float(x) for x in np.ravel(a)]

        return {
            "hazard_id": self.hazard_id,
            "class": self.cls,
            "method": self.method,
            "d_min": None if self.d_min is None else float(self.d_min),
            "d_thres": float(self.d_thres),
            "alarm": bool(self.alarm),
            "argmin_line": int(self.argmin_line),
            "argmin_vertex": None if self.argmin_vertex is None else int(self.argmin_vertex),
            "s_d": vec(self.s_d),
            "constraint_applied": bool(self.constraint_applied),
            "flags": {k: bool(v) for k, v in self.flags.items()},
            "apex_pixel": vec(self.apex_pixel),
            "ground_points": None if self.ground_points is None
            else [vec(p) for p in self.ground_points],
            "ground_normal": vec(self.ground_normal),
            "stage_errors": list(self.stage_errors),
        }


def as_polylines(lines):
    if isinstance(lines, Polyline3):
        return [lines]
    lines = list(lines)
    if lines and not isinstance(lines[0], Polyline3) and np.ndim(lines[0]) == 1:
        return [Polyline3(lines)]
    return [ln if isinstance(ln, Polyline3) else Polyline3(ln) for ln in lines]


def min_distance_lines_to_ray(lines, ray, segments=False):
    """``(d_min, line_index, vertex_index)`` over several polylines."""
    best = (np.inf, 0, 0)
    for k, line in enumerate(lines):
        d, i = min_distance_polyline_to_ray(line, ray, segments=segments)
        if d < best[0]:
            best = (d, k, i)
    return best


def _stage_error(stage, exc):
    return {"stage": stage, "error": type(exc).__name__, "message": str(exc)}


def measure_hazard(table, ground_plane, keypoints, camera, extrinsics, power_lines,
                   d_thres=config.DEFAULT_THRESHOLD_M, hazard_id="", cls="",
                   use_depth_constraint=True,
                   search_radius=config.DEFAULT_SEARCH_RADIUS_PX,
                   segments=False, ground_kwargs=None):
    """Minimum clearance between one hazard and the power lines.

    ``ground_plane`` may be ``None``, in which case it is fitted around the
    footprint from ``table.points`` (``ground_kwargs`` go to
    :func:`estimate_ground_plane`).  Stage failures in lookup, ground fitting
    or plane construction fall back to the unconstrained apex ray; they are
    recorded in ``stage_errors`` and the corresponding flags.
    """
    lines = as_polylines(power_lines)
    ray = backproject_ray(camera, extrinsics, keypoints.apex)
    report = MeasurementReport(hazard_id=hazard_id, cls=cls, d_min=None, d_thres=d_thres,
                               alarm=False, apex_pixel=np.asarray(keypoints.apex, dtype=float),
                               low_vote_apex=bool(keypoints.low_confidence))
    measured = ray
    if use_depth_constraint:
        try:
            A, fill_a = lookup_3d(table, keypoints.ground_left, search_radius)
            B, fill_b = lookup_3d(table, keypoints.ground_right, search_radius)
            report.table_hole_fill = fill_a or fill_b
            report.ground_points = (A, B)
            plane = ground_plane
            if plane is None:
                plane = estimate_ground_plane(table.points, A, B, **(ground_kwargs or {}))
            normal = plane.normal if isinstance(plane, Plane) else np.asarray(plane, dtype=float)
            report.ground_normal = np.asarray(normal, dtype=float)
            D = build_constraint_plane(A, B, normal)
            try:
                measured, s_d = constrain_ray(ray, D)
                report.s_d = s_d
                report.constraint_applied = True
            except (ParallelRay, IntersectionBehind) as exc:
                report.parallel_plane_fallback = True
                report.stage_errors.append(_stage_error("constrain_ray", exc))
        except (NoCorrespondence, DegenerateGroundPoints, ParallelToNormal) as exc:
            report.parallel_plane_fallback = isinstance(exc, ParallelToNormal)
            report.stage_errors.append(_stage_error(exc.stage or "constraint", exc))
        except ElectricSightError as exc:
            report.stage_errors.append(_stage_error(exc.stage or "ground_plane", exc))
    d, k, i = min_distance_lines_to_ray(lines, measured, segments=segments)
    report.d_min = d
    report.argmin_line = k
    report.argmin_vertex = i
    report.alarm = bool(d < d_thres)
    return report
