"""Point-cloud to camera registration.

Three pieces: a Z-buffered point-splat renderer that turns the cloud into a
grayscale view, a linear PnP initialiser, and a Levenberg-Marquardt
refinement of the pose on SE(3) using left-multiplicative updates.
"""
from dataclasses import dataclass

import numpy as np

from .cloud import require_points, zbuffer_winners
from .config import (
    LM_DAMPING_FACTOR,
    LM_INITIAL_DAMPING,
    SPLAT_RADIUS_PX,
)
from .errors import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    NonFiniteCost,
)
from .geometry import RigidTransform, project_points
from .se3 import hat, se3_exp


@dataclass(frozen=True)
class Correspondence2D3D:
    pixel: tuple
    world_point: tuple
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("correspondence weight must be positive")


@dataclass(frozen=True, eq=False)
class RenderedView:
    image: np.ndarray
    depth: np.ndarray
    pose: RigidTransform
    camera: object


def as_arrays(correspondences):
    """Normalise correspondences to ``(pixels, world, weights)`` arrays.

    Accepts a sequence of :class:`Correspondence2D3D`, an ``(n, 5)`` or
    ``(n, 6)`` array of ``u, v, x, y, z[, weight]`` rows, or a tuple
    ``(pixels, world[, weights])``.
    """
    if isinstance(correspondences, tuple) and len(correspondences) in (2, 3):
        pixels = np.asarray(correspondences[0], dtype=float).reshape(-1, 2)
        world = np.asarray(correspondences[1], dtype=float).reshape(-1, 3)
        if len(correspondences) == 3 and correspondences[2] is not None:
            weights = np.asarray(correspondences[2], dtype=float).reshape(-1)
        else:
            weights = np.ones(len(pixels))
    elif len(correspondences) and isinstance(correspondences[0], Correspondence2D3D):
        pixels = np.array([c.pixel for c in correspondences], dtype=float)
        world = np.array([c.world_point for c in correspondences], dtype=float)
        weights = np.array([c.weight for c in correspondences], dtype=float)
    else:
        rows = np.asarray(correspondences, dtype=float)
        if rows.size == 0:
            rows = rows.reshape(0, 6)
        if rows.ndim != 2 or rows.shape[1] not in (5, 6):
            raise ValueError("correspondence rows must be (u, v, x, y, z[, weight])")
        pixels, world = rows[:, :2], rows[:, 2:5]
        weights = rows[:, 5] if rows.shape[1] == 6 else np.ones(len(rows))
    if not (len(pixels) == len(world) == len(weights)):
        raise ValueError("pixel, world and weight arrays differ in length")
    if np.any(weights <= 0):
        raise ValueError("correspondence weights must be positive")
    return pixels, world, weights


def _disc_offsets(radius):
    r = int(np.floor(radius))
    du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="xy")
    keep = du ** 2 + dv ** 2 <= radius ** 2
    return du[keep], dv[keep]


def render_pointcloud(cloud, camera, pose, splat_radius=SPLAT_RADIUS_PX):
    """Render a grayscale view of the cloud with a per-pixel Z-buffer.

    Each point covers a disc of ``splat_radius`` pixels around its rounded
    projection; the nearest contribution wins each pixel.  Gray values come
    from :meth:`PointCloud.grayscale`.  Empty pixels have depth ``inf`` and
    gray value 0.
    """
    require_points(cloud)
    if splat_radius < 0:
        raise ValueError("splat_radius must be non-negative")
    W, H = camera.width, camera.height
    uv, z = project_points(camera, pose, cloud.xyz)
    front = np.flatnonzero(z > 0)
    col = np.floor(uv[front, 0] + 0.5).astype(np.int64)
    row = np.floor(uv[front, 1] + 0.5).astype(np.int64)
    du, dv = _disc_offsets(splat_radius)
    cols = (col[:, None] + du).ravel()
    rows = (row[:, None] + dv).ravel()
    src = np.repeat(front, len(du))
    inside = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    pix = rows[inside] * W + cols[inside]
    src = src[inside]
    image = np.zeros(H * W)
    depth = np.full(H * W, np.inf)
    if len(pix):
        cells, win = zbuffer_winners(pix, z[src])
        depth[cells] = z[src[win]]
        image[cells] = cloud.grayscale()[src[win]]
    return RenderedView(image.reshape(H, W), depth.reshape(H, W), pose, camera)


def _weighted_residuals(pose, camera, pixels, world, sqrt_w):
    uv, z = project_points(camera, pose, world)
    r = (uv - pixels) * sqrt_w[:, None]
    return r.ravel(), z


def reprojection_cost(pose, camera, correspondences):
    pixels, world, weights = as_arrays(correspondences)
    r, z = _weighted_residuals(pose, camera, pixels, world, np.sqrt(weights))
    if np.any(z <= 0):
        return np.inf
    return float(r @ r)


def reprojection_jacobian(pose, camera, world, weights=None):
    """Jacobian of the weighted residuals w.r.t. a left perturbation ``exp(xi)``.

    Returns an array of shape ``(2n, 6)``; columns follow ``(rho, phi)``.
    """
    world = np.asarray(world, dtype=float).reshape(-1, 3)
    P = pose.apply(world)
    X, Y, Z = P[:, 0], P[:, 1], P[:, 2]
    iz = 1.0 / Z
    n = len(P)
    J = np.zeros((n, 2, 6))
    # d(pixel)/dP
    J[:, 0, 0] = camera.fx * iz
    J[:, 0, 2] = -camera.fx * X * iz ** 2
    J[:, 1, 1] = camera.fy * iz
    J[:, 1, 2] = -camera.fy * Y * iz ** 2
    dproj = J[:, :, :3].copy()
    # dP/dphi = -[P]x
    for i in range(n):
        J[i, :, 3:] = -dproj[i] @ hat(P[i])
    if weights is not None:
        J *= np.sqrt(np.asarray(weights, dtype=float))[:, None, None]
    return J.reshape(2 * n, 6)


def _orthonormalize(M):
    u, s, vt = np.linalg.svd(M)
    R = u @ vt
    if np.linalg.det(R) < 0:
        R = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return R, s


def estimate_pose_pnp(correspondences, camera, min_points=6):
    """Linear pose estimate from 2D-3D pairs (normalised DLT).

    Solves the 12-parameter projective system on calibrated image
    coordinates, projects the left 3x3 block onto SO(3), then re-solves the
    translation with the rotation held fixed.
    """
    pixels, world, weights = as_arrays(correspondences)
    n = len(pixels)
    if n < min_points:
        raise InsufficientCorrespondences(f"need at least {min_points} correspondences, got {n}")

    xn = (np.column_stack([pixels, np.ones(n)]) @ camera.K_inv.T)[:, :2]
    # condition world points
    mu = world.mean(axis=0)
    spread = np.sqrt(np.mean(np.sum((world - mu) ** 2, axis=1)))
    if not spread > 0:
        raise DegenerateConfiguration("world points coincide")
    s = np.sqrt(3.0) / spread
    Xw = (world - mu) * s
    sv_world = np.linalg.svd(Xw, compute_uv=False)
    if sv_world[2] < 1e-6 * sv_world[0]:
        raise DegenerateConfiguration("world points are coplanar or collinear")

    sw = np.sqrt(weights)
    Xh = np.column_stack([Xw, np.ones(n)])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, [1]] * Xh
    A *= np.repeat(sw, 2)[:, None]
    _, sv, vt = np.linalg.svd(A)
    P = vt[-1].reshape(3, 4)
    # undo world normalisation: P_world = P_norm @ [[s I, -s mu], [0, 1]]
    M = P[:, :3] * s
    p4 = P[:, 3] - M @ mu
    R, sig = _orthonormalize(M)
    scale = np.mean(sig)
    # pick the sign that puts points in front of the camera
    if np.median((world @ (M / scale).T + p4 / scale)[:, 2]) < 0:
        M, p4 = -M, -p4
        R, sig = _orthonormalize(M)
    t = p4 / scale

    # translation given R: x_i * (r3.X + t3) = r1.X + t1 (and likewise for y)
    RX = world @ R.T
    B = np.zeros((2 * n, 3))
    b = np.zeros(2 * n)
    B[0::2, 0] = 1.0
    B[0::2, 2] = -xn[:, 0]
    b[0::2] = xn[:, 0] * RX[:, 2] - RX[:, 0]
    B[1::2, 1] = 1.0
    B[1::2, 2] = -xn[:, 1]
    b[1::2] = xn[:, 1] * RX[:, 2] - RX[:, 1]
    w2 = np.repeat(sw, 2)
    t_fit, *_ = np.linalg.lstsq(B * w2[:, None], b * w2, rcond=None)
    if np.all(np.isfinite(t_fit)):
        t = t_fit
    pose = RigidTransform(R, t)
    if not np.all(pose.apply(world)[:, 2] > 0):
        raise DegenerateConfiguration("linear solution places points behind the camera")
    return pose


def mean_reprojection_error(pose, camera, correspondences):
    pixels, world, _ = as_arrays(correspondences)
    uv, _ = project_points(camera, pose, world)
    return float(np.mean(np.linalg.norm(uv - pixels, axis=1)))


def rms_reprojection_error(pose, camera, correspondences):
    pixels, world, _ = as_arrays(correspondences)
    uv, _ = project_points(camera, pose, world)
    return float(np.sqrt(np.mean(np.sum((uv - pixels) ** 2, axis=1))))


def refine_pose_se3(initial, correspondences, camera, max_iters=50,
                    convergence_tol=1e-10, min_points=4):
    """Levenberg-Marquardt refinement of the extrinsics on SE(3).

    Minimises ``sum_i w_i * |project(T X_i) - u_i|^2`` with updates
    ``T <- exp(xi) T``.  Rejected steps are rolled back and the damping grows
    tenfold; accepted steps shrink it tenfold.

    Returns
    -------
    pose : RigidTransform
    cost : float
        Final weighted sum of squared pixel residuals.
    """
    pixels, world, weights = as_arrays(correspondences)
    if len(pixels) < min_points:
        raise InsufficientCorrespondences(
            f"need at least {min_points} correspondences, got {len(pixels)}")
    sqrt_w = np.sqrt(weights)
    pose = initial
    r, z = _weighted_residuals(pose, camera, pixels, world, sqrt_w)
    if np.any(z <= 0) or not np.all(np.isfinite(r)):
        raise NonFiniteCost("initial pose yields non-finite residuals")
    cost = float(r @ r)
    lam = LM_INITIAL_DAMPING
    for _ in range(max_iters):
        J = reprojection_jacobian(pose, camera, world, weights)
        H = J.T @ J
        g = J.T @ r
        while True:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(A, g, rcond=None)[0]
            candidate = se3_exp(step) @ pose
            r_new, z_new = _weighted_residuals(candidate, camera, pixels, world, sqrt_w)
            ok = np.all(z_new > 0) and np.all(np.isfinite(r_new))
            cost_new = float(r_new @ r_new) if ok else np.inf
            if cost_new <= cost:
                pose, r, cost = candidate, r_new, cost_new
                lam = max(lam / LM_DAMPING_FACTOR, 1e-12)
                break
            lam *= LM_DAMPING_FACTOR
            if lam > 1e12:
                return pose, cost
        if np.linalg.norm(step) < convergence_tol:
            break
    if not np.isfinite(cost):
        raise NonFiniteCost("refinement diverged")
    return pose, cost
