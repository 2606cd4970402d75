"""Synthetic transmission-corridor scenes with exact ground truth.

A corridor is a (possibly sloped) ground plane sampled at survey density,
one catenary conductor between two towers, and a tower-mounted camera
looking down the corridor.  Hazards are unions of boxes and cylinders.  The
ground-truth clearance is the brute-force minimum over dense surface and
line samples; every kind of noise is injected only after it is computed.

World frame: x along the corridor, y to the left, z up.  The camera tower
stands at x = 0.
"""
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import ConvexHull
from skimage.draw import polygon as fill_polygon

from .cloud import PointCloud
from .errors import EmptySamples, InvalidSpec
from .geometry import CameraModel, Polyline3, RigidTransform, project_points
from .keypoints import BoundingBox

HAZARD_KINDS = ("crane_like", "lift_like")
ORACLE_PITCH = 0.05

BACKGROUND_GRAY = 0.2
CHASSIS_GRAY = 0.35
BOOM_GRAY = 0.85
LIFT_GRAY = 0.8


@dataclass(frozen=True)
class CorridorSpec:
    length: float = 200.0
    width: float = 36.0
    x_start: float = 5.0
    slope_deg: float = 0.0
    line_height: float = 18.0
    line_lateral: float = 0.0
    line_sag: float = 4.0
    line_pitch: float = 0.2
    camera_lateral: float = -4.0
    camera_height: float = 15.0
    camera_yaw_deg: float = 0.0
    camera_pitch_deg: float = 12.0
    focal_px: float = 800.0
    image_width: int = 1920
    image_height: int = 1080
    density: float = 400.0
    pixel_noise: float = 2.0
    point_noise: float = 0.05
    image_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not self.density > 0:
            raise InvalidSpec("density must be positive")
        if not (self.length > self.x_start and self.width > 0):
            raise InvalidSpec("corridor extent must be positive")
        if not -30.0 < self.slope_deg < 30.0:
            raise InvalidSpec("slope must be within +-30 degrees")
        if min(self.pixel_noise, self.point_noise, self.image_noise) < 0:
            raise InvalidSpec("noise levels must be non-negative")
        if not (0 < self.line_sag < self.line_height):
            raise InvalidSpec("line sag must be positive and below the attachment height")

    def noiseless(self):
        return replace(self, pixel_noise=0.0, point_noise=0.0, image_noise=0.0)

    def ground_z(self, x):
        return np.asarray(x, dtype=float) * np.tan(np.radians(self.slope_deg))

    @property
    def camera(self):
        return CameraModel(self.focal_px, self.focal_px, self.image_width / 2.0,
                           self.image_height / 2.0, self.image_width, self.image_height)

    @property
    def camera_center(self):
        return np.array([0.0, self.camera_lateral, float(self.ground_z(0.0)) + self.camera_height])

    @property
    def extrinsics(self):
        yaw, pitch = np.radians(self.camera_yaw_deg), np.radians(self.camera_pitch_deg)
        forward = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw),
                            -np.sin(pitch)])
        return RigidTransform.from_camera_pose(self.camera_center, forward)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class HazardSpec:
    kind: str
    x: float
    y: float
    yaw_deg: float = 0.0
    boom_length: float = 0.0
    boom_azimuth_deg: float = 0.0
    boom_elevation_deg: float = 45.0
    platform_height: float = 10.0
    hazard_id: str = "h0"
    cls: str = None
    chassis_size: tuple = (7.0, 2.5, 2.5)
    boom_radius: float = 0.3
    mast_radius: float = 0.15
    platform_size: float = 0.3

    def __post_init__(self):
        if self.kind not in HAZARD_KINDS:
            raise InvalidSpec(f"unknown hazard kind {self.kind!r}")
        if self.boom_length < 0:
            raise InvalidSpec("boom length must be non-negative")
        if not 0.0 <= self.boom_elevation_deg <= 90.0:
            raise InvalidSpec("boom elevation must be within [0, 90] degrees")
        if self.kind == "lift_like" and not self.platform_height > self.platform_size:
            raise InvalidSpec("platform must sit above the ground")
        if self.cls is None:
            object.__setattr__(self, "cls", "crane" if self.kind == "crane_like" else "aerial_lift")

    def to_dict(self):
        d = dict(self.__dict__)
        d["chassis_size"] = list(self.chassis_size)
        return d


# primitives ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Box3:
    center: np.ndarray
    axes: np.ndarray  # rows are unit axes
    half: np.ndarray
    gray: float
    part: str

    def corners(self):
        s = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float)
        return self.center + (s * self.half) @ self.axes

    def surface_samples(self, pitch):
        pts = []
        for a in range(3):
            b, c = [i for i in range(3) if i != a]
            nb = int(np.ceil(2 * self.half[b] / pitch)) + 1
            nc = int(np.ceil(2 * self.half[c] / pitch)) + 1
            gb = np.linspace(-self.half[b], self.half[b], nb)
            gc = np.linspace(-self.half[c], self.half[c], nc)
            B, C = np.meshgrid(gb, gc, indexing="ij")
            for sign in (-1.0, 1.0):
                local = np.zeros((B.size, 3))
                local[:, a] = sign * self.half[a]
                local[:, b] = B.ravel()
                local[:, c] = C.ravel()
                pts.append(self.center + local @ self.axes)
        return np.vstack(pts)

    def silhouette_points(self):
        return self.corners()


@dataclass(frozen=True, eq=False)
class Cylinder3:
    p0: np.ndarray
    p1: np.ndarray
    radius: float
    gray: float
    part: str

    def _frame(self):
        axis = self.p1 - self.p0
        length = np.linalg.norm(axis)
        a = axis / length
        ref = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(a, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(a, e1)
        return a, e1, e2, length

    def _ring(self, center, n, radius=None):
        _, e1, e2, _ = self._frame()
        r = self.radius if radius is None else radius
        phi = np.arange(n) * 2 * np.pi / n
        return center + r * (np.outer(np.cos(phi), e1) + np.outer(np.sin(phi), e2))

    def surface_samples(self, pitch):
        a, _, _, length = self._frame()
        n_circ = max(8, int(np.ceil(2 * np.pi * self.radius / pitch)))
        n_ax = int(np.ceil(length / pitch)) + 1
        pts = [self._ring(self.p0 + s * a, n_circ) for s in np.linspace(0, length, n_ax)]
        for end in (self.p0, self.p1):
            pts.append(end[None, :])
            n_r = int(np.ceil(self.radius / pitch))
            for r in np.linspace(0, self.radius, n_r + 1)[1:-1]:
                pts.append(self._ring(end, max(8, int(np.ceil(2 * np.pi * r / pitch))), r))
        return np.vstack(pts)

    def silhouette_points(self, n=360):
        return np.vstack([self._ring(self.p0, n), self._ring(self.p1, n)])


def _rotz(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def boom_direction(azimuth_deg, elevation_deg):
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def hazard_primitives(spec, hazard):
    """Primitives of a hazard standing on the corridor ground."""
    base = np.array([hazard.x, hazard.y, float(spec.ground_z(hazard.x))])
    if hazard.kind == "crane_like":
        L, W, H = hazard.chassis_size
        axes = _rotz(hazard.yaw_deg)
        chassis = Box3(base + np.array([0.0, 0.0, H / 2]), axes, np.array([L, W, H]) / 2,
                       CHASSIS_GRAY, "chassis")
        parts = [chassis]
        if hazard.boom_length > 0:
            pivot = base + np.array([0.0, 0.0, H])
            tip = pivot + hazard.boom_length * boom_direction(hazard.boom_azimuth_deg,
                                                              hazard.boom_elevation_deg)
            parts.append(Cylinder3(pivot, tip, hazard.boom_radius, BOOM_GRAY, "boom"))
        return parts
    s = hazard.platform_size
    top = base[2] + hazard.platform_height
    mast = Cylinder3(base, np.array([base[0], base[1], top - s]), hazard.mast_radius,
                     LIFT_GRAY, "mast")
    platform = Box3(np.array([base[0], base[1], top - s / 2]), _rotz(hazard.yaw_deg),
                    np.array([s, s, s]) / 2, LIFT_GRAY, "platform")
    return [mast, platform]


def hazard_apex(spec, hazard):
    base = np.array([hazard.x, hazard.y, float(spec.ground_z(hazard.x))])
    if hazard.kind == "crane_like":
        pivot = base + np.array([0.0, 0.0, hazard.chassis_size[2]])
        return pivot + hazard.boom_length * boom_direction(hazard.boom_azimuth_deg,
                                                           hazard.boom_elevation_deg)
    return base + np.array([0.0, 0.0, hazard.platform_height])


def hazard_surface_samples(spec, hazard, pitch=ORACLE_PITCH):
    return np.vstack([p.surface_samples(pitch) for p in hazard_primitives(spec, hazard)])


# power line ---------------------------------------------------------------

def catenary_parameter(span, sag):
    """Catenary constant ``a`` giving ``sag`` at mid-span of a level span."""
    return brentq(lambda a: a * (np.cosh(span / (2 * a)) - 1.0) - sag, 1e-3 * span, 1e6 * span)


def line_curve(spec):
    """Callable ``x -> z`` for the conductor between the two towers."""
    L = spec.length
    h0 = float(spec.ground_z(0.0)) + spec.line_height
    h1 = float(spec.ground_z(L)) + spec.line_height
    a = catenary_parameter(L, spec.line_sag)
    if abs(h1 - h0) < 1e-12:
        xm = L / 2
    else:
        xm = brentq(lambda m: a * (np.cosh((L - m) / a) - np.cosh(-m / a)) - (h1 - h0),
                    -50 * L, 50 * L)
    z_low = h0 - a * (np.cosh(-xm / a) - 1.0)

    def z(x):
        return z_low + a * (np.cosh((np.asarray(x, dtype=float) - xm) / a) - 1.0)

    return z


def line_samples(spec, pitch):
    z = line_curve(spec)
    n = int(np.ceil(spec.length / pitch)) + 1
    x = np.linspace(0.0, spec.length, n)
    return np.column_stack([x, np.full(n, spec.line_lateral), z(x)])


# environment --------------------------------------------------------------

def _environment_key(spec):
    return replace(spec, pixel_noise=0.0, image_noise=0.0)


@lru_cache(maxsize=2)
def _environment(key):
    spec = key
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    step = 1.0 / np.sqrt(spec.density)
    nx = int(round((spec.length - spec.x_start) / step))
    ny = int(round(spec.width / step))
    gx = spec.x_start + (np.arange(nx) + rng.random(nx * ny).reshape(ny, nx)) * step
    gy = -spec.width / 2 + (np.arange(ny)[:, None] + rng.random((ny, nx))) * step
    x = gx.ravel()
    y = gy.ravel()
    z = spec.ground_z(x)
    xyz = np.column_stack([x, y, z])
    intensity = 0.25 + 0.2 * rng.random(len(x))
    if spec.point_noise > 0:
        xyz += rng.normal(0.0, spec.point_noise, xyz.shape)
    line = line_samples(spec, spec.line_pitch)
    if spec.point_noise > 0:
        line = line + rng.normal(0.0, spec.point_noise, line.shape)
    return PointCloud(xyz, intensity=intensity), Polyline3(line)


def generate_environment(spec):
    """Ground cloud and surveyed line points for a corridor (cached)."""
    return _environment(_environment_key(spec))


# ground truth -------------------------------------------------------------

def _aabb_distance(points, lo, hi):
    gap = np.maximum(np.maximum(lo - points, points - hi), 0.0)
    return np.linalg.norm(gap, axis=1)


def _pairwise_min(A, B, chunk=2_000_000):
    best = (np.inf, 0, 0)
    step = max(1, chunk // max(len(B), 1))
    for s in range(0, len(A), step):
        a = A[s:s + step]
        d2 = (np.einsum("ij,ij->i", a, a)[:, None] - 2.0 * a @ B.T
              + np.einsum("ij,ij->i", B, B)[None, :])
        k = int(np.argmin(d2))
        i, j = divmod(k, len(B))
        # recompute exactly to avoid cancellation in the expanded form
        dij = float(np.linalg.norm(a[i] - B[j]))
        if dij < best[0]:
            best = (dij, s + i, j)
    return best


def oracle_shortest_distance(hazard_samples, line_samples_):
    """Exhaustive minimum distance between two sample sets.

    Pairs that provably cannot beat an upper bound (via bounding boxes) are
    skipped; every remaining pair is evaluated, so the result is the exact
    pairwise minimum.  Returns ``(distance, (hazard_index, line_index))``.
    """
    H = np.asarray(hazard_samples, dtype=float).reshape(-1, 3)
    L = np.asarray(line_samples_, dtype=float).reshape(-1, 3)
    if len(H) == 0 or len(L) == 0:
        raise EmptySamples("both sample sets must be non-empty")
    d_line = _aabb_distance(L, H.min(axis=0), H.max(axis=0))
    probe = np.argsort(d_line, kind="stable")[:32]
    ub = _pairwise_min(H, L[probe])[0]
    # small slack keeps pruning safe against rounding in the bound
    slack = 1e-9 * (1.0 + ub)
    lc = np.flatnonzero(d_line <= ub + slack)
    Lc = L[lc]
    d_h = _aabb_distance(H, Lc.min(axis=0), Lc.max(axis=0))
    hc = np.flatnonzero(d_h <= ub + slack)
    d, i, j = _pairwise_min(H[hc], Lc)
    if d > ub:
        # the probe pair itself is optimal
        d, i_p, j_p = _pairwise_min(H, L[probe])
        return d, (int(i_p), int(probe[j_p]))
    return d, (int(hc[i]), int(lc[j]))


@dataclass
class Detection:
    hazard_id: str
    box: BoundingBox
    parent: str = None

    def to_dict(self):
        return {"id": self.hazard_id, "class": self.box.cls, "box": self.box.as_list(),
                "parent": self.parent}


@dataclass
class GroundTruth:
    hazard_id: str
    kind: str
    cls: str
    distance: float
    closest_point: np.ndarray
    line_point: np.ndarray
    apex: np.ndarray
    box: BoundingBox
    arm_box: BoundingBox = None

    def to_dict(self):
        return {"id": self.hazard_id, "kind": self.kind, "class": self.cls,
                "distance": float(self.distance),
                "closest_point": [float(v) for v in self.closest_point],
                "line_point": [float(v) for v in self.line_point],
                "apex": [float(v) for v in self.apex],
                "box": self.box.as_list(),
                "arm_box": None if self.arm_box is None else self.arm_box.as_list()}


@dataclass
class Scene:
    spec: CorridorSpec
    hazards: list
    cloud: PointCloud
    power_line: Polyline3
    detections: list
    ground_truth: list
    camera: CameraModel
    extrinsics: RigidTransform
    image: np.ndarray = None
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _tight_box(spec, parts, cls, camera, extrinsics):
    pts = np.vstack([p.silhouette_points() for p in parts])
    uv, z = project_points(camera, extrinsics, pts)
    if np.any(z <= 0.1):
        raise InvalidSpec("hazard extends behind the camera")
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    if lo[0] < 0 or lo[1] < 0 or hi[0] > camera.width - 1 or hi[1] > camera.height - 1:
        raise InvalidSpec("hazard is not fully inside the image")
    return BoundingBox(cls, lo[0], lo[1], hi[0], hi[1])


def _render_image(camera, extrinsics, parts, noise, rng):
    img = np.full((camera.height, camera.width), BACKGROUND_GRAY)
    order = sorted(parts, key=lambda p: -float(extrinsics.apply(
        p.center if isinstance(p, Box3) else 0.5 * (p.p0 + p.p1))[2]))
    for p in order:
        uv, _ = project_points(camera, extrinsics, p.silhouette_points())
        hull = uv[ConvexHull(uv).vertices]
        rr, cc = fill_polygon(hull[:, 1], hull[:, 0], img.shape)
        img[rr, cc] = p.gray
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _noisy_box(box, sigma, rng, camera):
    if sigma <= 0:
        return box
    u0, v0, u1, v1 = np.array(box.as_list()) + rng.normal(0.0, sigma, 4)
    u0, u1 = np.clip([u0, u1], 0.0, camera.width - 1.0)
    v0, v1 = np.clip([v0, v1], 0.0, camera.height - 1.0)
    if u1 - u0 < 1.0:
        u0, u1 = box.u_min, box.u_max
    if v1 - v0 < 1.0:
        v0, v1 = box.v_min, box.v_max
    return BoundingBox(box.cls, u0, v0, u1, v1)


def generate_scene(spec, hazards, seed=None, render_image=True, oracle_pitch=ORACLE_PITCH):
    """Build a full scene and its ground truth.

    ``seed`` drives detection and image noise (defaults to ``spec.seed``);
    the environment cloud depends on the corridor spec alone, so scenes of
    one corridor share their survey.
    """
    if isinstance(hazards, HazardSpec):
        hazards = [hazards]
    seed = spec.seed if seed is None else seed
    camera, extrinsics = spec.camera, spec.extrinsics
    cloud, line = generate_environment(spec)
    clean_line = line_samples(spec, oracle_pitch)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    truths, detections, all_parts = [], [], []
    for h in hazards:
        parts = hazard_primitives(spec, h)
        all_parts.extend(parts)
        box = _tight_box(spec, parts, h.cls, camera, extrinsics)
        booms = [p for p in parts if p.part == "boom"]
        arm = _tight_box(spec, booms, "boom_arm", camera, extrinsics) if booms else None
        samples = np.vstack([p.surface_samples(oracle_pitch) for p in parts])
        d, (i, j) = oracle_shortest_distance(samples, clean_line)
        truths.append(GroundTruth(h.hazard_id, h.kind, h.cls, d, samples[i], clean_line[j],
                                  hazard_apex(spec, h), box, arm))

    # noise only after the ground truth is fixed
    for h, gt in zip(hazards, truths):
        detections.append(Detection(h.hazard_id, _noisy_box(gt.box, spec.pixel_noise, rng, camera)))
        if gt.arm_box is not None:
            detections.append(Detection(f"{h.hazard_id}-arm",
                                        _noisy_box(gt.arm_box, spec.pixel_noise, rng, camera),
                                        parent=h.hazard_id))
    image = _render_image(camera, extrinsics, all_parts, spec.image_noise, rng) \
        if render_image else None
    return Scene(spec, list(hazards), cloud, line, detections, truths, camera, extrinsics,
                 image, seed)


# hazard samplers ------------------------------------------------------------

def random_hazard(spec, kind, rng, hazard_id="h0", x_range=(25.0, 140.0),
                  y_range=(-10.0, 10.0), below_line=1.0, max_tries=200):
    """Random valid hazard (fully visible) of the given kind.

    The apex is kept at least ``below_line`` meters under the conductor height above
    it, i.e. the hazard works beneath the line.
    """
    camera, extrinsics = spec.camera, spec.extrinsics
    line_z = line_curve(spec)
    for _ in range(max_tries):
        x = rng.uniform(*x_range)
        y = spec.line_lateral + rng.uniform(*y_range)
        if kind == "lift_like":
            h = HazardSpec("lift_like", x, y, yaw_deg=rng.uniform(0, 90),
                           platform_height=rng.uniform(6.0, 13.0), hazard_id=hazard_id)
        else:
            h = HazardSpec("crane_like", x, y, yaw_deg=rng.uniform(0, 180),
                           boom_length=rng.uniform(10.0, 22.0),
                           boom_azimuth_deg=rng.uniform(0.0, 360.0),
                           boom_elevation_deg=rng.uniform(30.0, 70.0),
                           hazard_id=hazard_id,
                           cls="excavator" if rng.random() < 0.25 else "crane")
        apex = hazard_apex(spec, h)
        if apex[2] > line_z(apex[0]) - below_line:
            continue
        try:
            _tight_box(spec, hazard_primitives(spec, h), h.cls, camera, extrinsics)
        except InvalidSpec:
            continue
        return h
    raise InvalidSpec(f"could not place a visible {kind} hazard")


def sweep_distances(start=20.0, stop=140.0, step=10.0):
    return np.arange(start, stop + step / 2, step)


def sweep_hazard(spec, kind, distance, lateral=None, hazard_id="h0"):
    """Template hazard at ``distance`` meters down the corridor.

    ``lateral`` is the offset from the line; by default the hazard stands in
    the camera's vertical plane, so only the range changes along a sweep and
    not the bearing.
    """
    y = spec.camera_lateral if lateral is None else spec.line_lateral + lateral
    if kind == "lift_like":
        return HazardSpec("lift_like", distance, y, platform_height=11.0, hazard_id=hazard_id)
    # boom pitched in depth: pointing away from the camera
    return HazardSpec("crane_like", distance, y, boom_length=10.0, boom_azimuth_deg=0.0,
                      boom_elevation_deg=45.0, hazard_id=hazard_id)


def sweep_distance(spec, kind="lift_like", distances=None, lateral=None, monitor=None,
                   method="ours"):
    """Run the pipeline on one hazard placed at each distance.

    Returns a list of dicts with ``distance``, ``oracle``, ``d_min`` and
    ``error``.
    """
    from .estimators import ClearanceMonitor

    distances = sweep_distances() if distances is None else distances
    monitor = monitor or ClearanceMonitor(method=method)
    rows = []
    for k, dist in enumerate(distances):
        scene = generate_scene(spec, sweep_hazard(spec, kind, float(dist), lateral),
                               seed=spec.seed + k)
        report = monitor.measure_scene(scene)[0]
        truth = scene.ground_truth[0].distance
        rows.append({"distance": float(dist), "kind": kind, "oracle": truth,
                     "d_min": report.d_min, "error": abs(report.d_min - truth)})
    return rows


def bad_case_forward_tilt(spec, tilt_deg=30.0, distance=60.0, lateral=-6.0,
                          boom_length=12.0):
    """Matched crane scenes with the boom tilted toward and away from the camera.

    ``tilt_deg`` is measured from vertical.  Returns ``(forward, backward)``.
    """
    y = spec.line_lateral + lateral
    to_camera = spec.camera_center[:2] - np.array([distance, y])
    az_fwd = float(np.degrees(np.arctan2(to_camera[1], to_camera[0])))
    scenes = []
    for az in (az_fwd, az_fwd + 180.0):
        h = HazardSpec("crane_like", distance, y, yaw_deg=az, boom_length=boom_length,
                       boom_azimuth_deg=az, boom_elevation_deg=90.0 - tilt_deg)
        scenes.append(generate_scene(spec, h))
    return tuple(scenes)


def place_at_clearance(spec, hazard, target, y_bounds=None, pitch=ORACLE_PITCH):
    """Move ``hazard`` sideways until its oracle clearance equals ``target``.

    The search runs over the hazard's lateral position ``y`` within
    ``y_bounds`` (default: the camera side of the line, up to the corridor
    edge), where the clearance must bracket ``target``.
    """
    if y_bounds is None:
        y_bounds = (spec.line_lateral - spec.width / 2 + 2.0, spec.line_lateral - 0.5)
    line = line_samples(spec, pitch)

    def gap(y):
        h = replace(hazard, y=float(y))
        return oracle_shortest_distance(hazard_surface_samples(spec, h, pitch), line)[0] - target

    lo, hi = y_bounds
    if np.sign(gap(lo)) == np.sign(gap(hi)):
        raise InvalidSpec(f"clearance {target} m is not reachable within y in {y_bounds}")
    y = brentq(gap, lo, hi, xtol=1e-4)
    return replace(hazard, y=float(y))
