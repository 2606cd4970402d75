"""Apex and ground keypoints from hazard bounding boxes.

Aerial lifts keep their working arm vertical, so the apex sits at the top
center of the box.  Cranes and excavators carry an inclined boom: the boom
is segmented from the box with a two-class intensity mixture, its direction
is voted with a Hough transform, and the apex snaps to the top corner on
the rising side.
"""
from dataclasses import dataclass, field

import numpy as np

from .config import (
    GMM_COMPONENTS,
    GMM_MAX_ITER,
    GMM_TOL,
    HOUGH_ANGLE_BINS,
    HOUGH_RHO_RESOLUTION_PX,
    MIN_VOTE_SHARE,
)
from .errors import DegenerateBox, EmptyMask, WrongClass

HAZARD_CLASSES = ("crane", "excavator", "aerial_lift", "boom_arm")
BOOM_CLASSES = ("crane", "excavator", "boom_arm")
CRANE_LIKE = ("crane", "excavator")
LIFT_LIKE = ("aerial_lift",)


@dataclass(frozen=True)
class BoundingBox:
    cls: str
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if self.cls not in HAZARD_CLASSES:
            raise ValueError(f"unknown hazard class {self.cls!r}")
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError("box must satisfy u_min < u_max and v_min < v_max")

    @property
    def width(self):
        return self.u_max - self.u_min

    @property
    def height(self):
        return self.v_max - self.v_min

    def clamp(self, width, height):
        return BoundingBox(self.cls,
                           min(max(self.u_min, 0.0), width - 1.0),
                           min(max(self.v_min, 0.0), height - 1.0),
                           min(max(self.u_max, 0.0), width - 1.0),
                           min(max(self.v_max, 0.0), height - 1.0))

    def mirrored(self, width):
        """Box after flipping an image of ``width`` pixels left to right."""
        return BoundingBox(self.cls, width - 1.0 - self.u_max, self.v_min,
                           width - 1.0 - self.u_min, self.v_max)

    def pixel_slices(self):
        """Integer row/column slices of the pixels whose centers fall inside."""
        c0 = int(np.ceil(self.u_min))
        c1 = int(np.floor(self.u_max)) + 1
        r0 = int(np.ceil(self.v_min))
        r1 = int(np.floor(self.v_max)) + 1
        return slice(r0, r1), slice(c0, c1)

    def contains_box(self, other, slack=0.0):
        return (other.u_min >= self.u_min - slack and other.v_min >= self.v_min - slack
                and other.u_max <= self.u_max + slack and other.v_max <= self.v_max + slack)

    def as_list(self):
        return [float(self.u_min), float(self.v_min), float(self.u_max), float(self.v_max)]


@dataclass(frozen=True)
class KeypointSet:
    apex: np.ndarray
    ground_mid: np.ndarray
    ground_left: np.ndarray
    ground_right: np.ndarray
    inclination: float = None
    vote_share: float = None
    low_confidence: bool = False
    flags: tuple = field(default_factory=tuple)


def extract_ground_points(box):
    """Bottom-edge midpoint plus the two bottom corners."""
    mid = np.array([(box.u_min + box.u_max) / 2.0, box.v_max])
    left = np.array([box.u_min, box.v_max])
    right = np.array([box.u_max, box.v_max])
    return mid, left, right


def extract_apex_lift(box):
    if box.cls != "aerial_lift":
        raise WrongClass(f"top-center apex applies to aerial lifts, not {box.cls!r}")
    return np.array([(box.u_min + box.u_max) / 2.0, box.v_min])


@dataclass(frozen=True, eq=False)
class Segmentation:
    """Foreground mask over a box, with the fitted mixture."""

    mask: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    foreground: int
    log_likelihood: float
    n_iter: int
    converged: bool
    low_confidence: bool


def _em_1d(values, counts, k, tol, max_iter, init_means):
    """EM for a 1D Gaussian mixture on weighted unique values."""
    n = counts.sum()
    var_floor = 1e-6
    means = np.array(init_means, dtype=float)
    spread = np.average((values - np.average(values, weights=counts)) ** 2, weights=counts)
    var = np.full(k, max(spread / k, var_floor))
    pis = np.full(k, 1.0 / k)
    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        diff = values[:, None] - means[None, :]
        log_p = (np.log(pis) - 0.5 * np.log(2 * np.pi * var)
                 - 0.5 * diff ** 2 / var)
        m = log_p.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(log_p - m).sum(axis=1))
        ll = float(counts @ log_norm)
        resp = np.exp(log_p - log_norm[:, None]) * counts[:, None]
        nk = resp.sum(axis=0)
        nk_safe = np.maximum(nk, 1e-12)
        means = (resp * values[:, None]).sum(axis=0) / nk_safe
        var = np.maximum((resp * (values[:, None] - means) ** 2).sum(axis=0) / nk_safe,
                         var_floor)
        pis = np.maximum(nk / n, 1e-12)
        pis /= pis.sum()
        if abs(ll - prev) < tol:
            converged = True
            break
        prev = ll
    return means, var, pis, ll, it, converged


def _box_pixels(image, box):
    rows, cols = box.pixel_slices()
    H, W = image.shape
    rows = slice(max(rows.start, 0), min(rows.stop, H))
    cols = slice(max(cols.start, 0), min(cols.stop, W))
    return image[rows, cols]


def segment_foreground_gmm(image, box, k_components=GMM_COMPONENTS, seed=0,
                           tol=GMM_TOL, max_iter=GMM_MAX_ITER, n_init=1):
    """Split the pixels inside ``box`` into foreground and background.

    A ``k_components`` Gaussian mixture is fitted by EM to the intensities in
    the box.  The foreground component is the one whose mean lies farthest
    from the mean of the box's one-pixel border ring.  The first
    initialisation uses intensity quantiles (independent of pixel order), or
    evenly spaced levels when the quantiles coincide;
    extra restarts (``n_init > 1``) draw means from ``seed``.
    """
    image = np.asarray(image, dtype=float)
    patch = _box_pixels(image, box)
    if patch.shape[0] < 2 or patch.shape[1] < 2:
        raise DegenerateBox("box must span at least 2x2 pixels")
    values, inverse, counts = np.unique(patch.ravel(), return_inverse=True,
                                        return_counts=True)
    counts = counts.astype(float)
    qs = (np.arange(k_components) + 0.5) / k_components
    init = np.quantile(patch, qs)
    if np.any(np.diff(init) <= 0):
        # a dominant gray level swallowed several quantiles
        init = values[0] + qs * (values[-1] - values[0])
    inits = [init]
    rng = np.random.default_rng(seed)
    for _ in range(max(n_init, 1) - 1):
        inits.append(np.sort(rng.choice(values, size=k_components)))
    best = None
    for init in inits:
        fit = _em_1d(values, counts, k_components, tol, max_iter, init)
        if best is None or fit[3] > best[3]:
            best = fit
    means, var, pis, ll, n_iter, converged = best

    ring = np.concatenate([patch[0], patch[-1], patch[1:-1, 0], patch[1:-1, -1]])
    fg = int(np.argmax(np.abs(means - ring.mean())))
    diff = values[:, None] - means[None, :]
    log_p = np.log(pis) - 0.5 * np.log(2 * np.pi * var) - 0.5 * diff ** 2 / var
    labels = np.argmax(log_p, axis=1)[inverse].reshape(patch.shape)
    mask = labels == fg

    sd = np.sqrt(var)
    others = np.delete(means, fg)
    separation = np.min(np.abs(others - means[fg])) if len(others) else 0.0
    low = bool(patch.std() < 1e-3 or separation < 2.0 * np.max(sd)
               or not mask.any() or mask.all())
    return Segmentation(mask, means, var, pis, fg, ll, n_iter, converged, low)


def mask_edges(mask):
    """Mask pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask, dtype=bool)
    pad = np.pad(m, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~interior


def _hough_tables(angle_bins):
    k = np.arange(angle_bins)
    theta = k * np.pi / angle_bins
    # exact mirror symmetry: cos(theta_{N-k}) == -cos(theta_k)
    half = k <= angle_bins // 2
    cos = np.empty(angle_bins)
    cos[half] = np.cos(theta[half])
    mirror = ~half
    cos[mirror] = -cos[angle_bins - k[mirror]]
    sin = np.empty(angle_bins)
    sin[half] = np.sin(theta[half])
    sin[mirror] = sin[angle_bins - k[mirror]]
    return theta, cos, sin


def hough_accumulator(mask, angle_bins=HOUGH_ANGLE_BINS, rho_resolution=HOUGH_RHO_RESOLUTION_PX):
    """Vote ``rho = x cos(theta) + y sin(theta)`` over the mask's edge pixels.

    Coordinates are centered on the mask so that mirroring the mask left to
    right mirrors the accumulator exactly.

    Returns
    -------
    acc : int array, shape (angle_bins, n_rho)
    theta : array of bin angles in [0, pi)
    n_edges : int
    """
    edges = mask_edges(mask)
    rows, cols = np.nonzero(edges)
    if len(rows) == 0:
        raise EmptyMask("mask has no pixels")
    h, w = edges.shape
    x = cols - (w - 1) / 2.0
    y = rows - (h - 1) / 2.0
    theta, cos, sin = _hough_tables(angle_bins)
    rho = np.outer(x, cos) + np.outer(y, sin)
    r_max = int(np.ceil(np.hypot(w, h) / (2.0 * rho_resolution))) + 1
    idx = np.round(rho / rho_resolution).astype(np.int64) + r_max
    n_rho = 2 * r_max + 1
    flat = idx + (np.arange(angle_bins) * n_rho)[None, :]
    acc = np.bincount(flat.ravel(), minlength=angle_bins * n_rho)
    return acc.reshape(angle_bins, n_rho), theta, len(rows)


def _inclination_of_normal(theta):
    """Signed inclination of the line whose normal makes angle ``theta``.

    The line direction is ``(sin theta, -cos theta)`` in ``(u, v)``; with rows
    growing downward that rises to the right for ``theta < pi/2``.  Result is
    in ``(-pi/2, pi/2]``, vertical lines giving ``+pi/2``.
    """
    return float(np.pi / 2 - theta)


def boom_inclination_hough(mask, angle_bins=HOUGH_ANGLE_BINS,
                           rho_resolution=HOUGH_RHO_RESOLUTION_PX):
    """Dominant line inclination in a boom mask.

    Returns
    -------
    inclination : float
        Radians in ``(-pi/2, pi/2]``; positive rises to the right.
    vote_share : float
        Votes in the winning bin over the number of edge pixels.

    Ties between bins go to the more vertical line.  A tie between two
    mirror-image lines (``+a`` and ``-a``) is reported as inclination 0,
    which callers treat as "no preferred side".
    """
    acc, theta, n_edges = hough_accumulator(mask, angle_bins, rho_resolution)
    best = acc.max()
    ks, _ = np.nonzero(acc == best)
    incl = np.array([_inclination_of_normal(theta[k]) for k in np.unique(ks)])
    steep = np.max(np.abs(incl))
    top = np.unique(np.round(incl[np.abs(np.abs(incl) - steep) < 1e-12], 12))
    if len(top) > 1:
        inclination = 0.0 if steep < np.pi / 2 - 1e-12 else np.pi / 2
    else:
        inclination = float(top[0])
    return inclination, float(best) / n_edges


def extract_apex_boom(box, inclination, vote_share, min_vote_share=MIN_VOTE_SHARE):
    """Top corner on the rising side of the boom.

    Returns ``(apex, low_confidence)``.  With too few votes, or no preferred
    side (vertical or ambiguous line), the top-edge midpoint is returned and
    flagged.
    """
    mid = np.array([(box.u_min + box.u_max) / 2.0, box.v_min])
    if vote_share is None or inclination is None or vote_share < min_vote_share:
        return mid, True
    eps = 1e-9
    if inclination > eps and inclination < np.pi / 2 - eps:
        return np.array([box.u_max, box.v_min]), False
    if inclination < -eps:
        return np.array([box.u_min, box.v_min]), False
    # vertical boom: apex is the top middle; horizontal/ambiguous: no side
    return mid, not (inclination >= np.pi / 2 - eps)


def find_arm_box(box, boxes, hazard_id=None):
    """Boom-arm box belonging to ``box``: by explicit parent, else containment."""
    for other_id, other, parent in boxes:
        if other.cls == "boom_arm" and hazard_id is not None and parent == hazard_id:
            return other
    for other_id, other, parent in boxes:
        if other.cls == "boom_arm" and parent is None and box.contains_box(other, slack=2.0):
            return other
    return None


def extract_keypoints(box, image=None, arm_box=None, use_arm_box=True, use_gmm_ht=True,
                      k_components=GMM_COMPONENTS, angle_bins=HOUGH_ANGLE_BINS,
                      rho_resolution=HOUGH_RHO_RESOLUTION_PX, min_vote_share=MIN_VOTE_SHARE,
                      seed=0):
    """Full keypoint set for one detection."""
    mid, left, right = extract_ground_points(box)
    flags = []
    inclination = share = None
    if box.cls == "aerial_lift":
        apex = extract_apex_lift(box)
        low = False
    elif box.cls in CRANE_LIKE:
        region = arm_box if (use_arm_box and arm_box is not None) else box
        if use_gmm_ht and image is not None:
            seg = segment_foreground_gmm(image, region, k_components, seed)
            if seg.low_confidence:
                flags.append("low_contrast_segmentation")
            try:
                inclination, share = boom_inclination_hough(seg.mask, angle_bins, rho_resolution)
            except EmptyMask:
                inclination, share = None, 0.0
            apex, low = extract_apex_boom(region, inclination, share, min_vote_share)
        else:
            if use_gmm_ht and image is None:
                flags.append("no_image")
            apex = np.array([(region.u_min + region.u_max) / 2.0, region.v_min])
            low = use_gmm_ht
        if low:
            flags.append("low_vote_apex")
    else:
        raise WrongClass(f"no apex rule for class {box.cls!r}")
    return KeypointSet(apex, mid, left, right, inclination, share, low, tuple(flags))
