"""Point cloud container and the shared Z-buffer reduction."""
from dataclasses import dataclass

import numpy as np

from .config import ZBUFFER_TIE_M
from .errors import EmptyCloud

# depth quantum used to order near-equal depths by input position
_DEPTH_BITS = 34
_MAX_QDEPTH = (1 << _DEPTH_BITS) - 1


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Environmental point cloud.

    Parameters
    ----------
    xyz : array, shape (n, 3)
    intensity : array, shape (n,), optional
        Reflectance in [0, 1].
    rgb : array, shape (n, 3), uint8, optional
    """

    xyz: np.ndarray
    intensity: np.ndarray = None
    rgb: np.ndarray = None

    def __post_init__(self):
        xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=float).reshape(-1, 3))
        xyz.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        if self.intensity is not None:
            i = np.asarray(self.intensity, dtype=float).reshape(-1)
            if len(i) != len(xyz):
                raise ValueError("intensity length does not match point count")
            i.setflags(write=False)
            object.__setattr__(self, "intensity", i)
        if self.rgb is not None:
            c = np.asarray(self.rgb, dtype=np.uint8).reshape(-1, 3)
            if len(c) != len(xyz):
                raise ValueError("rgb length does not match point count")
            c.setflags(write=False)
            object.__setattr__(self, "rgb", c)

    def __len__(self):
        return len(self.xyz)

    def grayscale(self):
        """Per-point gray value: intensity, else RGB luminance, else 1."""
        if self.intensity is not None:
            return np.clip(self.intensity, 0.0, 1.0)
        if self.rgb is not None:
            c = self.rgb.astype(float) / 255.0
            return c @ np.array([0.299, 0.587, 0.114])
        return np.ones(len(self))


def require_points(cloud):
    if cloud is None or len(cloud) == 0:
        raise EmptyCloud("point cloud is empty")


def zbuffer_winners(pixel_index, depth, tie=ZBUFFER_TIE_M):
    """Pick the nearest contribution per pixel.

    Depths within ``tie`` of each other are ordered by position in the input,
    so the first-processed contribution wins.

    Returns
    -------
    pixels : array of unique pixel indices
    winners : array of positions into the inputs, one per pixel
    """
    pixel_index = np.asarray(pixel_index, dtype=np.int64)
    q = np.clip(np.floor(np.asarray(depth) / tie), 0, _MAX_QDEPTH).astype(np.int64)
    key = (pixel_index << _DEPTH_BITS) | q
    order = np.argsort(key, kind="stable")
    p_sorted = pixel_index[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = p_sorted[1:] != p_sorted[:-1]
    return p_sorted[first], order[first]
