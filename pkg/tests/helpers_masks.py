"""Synthetic boom masks and images for keypoint tests."""
import numpy as np
from skimage.draw import polygon


def stripe(shape, angle_deg, width=6.0, length_frac=0.45, center=None):
    """Boolean stripe through ``center`` at a signed inclination (positive rises right)."""
    h, w = shape
    a = np.radians(angle_deg)
    d = np.array([np.cos(a), -np.sin(a)])
    n = np.array([-d[1], d[0]])
    c = np.array([w / 2, h / 2]) if center is None else np.asarray(center, float)
    L = min(h, w) * length_frac
    p = np.array([c - L * d - width / 2 * n, c + L * d - width / 2 * n,
                  c + L * d + width / 2 * n, c - L * d + width / 2 * n])
    m = np.zeros(shape, bool)
    rr, cc = polygon(p[:, 1], p[:, 0], shape)
    m[rr, cc] = True
    return m


def noisy_boom_mask(rng, size=120, salt=0.10):
    angle = rng.uniform(15, 75) * rng.choice([-1, 1])
    m = stripe((size, size), angle) | (rng.random((size, size)) < salt)
    return m, angle
