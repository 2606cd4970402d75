"""SO(3)/SE(3) exponential and logarithm maps.

Tangent vectors are ordered ``xi = (rho, phi)``: translational part first,
rotational part second.
"""
import numpy as np

from .geometry import RigidTransform

_SMALL = 1e-6


def hat(w):
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def _coefficients(theta):
    """``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t - sin t)/t^3`` with series near 0."""
    if theta < _SMALL:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta ** 2, (theta - s) / theta ** 3


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    a, b, _ = _coefficients(theta)
    W = hat(phi)
    R = np.eye(3) + a * W + b * (W @ W)
    # re-orthonormalise away the last ulp of drift
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _SMALL:
        return vee(R - R.T) * 0.5 * (1.0 + theta ** 2 / 6.0)
    if np.pi - theta < 1e-4:
        # near pi: axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ vee(R - R.T) < 0:
            axis = -axis
        return theta * axis
    return vee(R - R.T) * theta / (2.0 * np.sin(theta))


def left_jacobian(phi):
    theta = np.linalg.norm(phi)
    _, b, c = _coefficients(theta)
    W = hat(phi)
    return np.eye(3) + b * W + c * (W @ W)


def left_jacobian_inverse(phi):
    theta = np.linalg.norm(phi)
    W = hat(phi)
    if theta < _SMALL:
        k = 1.0 / 12.0 + theta ** 2 / 720.0
    else:
        k = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    return np.eye(3) - 0.5 * W + k * (W @ W)


def se3_exp(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return RigidTransform(so3_exp(phi), left_jacobian(phi) @ rho)


def se3_log(T):
    phi = so3_log(T.rotation)
    rho = left_jacobian_inverse(phi) @ T.translation
    return np.concatenate([rho, phi])


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in radians."""
    return float(np.linalg.norm(so3_log(R)))
