"""SO(3) helpers: exponential map, its Jacobian, log map and projections."""

from __future__ import annotations

import numpy as np

_SMALL = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for vectors of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrices from axis-angle vectors of shape (..., 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    K2 = K @ K
    small = theta < _SMALL
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def rodrigues_jacobian(w: np.ndarray) -> np.ndarray:
    """Derivatives dR/dw_i, shape (..., 3, 3, 3) with the component index third from last.

    Closed form of Gallego & Yezzi; a second-order series is used near the origin.
    """
    w = np.asarray(w, dtype=float)
    batch = w.shape[:-1]
    flat = w.reshape(-1, 3)
    out = np.empty((flat.shape[0], 3, 3, 3))
    E = skew(np.eye(3))
    for n, wn in enumerate(flat):
        theta2 = float(wn @ wn)
        if theta2 < _SMALL**2:
            K = skew(wn)
            out[n] = E + 0.5 * (E @ K + K @ E)
            continue
        R = rodrigues(wn)
        K = skew(wn)
        I_R = np.eye(3) - R
        for i in range(3):
            v = np.cross(wn, I_R[:, i])
            out[n, i] = (wn[i] * K + skew(v)) @ R / theta2
    return out.reshape(batch + (3, 3, 3))


def log_so3(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector (norm in [0, pi]) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < _SMALL:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; read the axis from R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        # fix the sign using the (small) antisymmetric part when available
        s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if s @ axis < 0:
            axis = -axis
        return theta * axis
    s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * s


def canonical_axis_angle(w: np.ndarray) -> np.ndarray:
    """Equivalent axis-angle with norm below pi."""
    return log_so3(rodrigues(w))


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm: U diag(1, 1, det(U V^T)) V^T."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def geodesic_angle(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle in radians of R1^T R2."""
    R = np.asarray(R1).T @ np.asarray(R2)
    return float(np.linalg.norm(log_so3(R)))


def random_rotation(rng: np.random.Generator, max_angle: float | None = None) -> np.ndarray:
    """Uniform rotation, or a uniformly random axis with angle uniform in [0, max_angle]."""
    if max_angle is None:
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rodrigues(axis * rng.uniform(0.0, max_angle))
