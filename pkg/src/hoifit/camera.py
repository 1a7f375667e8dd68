"""Pinhole cameras and the default four-view rig."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_rotation


@dataclass(frozen=True)
class CameraView:
    """Intrinsics in pixels plus a world-to-camera rigid transform (x_cam = R x + t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "R", check_rotation(self.R, name="camera rotation"))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.R.T + self.t

    def project(self, X: np.ndarray):
        """Pixel coordinates (n, 2) and a visibility mask (positive depth)."""
        Xc = self.to_camera(np.asarray(X, dtype=float).reshape(-1, 3))
        z = Xc[:, 2]
        visible = z > 0
        zs = np.where(visible, z, 1.0)
        uv = np.stack([self.fx * Xc[:, 0] / zs + self.cx, self.fy * Xc[:, 1] / zs + self.cy], axis=1)
        return uv, visible

    def project_jacobian(self, X: np.ndarray) -> np.ndarray:
        """d(u, v)/dX in world coordinates, shape (n, 2, 3)."""
        Xc = self.to_camera(np.asarray(X, dtype=float).reshape(-1, 3))
        x, y, z = Xc.T
        Jc = np.zeros((len(Xc), 2, 3))
        Jc[:, 0, 0] = self.fx / z
        Jc[:, 0, 2] = -self.fx * x / z**2
        Jc[:, 1, 1] = self.fy / z
        Jc[:, 1, 2] = -self.fy * y / z**2
        return Jc @ self.R

    def rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """World-space ray directions with unit camera depth for pixel coordinates."""
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, float)], -1)
        return d @ self.R

    def projection_matrix(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fx=580.0, fy=580.0, width=640,
                height=480, cx=None, cy=None) -> "CameraView":
        """Camera at ``eye`` looking at ``target``; image v grows downward (OpenCV)."""
        eye = np.asarray(eye, float)
        z = np.asarray(target, float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, float))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fy, (width - 1) / 2.0 if cx is None else cx,
                   (height - 1) / 2.0 if cy is None else cy, width, height, R, -R @ eye)


def project_joints(joints: np.ndarray, camera: CameraView, landmarks=None):
    """Project the landmark subset of 3D joints; returns pixels and a visibility mask."""
    joints = np.asarray(joints, dtype=float)
    if landmarks is not None:
        joints = joints[np.asarray(landmarks)]
    return camera.project(joints)


def default_rig(center=(0.0, 0.9, 0.0), distance: float = 2.5, tilt_deg: float = 30.0,
                n_views: int = 4, width: int = 640, height: int = 480, focal: float = 580.0):
    """Cameras at the corners of a square around ``center``, tilted down toward it."""
    center = np.asarray(center, float)
    h = distance * np.tan(np.deg2rad(tilt_deg))
    cams = []
    for k in range(n_views):
        a = np.pi / 4 + k * 2 * np.pi / n_views
        eye = center + np.array([distance * np.cos(a), h, distance * np.sin(a)])
        cams.append(CameraView.look_at(eye, center, fx=focal, fy=focal, width=width, height=height))
    return cams


def triangulate(uvs, cameras) -> np.ndarray:
    """Linear (DLT) triangulation of one point from several views."""
    rows = []
    for (u, v), cam in zip(uvs, cameras):
        P = cam.projection_matrix()
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.asarray(rows))
    X = Vt[-1]
    return X[:3] / X[3]
