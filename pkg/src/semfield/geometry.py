"""Cameras, rigid transforms, quaternions, and ray helpers.

Conventions: world-from-camera poses, +z is the camera's forward axis, pixel
(row, col) maps to camera-space direction ((col+0.5-cx)/fx, (row+0.5-cy)/fy, 1).
World up is +z.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    rotation: np.ndarray   # (3,3) world-from-camera
    position: np.ndarray   # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if self.height < 1 or self.width < 1:
            raise ContractError("resolution must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-8):
            raise ContractError("camera rotation must be orthonormal")

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "height": self.height, "width": self.width,
            "rotation": self.rotation.reshape(-1).tolist(),
            "position": self.position.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            height=d["height"], width=d["width"],
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            position=np.array(d["position"], dtype=np.float64),
        )


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera rotation for a camera at `position` looking at `target`."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ContractError("camera position coincides with target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-8:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def pixel_rays(camera, rows=None, cols=None):
    """Unit world-space rays through pixel centers.

    With rows/cols omitted, returns rays for the full image as
    (origins (H*W,3), dirs (H*W,3)) in row-major pixel order.
    """
    if rows is None:
        rr, cc = np.mgrid[0:camera.height, 0:camera.width]
        rows = rr.ravel()
        cols = cc.ravel()
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    x = (cols + 0.5 - camera.cx) / camera.fx
    y = (rows + 0.5 - camera.cy) / camera.fy
    d = np.stack([x, y, np.ones_like(x)], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = d @ camera.rotation.T
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def ray_box_range(origins, dirs, lo, hi):
    """Entry/exit parameters of rays against an AABB.

    Returns (t_near, t_far); a ray misses when t_near >= t_far. Negative
    segments are clipped at zero.
    """
    safe = np.where(np.abs(dirs) < 1e-300, np.copysign(1e-300, dirs), dirs)
    inv = 1.0 / safe
    t0 = (lo[None, :] - origins) * inv
    t1 = (hi[None, :] - origins) * inv
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    return np.maximum(t_near, 0.0), t_far


def normalize_quat(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.where(n < 1e-300, 1.0, n)


def quat_to_rot(q):
    """Unit quaternion(s) (w,x,y,z) -> rotation matrix/matrices."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_to_rot_grad(q, g_R):
    """Backprop g_R (...,3,3) through quat_to_rot at unit q (...,4).

    Returns gradient w.r.t. the *unnormalized* quaternion, i.e. includes the
    projection through q/|q| evaluated at |q|=1.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    g_R = g_R.reshape(q.shape[0], 3, 3)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    # dR/dw etc., each (B, 3, 3); rows follow quat_to_rot layout
    dRw = np.stack([
        zero, -2 * z, 2 * y,
        2 * z, zero, -2 * x,
        -2 * y, 2 * x, zero,
    ], axis=1).reshape(-1, 3, 3)
    dRx = np.stack([
        zero, 2 * y, 2 * z,
        2 * y, -4 * x, -2 * w,
        2 * z, 2 * w, -4 * x,
    ], axis=1).reshape(-1, 3, 3)
    dRy = np.stack([
        -4 * y, 2 * x, 2 * w,
        2 * x, zero, 2 * z,
        -2 * w, 2 * z, -4 * y,
    ], axis=1).reshape(-1, 3, 3)
    dRz = np.stack([
        -4 * z, -2 * w, 2 * x,
        2 * w, -4 * z, 2 * y,
        2 * x, 2 * y, zero,
    ], axis=1).reshape(-1, 3, 3)
    g_q = np.stack([
        np.einsum("bij,bij->b", g_R, dRw),
        np.einsum("bij,bij->b", g_R, dRx),
        np.einsum("bij,bij->b", g_R, dRy),
        np.einsum("bij,bij->b", g_R, dRz),
    ], axis=1)
    # project through normalization (at unit norm: (I - qq^T))
    g_q = g_q - np.einsum("bi,bi->b", g_q, q)[:, None] * q
    return g_q


def ring_cameras(n_views, radius, height, target=(0.0, 0.0, 0.0), fov_deg=50.0,
                 resolution=(64, 64)):
    """Evenly spaced camera ring around `target`, all looking inward."""
    H, W = resolution
    f = 0.5 * W / np.tan(np.deg2rad(fov_deg) / 2.0)
    cams = []
    for i in range(n_views):
        ang = 2.0 * np.pi * i / n_views
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        R = look_at(pos, target)
        cams.append(Camera(fx=f, fy=f, cx=W / 2.0, cy=H / 2.0,
                           height=H, width=W, rotation=R, position=pos))
    return cams
