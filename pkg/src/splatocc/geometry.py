"""Pinhole cameras, rigid poses and pixel warping.

Conventions used throughout the package:

* camera frame is right-handed with +z forward, +x right, +y down;
* pixel origin is the top-left corner and pixel centers sit on integer
  coordinates, so pixel ``(u, v)`` covers ``[u - 0.5, u + 0.5)``;
* poses are camera-to-world, ``X_world = R @ X_cam + t``;
* depth maps hold camera-frame z in meters, not ray length;
* the world frame is z-up (the ground is the ``z = height`` plane).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, PreconditionError


# ---------------------------------------------------------------------------
# SO(3) / SE(3)


def hat(v):
    """Skew-symmetric matrix of a 3-vector (batched over leading axes)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(omega):
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        return axis / np.linalg.norm(axis) * theta
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * theta / (2.0 * np.sin(theta))


def _so3_left_jacobian(omega):
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    return so3_exp(axis / np.linalg.norm(axis) * angle)


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


# ---------------------------------------------------------------------------
# Value types


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width, height, hfov_deg):
        """Square pixels, centered principal point, horizontal field of view in degrees."""
        f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self):
        return (self.height, self.width)

    def scaled(self, factor):
        """Intrinsics for an image resampled by ``factor`` (pixel centers stay aligned)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return Intrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, w, h
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform; as a camera extrinsic it maps camera coordinates to world."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise PreconditionError("pose must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise PreconditionError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_quaternion(cls, q, translation=(0.0, 0.0, 0.0)):
        from .gaussians import quat_to_rotation

        return cls(quat_to_rotation(q), translation)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    __matmul__ = compose

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def se3_exp(delta):
    """Exponential map of ``(omega, v)`` as a :class:`Pose`."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    omega, v = delta[:3], delta[3:]
    return Pose(so3_exp(omega), _so3_left_jacobian(omega) @ v)


def se3_log(pose):
    omega = so3_log(pose.rotation)
    v = np.linalg.solve(_so3_left_jacobian(omega), pose.translation)
    return np.concatenate([omega, v])


def se3_step(pose, delta):
    """Left-multiplicative update ``Exp(delta) ∘ pose``.

    ``delta`` is ``(wx, wy, wz, vx, vy, vz)``: rotation first, then translation.
    The result is re-orthonormalized so repeated steps do not drift.
    """
    step = se3_exp(delta)
    R = orthonormalize(step.rotation @ pose.rotation)
    return Pose(R, step.rotation @ pose.translation + step.translation)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose

    @property
    def shape(self):
        return self.intrinsics.shape

    @property
    def center(self):
        return self.pose.translation

    def world_to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.pose.translation) @ self.pose.rotation

    def with_pose(self, pose):
        return Camera(self.intrinsics, pose)

    def scaled(self, factor):
        return Camera(self.intrinsics.scaled(factor), self.pose)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple
    adjacency: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        pairs = tuple(tuple(int(k) for k in p) for p in self.adjacency)
        n = len(self.cameras)
        for i, j in pairs:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ConfigurationError(f"invalid adjacency pair ({i}, {j}) for {n} cameras")
        object.__setattr__(self, "adjacency", pairs)

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, k):
        return self.cameras[k]

    def require_cross_view(self):
        if len(self.cameras) < 2:
            raise ConfigurationError("cross-view operations need at least two cameras")
        if not self.adjacency:
            raise ConfigurationError("rig has no adjacent camera pairs")

    def moved(self, ego):
        """The same rig after the ego platform moved by ``ego`` (world frame)."""
        return CameraRig(
            tuple(Camera(c.intrinsics, ego @ c.pose) for c in self.cameras), self.adjacency
        )

    def scaled(self, factor):
        return CameraRig(tuple(c.scaled(factor) for c in self.cameras), self.adjacency)

    def to_json(self):
        cams = []
        for c in self.cameras:
            k = c.intrinsics
            cams.append(
                {
                    "fx": k.fx,
                    "fy": k.fy,
                    "cx": k.cx,
                    "cy": k.cy,
                    "width": k.width,
                    "height": k.height,
                    "rotation": c.pose.rotation.reshape(-1).tolist(),
                    "translation": c.pose.translation.tolist(),
                }
            )
        return {"cameras": cams, "adjacency": [list(p) for p in self.adjacency]}

    @classmethod
    def from_json(cls, data):
        try:
            cams = []
            for c in data["cameras"]:
                K = Intrinsics(
                    float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                    int(c["width"]), int(c["height"]),
                )
                R = np.asarray(c["rotation"], dtype=np.float64).reshape(3, 3)
                if np.abs(R @ R.T - np.eye(3)).max() > 1e-3:
                    raise ConfigurationError("rig rotation is not orthonormal")
                cams.append(Camera(K, Pose(orthonormalize(R), c["translation"])))
            adjacency = [tuple(p) for p in data.get("adjacency", [])]
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise FormatError(f"malformed rig description: {exc}") from exc
        return cls(tuple(cams), tuple(adjacency))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ConfigurationError("depth map must be 2-D")
        valid = np.isfinite(values) & (values > 0) if self.valid is None else np.asarray(self.valid, bool)
        if valid.shape != values.shape:
            raise ConfigurationError("validity mask shape mismatch")
        valid = valid & np.isfinite(values) & (values > 0)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.values.shape

    def filled(self, fill=0.0):
        """Depth values with invalid pixels replaced by ``fill`` (the PFM encoding uses 0)."""
        return np.where(self.valid, self.values, fill)


# ---------------------------------------------------------------------------
# Projection


def look_rotation(yaw, pitch=0.0, roll=0.0):
    """Camera-to-world rotation for a camera with heading ``yaw`` (about world +z,
    0 = looking along world +x) pitched down by ``pitch`` radians."""
    forward = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    if roll:
        R = R @ rotation_about([0, 0, 1], roll)
    return R


def pixel_grid(height, width):
    """``(H, W, 2)`` array of pixel-center coordinates ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def project(camera, points):
    """Project world points into ``camera``.

    Returns ``(pixels, depth, in_front)``; points with camera-frame depth <= 0 are
    flagged in ``in_front`` and their pixel coordinates are NaN.
    """
    pc = camera.world_to_camera(points)
    z = pc[..., 2]
    in_front = z > 0
    k = camera.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(in_front, z, np.nan)
        u = k.fx * pc[..., 0] / zs + k.cx
        v = k.fy * pc[..., 1] / zs + k.cy
    return np.stack([u, v], axis=-1), z, in_front


def camera_rays(camera, pixels):
    """Camera-frame direction scaled to unit z for each pixel, ``K^-1 [u, v, 1]``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    k = camera.intrinsics
    x = (pixels[..., 0] - k.cx) / k.fx
    y = (pixels[..., 1] - k.cy) / k.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def unproject(camera, pixels, depth):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise PreconditionError("unproject requires strictly positive depth")
    pc = camera_rays(camera, pixels) * depth[..., None]
    return camera.pose.apply(pc)


def in_image(pixels, height, width):
    """Pixel coordinates that land inside ``[0, W) x [0, H)``."""
    u, v = pixels[..., 0], pixels[..., 1]
    with np.errstate(invalid="ignore"):
        return (u >= 0) & (u < width) & (v >= 0) & (v < height)


def cross_view_reproject(cam_i, cam_j, depth_map):
    """Where each pixel of camera ``i`` lands in camera ``j`` given its depth.

    Returns ``(coords, valid)`` with ``coords`` of shape ``(H, W, 2)``. A pixel is
    valid when its depth is valid, it lands in front of camera ``j`` and inside
    ``[0, W_j) x [0, H_j)``.
    """
    if not isinstance(depth_map, DepthMap):
        depth_map = DepthMap(depth_map)
    if depth_map.shape != cam_i.shape:
        raise ConfigurationError(
            f"depth map shape {depth_map.shape} does not match camera {cam_i.shape}"
        )
    h, w = depth_map.shape
    d = np.where(depth_map.valid, depth_map.values, 1.0)
    world = unproject(cam_i, pixel_grid(h, w), d)
    coords, _, in_front = project(cam_j, world)
    valid = depth_map.valid & in_front & in_image(coords, *cam_j.shape)
    return coords, valid


def relative_transform(cam_i, cam_j):
    """Pose taking camera-``i`` coordinates to camera-``j`` coordinates."""
    return cam_j.pose.inverse() @ cam_i.pose


# ---------------------------------------------------------------------------
# Bilinear sampling


def _bilinear_setup(shape, coords):
    h, w = shape
    coords = np.asarray(coords, dtype=np.float64)
    x, y = coords[..., 0], coords[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (x >= -0.5) & (x <= w - 0.5) & (y >= -0.5) & (y <= h - 0.5)
    x = np.where(valid, np.clip(x, 0.0, w - 1.0), 0.0)
    y = np.where(valid, np.clip(y, 0.0, h - 1.0), 0.0)
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return valid, x, y, x0, y0, x1, y1


def bilinear_sample(image, coords, return_grad=False):
    """Sample ``image`` (``H x W`` or ``H x W x C``) at fractional pixel ``coords``.

    Coordinates within half a pixel outside the image are clamped onto the border;
    anything farther out is invalid and samples as 0. With ``return_grad`` the
    partial derivatives ``d sample / d x`` and ``d sample / d y`` are also returned
    (zero where the coordinate was clamped or invalid).
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w = image.shape[:2]
    raw = np.asarray(coords, dtype=np.float64)
    valid, x, y, x0, y0, x1, y1 = _bilinear_setup((h, w), raw)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    I00 = image[y0, x0]
    I01 = image[y0, x1]
    I10 = image[y1, x0]
    I11 = image[y1, x1]
    top = I00 + fx * (I01 - I00)
    bottom = I10 + fx * (I11 - I10)
    out = top + fy * (bottom - top)
    vmask = valid[..., None]
    out = np.where(vmask, out, 0.0)
    if squeeze:
        out = out[..., 0]
    if not return_grad:
        return out, valid
    with np.errstate(invalid="ignore"):
        free_x = (raw[..., 0] > 0) & (raw[..., 0] < w - 1) & valid
        free_y = (raw[..., 1] > 0) & (raw[..., 1] < h - 1) & valid
    dx = (1.0 - fy) * (I01 - I00) + fy * (I11 - I10)
    dy = bottom - top
    dx = np.where(free_x[..., None], dx, 0.0)
    dy = np.where(free_y[..., None], dy, 0.0)
    if squeeze:
        dx, dy = dx[..., 0], dy[..., 0]
    return out, valid, dx, dy


# ---------------------------------------------------------------------------
# Rig builders


def surround_rig(
    n_cameras=6,
    width=96,
    height=48,
    hfov_deg=90.0,
    radius=1.0,
    mount_height=1.5,
    pitch_deg=0.0,
    yaw_offset_deg=0.0,
    yaw_step_deg=None,
):
    """Cameras evenly spaced in yaw on a ring, each looking outward.

    Adjacent cameras (in yaw order, wrapping around) are listed as ``(i, j)``
    with ``i < j``.
    """
    step = 360.0 / n_cameras if yaw_step_deg is None else yaw_step_deg
    K = Intrinsics.from_fov(width, height, hfov_deg)
    cams = []
    for k in range(n_cameras):
        yaw = np.radians(yaw_offset_deg + k * step)
        center = np.array([radius * np.cos(yaw), radius * np.sin(yaw), mount_height])
        cams.append(Camera(K, Pose(look_rotation(yaw, np.radians(pitch_deg)), center)))
    pairs = []
    for k in range(n_cameras - 1):
        pairs.append((k, k + 1))
    if yaw_step_deg is None and n_cameras > 2:
        pairs.append((0, n_cameras - 1))
    return CameraRig(tuple(cams), tuple(pairs))
