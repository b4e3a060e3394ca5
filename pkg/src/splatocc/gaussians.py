"""3D Gaussian primitives: density, covariance, and screen-space projection.

Quaternions are scalar-first ``(w, x, y, z)`` everywhere, including on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, PreconditionError

#: Camera-frame depth below which a Gaussian is culled.
NEAR_PLANE = 0.01
#: Renderer clamp on x/z and y/z inside the projection Jacobian, in units of the
#: half field of view; keeps near, off-screen Gaussians from blowing up.
FOV_CLAMP = 1.3


def quat_to_rotation(q):
    """Rotation matrix of a quaternion, or a batch ``(..., 4) -> (..., 3, 3)``.

    Non-unit quaternions are normalized; a zero quaternion is rejected.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise PreconditionError("zero quaternion has no rotation")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotation_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.zeros(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def build_covariance(scale, q):
    """``R diag(s)^2 R^T``; batched over leading axes."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(~(scale > 0)):
        raise PreconditionError("Gaussian scales must be strictly positive")
    R = quat_to_rotation(q)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = (1.0, 0.0, 0.0, 0.0)
    opacity: float = 1.0
    feature: np.ndarray = ()

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise PreconditionError("zero quaternion")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64).reshape(-1))
        if np.any(~(self.scale > 0)):
            raise PreconditionError("Gaussian scales must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise PreconditionError("opacity must lie in [0, 1]")

    @property
    def covariance(self):
        return build_covariance(self.scale, self.rotation)


def eval_gaussian(g, x):
    """Unnormalized density ``exp(-0.5 (x - mu)^T Sigma^-1 (x - mu))``.

    ``x`` may be a single point or a batch ``(..., 3)``.
    """
    x = np.asarray(x, dtype=np.float64)
    # work in the Gaussian's principal frame: Sigma^-1 = R diag(1/s^2) R^T
    R = quat_to_rotation(g.rotation)
    local = ((x - g.mean) @ R) / g.scale
    return np.exp(-0.5 * np.sum(local * local, axis=-1))


def fov_limits(intrinsics, clamp=FOV_CLAMP):
    return clamp * 0.5 * intrinsics.width / intrinsics.fx, clamp * 0.5 * intrinsics.height / intrinsics.fy


def projection_jacobian(intrinsics, p_cam, clamp=None):
    """2x3 Jacobian of the pinhole projection at camera-frame points ``(..., 3)``.

    With ``clamp`` (e.g. :data:`FOV_CLAMP`) the off-axis ratios ``x/z`` and
    ``y/z`` in the last column are clipped to that many half fields of view.
    """
    x, y, z = np.moveaxis(np.asarray(p_cam, dtype=np.float64), -1, 0)
    xz, yz = x / z, y / z
    if clamp is not None:
        lx, ly = fov_limits(intrinsics, clamp)
        xz, yz = np.clip(xz, -lx, lx), np.clip(yz, -ly, ly)
    J = np.zeros(np.shape(x) + (2, 3))
    J[..., 0, 0] = intrinsics.fx / z
    J[..., 0, 2] = -intrinsics.fx * xz / z
    J[..., 1, 1] = intrinsics.fy / z
    J[..., 1, 2] = -intrinsics.fy * yz / z
    return J


def project_covariance(g, camera, clamp=None):
    """Screen-space footprint of one Gaussian.

    Returns ``(mean2d, cov2d, depth, visible)``. When the mean is at or behind the
    near plane the Gaussian is culled: ``visible`` is False and ``mean2d`` /
    ``cov2d`` are NaN. ``clamp`` is passed on to :func:`projection_jacobian`.
    """
    p_cam = camera.world_to_camera(g.mean)
    z = p_cam[2]
    if not z > NEAR_PLANE:
        return np.full(2, np.nan), np.full((2, 2), np.nan), float(z), False
    k = camera.intrinsics
    W = camera.pose.rotation.T
    J = projection_jacobian(k, p_cam, clamp)
    T = J @ W
    cov2d = T @ g.covariance @ T.T
    mean2d = np.array([k.fx * p_cam[0] / z + k.cx, k.fy * p_cam[1] / z + k.cy])
    return mean2d, 0.5 * (cov2d + cov2d.T), float(z), True


# ---------------------------------------------------------------------------
# Gaussian sets


@dataclass(eq=False)
class GaussianSet:
    """Structure-of-arrays collection of Gaussians.

    ``scales`` and ``rotations`` may be read-only broadcast views when every
    Gaussian shares them (voxel-vertex splats do).
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = _as_rows(self.scales, n, 3)
        self.rotations = _as_rows(self.rotations, n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(n, -1)

    def __len__(self):
        return len(self.means)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def __getitem__(self, i):
        return Gaussian3D(
            self.means[i], self.scales[i], self.rotations[i], float(self.opacities[i]), self.features[i]
        )

    def subset(self, index):
        return GaussianSet(
            self.means[index],
            np.array(self.scales[index]),
            np.array(self.rotations[index]),
            self.opacities[index],
            self.features[index],
        )

    def copy(self):
        return GaussianSet(
            self.means.copy(), np.array(self.scales), np.array(self.rotations),
            self.opacities.copy(), self.features.copy(),
        )

    @classmethod
    def concatenate(cls, sets):
        sets = list(sets)
        n = sum(len(s) for s in sets)
        return cls(
            np.concatenate([s.means for s in sets]),
            _concat_rows([s.scales for s in sets], n),
            _concat_rows([s.rotations for s in sets], n),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate([s.features for s in sets]),
        )

    def covariances(self):
        return build_covariance(self.scales, self.rotations)


def _concat_rows(parts, n):
    """Concatenate row arrays, staying a broadcast view when every part shares one row."""
    parts = [p for p in parts if len(p)]
    if parts and all(p.strides[0] == 0 for p in parts) and all(np.array_equal(p[0], parts[0][0]) for p in parts):
        return np.broadcast_to(parts[0][0], (n, parts[0].shape[1]))
    return np.concatenate([np.asarray(p) for p in parts]) if parts else np.zeros((0, 3))


def _as_rows(a, n, k):
    a = np.asarray(a, dtype=np.float64)
    if a.shape == (n, k):
        return a
    return np.broadcast_to(a.reshape(-1, k), (n, k))


_GSPL_MAGIC = b"GSPL"


def save_gaussians(gs, path):
    """Binary layout: ``GSPL``, u32 count, u32 feature dim, then per Gaussian the
    little-endian f32 fields mean(3), scale(3), rotation(4), opacity(1), feature(C)."""
    n, c = len(gs), gs.feature_dim
    rec = np.empty((n, 11 + c), dtype="<f4")
    rec[:, 0:3] = gs.means
    rec[:, 3:6] = gs.scales
    rec[:, 6:10] = gs.rotations
    rec[:, 10] = gs.opacities
    rec[:, 11:] = gs.features
    with open(path, "wb") as f:
        f.write(_GSPL_MAGIC)
        f.write(struct.pack("<II", n, c))
        f.write(rec.tobytes())


def load_gaussians(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != _GSPL_MAGIC:
        raise FormatError("not a GSPL file")
    n, c = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * n * (11 + c)
    if len(data) != expected:
        raise FormatError(f"GSPL payload size {len(data)} != expected {expected}")
    rec = np.frombuffer(data[12:], dtype="<f4").reshape(n, 11 + c).astype(np.float64)
    return GaussianSet(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:])
