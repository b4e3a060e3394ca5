"""Voxel grids, analytic synthetic scenes and their ray-cast ground truth."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, PreconditionError, UnsupportedVersionError
from .geometry import camera_rays, pixel_grid

DEFAULT_BOUNDS = ((-8.0, -8.0, -1.0), (8.0, 8.0, 3.0))
#: 80 x 80 x 20 cells of 0.2 m over the default bounds.
DEFAULT_DIMS = (81, 81, 21)
DEFAULT_CLASSES = 4
FREE, GROUND, OBSTACLE_A, OBSTACLE_B = range(4)

OCCUPIED_LOGIT = 10.0
FREE_LOGIT = -10.0


# ---------------------------------------------------------------------------
# Voxel grid


@dataclass(eq=False)
class VoxelGrid:
    """Per-vertex opacity and semantic logits over an axis-aligned box.

    Arrays are indexed ``[ix, iy, iz]`` (semantics ``[ix, iy, iz, c]``) and kept
    in float32, which is also the on-disk precision.
    """

    bounds: tuple
    opacity_logits: np.ndarray
    semantic_logits: np.ndarray

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in self.bounds)
        if np.any(lo >= hi):
            raise ConfigurationError("grid bounds must satisfy min < max on every axis")
        self.bounds = (lo, hi)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float32)
        self.semantic_logits = np.asarray(self.semantic_logits, dtype=np.float32)
        if self.opacity_logits.ndim != 3 or min(self.opacity_logits.shape) < 2:
            raise ConfigurationError("grid needs at least 2 vertices per axis")
        if self.semantic_logits.shape[:3] != self.opacity_logits.shape or self.semantic_logits.ndim != 4:
            raise ConfigurationError("semantic logits must be (Nx, Ny, Nz, C)")

    @classmethod
    def filled(cls, dims=DEFAULT_DIMS, bounds=DEFAULT_BOUNDS, num_classes=DEFAULT_CLASSES,
               opacity_logit=FREE_LOGIT, semantic_logit=0.0):
        dims = tuple(int(d) for d in dims)
        return cls(
            bounds,
            np.full(dims, opacity_logit, dtype=np.float32),
            np.full(dims + (num_classes,), semantic_logit, dtype=np.float32),
        )

    @property
    def dims(self):
        return self.opacity_logits.shape

    @property
    def num_classes(self):
        return self.semantic_logits.shape[-1]

    @property
    def num_vertices(self):
        return int(np.prod(self.dims))

    @property
    def spacing(self):
        lo, hi = self.bounds
        return (hi - lo) / (np.asarray(self.dims) - 1)

    @property
    def edge(self):
        """Mean voxel edge length in meters."""
        return float(np.mean(self.spacing))

    def axes(self):
        lo, hi = self.bounds
        return [np.linspace(lo[k], hi[k], self.dims[k]) for k in range(3)]

    def vertex_positions(self):
        """``(Nx, Ny, Nz, 3)`` world positions of the vertices."""
        xs, ys, zs = self.axes()
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)

    def opacity(self):
        return _sigmoid(self.opacity_logits.astype(np.float64))

    def semantic_probs(self):
        return _softmax(self.semantic_logits.astype(np.float64))

    def copy(self):
        return VoxelGrid(self.bounds, self.opacity_logits.copy(), self.semantic_logits.copy())

    def labels(self, threshold=0.5):
        """Per-vertex class: argmax semantics where occupied, else free space."""
        occ = self.opacity() >= threshold
        return np.where(occ, np.argmax(self.semantic_logits, axis=-1), FREE)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


_VOXG_MAGIC = b"VOXG"
_VOXG_VERSION = 1


def save_grid(grid, path):
    """``VOXG``, u32 version, u32 Nx Ny Nz C, f64 x6 bounds, then opacity logits and
    per-vertex semantic logit vectors as little-endian f32, x fastest."""
    nx, ny, nz = grid.dims
    header = _VOXG_MAGIC + struct.pack("<5I", _VOXG_VERSION, nx, ny, nz, grid.num_classes)
    header += struct.pack("<6d", *grid.bounds[0], *grid.bounds[1])
    opacity = np.asarray(grid.opacity_logits, dtype="<f4").transpose(2, 1, 0)
    semantic = np.asarray(grid.semantic_logits, dtype="<f4").transpose(2, 1, 0, 3)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(opacity).tobytes())
        f.write(np.ascontiguousarray(semantic).tobytes())


def load_grid(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 24 or data[:4] != _VOXG_MAGIC:
        raise FormatError("not a VOXG grid file")
    version, nx, ny, nz, c = struct.unpack("<5I", data[4:24])
    if version != _VOXG_VERSION:
        raise UnsupportedVersionError(f"unsupported VOXG version {version}")
    if min(nx, ny, nz) < 2 or c < 1:
        raise FormatError("invalid grid dimensions")
    if len(data) < 72:
        raise FormatError("truncated VOXG header")
    b = struct.unpack("<6d", data[24:72])
    n = nx * ny * nz
    expected = 72 + 4 * n * (1 + c)
    if len(data) != expected:
        raise FormatError(f"VOXG payload size {len(data)} != expected {expected}")
    payload = np.frombuffer(data[72:], dtype="<f4")
    opacity = payload[:n].reshape(nz, ny, nx).transpose(2, 1, 0)
    semantic = payload[n:].reshape(nz, ny, nx, c).transpose(2, 1, 0, 3)
    try:
        return VoxelGrid((b[:3], b[3:]), opacity.astype(np.float32), semantic.astype(np.float32))
    except ConfigurationError as exc:
        raise FormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Analytic primitives


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    label: int = OBSTACLE_A

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = np.einsum("...k,...k->...", dirs, dirs)
        b = 2.0 * np.einsum("...k,k->...", dirs, oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        return np.where(hit, t, np.inf)

    def to_json(self):
        return {"type": "sphere", "center": list(map(float, self.center)),
                "radius": float(self.radius), "label": int(self.label)}


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    yaw: float = 0.0
    label: int = OBSTACLE_B

    def _local(self, p):
        return (p - np.asarray(self.center)) @ _yaw_matrix(self.yaw)

    def sdf(self, p):
        q = np.abs(self._local(p)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def intersect(self, origin, dirs):
        Rz = _yaw_matrix(self.yaw)
        o = (origin - np.asarray(self.center)) @ Rz
        d = dirs @ Rz
        h = np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        # axis-parallel rays outside the slab never hit; inside they impose no bound
        parallel = d == 0
        inside_slab = np.abs(o) <= h
        t1 = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t2)
        tmin = np.minimum(t1, t2).max(axis=-1)
        tmax = np.maximum(t1, t2).min(axis=-1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(hit, t, np.inf)

    def to_json(self):
        return {"type": "box", "center": list(map(float, self.center)),
                "half_extents": list(map(float, self.half_extents)),
                "yaw": float(self.yaw), "label": int(self.label)}


@dataclass(frozen=True)
class GroundPlane:
    """Solid half-space ``z <= height`` limited to an x/y extent."""

    height: float = 0.0
    label: int = GROUND
    extent: tuple = (DEFAULT_BOUNDS[0][0], DEFAULT_BOUNDS[0][1], DEFAULT_BOUNDS[1][0], DEFAULT_BOUNDS[1][1])

    def _inside_xy(self, p):
        x0, y0, x1, y1 = self.extent
        return (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)

    def sdf(self, p):
        d = p[..., 2] - self.height
        return np.where(self._inside_xy(p), d, np.maximum(d, 1e3))

    def intersect(self, origin, dirs):
        dz = dirs[..., 2]
        if origin[2] <= self.height:
            return np.full(dirs.shape[:-1], np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.height - origin[2]) / dz
        t = np.where(dz < 0, t, np.inf)
        hit_pt = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        return np.where(np.isfinite(t) & self._inside_xy(hit_pt), t, np.inf)

    def to_json(self):
        return {"type": "ground", "height": float(self.height), "label": int(self.label),
                "extent": list(map(float, self.extent))}


def primitive_from_json(d):
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]), int(d.get("label", OBSTACLE_A)))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["half_extents"]), float(d.get("yaw", 0.0)),
                   int(d.get("label", OBSTACLE_B)))
    if kind == "ground":
        extent = tuple(d.get("extent", GroundPlane().extent))
        return GroundPlane(float(d["height"]), int(d.get("label", GROUND)), extent)
    raise FormatError(f"unknown primitive type {kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    num_classes: int = DEFAULT_CLASSES
    sky_color: tuple = field(default=(0.55, 0.65, 0.8))

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if self.num_classes < 2:
            raise ConfigurationError("a scene needs free space plus at least one class")
        for p in self.primitives:
            if not 0 <= p.label < self.num_classes:
                raise ConfigurationError(f"label {p.label} outside [0, {self.num_classes})")
            if isinstance(p, Sphere) and not p.radius > 0:
                raise ConfigurationError("sphere radius must be positive")
            if isinstance(p, Box) and not min(p.half_extents) > 0:
                raise ConfigurationError("box extents must be positive")

    def to_json(self):
        return [p.to_json() for p in self.primitives]

    @classmethod
    def from_json(cls, data, num_classes=DEFAULT_CLASSES):
        try:
            prims = tuple(primitive_from_json(d) for d in data)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed scene: {exc}") from exc
        labels = [p.label for p in prims]
        return cls(prims, max([num_classes] + [l + 1 for l in labels]))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# Scene generation


def generate_scene(seed, difficulty="simple", bounds=DEFAULT_BOUNDS, ground_height=0.1,
                   num_classes=DEFAULT_CLASSES):
    """Ground plane plus randomly placed spheres and boxes, deterministic in ``seed``.

    ``simple`` has 1-3 objects, ``cluttered`` 8-15. Objects rest on the ground,
    stay inside ``bounds`` and keep clear of a 2.5 m radius around the origin
    where the camera rig sits.
    """
    if difficulty == "simple":
        count_range = (1, 3)
    elif difficulty == "cluttered":
        count_range = (8, 15)
    else:
        raise ConfigurationError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    prims = [GroundPlane(ground_height, GROUND, (lo[0], lo[1], hi[0], hi[1]))]
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    top = hi[2] - 0.2
    for _ in range(n):
        label = int(rng.integers(OBSTACLE_A, num_classes))
        for _attempt in range(100):
            r_xy = rng.uniform(3.0, 7.0)
            phi = rng.uniform(0, 2 * np.pi)
            x, y = r_xy * np.cos(phi), r_xy * np.sin(phi)
            if rng.random() < 0.5:
                radius = rng.uniform(0.5, 1.1)
                cz = ground_height + radius * rng.uniform(0.4, 0.9)
                if cz + radius > top:
                    continue
                prim = Sphere((x, y, cz), radius, label)
                extent = radius
            else:
                h = (rng.uniform(0.4, 1.1), rng.uniform(0.4, 1.1), rng.uniform(0.3, 1.2))
                cz = ground_height + h[2] - rng.uniform(0.0, 0.2)
                if cz + h[2] > top:
                    continue
                prim = Box((x, y, cz), h, float(rng.uniform(0, np.pi)), label)
                extent = float(np.hypot(h[0], h[1]))
            if (
                np.hypot(x, y) - extent > 2.5
                and lo[0] + extent < x < hi[0] - extent
                and lo[1] + extent < y < hi[1] - extent
            ):
                prims.append(prim)
                break
    return SceneSpec(tuple(prims), num_classes)


# ---------------------------------------------------------------------------
# Ray casting and voxelization


def _cast(scene, origin, dirs):
    """Nearest hit parameter and primitive index per ray (``inf`` / -1 on a miss)."""
    if not scene.primitives:
        shape = dirs.shape[:-1]
        return np.full(shape, np.inf), np.full(shape, -1)
    ts = np.stack([p.intersect(origin, dirs) for p in scene.primitives], axis=0)
    idx = np.argmin(ts, axis=0)
    t = np.take_along_axis(ts, idx[None], axis=0)[0]
    return t, np.where(np.isfinite(t), idx, -1)


def raycast_gt(scene, camera, size=None):
    """Exact depth (camera-frame z) and semantic labels by analytic ray casting.

    Returns ``(DepthMap, labels)``; misses are invalid depth with the free-space label.
    """
    from .geometry import DepthMap

    h, w = camera.shape if size is None else size
    if (h, w) != camera.shape:
        camera = camera.__class__(camera.intrinsics.scaled(w / camera.intrinsics.width), camera.pose)
    rays = camera_rays(camera, pixel_grid(h, w))
    dirs = rays @ camera.pose.rotation.T
    # rays have unit camera-z, so the hit parameter is the depth
    t, idx = _cast(scene, camera.center, dirs)
    labels = np.zeros((h, w), dtype=np.int64)
    hit = idx >= 0
    if hit.any():
        lab = np.array([p.label for p in scene.primitives])
        labels[hit] = lab[idx[hit]]
    return DepthMap(np.where(hit, t, 0.0), hit), labels


def hit_points(scene, camera):
    """World-space hit points and primitive indices for every pixel of ``camera``."""
    h, w = camera.shape
    rays = camera_rays(camera, pixel_grid(h, w))
    dirs = rays @ camera.pose.rotation.T
    t, idx = _cast(scene, camera.center, dirs)
    pts = camera.center + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    return pts, idx


_PALETTE = np.array(
    [[0.55, 0.65, 0.80], [0.55, 0.50, 0.42], [0.80, 0.35, 0.30], [0.30, 0.45, 0.80],
     [0.40, 0.70, 0.35], [0.75, 0.70, 0.30]]
)


def _texture(points, prim_index, label):
    """View-independent procedural albedo on a primitive's surface."""
    rng = np.random.default_rng(1000 + prim_index)
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # wavelengths between ~0.5 m and ~2.5 m
    freqs = 2 * np.pi / rng.uniform(0.5, 2.5, size=5)
    phase = rng.uniform(0, 2 * np.pi, size=5)
    wave = np.sin(points @ (dirs * freqs[:, None]).T + phase).mean(axis=-1)
    shade = 0.6 + 0.55 * wave
    base = _PALETTE[label % len(_PALETTE)]
    tint = rng.uniform(-0.1, 0.1, size=3)
    return np.clip((base + tint) * shade[..., None], 0.0, 1.0)


def render_image(scene, camera, supersample=3):
    """Shade the scene with procedural textures; misses show the sky color."""
    h, w = camera.shape
    s = int(supersample)
    offsets = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros((h, w, 3))
    base = pixel_grid(h, w)
    for oy in offsets:
        for ox in offsets:
            rays = camera_rays(camera, base + np.array([ox, oy]))
            dirs = rays @ camera.pose.rotation.T
            t, idx = _cast(scene, camera.center, dirs)
            pts = camera.center + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
            color = np.broadcast_to(np.asarray(scene.sky_color, dtype=float), (h, w, 3)).copy()
            for k, prim in enumerate(scene.primitives):
                sel = idx == k
                if sel.any():
                    color[sel] = _texture(pts[sel], k, prim.label)
            acc += color
    return acc / (s * s)


def scene_sdf(scene, points):
    """Stacked signed distances ``(P, ...)`` of ``points`` to every primitive."""
    return np.stack([p.sdf(points) for p in scene.primitives], axis=0)


def voxelize(scene, grid_shape=DEFAULT_DIMS, bounds=DEFAULT_BOUNDS, tol=1e-9):
    """Ground-truth grid: vertices inside any primitive get +10 opacity logit and a
    one-hot (+10 / -10) semantic logit for the deepest containing primitive."""
    grid = VoxelGrid.filled(grid_shape, bounds, scene.num_classes, FREE_LOGIT, FREE_LOGIT)
    pts = grid.vertex_positions()
    labels = np.full(grid.dims, FREE, dtype=np.int64)
    if scene.primitives:
        # chunk over x slices to bound memory on large grids
        for ix in range(grid.dims[0]):
            sd = scene_sdf(scene, pts[ix])
            deepest = np.argmin(sd, axis=0)
            inside = np.take_along_axis(sd, deepest[None], axis=0)[0] <= tol
            lab = np.array([p.label for p in scene.primitives])[deepest]
            labels[ix] = np.where(inside, lab, FREE)
    occ = labels != FREE
    grid.opacity_logits[occ] = OCCUPIED_LOGIT
    sem = np.full(grid.dims + (scene.num_classes,), FREE_LOGIT, dtype=np.float32)
    np.put_along_axis(sem, labels[..., None], OCCUPIED_LOGIT, axis=-1)
    grid.semantic_logits = sem
    return grid


def membership_labels(scene, points, tol=1e-9):
    """Class label of arbitrary points (free space where outside every primitive)."""
    points = np.asarray(points, dtype=np.float64)
    if not scene.primitives:
        return np.zeros(points.shape[:-1], dtype=np.int64)
    sd = scene_sdf(scene, points)
    deepest = np.argmin(sd, axis=0)
    inside = np.take_along_axis(sd, deepest[None], axis=0)[0] <= tol
    lab = np.array([p.label for p in scene.primitives])[deepest]
    return np.where(inside, lab, FREE)


def observed_mask(grid, cameras, depth_maps, margin=None):
    """Vertices seen by at least one camera: inside its image, and no deeper than
    the ground-truth surface at that pixel plus ``margin`` (one voxel diagonal by
    default). Vertices behind a miss (sky) pixel are observed as free space."""
    if margin is None:
        margin = float(np.linalg.norm(grid.spacing))
    pts = grid.vertex_positions().reshape(-1, 3)
    seen = np.zeros(len(pts), dtype=bool)
    for cam, dm in zip(cameras, depth_maps):
        pc = cam.world_to_camera(pts)
        z = pc[:, 2]
        front = z > 1e-6
        k = cam.intrinsics
        zs = np.where(front, z, 1.0)
        u = np.rint(k.fx * pc[:, 0] / zs + k.cx).astype(np.int64)
        v = np.rint(k.fy * pc[:, 1] / zs + k.cy).astype(np.int64)
        inside = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        ui, vi = u[inside], v[inside]
        d = dm.values[vi, ui]
        hit = dm.valid[vi, ui]
        ok = np.where(hit, z[inside] <= d + margin, True)
        idx = np.nonzero(inside)[0][ok]
        seen[idx] = True
    return seen.reshape(grid.dims)


def check_finite(grid):
    if not (np.all(np.isfinite(grid.opacity_logits)) and np.all(np.isfinite(grid.semantic_logits))):
        raise PreconditionError("grid logits must be finite")
