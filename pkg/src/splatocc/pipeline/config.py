"""Fit configuration and run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from ..errors import ConfigurationError

STAGES = ("stage1", "stage2")
RENDERERS = ("splat", "volume")
SUPERVISION = ("oracle", "stage1")
CROSS_REGIONS = ("image", "overlap")
DEFAULT_LR = {"stage1": 1e-2, "stage2": 5e-2}


@dataclass(frozen=True)
class FitConfig:
    stage: str = "stage1"
    iterations: int = 300
    learning_rate: float | None = None
    renderer: str = "splat"
    beta: float = 0.85
    erosion_radius: int = 4
    use_mask: bool = True
    use_erode: bool = True
    refine_iterations: int = 100
    gsv_scale: float = 0.1
    seed: int = 0
    # loss weights
    temporal_weight: float = 1.0
    cross_weight: float = 1.0
    semantic_weight: float = 1.0
    depth_weight: float = 1.0
    tv_weight: float = 1e-2
    # stage 1
    pose_learning_rate: float | None = None
    depth_init_scale: float = 2.0
    pose_init_scale: float = 2.0
    depth_downsample: int = 16
    pixel_gaussian_scale: float = 0.02
    cross_accum_min: float = 0.5
    cross_region: str = "overlap"
    overlap_samples: int = 64
    overlap_near: float = 0.5
    overlap_far: float = 20.0
    # stage 2
    supervision: str = "oracle"
    views_per_step: int = 1
    samples_per_ray: int = 128
    near: float = 0.3
    far: float = 14.0
    density_scale: float = 10.0
    init_opacity_logit: float = -4.0
    occupancy_threshold: float = 0.1
    grid_dims: tuple = (81, 81, 21)
    grid_bounds: tuple = ((-8.0, -8.0, -1.0), (8.0, 8.0, 3.0))
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}")
        if self.renderer not in RENDERERS:
            raise ConfigurationError(f"renderer must be one of {RENDERERS}")
        if self.cross_region not in CROSS_REGIONS:
            raise ConfigurationError(f"cross_region must be one of {CROSS_REGIONS}")
        if self.supervision not in SUPERVISION:
            raise ConfigurationError(f"supervision must be one of {SUPERVISION}")
        if self.iterations <= 0:
            raise ConfigurationError("iterations must be > 0")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not self.gsv_scale > 0:
            raise ConfigurationError("gsv_scale must be > 0")
        if self.refine_iterations < 0 or self.erosion_radius < 0:
            raise ConfigurationError("refine_iterations and erosion_radius must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError("beta must lie in [0, 1]")
        if not 0.0 < self.occupancy_threshold < 1.0:
            raise ConfigurationError("occupancy_threshold must lie in (0, 1)")
        if self.depth_downsample < 1 or self.views_per_step < 1:
            raise ConfigurationError("depth_downsample and views_per_step must be >= 1")
        object.__setattr__(self, "grid_dims", tuple(int(d) for d in self.grid_dims))
        object.__setattr__(self, "grid_bounds", tuple(tuple(float(v) for v in b) for b in self.grid_bounds))

    @property
    def lr(self):
        return DEFAULT_LR[self.stage] if self.learning_rate is None else self.learning_rate

    @property
    def pose_lr(self):
        return self.lr if self.pose_learning_rate is None else self.pose_learning_rate

    def to_json(self):
        d = asdict(self)
        d["grid_dims"] = list(self.grid_dims)
        d["grid_bounds"] = [list(b) for b in self.grid_bounds]
        return d

    @classmethod
    def from_json(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                return cls.from_json(json.load(f))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc

    def with_(self, **kw):
        return replace(self, **kw)

    def digest(self):
        return hashlib.sha256(canonical_json(self.to_json()).encode()).hexdigest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def array_digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def build_manifest(command, cfg, metrics, state_arrays, extra=None):
    """Manifest dict: config and its hash, seed, metrics, digest of the final state."""
    out = {
        "command": command,
        "config": cfg.to_json() if cfg is not None else None,
        "config_hash": cfg.digest() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "metrics": metrics,
        "state_sha256": array_digest(*state_arrays),
    }
    if extra:
        out.update(extra)
    return out
