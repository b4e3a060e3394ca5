"""Render-time benchmark: vertex splatting against ray-marched volume rendering."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..splat import splat_forward, voxel_to_gaussians
from ..volume import RaySamplingConfig, activate, sample_count, volume_forward
from ..voxel_scene import VoxelGrid, voxelize

#: Grid used for the headline comparison: 320 x 320 x 24 vertices at 0.2 m.
BENCH_DIMS = (320, 320, 24)
BENCH_BOUNDS = ((-32.0, -32.0, -1.0), (31.8, 31.8, 3.6))
BENCH_RESOLUTIONS = ((180, 320), (360, 640))
FLOAT_BYTES = 4


@dataclass
class BenchEntry:
    renderer: str
    height: int
    width: int
    seconds: float  # median over repeats, all cameras of one frame
    times: list
    pixels: int
    work_units: int  # ray samples (volume) or Gaussians (splat) per frame
    peak_bytes_estimate: int

    @property
    def label(self):
        return f"{self.height}x{self.width}"


@dataclass
class BenchReport:
    entries: list = field(default_factory=list)
    grid_dims: tuple = ()
    n_cameras: int = 0
    samples_per_ray: int = 0
    repeats: int = 0

    def get(self, renderer, height, width):
        for e in self.entries:
            if (e.renderer, e.height, e.width) == (renderer, height, width):
                return e
        raise KeyError((renderer, height, width))

    def speedup(self, height, width):
        """Volume time over splat time at one resolution."""
        return self.get("volume", height, width).seconds / self.get("splat", height, width).seconds

    def growth(self, renderer, low, high):
        return self.get(renderer, *high).seconds / self.get(renderer, *low).seconds

    def to_json(self):
        return {
            "grid_dims": list(self.grid_dims),
            "n_cameras": self.n_cameras,
            "samples_per_ray": self.samples_per_ray,
            "repeats": self.repeats,
            "entries": [asdict(e) for e in self.entries],
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=2)

    def table(self):
        lines = [f"{'renderer':<8} {'resolution':>10} {'median s':>9} {'work units':>12} {'est. peak MB':>12}"]
        for e in self.entries:
            lines.append(f"{e.renderer:<8} {e.label:>10} {e.seconds:9.3f} {e.work_units:12,d} "
                         f"{e.peak_bytes_estimate / 2**20:12.1f}")
        return "\n".join(lines)


def bench_grid(scene, dims=BENCH_DIMS, bounds=BENCH_BOUNDS):
    return voxelize(scene, dims, bounds)


def _peak_estimate(renderer, grid, n_cameras, height, width, samples_per_ray):
    """Bytes a batched float32 implementation would hold at once for one frame.

    Volume: every ray sample with its position, density and class vector.
    Splat: every vertex Gaussian (mean, scale, quaternion, opacity, features)
    plus the per-camera images.
    """
    C = grid.num_classes
    if renderer == "volume":
        return n_cameras * height * width * samples_per_ray * (3 + 1 + C) * FLOAT_BYTES
    per_gaussian = 3 + 3 + 4 + 1 + C
    return grid.num_vertices * per_gaussian * FLOAT_BYTES + n_cameras * height * width * (C + 2) * FLOAT_BYTES


def _time_frame(renderer, grid, cameras, size, ray_cfg, gsv_scale):
    t0 = time.perf_counter()
    if renderer == "splat":
        # activation (sigmoid / softmax over every vertex) is part of the frame cost
        gs = voxel_to_gaussians(grid, gsv_scale)
        for cam in cameras:
            splat_forward(gs, cam, size)
    else:
        act = activate(grid)
        for cam in cameras:
            volume_forward(grid, cam, size, ray_cfg, activated=act)
    return time.perf_counter() - t0


def benchmark(grid: VoxelGrid, rig, resolutions=BENCH_RESOLUTIONS, samples_per_ray=128, repeats=5,
              near=0.5, far=40.0, gsv_scale=0.1, renderers=("splat", "volume"), log=None):
    """Median wall-clock time to render every rig camera once, per backend and resolution.

    One untimed warm-up frame per configuration absorbs JIT compilation.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    ray_cfg = RaySamplingConfig(samples_per_ray, near, far)
    cams = rig.cameras
    report = BenchReport([], tuple(grid.dims), len(cams), samples_per_ray, repeats)
    for h, w in resolutions:
        for renderer in renderers:
            _time_frame(renderer, grid, cams[:1], (h, w), ray_cfg, gsv_scale)
            times = [_time_frame(renderer, grid, cams, (h, w), ray_cfg, gsv_scale) for _ in range(repeats)]
            units = (sample_count((h, w), ray_cfg, len(cams)) if renderer == "volume" else grid.num_vertices)
            entry = BenchEntry(renderer, h, w, float(np.median(times)), [float(t) for t in times],
                               len(cams) * h * w, int(units),
                               int(_peak_estimate(renderer, grid, len(cams), h, w, samples_per_ray)))
            report.entries.append(entry)
            if log is not None:
                log(f"bench {renderer} {h}x{w}: median {entry.seconds:.3f}s over {repeats}")
    return report
