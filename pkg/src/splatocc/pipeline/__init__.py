"""Fitting pipeline: synthetic capture, the two fitting stages, controls, benchmark."""

from .bench import BenchEntry, BenchReport, bench_grid, benchmark
from .config import FitConfig, array_digest, build_manifest, canonical_json
from .data import Capture, capture
from .onestage import OneStageResult, fit_one_stage
from .stage1 import Stage1State, fit_stage1
from .stage2 import Renderer, Stage2Result, evaluate_grid, fit_stage2, format_sweep, scale_sweep

__all__ = [
    "BenchEntry", "BenchReport", "Capture", "FitConfig", "OneStageResult", "Renderer", "Stage1State",
    "Stage2Result", "array_digest", "bench_grid", "benchmark", "build_manifest", "canonical_json", "capture",
    "evaluate_grid", "fit_one_stage", "fit_stage1", "fit_stage2", "format_sweep", "scale_sweep",
]
