"""Stage-1 depth with and without mask-out, erosion and the refine phase.

Prints one row per variant: abs_rel before and after refinement and the
median relative error. Takes a few minutes per row on one core.
"""

import argparse

from splatocc.geometry import surround_rig
from splatocc.pipeline import FitConfig, capture, fit_stage1
from splatocc.voxel_scene import generate_scene

VARIANTS = {
    "mask + erode": {},
    "mask only": {"use_erode": False},
    "no mask": {"use_mask": False},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=400)
    ap.add_argument("--refine", type=int, default=50)
    args = ap.parse_args()

    scene, rig = generate_scene(args.seed), surround_rig()
    data = capture(scene, rig)
    base = FitConfig(iterations=args.iterations, refine_iterations=args.refine, seed=args.seed)
    print(f"{'variant':<14} {'abs_rel (no refine)':>20} {'abs_rel':>9} {'median rel':>11}")
    for name, kw in VARIANTS.items():
        state, m = fit_stage1(scene, rig, base.with_(**kw), data=data)
        print(f"{name:<14} {state.metrics_before_refine.abs_rel:20.4f} {m.abs_rel:9.4f} {m.median_rel:11.4f}")


if __name__ == "__main__":
    main()
