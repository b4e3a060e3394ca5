"""Synthetic captures: a surround rig observing a scene at two ego positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose
from ..voxel_scene import FREE, raycast_gt, render_image

#: Ego motion between the two frames: straight ahead, no rotation. A pure
#: translation leaves the temporal loss exactly scale-ambiguous, so metric
#: scale has to come from the cross-view term.
DEFAULT_EGO_MOTION = Pose(np.eye(3), (0.6, 0.0, 0.0))


@dataclass(eq=False)
class Capture:
    rig: object  # cameras at frame t (world frame = ego frame at t)
    rig_next: object  # same cameras at frame t+1
    ego_motion: Pose
    images: list
    images_next: list
    depth: list  # ground-truth DepthMap per camera at t
    labels: list
    depth_next: list
    labels_next: list

    @property
    def sky(self):
        return [lab == FREE for lab in self.labels]


def capture(scene, rig, ego_motion=None):
    ego = DEFAULT_EGO_MOTION if ego_motion is None else ego_motion
    rig_next = rig.moved(ego)
    images, depth, labels = [], [], []
    images_next, depth_next, labels_next = [], [], []
    for cam, cam_next in zip(rig.cameras, rig_next.cameras):
        images.append(render_image(scene, cam))
        images_next.append(render_image(scene, cam_next))
        d, lab = raycast_gt(scene, cam)
        depth.append(d)
        labels.append(lab)
        d, lab = raycast_gt(scene, cam_next)
        depth_next.append(d)
        labels_next.append(lab)
    return Capture(rig, rig_next, ego, images, images_next, depth, labels, depth_next, labels_next)
