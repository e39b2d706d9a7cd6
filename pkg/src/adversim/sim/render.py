"""Synthetic multi-camera rendering.

Cameras look straight down.  Each scene entity is drawn as a filled disc
into its own semantic channel under a weak-perspective projection: pixel
offset and disc radius scale with focal length over depth.  Channel order
is alphabetical within entity class (object kinds, then container colors,
then the end-effector marker) so layouts are stable regardless of scene
construction order.

A channel reports an entity only while the entity's *center* projects
inside the frame: a detector that has lost the center of its target has
no usable fix, so the channel goes blank rather than painting an edge
crescent.  This gives channel emptiness a sharp geometric meaning — the
target is outside the camera's working cone — independent of the
entity's physical extent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..config import CameraSpec
from ..errors import ConfigError
from .state import SceneState

__all__ = ["Observation", "render", "observe", "semantic_channels", "EEF_MARKER_RADIUS"]

EEF_MARKER_RADIUS = 0.02

# entities closer to the camera plane than this are not drawn
_MIN_DEPTH = 0.03


def semantic_channels(scene: SceneState) -> tuple[str, ...]:
    """Stable channel names for a scene: kinds, colors, then ``eef``."""
    kinds = sorted({o.kind for o in scene.objects})
    colors = sorted({c.color for c in scene.containers})
    return tuple(kinds) + tuple(colors) + ("eef",)


def _camera_pose(scene: SceneState, cam: CameraSpec) -> tuple[float, float, float, float]:
    if cam.mount == "fixed":
        return (cam.x, cam.y, cam.z, cam.yaw)
    eef = scene.eef
    # rigid offset expressed in the end-effector frame
    c, s = math.cos(eef.yaw), math.sin(eef.yaw)
    return (
        eef.x + c * cam.x - s * cam.y,
        eef.y + s * cam.x + c * cam.y,
        eef.z + cam.z,
        eef.yaw + cam.yaw,
    )


def _draw_disc(channel: np.ndarray, u: float, v: float, r_px: float) -> None:
    """Filled disc with a one-pixel linear edge ramp.

    The soft edge keeps the intensity-weighted centroid accurate to a small
    fraction of a pixel, so pooled image features move smoothly with the
    underlying geometry instead of jumping one pixel at a time."""
    h, w = channel.shape
    r = max(r_px, 0.5)
    lo_u = max(int(math.floor(u - r - 1.0)), 0)
    hi_u = min(int(math.ceil(u + r + 1.0)), w - 1)
    lo_v = max(int(math.floor(v - r - 1.0)), 0)
    hi_v = min(int(math.ceil(v + r + 1.0)), h - 1)
    if lo_u > hi_u or lo_v > hi_v:
        return
    us = np.arange(lo_u, hi_u + 1, dtype=np.float64)
    vs = np.arange(lo_v, hi_v + 1, dtype=np.float64)
    dist = np.sqrt((us[None, :] - u) ** 2 + (vs[:, None] - v) ** 2)
    coverage = np.clip(r + 0.5 - dist, 0.0, 1.0)
    patch = channel[lo_v : hi_v + 1, lo_u : hi_u + 1]
    np.maximum(patch, np.round(coverage * 255.0).astype(np.uint8), out=patch)


def render(scene: SceneState, camera: CameraSpec | str) -> np.ndarray:
    """Render one camera to a (channels, height, width) uint8 grid."""
    if isinstance(camera, str):
        for c in scene.workspace.cameras:
            if c.name == camera:
                camera = c
                break
        else:
            raise ConfigError(f"unknown camera {camera!r}")
    channels = semantic_channels(scene)
    index = {name: i for i, name in enumerate(channels)}
    img = np.zeros((len(channels), camera.height, camera.width), dtype=np.uint8)

    cx, cy, cz, cyaw = _camera_pose(scene, camera)
    cos_y, sin_y = math.cos(cyaw), math.sin(cyaw)
    half_u = (camera.width - 1) / 2.0
    half_v = (camera.height - 1) / 2.0

    def project(x: float, y: float, z: float, radius: float) -> tuple[float, float, float] | None:
        depth = cz - z
        if depth < _MIN_DEPTH:
            return None
        dxw, dyw = x - cx, y - cy
        dx = cos_y * dxw + sin_y * dyw
        dy = -sin_y * dxw + cos_y * dyw
        u = half_u + camera.focal_px * dx / depth
        v = half_v + camera.focal_px * dy / depth
        if not (0.0 <= u <= camera.width - 1 and 0.0 <= v <= camera.height - 1):
            return None  # center out of frame: no usable fix
        return (u, v, camera.focal_px * radius / depth)

    ws = scene.workspace
    entities: list[tuple[str, float, float, float, float]] = []
    for c in scene.containers:
        entities.append((c.color, c.x, c.y, ws.table_height, c.radius))
    for o in scene.objects:
        entities.append((o.kind, o.x, o.y, o.z, ws.object_radius))
    entities.append(("eef", scene.eef.x, scene.eef.y, scene.eef.z, EEF_MARKER_RADIUS))

    for name, x, y, z, radius in entities:
        p = project(x, y, z, radius)
        if p is not None:
            _draw_disc(img[index[name]], p[0], p[1], p[2])
    img.setflags(write=False)
    return img


@dataclass(frozen=True, eq=False)
class Observation:
    """Multi-view images plus end-effector proprioception.

    Equality is identity: the image payloads are arrays, so structural
    comparison goes through ``observations_equal`` instead of ``==``.
    """

    images: dict[str, np.ndarray]
    proprio: tuple[float, float, float, float, float]  # x, y, z, yaw, gripper


def observations_equal(a: Observation, b: Observation) -> bool:
    return (
        a.proprio == b.proprio
        and sorted(a.images) == sorted(b.images)
        and all(np.array_equal(a.images[k], b.images[k]) for k in a.images)
    )


def observe(scene: SceneState) -> Observation:
    """Render every configured camera; pure with respect to the scene."""
    eef = scene.eef
    return Observation(
        images={cam.name: render(scene, cam) for cam in scene.workspace.cameras},
        proprio=(eef.x, eef.y, eef.z, eef.yaw, eef.gripper),
    )
