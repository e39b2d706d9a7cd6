"""Immutable scene state types.

All poses are world-frame metres/radians.  Yaw is kept wrapped to
[-pi, pi).  States are frozen dataclasses; the world step returns new
instances rather than mutating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from ..config import WorkspaceConfig

__all__ = [
    "ObjectState",
    "ContainerState",
    "EefState",
    "SceneState",
    "EefCommand",
    "SimEvent",
    "wrap_angle",
    "dist3",
    "dist2",
]


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def dist2(ax: float, ay: float, bx: float, by: float) -> float:
    return math.hypot(ax - bx, ay - by)


def dist3(ax: float, ay: float, az: float, bx: float, by: float, bz: float) -> float:
    return math.sqrt((ax - bx) ** 2 + (ay - by) ** 2 + (az - bz) ** 2)


@dataclass(frozen=True, slots=True)
class ObjectState:
    """A graspable object (one per kind in a scene)."""

    id: str
    kind: str
    x: float
    y: float
    z: float
    yaw: float
    held: bool = False


@dataclass(frozen=True, slots=True)
class ContainerState:
    """A flat container on the table surface."""

    id: str
    color: str
    x: float
    y: float
    yaw: float
    radius: float


@dataclass(frozen=True, slots=True)
class EefState:
    """End-effector pose, gripper aperture in [0, 1] and held-object link."""

    x: float
    y: float
    z: float
    yaw: float
    gripper: float
    held_object: str | None = None


@dataclass(frozen=True, slots=True)
class EefCommand:
    """One tick of teleoperation: linear velocity, yaw rate, gripper target."""

    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    dyaw: float = 0.0
    gripper_target: float = 1.0

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v) for v in (self.vx, self.vy, self.vz, self.dyaw, self.gripper_target)
        )


@dataclass(frozen=True, slots=True)
class SimEvent:
    """Something discrete the world did during a step."""

    kind: str  # grasped | released | empty_grasp | rejected_command
    tick: int
    object_id: str | None = None
    container_id: str | None = None


@dataclass(frozen=True, slots=True)
class SceneState:
    """Complete world state at one tick."""

    time: float
    tick: int
    eef: EefState
    objects: tuple[ObjectState, ...]
    containers: tuple[ContainerState, ...]
    workspace: WorkspaceConfig
    rng_cursor: int = 0

    def object_by_id(self, object_id: str) -> ObjectState | None:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        return None

    def object_by_kind(self, kind: str) -> ObjectState | None:
        for obj in self.objects:
            if obj.kind == kind:
                return obj
        return None

    def container_by_id(self, container_id: str) -> ContainerState | None:
        for c in self.containers:
            if c.id == container_id:
                return c
        return None

    def container_by_color(self, color: str) -> ContainerState | None:
        for c in self.containers:
            if c.color == color:
                return c
        return None

    def with_object(self, obj: ObjectState) -> "SceneState":
        objects = tuple(obj if o.id == obj.id else o for o in self.objects)
        return replace(self, objects=objects)

    def with_container(self, container: ContainerState) -> "SceneState":
        containers = tuple(container if c.id == container.id else c for c in self.containers)
        return replace(self, containers=containers)

    def container_of(self, obj: ObjectState) -> ContainerState | None:
        """The container the object currently rests in, if any."""
        if obj.held:
            return None
        best: ContainerState | None = None
        best_d = float("inf")
        for c in self.containers:
            d = dist2(obj.x, obj.y, c.x, c.y)
            if d <= c.radius and d < best_d:
                best, best_d = c, d
        return best
