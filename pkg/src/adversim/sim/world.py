"""Scene construction and the world step.

The world is purely kinematic: the end-effector integrates commanded
velocity, objects sit on the table or ride the gripper, containers never
move on their own.  All randomness flows through a counted generator so a
scene records how many draws produced it (``rng_cursor``).
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from ..config import SceneCatalog, TaskSpec, WorkspaceConfig, default_catalog
from ..errors import ConfigError
from .state import (
    ContainerState,
    EefCommand,
    EefState,
    ObjectState,
    SceneState,
    SimEvent,
    dist2,
    dist3,
    wrap_angle,
)

__all__ = ["reset_scene", "step", "clamp_command", "sample_clear_xy", "PLACEMENT_ATTEMPT_CAP"]

# Rejection sampling gives up after this many candidate draws.
PLACEMENT_ATTEMPT_CAP = 1000

# Minimum clearance added beyond touching radii when placing objects.
_CLEARANCE = 0.01


class _CountedRng:
    """Wraps a numpy Generator, counting scalar draws."""

    def __init__(self, seed: int):
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        self.cursor = 0

    def normal2(self, mu: tuple[float, float], sigma: float) -> tuple[float, float]:
        v = self.gen.normal(loc=mu, scale=sigma, size=2)
        self.cursor += 2
        return (float(v[0]), float(v[1]))

    def uniform2(self, lo: tuple[float, float], hi: tuple[float, float]) -> tuple[float, float]:
        v = self.gen.uniform(low=lo, high=hi, size=2)
        self.cursor += 2
        return (float(v[0]), float(v[1]))

    def uniform1(self, lo: float, hi: float) -> float:
        self.cursor += 1
        return float(self.gen.uniform(lo, hi))


def _clear_of(
    x: float,
    y: float,
    workspace: WorkspaceConfig,
    containers: tuple[ContainerState, ...],
    objects: tuple[ObjectState, ...],
) -> bool:
    r = workspace.object_radius
    if not (
        workspace.x_min + r <= x <= workspace.x_max - r
        and workspace.y_min + r <= y <= workspace.y_max - r
    ):
        return False
    for c in containers:
        if dist2(x, y, c.x, c.y) <= c.radius + r + _CLEARANCE:
            return False
    for o in objects:
        if dist2(x, y, o.x, o.y) <= 2 * r + _CLEARANCE:
            return False
    return True


def sample_clear_xy(
    draw,
    workspace: WorkspaceConfig,
    containers: tuple[ContainerState, ...],
    objects: tuple[ObjectState, ...],
) -> tuple[float, float]:
    """Draw candidates until one clears table edges, containers and objects.

    ``draw`` is a zero-argument callable returning an (x, y) candidate.
    Raises ConfigError after PLACEMENT_ATTEMPT_CAP rejected draws.
    """
    for _ in range(PLACEMENT_ATTEMPT_CAP):
        x, y = draw()
        if _clear_of(x, y, workspace, containers, objects):
            return (x, y)
    raise ConfigError(
        f"no clear placement found after {PLACEMENT_ATTEMPT_CAP} attempts; "
        "workspace too crowded for the requested draw"
    )


def reset_scene(
    workspace: WorkspaceConfig,
    task: TaskSpec,
    mode: str,
    seed: int,
    catalog: SceneCatalog | None = None,
) -> SceneState:
    """Build the initial scene for one episode.

    ``mode`` selects the object spawn distribution:

    - ``traditional``: tight gaussian around each object's anchor
      (sigma_trad for the target, distractor jitter otherwise)
    - ``adc``: wide gaussian around the target's anchor (sigma_adv),
      distractors jittered at theirs
    - ``uniform``: every object uniform over the whole table surface
      (evaluation's varied-position protocol, where any object may
      become the target mid-episode)

    Containers sit at their catalog anchors.  The end-effector starts at
    the home pose with the gripper open.
    """
    cat = catalog or default_catalog()
    if task.object_kind not in cat.fruits:
        raise ConfigError(f"task object kind {task.object_kind!r} not in catalog")
    if task.container_color not in cat.colors:
        raise ConfigError(f"task container color {task.container_color!r} not in catalog")
    if mode not in ("traditional", "adc", "uniform"):
        raise ConfigError(f"unknown reset mode {mode!r}")

    rng = _CountedRng(seed)
    containers = tuple(
        ContainerState(
            id=f"container_{color}",
            color=color,
            x=cat.container_anchor(color)[0],
            y=cat.container_anchor(color)[1],
            yaw=0.0,
            radius=workspace.container_radius,
        )
        for color in cat.colors
    )

    rest_z = workspace.object_rest_z()
    placed: tuple[ObjectState, ...] = ()

    def place(kind: str, is_target: bool) -> ObjectState:
        if mode == "uniform":
            r = workspace.object_radius
            lo = (workspace.x_min + r, workspace.y_min + r)
            hi = (workspace.x_max - r, workspace.y_max - r)
            draw = lambda: rng.uniform2(lo, hi)
        else:
            mu = task.mu if is_target else cat.fruit_anchor(kind)
            sigma = cat.distractor_sigma
            if is_target:
                sigma = task.sigma_adv if mode == "adc" else task.sigma_trad
            draw = lambda: rng.normal2(mu, sigma)
        x, y = sample_clear_xy(draw, workspace, containers, placed)
        yaw = rng.uniform1(-math.pi, math.pi)
        return ObjectState(id=kind, kind=kind, x=x, y=y, z=rest_z, yaw=yaw)

    # Distractors draw from tight per-anchor jitters, so they go first; the
    # target's wide (or uniform) draw then fills in around them.  A wide
    # target placed first could sit on a distractor anchor and leave its
    # tight jitter with no clear mass.
    by_kind: dict[str, ObjectState] = {}
    for kind in cat.fruits:
        if kind != task.object_kind:
            by_kind[kind] = place(kind, False)
            placed = placed + (by_kind[kind],)
    by_kind[task.object_kind] = place(task.object_kind, True)
    objects = tuple(by_kind[kind] for kind in cat.fruits)

    hx, hy, hz = workspace.home_pose()
    eef = EefState(x=hx, y=hy, z=hz, yaw=0.0, gripper=1.0, held_object=None)
    return SceneState(
        time=0.0,
        tick=0,
        eef=eef,
        objects=objects,
        containers=containers,
        workspace=workspace,
        rng_cursor=rng.cursor,
    )


def clamp_command(ws: WorkspaceConfig, cmd: EefCommand) -> EefCommand:
    """The command the world will actually execute: velocity norm capped at
    the workspace speed limit, yaw rate and gripper target clamped to their
    ranges.  ``step`` applies exactly this, so a clamped command round-trips
    unchanged."""
    vx, vy, vz = cmd.vx, cmd.vy, cmd.vz
    speed = math.sqrt(vx * vx + vy * vy + vz * vz)
    if speed > ws.max_eef_speed:
        k = ws.max_eef_speed / speed
        vx, vy, vz = vx * k, vy * k, vz * k
    return EefCommand(
        vx=vx,
        vy=vy,
        vz=vz,
        dyaw=min(max(cmd.dyaw, -ws.max_yaw_rate), ws.max_yaw_rate),
        gripper_target=min(max(cmd.gripper_target, 0.0), 1.0),
    )


def step(scene: SceneState, cmd: EefCommand, dt: float) -> tuple[SceneState, list[SimEvent]]:
    """Advance the world exactly one tick.

    Velocities are clamped to workspace limits, the end-effector is kept
    inside the reach box and above the table, and gripper aperture slews
    toward its target at a bounded rate.  Grasp/release fire on the aperture
    crossing ``close_threshold``.  A non-finite command leaves the scene
    untouched and reports a ``rejected_command`` event.
    """
    ws = scene.workspace
    if abs(dt - ws.tick_dt) > 1e-12:
        raise ConfigError(f"dt {dt!r} does not match workspace tick_dt {ws.tick_dt!r}")
    if not cmd.is_finite():
        return scene, [SimEvent(kind="rejected_command", tick=scene.tick)]

    events: list[SimEvent] = []
    eef = scene.eef

    cmd = clamp_command(ws, cmd)
    vx, vy, vz = cmd.vx, cmd.vy, cmd.vz
    dyaw = cmd.dyaw

    x, y, z = ws.clamp_reach(eef.x + vx * dt, eef.y + vy * dt, eef.z + vz * dt)
    yaw = wrap_angle(eef.yaw + dyaw * dt)

    target = cmd.gripper_target
    max_delta = ws.gripper_rate * dt
    grip = eef.gripper + min(max(target - eef.gripper, -max_delta), max_delta)

    objects = list(scene.objects)
    held_id = eef.held_object

    # held object rides the gripper
    if held_id is not None:
        for i, o in enumerate(objects):
            if o.id == held_id:
                objects[i] = replace(o, x=x, y=y, z=z, held=True)
                break

    thr = ws.close_threshold
    closing = eef.gripper >= thr and grip < thr
    opening = eef.gripper < thr and grip >= thr

    if closing and held_id is None:
        best_i = -1
        best_d = ws.grasp_tolerance
        for i, o in enumerate(objects):
            d = dist3(x, y, z, o.x, o.y, o.z)
            if d <= best_d:
                best_i, best_d = i, d
        if best_i >= 0:
            grabbed = objects[best_i]
            objects[best_i] = replace(grabbed, x=x, y=y, z=z, held=True)
            held_id = grabbed.id
            events.append(SimEvent(kind="grasped", tick=scene.tick, object_id=grabbed.id))
        else:
            events.append(SimEvent(kind="empty_grasp", tick=scene.tick))

    if opening and held_id is not None:
        for i, o in enumerate(objects):
            if o.id == held_id:
                ox, oy = ws.clamp_table_xy(x, y)
                dropped = replace(o, x=ox, y=oy, z=ws.object_rest_z(), held=False)
                objects[i] = dropped
                container = None
                best_d = float("inf")
                for c in scene.containers:
                    d = dist2(dropped.x, dropped.y, c.x, c.y)
                    if d <= c.radius and d < best_d:
                        container, best_d = c, d
                events.append(
                    SimEvent(
                        kind="released",
                        tick=scene.tick,
                        object_id=o.id,
                        container_id=container.id if container else None,
                    )
                )
                break
        held_id = None

    new_scene = replace(
        scene,
        time=scene.time + dt,
        tick=scene.tick + 1,
        eef=EefState(x=x, y=y, z=z, yaw=yaw, gripper=grip, held_object=held_id),
        objects=tuple(objects),
    )
    return new_scene, events
