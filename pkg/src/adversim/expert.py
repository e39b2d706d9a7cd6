"""Scripted tele-operator: a reactive phase automaton.

The controller re-plans every tick from the live scene, so a relocated
object or a rewritten instruction redirects it immediately.  State is a
frozen value; ``plan`` returns the command for this tick together with the
successor controller state.  There is deliberately no memory beyond the
phase/targets/retry bookkeeping — replaying a scene prefix reproduces the
same commands.

Motion is a single-valued function of the live geometry, not of the phase:
when the hand is empty it servos toward the target object down a descent
funnel (commanded height shrinks with lateral distance), and when holding
it servos toward the release point down a second funnel, with lateral
speed gated by altitude so the carry clears the lift height before it
translates.  A single-valued command law matters because the recorded
pairs (state, command) are later regressed by a memoryless policy: two
different commands for the same geometry would be unlearnable.  Phases
label progress for the recorder and the subtask relabeler and gate only
the gripper intent: APPROACH (far, open), DESCEND (inside the funnel
mouth), GRASP (close), LIFT/TRANSPORT/PLACE (carry legs), RELEASE (open),
ABORT_RELEASE (put a wrong object down at a free spot), DONE.  The
``push`` verb reuses APPROACH/DESCEND/TRANSPORT as a
planar nudge stroke behind the object toward the container; the world has
no contact response, so the stroke is gesture-complete rather than
effective — the verb exists for instruction-switch coverage and is not part
of the default experiments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .config import SceneCatalog
from .errors import ConfigError
from .sim.state import EefCommand, SceneState, dist2, dist3

__all__ = [
    "Phase",
    "Instruction",
    "ControllerState",
    "new_controller",
    "plan",
    "on_instruction_change",
    "render_instruction_text",
    "MAX_RETRIES",
    "PHASE_TRANSITIONS",
    "GRASP_PHASES",
    "PLACE_PHASES",
]


class Phase(str, enum.Enum):
    APPROACH = "APPROACH"
    DESCEND = "DESCEND"
    GRASP = "GRASP"
    LIFT = "LIFT"
    TRANSPORT = "TRANSPORT"
    PLACE = "PLACE"
    RELEASE = "RELEASE"
    ABORT_RELEASE = "ABORT_RELEASE"
    DONE = "DONE"


# Legal phase successions (self-loops implicit).  Instruction changes may
# additionally jump to APPROACH/LIFT/TRANSPORT/ABORT_RELEASE; those edges are
# included below so recorded sequences validate against one table.
PHASE_TRANSITIONS: dict[Phase, frozenset[Phase]] = {
    Phase.APPROACH: frozenset({Phase.DESCEND, Phase.LIFT, Phase.ABORT_RELEASE, Phase.DONE}),
    Phase.DESCEND: frozenset({Phase.GRASP, Phase.APPROACH, Phase.LIFT, Phase.TRANSPORT,
                              Phase.ABORT_RELEASE, Phase.DONE}),
    Phase.GRASP: frozenset({Phase.LIFT, Phase.APPROACH, Phase.ABORT_RELEASE, Phase.DONE}),
    Phase.LIFT: frozenset({Phase.TRANSPORT, Phase.APPROACH, Phase.ABORT_RELEASE, Phase.DONE}),
    Phase.TRANSPORT: frozenset({Phase.PLACE, Phase.APPROACH, Phase.ABORT_RELEASE, Phase.DONE}),
    Phase.PLACE: frozenset({Phase.RELEASE, Phase.TRANSPORT, Phase.APPROACH, Phase.ABORT_RELEASE,
                            Phase.DONE}),
    Phase.RELEASE: frozenset({Phase.DONE, Phase.APPROACH, Phase.TRANSPORT,
                              Phase.ABORT_RELEASE}),
    Phase.ABORT_RELEASE: frozenset({Phase.APPROACH, Phase.LIFT, Phase.DONE}),
    Phase.DONE: frozenset({Phase.APPROACH}),
}

# Subtask segmentation used by the recorder's relabeling.
GRASP_PHASES = frozenset({Phase.APPROACH, Phase.DESCEND, Phase.GRASP, Phase.LIFT,
                          Phase.ABORT_RELEASE})
PLACE_PHASES = frozenset({Phase.TRANSPORT, Phase.PLACE, Phase.RELEASE, Phase.DONE})

MAX_RETRIES = 3

# controller constants (fixed; documented in docs/config_format.md)
GAIN = 4.0          # proportional velocity gain, 1/s
XY_TOL = 0.012      # alignment tolerance for phase advancement, m
Z_TOL = 0.010       # vertical tolerance, m
HOVER = 0.07        # hover height above the object top (push stroke), m
PLACE_HEIGHT = 0.055  # release height above the table, m
REAPPROACH = 0.05   # target drift that sends the controller back a phase, m
PUSH_STANDOFF = 0.045  # nudge start point behind the object, m
PUSH_OVERRUN = 0.06    # nudge stroke past the object center, m

# descent funnels: commanded height above the goal as a function of lateral
# distance — full clearance outside FAR, tapering linearly to zero at NEAR
APPROACH_NEAR = XY_TOL   # lateral distance where the funnel reaches the object, m
APPROACH_FAR = 0.04      # lateral distance where the approach funnel opens fully, m
APPROACH_CLEAR = 0.10    # approach clearance above the object centre, m
RISE_GAIN = 0.15         # vertical gain while climbing with an empty hand, 1/s
CARRY_NEAR = XY_TOL      # lateral distance where the carry funnel reaches the drop, m
CARRY_FAR = 0.06         # lateral distance where the carry funnel opens fully, m
CARRY_CLEAR = 0.15       # carry clearance above the release height, m
LATERAL_GATE = 0.075     # altitude above release height for full carry speed, m

# gripper intent is a smooth ramp in distance rather than a step: a step
# concentrates the regression error of the cloned policy on a razor-thin
# boundary, while a ramp lets the aperture start tracking early and makes
# the close/open crossing land well inside the tolerance ball
GRIP_RAMP = 1.5          # close ramp span as a multiple of grasp_tolerance
RELEASE_SPAN = 0.08      # open ramp span around the release point, m


def _funnel(d: float, near: float, far: float, clear: float) -> float:
    """Commanded height above the goal at lateral distance ``d``."""
    return clear * min(max((d - near) / (far - near), 0.0), 1.0)


@dataclass(frozen=True, slots=True)
class Instruction:
    """Structured language command; ``text`` is derived, never stored."""

    verb: str
    object_kind: str
    container_color: str

    @property
    def text(self) -> str:
        return render_instruction_text(self)

    def ident(self) -> str:
        return f"{self.verb}|{self.object_kind}|{self.container_color}"


def render_instruction_text(instr: Instruction) -> str:
    if instr.verb == "grasp_place":
        return f"Grasp the {instr.object_kind}, place into the {instr.container_color} plate"
    if instr.verb == "push":
        return f"Push the {instr.object_kind} toward the {instr.container_color} plate"
    raise ConfigError(f"unknown verb {instr.verb!r}")


@dataclass(frozen=True, slots=True)
class ControllerState:
    phase: Phase
    instruction: Instruction
    target_object: str
    target_container: str
    retry_count: int = 0
    failed: bool = False
    abort_xy: tuple[float, float] | None = None


def _resolve(scene: SceneState, instr: Instruction) -> tuple[str, str]:
    obj = scene.object_by_kind(instr.object_kind)
    container = scene.container_by_color(instr.container_color)
    if obj is None or container is None:
        raise ConfigError(
            f"instruction {instr.text!r} is unresolvable in this scene"
        )
    return obj.id, container.id


def new_controller(scene: SceneState, instruction: Instruction) -> ControllerState:
    obj_id, cont_id = _resolve(scene, instruction)
    return ControllerState(
        phase=Phase.APPROACH,
        instruction=instruction,
        target_object=obj_id,
        target_container=cont_id,
    )


def _free_spot(scene: SceneState) -> tuple[float, float]:
    """A deterministic table point near the EEF, clear of every container."""
    ws = scene.workspace
    x, y = ws.clamp_table_xy(scene.eef.x, scene.eef.y)
    for c in scene.containers:
        d = dist2(x, y, c.x, c.y)
        safe = c.radius + ws.object_radius + 0.04
        if d < safe:
            if d < 1e-9:
                x, y = c.x + safe, c.y  # dead-centre: push off along +x
            else:
                x, y = c.x + (x - c.x) * safe / d, c.y + (y - c.y) * safe / d
    inset = ws.object_radius + 0.01
    return (
        min(max(x, ws.x_min + inset), ws.x_max - inset),
        min(max(y, ws.y_min + inset), ws.y_max - inset),
    )


def _retry(ctrl: ControllerState) -> ControllerState:
    n = ctrl.retry_count + 1
    if n > MAX_RETRIES:
        return replace(ctrl, phase=Phase.DONE, retry_count=n, failed=True)
    return replace(ctrl, phase=Phase.APPROACH, retry_count=n)


def _push_goal(scene: SceneState, ctrl: ControllerState) -> tuple[float, float, float, float]:
    """Start point behind the object and stroke end past it, both on the
    object-to-container line."""
    obj = scene.object_by_id(ctrl.target_object)
    cont = scene.container_by_id(ctrl.target_container)
    dx, dy = cont.x - obj.x, cont.y - obj.y
    norm = math.hypot(dx, dy)
    if norm < 1e-9:
        dx, dy, norm = 1.0, 0.0, 1.0
    ux, uy = dx / norm, dy / norm
    behind = (obj.x - ux * PUSH_STANDOFF, obj.y - uy * PUSH_STANDOFF)
    ahead = (obj.x + ux * PUSH_OVERRUN, obj.y + uy * PUSH_OVERRUN)
    return behind[0], behind[1], ahead[0], ahead[1]


def _advance(scene: SceneState, ctrl: ControllerState) -> ControllerState:
    """Apply at most one transition rule per call (one per tick)."""
    ws = scene.workspace
    eef = scene.eef
    obj = scene.object_by_id(ctrl.target_object)
    cont = scene.container_by_id(ctrl.target_container)
    if obj is None or cont is None:
        return replace(ctrl, phase=Phase.DONE, failed=True)
    held = eef.held_object
    phase = ctrl.phase
    push = ctrl.instruction.verb == "push"

    if phase == Phase.DONE:
        if ctrl.failed or push:
            return ctrl
        # re-engage if the completed placement stops holding (the adversary
        # moved the object back out): scenario continuation
        within = scene.container_of(obj)
        if held is None and within is not None and within.id == cont.id:
            return ctrl
        return replace(ctrl, phase=Phase.APPROACH)

    # holding something we should not: put it down first
    if held is not None and held != ctrl.target_object and phase != Phase.ABORT_RELEASE:
        return replace(ctrl, phase=Phase.ABORT_RELEASE, abort_xy=_free_spot(scene))
    # push never holds anything, including its own target
    if push and held == ctrl.target_object and phase != Phase.ABORT_RELEASE:
        return replace(ctrl, phase=Phase.ABORT_RELEASE, abort_xy=_free_spot(scene))

    if phase == Phase.ABORT_RELEASE:
        if held is None:
            return replace(ctrl, phase=Phase.APPROACH, abort_xy=None)
        return ctrl

    if push:
        return _advance_push(scene, ctrl, obj)

    if phase == Phase.APPROACH:
        if held == ctrl.target_object:
            return replace(ctrl, phase=Phase.LIFT)
        if dist2(eef.x, eef.y, obj.x, obj.y) <= XY_TOL:
            # advance on xy alignment alone: waiting for the vertical to
            # settle produces hold states whose commands are ambiguous with
            # the descent that follows
            return replace(ctrl, phase=Phase.DESCEND)
        return ctrl

    if phase == Phase.DESCEND:
        if held == ctrl.target_object:
            return replace(ctrl, phase=Phase.LIFT)
        if dist2(eef.x, eef.y, obj.x, obj.y) > REAPPROACH:
            return replace(ctrl, phase=Phase.APPROACH)
        if dist3(eef.x, eef.y, eef.z, obj.x, obj.y, obj.z) <= ws.grasp_tolerance:
            return replace(ctrl, phase=Phase.GRASP)
        return ctrl

    if phase == Phase.GRASP:
        if held == ctrl.target_object:
            return replace(ctrl, phase=Phase.LIFT)
        if eef.gripper < ws.close_threshold and held is None:
            return _retry(ctrl)  # the close finished on empty air
        if dist3(eef.x, eef.y, eef.z, obj.x, obj.y, obj.z) > REAPPROACH:
            return replace(ctrl, phase=Phase.APPROACH)  # object fled mid-close
        return ctrl

    if phase in (Phase.LIFT, Phase.TRANSPORT, Phase.PLACE, Phase.RELEASE):
        if held is None:
            # the open ramp may drop the object in any carry leg (or the
            # adversary may knock it loose): settle by where it landed
            inside = scene.container_of(obj)
            if inside is not None and inside.id == ctrl.target_container:
                return replace(ctrl, phase=Phase.DONE)
            if phase == Phase.RELEASE:
                return _retry(ctrl)  # released but missed; go again
            return replace(ctrl, phase=Phase.APPROACH)
        if phase == Phase.LIFT:
            if eef.z >= ws.table_height + ws.lift_height:
                return replace(ctrl, phase=Phase.TRANSPORT)
            return ctrl
        if phase == Phase.TRANSPORT:
            if dist2(eef.x, eef.y, cont.x, cont.y) <= XY_TOL:
                return replace(ctrl, phase=Phase.PLACE)
            return ctrl
        if phase == Phase.PLACE:
            if dist2(eef.x, eef.y, cont.x, cont.y) > REAPPROACH:
                return replace(ctrl, phase=Phase.TRANSPORT)
            place_z = ws.table_height + PLACE_HEIGHT
            if dist2(eef.x, eef.y, cont.x, cont.y) <= XY_TOL and abs(eef.z - place_z) <= Z_TOL:
                return replace(ctrl, phase=Phase.RELEASE)
            return ctrl
        return ctrl

    raise AssertionError(f"unhandled phase {phase}")


def _advance_push(scene: SceneState, ctrl: ControllerState, obj) -> ControllerState:
    ws = scene.workspace
    eef = scene.eef
    bx, by, ax, ay = _push_goal(scene, ctrl)
    z_push = obj.z
    if ctrl.phase == Phase.APPROACH:
        hover_z = obj.z + ws.object_half_height + HOVER
        if dist2(eef.x, eef.y, bx, by) <= XY_TOL and abs(eef.z - hover_z) <= Z_TOL:
            return replace(ctrl, phase=Phase.DESCEND)
        return ctrl
    if ctrl.phase == Phase.DESCEND:
        if dist2(eef.x, eef.y, bx, by) > REAPPROACH:
            return replace(ctrl, phase=Phase.APPROACH)
        if abs(eef.z - z_push) <= Z_TOL:
            return replace(ctrl, phase=Phase.TRANSPORT)
        return ctrl
    if ctrl.phase == Phase.TRANSPORT:
        if dist2(eef.x, eef.y, ax, ay) <= XY_TOL:
            return replace(ctrl, phase=Phase.DONE)
        return ctrl
    # remaining grasp phases make no sense for push; restart the stroke
    return replace(ctrl, phase=Phase.APPROACH)


def _goto(
    scene: SceneState, tx: float, ty: float, tz: float, grip: float
) -> EefCommand:
    """Proportional command toward a position; clamping happens in the world.

    The tool is never rotated: grasp success is yaw-agnostic, so holding a
    fixed heading keeps the wrist camera frame stable."""
    eef = scene.eef
    return EefCommand(
        vx=GAIN * (tx - eef.x),
        vy=GAIN * (ty - eef.y),
        vz=GAIN * (tz - eef.z),
        dyaw=0.0,
        gripper_target=grip,
    )


def _approach_servo(scene: SceneState, gx: float, gy: float, gz: float, grip: float) -> EefCommand:
    """Servo down the approach funnel toward a grasp point.

    Descents run at full gain; climbs run at the smaller ``RISE_GAIN``.
    A climb only happens when the funnel mouth rose above the hand —
    i.e. the target just moved away — and retreating gently keeps the
    recovery path low, so the hand slides back toward the new grasp
    point from the side instead of popping up and re-entering from
    above."""
    eef = scene.eef
    d = dist2(eef.x, eef.y, gx, gy)
    tz = gz + _funnel(d, APPROACH_NEAR, APPROACH_FAR, APPROACH_CLEAR)
    vgain = GAIN if tz <= eef.z else RISE_GAIN
    return EefCommand(
        vx=GAIN * (gx - eef.x),
        vy=GAIN * (gy - eef.y),
        vz=vgain * (tz - eef.z),
        dyaw=0.0,
        gripper_target=grip,
    )


def _carry_servo(scene: SceneState, gx: float, gy: float, grip: float) -> EefCommand:
    """Servo down the carry funnel toward a release point.

    Below the lateral gate altitude and still far from the drop, the
    translation is scaled back so the carry climbs before it moves: the
    lift would otherwise be skipped entirely when the goal is close."""
    ws = scene.workspace
    eef = scene.eef
    drop_z = ws.table_height + PLACE_HEIGHT
    d = dist2(eef.x, eef.y, gx, gy)
    tz = drop_z + _funnel(d, CARRY_NEAR, CARRY_FAR, CARRY_CLEAR)
    lateral = 1.0
    if d > CARRY_FAR:
        lateral = min(max((eef.z - drop_z) / LATERAL_GATE, 0.0), 1.0)
    return EefCommand(
        vx=GAIN * (gx - eef.x) * lateral,
        vy=GAIN * (gy - eef.y) * lateral,
        vz=GAIN * (tz - eef.z),
        dyaw=0.0,
        gripper_target=grip,
    )


def _release_ramp(scene: SceneState, gx: float, gy: float) -> float:
    """Gripper intent while carrying: open as the drop point nears."""
    ws = scene.workspace
    eef = scene.eef
    drop_z = ws.table_height + PLACE_HEIGHT
    s = math.hypot(dist2(eef.x, eef.y, gx, gy), eef.z - drop_z)
    return min(max(1.0 - s / RELEASE_SPAN, 0.0), 1.0)


def _command_for(scene: SceneState, ctrl: ControllerState) -> EefCommand:
    ws = scene.workspace
    eef = scene.eef
    obj = scene.object_by_id(ctrl.target_object)
    cont = scene.container_by_id(ctrl.target_container)
    phase = ctrl.phase
    push = ctrl.instruction.verb == "push"

    if phase == Phase.DONE:
        return EefCommand(gripper_target=eef.gripper)

    if phase == Phase.ABORT_RELEASE:
        axy = ctrl.abort_xy or _free_spot(scene)
        return _carry_servo(scene, axy[0], axy[1], _release_ramp(scene, axy[0], axy[1]))

    if push:
        bx, by, ax, ay = _push_goal(scene, ctrl)
        hover_z = obj.z + ws.object_half_height + HOVER
        if phase == Phase.APPROACH:
            return _goto(scene, bx, by, hover_z, 1.0)
        if phase == Phase.DESCEND:
            return _goto(scene, bx, by, obj.z, 1.0)
        # TRANSPORT: the nudge stroke at object height
        return _goto(scene, ax, ay, obj.z, 1.0)

    if phase in (Phase.APPROACH, Phase.DESCEND, Phase.GRASP):
        if eef.gripper < ws.close_threshold and eef.held_object is None:
            # the close finished on empty air: reopen in place, then the
            # ramp below closes again from a converged position
            return EefCommand(gripper_target=1.0)
        d3 = dist3(eef.x, eef.y, eef.z, obj.x, obj.y, obj.z)
        grip = min(d3 / (GRIP_RAMP * ws.grasp_tolerance), 1.0)
        return _approach_servo(scene, obj.x, obj.y, obj.z, grip)
    if phase in (Phase.LIFT, Phase.TRANSPORT, Phase.PLACE, Phase.RELEASE):
        return _carry_servo(scene, cont.x, cont.y, _release_ramp(scene, cont.x, cont.y))
    raise AssertionError(f"unhandled phase {phase}")


def plan(scene: SceneState, ctrl: ControllerState) -> tuple[EefCommand, ControllerState]:
    """One tick of tele-operation: advance the automaton against the live
    scene (at most one transition per tick, so recorded phase sequences are
    always legal edges), then emit the new phase's proportional command."""
    if scene.object_by_id(ctrl.target_object) is None or scene.container_by_id(
        ctrl.target_container
    ) is None:
        raise ConfigError(f"controller targets missing from scene: {ctrl.instruction.text!r}")
    nxt = _advance(scene, ctrl)
    return _command_for(scene, nxt), nxt


def on_instruction_change(
    ctrl: ControllerState, new_instr: Instruction, scene: SceneState
) -> ControllerState:
    """Re-ground the controller on a rewritten instruction.

    Not holding anything: retarget and approach.  Holding the newly-correct
    object: keep carrying, retarget the container (fall back from PLACE or
    RELEASE to TRANSPORT so the move actually happens).  Holding anything
    else: release it at a free spot first.
    """
    obj_id, cont_id = _resolve(scene, new_instr)
    held = scene.eef.held_object
    base = replace(
        ctrl,
        instruction=new_instr,
        target_object=obj_id,
        target_container=cont_id,
        failed=False,
    )
    if held is None:
        return replace(base, phase=Phase.APPROACH, abort_xy=None)
    if held == obj_id and new_instr.verb != "push":
        if ctrl.phase in (Phase.PLACE, Phase.RELEASE, Phase.TRANSPORT):
            return replace(base, phase=Phase.TRANSPORT)
        return replace(base, phase=Phase.LIFT)
    return replace(base, phase=Phase.ABORT_RELEASE, abort_xy=_free_spot(scene))


def default_instruction(task_verb: str, object_kind: str, container_color: str) -> Instruction:
    return Instruction(verb=task_verb, object_kind=object_kind, container_color=container_color)


def validate_instruction(instr: Instruction, catalog: SceneCatalog) -> None:
    if instr.verb not in catalog.verbs:
        raise ConfigError(f"unknown verb {instr.verb!r}")
    if instr.object_kind not in catalog.fruits:
        raise ConfigError(f"unknown object kind {instr.object_kind!r}")
    if instr.container_color not in catalog.colors:
        raise ConfigError(f"unknown container color {instr.container_color!r}")
