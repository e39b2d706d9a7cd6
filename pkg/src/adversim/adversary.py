"""Adversarial perturbation engine.

Scripted mode draws visual impulses, forced relocations, container moves and
instruction switches from a seeded stream, gated on live scene geometry and
controller phase.  Human mode reuses the same event type and application
path: commands arrive from the session server already shaped as events and
``apply_event`` clamps/validates them identically.

Timing categories for instruction switches follow the grasp lifecycle:
``before`` = approaching/descending, ``during`` = actively closing or inside
the proximity threshold, ``after`` = holding the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import SceneCatalog
from .errors import ConfigError, PerturbationError
from .expert import Instruction, Phase
from .records import parse_float, parse_int
from .sim.state import SceneState, dist2, dist3, wrap_angle
from .sim.world import PLACEMENT_ATTEMPT_CAP

__all__ = [
    "PerturbationSchedule",
    "PerturbationEvent",
    "AdversaryState",
    "default_schedule",
    "zero_schedule",
    "draw_relocation",
    "tick",
    "apply_event",
    "switch_instruction",
    "schedule_from_fields",
]

EVENT_KINDS = (
    "relocate_object",
    "impulse_object",
    "relocate_container",
    "impulse_container",
    "instruction_switch",
)

SWITCH_KINDS = ("object", "container", "action", "both")


@dataclass(frozen=True)
class PerturbationSchedule:
    """Scripted adversary rates and budgets."""

    relocate_on_miss: int = 2
    impulse_prob_per_tick: float = 0.02
    impulse_translation: tuple[float, float] = (0.03, 0.10)
    impulse_rotation_max: float = math.pi / 4
    impulse_cooldown: int = 4
    container_perturb: bool = True
    container_trigger_phase: str = "TRANSPORT"
    switch_prob_before: float = 0.006
    switch_prob_during: float = 0.02
    switch_prob_after: float = 0.02
    switch_kinds_before: tuple[str, ...] = ("object", "container")
    switch_kinds_during: tuple[str, ...] = ("object",)
    switch_kinds_after: tuple[str, ...] = ("container",)
    max_linguistic_per_episode: int = 1
    max_events_per_episode: int = 16

    def validate(self) -> None:
        probs = (
            self.impulse_prob_per_tick,
            self.switch_prob_before,
            self.switch_prob_during,
            self.switch_prob_after,
        )
        if any(not (0.0 <= p <= 1.0) for p in probs):
            raise ConfigError("schedule probabilities must lie in [0, 1]")
        if self.impulse_cooldown < 1:
            raise ConfigError("impulse_cooldown must be >= 1")
        if self.max_events_per_episode < 0 or self.max_linguistic_per_episode < 0:
            raise ConfigError("event budgets must be >= 0")
        if self.relocate_on_miss < 1:
            raise ConfigError("relocate_on_miss must be >= 1")
        lo, hi = self.impulse_translation
        if not (0.0 <= lo <= hi):
            raise ConfigError("impulse_translation range must satisfy 0 <= lo <= hi")
        if self.impulse_rotation_max < 0:
            raise ConfigError("impulse_rotation_max must be >= 0")
        for kinds in (self.switch_kinds_before, self.switch_kinds_during,
                      self.switch_kinds_after):
            for k in kinds:
                if k not in SWITCH_KINDS:
                    raise ConfigError(f"unknown switch kind {k!r}")
        if self.container_trigger_phase not in Phase.__members__:
            raise ConfigError(f"unknown trigger phase {self.container_trigger_phase!r}")


def default_schedule() -> PerturbationSchedule:
    return PerturbationSchedule()


def zero_schedule() -> PerturbationSchedule:
    """Degenerate schedule: the adversary never acts (traditional mode)."""
    return PerturbationSchedule(
        impulse_prob_per_tick=0.0,
        container_perturb=False,
        switch_prob_before=0.0,
        switch_prob_during=0.0,
        switch_prob_after=0.0,
        max_events_per_episode=0,
    )


@dataclass(frozen=True)
class PerturbationEvent:
    """One adversary action, scripted or human, applied or rejected."""

    tick: int
    kind: str
    source: str  # scripted | human
    phase_at_event: str
    target_id: str | None = None
    x: float | None = None
    y: float | None = None
    yaw: float | None = None
    dx: float | None = None
    dy: float | None = None
    dyaw: float | None = None
    switch_kind: str | None = None
    instruction: Instruction | None = None
    clamped: bool = False
    rejected: bool = False
    reason: str | None = None


@dataclass
class AdversaryState:
    """Per-episode mutable bookkeeping for the scripted adversary.

    The collection loop keeps ``instruction`` and the target ids in sync
    after instruction switches.
    """

    instruction: Instruction
    target_object: str
    target_container: str
    events_emitted: int = 0
    linguistic_emitted: int = 0
    cooldown: int = 0
    approach_attempts: int = 0
    container_done: bool = False
    prev_phase: str | None = None

    def retarget(self, scene: SceneState, instruction: Instruction) -> None:
        obj = scene.object_by_kind(instruction.object_kind)
        container = scene.container_by_color(instruction.container_color)
        if obj is None or container is None:
            raise ConfigError(f"instruction {instruction.text!r} unresolvable in scene")
        self.instruction = instruction
        self.target_object = obj.id
        self.target_container = container.id


def _draw_clear(
    rng: np.random.Generator,
    scene: SceneState,
    inset: float,
    clear_fn,
) -> tuple[float, float]:
    ws = scene.workspace
    for _ in range(PLACEMENT_ATTEMPT_CAP):
        x = float(rng.uniform(ws.x_min + inset, ws.x_max - inset))
        y = float(rng.uniform(ws.y_min + inset, ws.y_max - inset))
        if clear_fn(x, y):
            return x, y
    raise ConfigError(
        f"no clear relocation target found in {PLACEMENT_ATTEMPT_CAP} draws"
    )


def _object_spot_clear(scene: SceneState, exclude_object: str):
    ws = scene.workspace
    r = ws.object_radius

    def ok(x: float, y: float) -> bool:
        for c in scene.containers:
            if dist2(x, y, c.x, c.y) <= c.radius + r + 0.01:
                return False
        for o in scene.objects:
            if o.id != exclude_object and dist2(x, y, o.x, o.y) <= 2 * r + 0.01:
                return False
        return True

    return ok


def _container_spot_clear(scene: SceneState, exclude_container: str):
    ws = scene.workspace
    r = ws.container_radius

    def ok(x: float, y: float) -> bool:
        for c in scene.containers:
            if c.id != exclude_container and dist2(x, y, c.x, c.y) <= 2 * r + 0.01:
                return False
        for o in scene.objects:
            if not o.held and dist2(x, y, o.x, o.y) <= r + ws.object_radius + 0.01:
                return False
        return True

    return ok


def draw_relocation(
    scene: SceneState,
    rng: np.random.Generator,
    target_id: str,
    kind: str,
    phase_at_event: str,
    source: str = "scripted",
) -> PerturbationEvent:
    """Uniform clear relocation draw for an object or container."""
    ws = scene.workspace
    if kind == "relocate_object":
        if scene.object_by_id(target_id) is None:
            raise PerturbationError(f"no such object {target_id!r}")
        x, y = _draw_clear(
            rng, scene, ws.object_radius, _object_spot_clear(scene, target_id)
        )
    elif kind == "relocate_container":
        if scene.container_by_id(target_id) is None:
            raise PerturbationError(f"no such container {target_id!r}")
        x, y = _draw_clear(
            rng, scene, ws.container_radius, _container_spot_clear(scene, target_id)
        )
    else:
        raise PerturbationError(f"not a relocation kind: {kind!r}")
    return PerturbationEvent(
        tick=scene.tick,
        kind=kind,
        source=source,
        phase_at_event=phase_at_event,
        target_id=target_id,
        x=x,
        y=y,
    )


def tick(
    scene: SceneState,
    ctrl_phase: Phase,
    schedule: PerturbationSchedule,
    rng: np.random.Generator,
    state: AdversaryState,
    catalog: SceneCatalog,
) -> list[PerturbationEvent]:
    """Scripted adversary step: decide which events fire at this tick.

    Deterministic given (schedule, rng stream, scene/phase trajectory).
    Returned events are not yet applied; the caller routes them through
    ``apply_event`` and the recorder.
    """
    events: list[PerturbationEvent] = []
    ws = scene.workspace
    eef = scene.eef
    phase = Phase(ctrl_phase)
    phase_name = phase.value

    if state.cooldown > 0:
        state.cooldown -= 1

    target_obj = scene.object_by_id(state.target_object)
    target_cont = scene.container_by_id(state.target_container)
    held = eef.held_object

    d_obj = math.inf
    if target_obj is not None and not target_obj.held:
        d_obj = dist3(eef.x, eef.y, eef.z, target_obj.x, target_obj.y, target_obj.z)
    d_cont = math.inf
    if target_cont is not None:
        d_cont = dist3(eef.x, eef.y, eef.z, target_cont.x, target_cont.y, ws.table_height)

    # approach-attempt bookkeeping for the forced-relocation rule
    if phase == Phase.APPROACH and state.prev_phase != Phase.APPROACH.value:
        state.approach_attempts += 1
    if d_obj < ws.proximity_threshold:
        state.approach_attempts = 0

    def budget_left() -> bool:
        return state.events_emitted + len(events) < schedule.max_events_per_episode

    # forced relocation after repeated approaches that never got close
    if (
        budget_left()
        and target_obj is not None
        and not target_obj.held
        and state.approach_attempts > schedule.relocate_on_miss
    ):
        events.append(
            draw_relocation(scene, rng, target_obj.id, "relocate_object", phase_name)
        )
        state.approach_attempts = 0

    # proximity-gated impulses
    if budget_left() and state.cooldown == 0 and schedule.impulse_prob_per_tick > 0:
        impulse_target = None
        if target_obj is not None and not target_obj.held and d_obj < ws.proximity_threshold:
            impulse_target = ("impulse_object", target_obj.id)
        elif (
            schedule.container_perturb
            and held is not None
            and held == state.target_object
            and d_cont < ws.proximity_threshold
        ):
            impulse_target = ("impulse_container", target_cont.id)
        if impulse_target is not None:
            if float(rng.random()) < schedule.impulse_prob_per_tick:
                lo, hi = schedule.impulse_translation
                mag = float(rng.uniform(lo, hi))
                ang = float(rng.uniform(0.0, 2.0 * math.pi))
                dyaw = float(
                    rng.uniform(-schedule.impulse_rotation_max, schedule.impulse_rotation_max)
                )
                events.append(
                    PerturbationEvent(
                        tick=scene.tick,
                        kind=impulse_target[0],
                        source="scripted",
                        phase_at_event=phase_name,
                        target_id=impulse_target[1],
                        dx=mag * math.cos(ang),
                        dy=mag * math.sin(ang),
                        dyaw=dyaw,
                    )
                )
                state.cooldown = schedule.impulse_cooldown

    # one-shot container relocation at the trigger phase boundary
    if (
        budget_left()
        and schedule.container_perturb
        and not state.container_done
        and target_cont is not None
        and phase_name == schedule.container_trigger_phase
        and state.prev_phase != schedule.container_trigger_phase
    ):
        events.append(
            draw_relocation(
                scene, rng, target_cont.id, "relocate_container", phase_name
            )
        )
        state.container_done = True

    # phase-conditional instruction switches
    if budget_left() and state.linguistic_emitted < schedule.max_linguistic_per_episode:
        if held is not None:
            prob, kinds = schedule.switch_prob_after, schedule.switch_kinds_after
        elif phase == Phase.GRASP or d_obj < ws.proximity_threshold:
            prob, kinds = schedule.switch_prob_during, schedule.switch_kinds_during
        elif phase in (Phase.APPROACH, Phase.DESCEND):
            prob, kinds = schedule.switch_prob_before, schedule.switch_kinds_before
        else:
            prob, kinds = 0.0, ()
        kinds = feasible_switch_kinds(kinds, state.instruction, catalog)
        if prob > 0 and kinds:
            if float(rng.random()) < prob:
                kind = kinds[int(rng.integers(len(kinds)))]
                new_instr = switch_instruction(state.instruction, kind, rng, catalog)
                events.append(
                    PerturbationEvent(
                        tick=scene.tick,
                        kind="instruction_switch",
                        source="scripted",
                        phase_at_event=phase_name,
                        switch_kind=kind,
                        instruction=new_instr,
                    )
                )
                state.linguistic_emitted += 1

    state.events_emitted += len(events)
    state.prev_phase = phase_name
    return events


def apply_event(
    scene: SceneState, event: PerturbationEvent
) -> tuple[SceneState, PerturbationEvent]:
    """Apply one event; returns the new scene and the event with final
    (clamped) parameters recorded.

    Raises PerturbationError for invalid targets (missing id, held object).
    Instruction switches leave the scene untouched — the caller routes them
    to the controller and recorder.
    """
    ws = scene.workspace
    if event.kind == "instruction_switch":
        if event.instruction is None:
            raise PerturbationError("instruction_switch event carries no instruction")
        return scene, event

    if event.kind in ("relocate_object", "impulse_object"):
        obj = scene.object_by_id(event.target_id or "")
        if obj is None:
            raise PerturbationError(f"no such object {event.target_id!r}")
        if obj.held:
            raise PerturbationError(f"object {obj.id!r} is held and cannot be perturbed")
        inset = ws.object_radius
        if event.kind == "relocate_object":
            if event.x is None or event.y is None:
                raise PerturbationError("relocate_object requires x and y")
            raw_x, raw_y, yaw = event.x, event.y, obj.yaw if event.yaw is None else event.yaw
        else:
            raw_x = obj.x + (event.dx or 0.0)
            raw_y = obj.y + (event.dy or 0.0)
            yaw = wrap_angle(obj.yaw + (event.dyaw or 0.0))
        x = min(max(raw_x, ws.x_min + inset), ws.x_max - inset)
        y = min(max(raw_y, ws.y_min + inset), ws.y_max - inset)
        clamped = (x != raw_x) or (y != raw_y)
        new_obj = replace(obj, x=x, y=y, z=ws.object_rest_z(), yaw=wrap_angle(yaw))
        final = replace(event, x=x, y=y, yaw=new_obj.yaw, clamped=clamped)
        return scene.with_object(new_obj), final

    if event.kind in ("relocate_container", "impulse_container"):
        cont = scene.container_by_id(event.target_id or "")
        if cont is None:
            raise PerturbationError(f"no such container {event.target_id!r}")
        inset = cont.radius
        if event.kind == "relocate_container":
            if event.x is None or event.y is None:
                raise PerturbationError("relocate_container requires x and y")
            raw_x, raw_y, yaw = event.x, event.y, cont.yaw if event.yaw is None else event.yaw
        else:
            raw_x = cont.x + (event.dx or 0.0)
            raw_y = cont.y + (event.dy or 0.0)
            yaw = wrap_angle(cont.yaw + (event.dyaw or 0.0))
        x = min(max(raw_x, ws.x_min + inset), ws.x_max - inset)
        y = min(max(raw_y, ws.y_min + inset), ws.y_max - inset)
        clamped = (x != raw_x) or (y != raw_y)
        new_cont = replace(cont, x=x, y=y, yaw=wrap_angle(yaw))
        final = replace(event, x=x, y=y, yaw=new_cont.yaw, clamped=clamped)
        return scene.with_container(new_cont), final

    raise PerturbationError(f"unknown event kind {event.kind!r}")


def feasible_switch_kinds(
    kinds: Sequence[str],
    current: Instruction,
    catalog: SceneCatalog,
) -> tuple[str, ...]:
    """The subset of ``kinds`` for which ``catalog`` offers an alternative.

    A switch must change the field it targets; when a restricted
    vocabulary leaves only the current value (e.g. the one container
    color a grasp-source episode is allowed to name), that switch kind
    is simply unavailable rather than an error."""
    obj_ok = any(k != current.object_kind for k in catalog.fruits)
    cont_ok = any(c != current.container_color for c in catalog.colors)
    verb_ok = any(v != current.verb for v in catalog.verbs)
    allowed = {
        "object": obj_ok,
        "container": cont_ok,
        "action": verb_ok,
        "both": obj_ok and cont_ok,
    }
    return tuple(k for k in kinds if allowed.get(k, False))


def switch_instruction(
    current: Instruction,
    kind: str,
    rng: np.random.Generator,
    catalog: SceneCatalog,
) -> Instruction:
    """Draw a new instruction differing from ``current`` in the switched
    fields, uniformly over valid alternatives."""

    def pick(options: tuple[str, ...], exclude: str, what: str) -> str:
        alts = [o for o in options if o != exclude]
        if not alts:
            raise ConfigError(f"catalog has no alternative {what} to switch to")
        return alts[int(rng.integers(len(alts)))]

    if kind == "object":
        return replace(current, object_kind=pick(catalog.fruits, current.object_kind, "object"))
    if kind == "container":
        return replace(
            current,
            container_color=pick(catalog.colors, current.container_color, "container"),
        )
    if kind == "action":
        return replace(current, verb=pick(catalog.verbs, current.verb, "verb"))
    if kind == "both":
        return replace(
            current,
            verb=pick(catalog.verbs, current.verb, "verb"),
            object_kind=pick(catalog.fruits, current.object_kind, "object"),
        )
    raise ConfigError(f"unknown switch kind {kind!r}")


# --- INI-section parsing (optional [schedule] overrides) ---------------------

_FLOAT_KEYS = {
    "impulse_prob_per_tick", "impulse_rotation_max",
    "switch_prob_before", "switch_prob_during", "switch_prob_after",
}
_INT_KEYS = {
    "relocate_on_miss", "impulse_cooldown",
    "max_linguistic_per_episode", "max_events_per_episode",
}
_KIND_KEYS = {"switch_kinds_before", "switch_kinds_during", "switch_kinds_after"}


def schedule_from_fields(fields: dict[str, str]) -> PerturbationSchedule:
    """Build a schedule from flat key/value overrides of the defaults."""
    kwargs: dict = {}
    for key, value in fields.items():
        if key in _FLOAT_KEYS:
            kwargs[key] = parse_float(value)
        elif key in _INT_KEYS:
            kwargs[key] = parse_int(value)
        elif key in _KIND_KEYS:
            kwargs[key] = tuple(value.split())
        elif key == "container_perturb":
            kwargs[key] = value.strip() in ("1", "true", "yes")
        elif key == "container_trigger_phase":
            kwargs[key] = value.strip()
        elif key == "impulse_translation":
            lo, hi = value.split()
            kwargs[key] = (parse_float(lo), parse_float(hi))
        else:
            raise ConfigError(f"unknown schedule key {key!r}")
    schedule = PerturbationSchedule(**kwargs)
    schedule.validate()
    return schedule
