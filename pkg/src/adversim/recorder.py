"""Episode recording and dataset files.

The recorder turns live collection into immutable Episodes: one DataUnit per
simulator tick (observation captured before the action is applied), a
perturbation-event log, and an outcome summary.  Finalizing an episode
relabels every unit with the sub-goal in force for its phase segment —
grasp-phase units carry the grasp sub-goal, placement-phase units the
placement sub-goal, with boundaries exactly on phase transitions — and
validates the recorded phase walk against the controller automaton.

Datasets serialize to a directory holding ``manifest.txt`` and
``records.txt``, both in the shared line-record grammar: self-describing
key/value tokens, one record per line, a trailing CRC-32 field per record,
images as base64 of row-major unsigned bytes.  Same episodes in, same bytes
out.  ``shuffle_stream`` provides the deterministic buffered frame shuffle
used by training, together with per-batch diversity counts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .adversary import EVENT_KINDS, PerturbationEvent
from .config import (
    SCHEMA_VERSION,
    TaskSpec,
    WorkspaceConfig,
    workspace_from_fields,
    workspace_to_fields,
)
from .errors import ConfigError, InvalidEpisodeError, RecordIntegrityError
from .expert import (
    GRASP_PHASES,
    PHASE_TRANSITIONS,
    PLACE_PHASES,
    Instruction,
    Phase,
)
from .records import (
    decode_array,
    encode_array,
    encode_record,
    file_sha256,
    fmt_bool,
    fmt_float,
    fmt_int,
    iter_records,
    parse_bool,
    parse_float,
    parse_int,
    write_records,
)
from .sim.render import Observation, observations_equal, observe
from .sim.state import EefCommand, SceneState

__all__ = [
    "Outcome",
    "DataUnit",
    "Episode",
    "EpisodeBuilder",
    "Dataset",
    "record",
    "finalize",
    "finalize_episode",
    "validate_episode",
    "subtask_of",
    "subtask_text",
    "write_dataset",
    "read_dataset",
    "episodes_equal",
    "units_equal",
    "shuffle_indices",
    "shuffle_stream",
    "MANIFEST_NAME",
    "RECORDS_NAME",
]

MANIFEST_NAME = "manifest.txt"
RECORDS_NAME = "records.txt"

_MODES = ("traditional", "adc")
_NAME_RE = re.compile(r"[a-z][a-z0-9_]*\Z")


@dataclass(frozen=True, slots=True)
class Outcome:
    """End-of-episode summary against the final instruction in force."""

    pick_success: bool
    place_success: bool
    ticks_used: int
    retries: int


@dataclass(frozen=True, eq=False)
class DataUnit:
    """One training triplet: what the expert saw, was told, and did.

    ``instruction`` is the full command in force at this tick (after
    relabeling); ``subtask`` narrows it to the grasp/place segment the
    phase belongs to.  Target poses and the held-object id are ground-truth
    annotations used by metrics and audit scans, not policy inputs.
    """

    episode_id: int
    tick: int
    observation: Observation
    instruction: Instruction
    action: EefCommand
    phase_label: str
    events_at_tick: tuple[int, ...]
    subtask: str  # grasp | place
    held_object: str | None
    target_object_pose: tuple[float, float, float, float]  # x, y, z, yaw
    target_container_pose: tuple[float, float, float]  # x, y, yaw

    @property
    def subtask_text(self) -> str:
        return subtask_text(self.instruction, self.subtask)


@dataclass(frozen=True, eq=False)
class Episode:
    """One scenario reset: ordered units, event log, outcome."""

    id: int
    mode: str
    task: TaskSpec
    seed: int
    table_height: float
    units: tuple[DataUnit, ...]
    event_log: tuple[PerturbationEvent, ...]
    outcome: Outcome
    flags: tuple[str, ...] = ()
    schema_version: int = SCHEMA_VERSION


def subtask_of(phase: str | Phase) -> str:
    p = Phase(phase)
    if p in GRASP_PHASES:
        return "grasp"
    if p in PLACE_PHASES:
        return "place"
    raise InvalidEpisodeError(f"phase {p.value} belongs to no subtask")


def subtask_text(instruction: Instruction, subtask: str) -> str:
    """Sub-goal phrasing for one segment of the full instruction."""
    if instruction.verb == "push":
        return instruction.text
    if subtask == "grasp":
        return f"Grasp the {instruction.object_kind}"
    if subtask == "place":
        return (
            f"Place the {instruction.object_kind} into the "
            f"{instruction.container_color} plate"
        )
    raise InvalidEpisodeError(f"unknown subtask {subtask!r}")


class EpisodeBuilder:
    """Single-writer accumulator for one episode.

    ``log_event`` before ``record`` within a tick, so the unit can point at
    the events applied at that tick.
    """

    def __init__(
        self,
        episode_id: int,
        mode: str,
        task: TaskSpec,
        seed: int,
        table_height: float,
    ) -> None:
        if mode not in _MODES:
            raise ConfigError(f"unknown episode mode {mode!r}")
        self.episode_id = episode_id
        self.mode = mode
        self.task = task
        self.seed = seed
        self.table_height = table_height
        self._units: list[DataUnit] = []
        self._events: list[PerturbationEvent] = []

    def __len__(self) -> int:
        return len(self._units)

    def log_event(self, event: PerturbationEvent) -> int:
        self._events.append(event)
        return len(self._events) - 1

    def record(
        self,
        scene: SceneState,
        instruction: Instruction,
        action: EefCommand,
        phase: str | Phase,
        events: Sequence[int] = (),
        observation: Observation | None = None,
    ) -> "EpisodeBuilder":
        """Append the unit for the current tick, observing the scene as it
        stands before ``action`` is applied."""
        tick = scene.tick
        if self._units and tick <= self._units[-1].tick:
            raise InvalidEpisodeError(
                f"tick {tick} recorded after tick {self._units[-1].tick}"
            )
        if not action.is_finite():
            raise InvalidEpisodeError(f"non-finite action at tick {tick}")
        for idx in events:
            if not (0 <= idx < len(self._events)):
                raise InvalidEpisodeError(f"unknown event id {idx} at tick {tick}")
            if self._events[idx].tick != tick:
                raise InvalidEpisodeError(
                    f"event {idx} has tick {self._events[idx].tick}, unit has {tick}"
                )
        obj = scene.object_by_kind(instruction.object_kind)
        cont = scene.container_by_color(instruction.container_color)
        if obj is None or cont is None:
            raise ConfigError(f"instruction {instruction.text!r} unresolvable in scene")
        phase_v = Phase(phase)
        self._units.append(
            DataUnit(
                episode_id=self.episode_id,
                tick=tick,
                observation=observation or observe(scene),
                instruction=instruction,
                action=action,
                phase_label=phase_v.value,
                events_at_tick=tuple(events),
                subtask=subtask_of(phase_v),
                held_object=scene.eef.held_object,
                target_object_pose=(obj.x, obj.y, obj.z, obj.yaw),
                target_container_pose=(cont.x, cont.y, cont.yaw),
            )
        )
        return self

    def finalize(self, outcome: Outcome, flags: Sequence[str] = ()) -> Episode:
        if not self._units:
            raise InvalidEpisodeError("cannot finalize an empty episode")
        episode = Episode(
            id=self.episode_id,
            mode=self.mode,
            task=self.task,
            seed=self.seed,
            table_height=self.table_height,
            units=tuple(self._units),
            event_log=tuple(self._events),
            outcome=outcome,
            flags=tuple(flags),
        )
        return finalize_episode(episode)


def record(
    builder: EpisodeBuilder,
    scene: SceneState,
    instruction: Instruction,
    action: EefCommand,
    phase: str | Phase,
    events: Sequence[int] = (),
) -> EpisodeBuilder:
    return builder.record(scene, instruction, action, phase, events)


def finalize(
    builder: EpisodeBuilder, outcome: Outcome, flags: Sequence[str] = ()
) -> Episode:
    return builder.finalize(outcome, flags)


def _instruction_timeline(episode: Episode) -> list[tuple[int, Instruction]]:
    """(from_tick, instruction) checkpoints: the task's command, then each
    switch in event order.  A switch at tick k governs ticks >= k."""
    task = episode.task
    timeline = [(-1, Instruction(task.verb, task.object_kind, task.container_color))]
    for ev in episode.event_log:
        if ev.kind == "instruction_switch":
            if ev.instruction is None:
                raise InvalidEpisodeError(
                    f"instruction_switch at tick {ev.tick} carries no instruction"
                )
            timeline.append((ev.tick, ev.instruction))
    return timeline


def finalize_episode(episode: Episode) -> Episode:
    """Pure relabel + validate; running it twice yields identical output.

    Each unit's instruction must equal the one in force per the event log
    (a mismatch means the collection loop mis-routed a switch), and its
    subtask is re-derived from the phase so sub-goal boundaries align with
    phase transitions exactly.
    """
    timeline = _instruction_timeline(episode)
    relabeled: list[DataUnit] = []
    for unit in episode.units:
        in_force = timeline[0][1]
        for from_tick, instr in timeline:
            if from_tick <= unit.tick:
                in_force = instr
        if unit.instruction != in_force:
            raise InvalidEpisodeError(
                f"unit at tick {unit.tick} carries {unit.instruction.ident()!r} "
                f"but {in_force.ident()!r} was in force"
            )
        relabeled.append(replace(unit, subtask=subtask_of(unit.phase_label)))
    out = replace(episode, units=tuple(relabeled))
    validate_episode(out)
    return out


def validate_episode(episode: Episode) -> None:
    """Structural checks shared by finalize and read."""
    if episode.mode not in _MODES:
        raise InvalidEpisodeError(f"unknown mode {episode.mode!r}")
    if not episode.units:
        raise InvalidEpisodeError("episode has no units")
    first, last = episode.units[0].tick, episode.units[-1].tick
    prev_tick = None
    prev_phase: Phase | None = None
    for unit in episode.units:
        if prev_tick is not None and unit.tick <= prev_tick:
            raise InvalidEpisodeError(f"unit ticks not increasing at {unit.tick}")
        prev_tick = unit.tick
        try:
            phase = Phase(unit.phase_label)
        except ValueError:
            raise InvalidEpisodeError(f"unknown phase label {unit.phase_label!r}")
        if prev_phase is not None and phase != prev_phase:
            if phase not in PHASE_TRANSITIONS[prev_phase]:
                raise InvalidEpisodeError(
                    f"illegal phase transition {prev_phase.value} -> {phase.value}"
                )
        prev_phase = phase
        if not unit.action.is_finite():
            raise InvalidEpisodeError(f"non-finite action at tick {unit.tick}")
        if unit.subtask != subtask_of(phase):
            raise InvalidEpisodeError(
                f"subtask {unit.subtask!r} does not match phase {phase.value}"
            )
        if unit.episode_id != episode.id:
            raise InvalidEpisodeError(
                f"unit at tick {unit.tick} belongs to episode {unit.episode_id}"
            )
        for idx in unit.events_at_tick:
            if not (0 <= idx < len(episode.event_log)):
                raise InvalidEpisodeError(f"unknown event id {idx} at tick {unit.tick}")
            if episode.event_log[idx].tick != unit.tick:
                raise InvalidEpisodeError(
                    f"event {idx} tick mismatch at unit tick {unit.tick}"
                )
    for ev in episode.event_log:
        if not (first <= ev.tick <= last):
            raise InvalidEpisodeError(
                f"event at tick {ev.tick} outside episode range [{first}, {last}]"
            )
        if ev.kind not in EVENT_KINDS:
            raise InvalidEpisodeError(f"unknown event kind {ev.kind!r}")
    if episode.outcome.ticks_used != len(episode.units):
        raise InvalidEpisodeError(
            f"outcome says {episode.outcome.ticks_used} ticks, "
            f"{len(episode.units)} units recorded"
        )


# --- structural equality (images are arrays, so == is unusable) --------------

def units_equal(a: DataUnit, b: DataUnit) -> bool:
    return (
        a.episode_id == b.episode_id
        and a.tick == b.tick
        and a.instruction == b.instruction
        and a.action == b.action
        and a.phase_label == b.phase_label
        and a.events_at_tick == b.events_at_tick
        and a.subtask == b.subtask
        and a.held_object == b.held_object
        and a.target_object_pose == b.target_object_pose
        and a.target_container_pose == b.target_container_pose
        and observations_equal(a.observation, b.observation)
    )


def episodes_equal(a: Episode, b: Episode) -> bool:
    return (
        a.id == b.id
        and a.mode == b.mode
        and a.task == b.task
        and a.seed == b.seed
        and a.table_height == b.table_height
        and a.event_log == b.event_log
        and a.outcome == b.outcome
        and a.flags == b.flags
        and a.schema_version == b.schema_version
        and len(a.units) == len(b.units)
        and all(units_equal(x, y) for x, y in zip(a.units, b.units))
    )


# --- serialization ------------------------------------------------------------

def _task_fields(task: TaskSpec) -> list[tuple[str, str]]:
    return [
        ("task", task.name),
        ("verb", task.verb),
        ("object", task.object_kind),
        ("container", task.container_color),
        ("mu_x", fmt_float(task.mu[0])),
        ("mu_y", fmt_float(task.mu[1])),
        ("sigma_adv", fmt_float(task.sigma_adv)),
        ("sigma_trad", fmt_float(task.sigma_trad)),
        ("held_out", fmt_bool(task.held_out)),
    ]


def _task_from_fields(f: dict[str, str]) -> TaskSpec:
    return TaskSpec(
        name=f["task"],
        object_kind=f["object"],
        container_color=f["container"],
        mu=(parse_float(f["mu_x"]), parse_float(f["mu_y"])),
        sigma_adv=parse_float(f["sigma_adv"]),
        sigma_trad=parse_float(f["sigma_trad"]),
        verb=f["verb"],
        held_out=parse_bool(f["held_out"]),
    )


def _episode_header(ep: Episode) -> str:
    fields = [
        ("ep", fmt_int(ep.id)),
        ("mode", ep.mode),
        ("seed", fmt_int(ep.seed)),
        ("height", fmt_float(ep.table_height)),
        ("schema", fmt_int(ep.schema_version)),
        *_task_fields(ep.task),
        ("pick", fmt_bool(ep.outcome.pick_success)),
        ("place", fmt_bool(ep.outcome.place_success)),
        ("ticks", fmt_int(ep.outcome.ticks_used)),
        ("retries", fmt_int(ep.outcome.retries)),
        ("n_units", fmt_int(len(ep.units))),
        ("n_events", fmt_int(len(ep.event_log))),
    ]
    if ep.flags:
        fields.append(("flags", ",".join(ep.flags)))
    return encode_record("episode", fields)


def _event_line(ep_id: int, idx: int, ev: PerturbationEvent) -> str:
    fields: list[tuple[str, str]] = [
        ("ep", fmt_int(ep_id)),
        ("idx", fmt_int(idx)),
        ("tick", fmt_int(ev.tick)),
        ("kind", ev.kind),
        ("source", ev.source),
        ("phase", ev.phase_at_event),
    ]
    if ev.target_id is not None:
        fields.append(("target", ev.target_id))
    for key, value in (
        ("x", ev.x), ("y", ev.y), ("yaw", ev.yaw),
        ("dx", ev.dx), ("dy", ev.dy), ("dyaw", ev.dyaw),
    ):
        if value is not None:
            fields.append((key, fmt_float(value)))
    if ev.switch_kind is not None:
        fields.append(("switch_kind", ev.switch_kind))
    if ev.instruction is not None:
        fields.append(("sv", ev.instruction.verb))
        fields.append(("so", ev.instruction.object_kind))
        fields.append(("sc", ev.instruction.container_color))
    fields.append(("clamped", fmt_bool(ev.clamped)))
    fields.append(("rejected", fmt_bool(ev.rejected)))
    if ev.reason is not None:
        fields.append(("reason", ev.reason))
    return encode_record("event", fields)


def _event_from_fields(f: dict[str, str]) -> PerturbationEvent:
    instruction = None
    if "sv" in f:
        instruction = Instruction(f["sv"], f["so"], f["sc"])

    def opt(key: str) -> float | None:
        return parse_float(f[key]) if key in f else None

    return PerturbationEvent(
        tick=parse_int(f["tick"]),
        kind=f["kind"],
        source=f["source"],
        phase_at_event=f["phase"],
        target_id=f.get("target"),
        x=opt("x"),
        y=opt("y"),
        yaw=opt("yaw"),
        dx=opt("dx"),
        dy=opt("dy"),
        dyaw=opt("dyaw"),
        switch_kind=f.get("switch_kind"),
        instruction=instruction,
        clamped=parse_bool(f["clamped"]),
        rejected=parse_bool(f["rejected"]),
        reason=f.get("reason"),
    )


def _unit_line(unit: DataUnit, camera_names: Sequence[str]) -> str:
    a, p = unit.action, unit.observation.proprio
    fields: list[tuple[str, str]] = [
        ("ep", fmt_int(unit.episode_id)),
        ("tick", fmt_int(unit.tick)),
        ("phase", unit.phase_label),
        ("verb", unit.instruction.verb),
        ("object", unit.instruction.object_kind),
        ("container", unit.instruction.container_color),
        ("ax", fmt_float(a.vx)),
        ("ay", fmt_float(a.vy)),
        ("az", fmt_float(a.vz)),
        ("aw", fmt_float(a.dyaw)),
        ("ag", fmt_float(a.gripper_target)),
        ("px", fmt_float(p[0])),
        ("py", fmt_float(p[1])),
        ("pz", fmt_float(p[2])),
        ("pw", fmt_float(p[3])),
        ("pg", fmt_float(p[4])),
        ("ox", fmt_float(unit.target_object_pose[0])),
        ("oy", fmt_float(unit.target_object_pose[1])),
        ("oz", fmt_float(unit.target_object_pose[2])),
        ("ow", fmt_float(unit.target_object_pose[3])),
        ("cx", fmt_float(unit.target_container_pose[0])),
        ("cy", fmt_float(unit.target_container_pose[1])),
        ("cw", fmt_float(unit.target_container_pose[2])),
    ]
    if unit.held_object is not None:
        fields.append(("held", unit.held_object))
    if unit.events_at_tick:
        fields.append(("ev", ",".join(fmt_int(i) for i in unit.events_at_tick)))
    for name in camera_names:
        shape, payload = encode_array(unit.observation.images[name])
        fields.append((f"i_{name}", shape))
        fields.append((f"d_{name}", payload))
    return encode_record("unit", fields)


def _unit_from_fields(f: dict[str, str], camera_names: Sequence[str]) -> DataUnit:
    images = {
        name: decode_array(f[f"i_{name}"], f[f"d_{name}"]) for name in camera_names
    }
    for img in images.values():
        img.setflags(write=False)
    obs = Observation(
        images=images,
        proprio=(
            parse_float(f["px"]),
            parse_float(f["py"]),
            parse_float(f["pz"]),
            parse_float(f["pw"]),
            parse_float(f["pg"]),
        ),
    )
    events = tuple(
        parse_int(tok) for tok in f.get("ev", "").split(",") if tok != ""
    )
    phase = f["phase"]
    return DataUnit(
        episode_id=parse_int(f["ep"]),
        tick=parse_int(f["tick"]),
        observation=obs,
        instruction=Instruction(f["verb"], f["object"], f["container"]),
        action=EefCommand(
            vx=parse_float(f["ax"]),
            vy=parse_float(f["ay"]),
            vz=parse_float(f["az"]),
            dyaw=parse_float(f["aw"]),
            gripper_target=parse_float(f["ag"]),
        ),
        phase_label=phase,
        events_at_tick=events,
        subtask=subtask_of(phase),
        held_object=f.get("held"),
        target_object_pose=(
            parse_float(f["ox"]),
            parse_float(f["oy"]),
            parse_float(f["oz"]),
            parse_float(f["ow"]),
        ),
        target_container_pose=(
            parse_float(f["cx"]),
            parse_float(f["cy"]),
            parse_float(f["cw"]),
        ),
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """A parsed dataset directory: episodes plus shared context.

    ``extras`` carries any additional manifest records (e.g. the collection
    protocol parameters), keyed by record type.
    """

    episodes: tuple[Episode, ...]
    workspace: WorkspaceConfig
    channels: tuple[str, ...]
    manifest: dict[str, str]
    extras: dict[str, dict[str, str]]


def write_dataset(
    episodes: Sequence[Episode],
    path: str | Path,
    workspace: WorkspaceConfig,
    channels: Sequence[str],
    extra_records: Sequence[tuple[str, Sequence[tuple[str, str]]]] = (),
) -> dict[str, str]:
    """Serialize episodes under directory ``path``; returns manifest fields.

    The manifest binds the records file by SHA-256 and carries the workspace
    (camera geometry included) and image channel-name order, so a dataset is
    self-contained for training and replay.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for name in [c.name for c in workspace.cameras]:
        if not _NAME_RE.match(name):
            raise ConfigError(f"camera name {name!r} is not a valid record key")
    camera_names = [c.name for c in workspace.cameras]

    lines: list[str] = []
    n_units = 0
    n_events = 0
    for ep in episodes:
        validate_episode(ep)
        if ep.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"episode {ep.id} has schema {ep.schema_version}, "
                f"writer supports {SCHEMA_VERSION}"
            )
        lines.append(_episode_header(ep))
        for idx, ev in enumerate(ep.event_log):
            lines.append(_event_line(ep.id, idx, ev))
        for unit in ep.units:
            missing = [n for n in camera_names if n not in unit.observation.images]
            if missing:
                raise ConfigError(
                    f"unit at tick {unit.tick} lacks camera images {missing}"
                )
            lines.append(_unit_line(unit, camera_names))
        n_units += len(ep.units)
        n_events += len(ep.event_log)

    records_path = out / RECORDS_NAME
    write_records(records_path, lines)
    digest = file_sha256(records_path)

    manifest_fields = [
        ("schema", fmt_int(SCHEMA_VERSION)),
        ("episodes", fmt_int(len(episodes))),
        ("units", fmt_int(n_units)),
        ("events", fmt_int(n_events)),
        ("records", RECORDS_NAME),
        ("sha256", digest),
        ("channels", ",".join(channels)),
    ]
    manifest_lines = [
        encode_record("manifest", manifest_fields),
        encode_record("workspace", workspace_to_fields(workspace)),
    ]
    for record_type, fields in extra_records:
        if record_type in ("manifest", "workspace"):
            raise ConfigError(f"extra record type {record_type!r} is reserved")
        manifest_lines.append(encode_record(record_type, list(fields)))
    write_records(out / MANIFEST_NAME, manifest_lines)
    return dict(manifest_fields)


def read_dataset(path: str | Path) -> Dataset:
    """Parse a dataset directory, verifying both the per-record checksums
    and the manifest's whole-file digest."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigError(f"no dataset manifest at {manifest_path}")

    manifest: dict[str, str] | None = None
    workspace_fields: dict[str, str] | None = None
    extras: dict[str, dict[str, str]] = {}
    for _, fields in iter_records(manifest_path):
        if fields["type"] == "manifest":
            manifest = fields
        elif fields["type"] == "workspace":
            workspace_fields = fields
        else:
            extras[fields["type"]] = {
                k: v for k, v in fields.items() if k not in ("type", "crc")
            }
    if manifest is None or workspace_fields is None:
        raise RecordIntegrityError("manifest is missing required records")

    schema = parse_int(manifest["schema"])
    if schema != SCHEMA_VERSION:
        raise ConfigError(
            f"dataset schema {schema} unsupported; this build reads {SCHEMA_VERSION}"
        )
    workspace = workspace_from_fields(workspace_fields)
    camera_names = [c.name for c in workspace.cameras]
    channels = tuple(
        tok for tok in manifest.get("channels", "").split(",") if tok != ""
    )

    records_path = root / manifest["records"]
    if not records_path.exists():
        raise RecordIntegrityError(f"records file {manifest['records']!r} missing")
    digest = file_sha256(records_path)
    if digest != manifest["sha256"]:
        raise RecordIntegrityError(
            "records file digest mismatch: dataset corrupted or truncated"
        )

    episodes: list[Episode] = []
    header: dict[str, str] | None = None
    events: list[PerturbationEvent] = []
    units: list[DataUnit] = []

    def flush() -> None:
        if header is None:
            return
        ep = Episode(
            id=parse_int(header["ep"]),
            mode=header["mode"],
            task=_task_from_fields(header),
            seed=parse_int(header["seed"]),
            table_height=parse_float(header["height"]),
            units=tuple(units),
            event_log=tuple(events),
            outcome=Outcome(
                pick_success=parse_bool(header["pick"]),
                place_success=parse_bool(header["place"]),
                ticks_used=parse_int(header["ticks"]),
                retries=parse_int(header["retries"]),
            ),
            flags=tuple(
                tok for tok in header.get("flags", "").split(",") if tok != ""
            ),
            schema_version=parse_int(header["schema"]),
        )
        if len(ep.units) != parse_int(header["n_units"]) or len(
            ep.event_log
        ) != parse_int(header["n_events"]):
            raise RecordIntegrityError(
                f"episode {ep.id}: header counts do not match records"
            )
        validate_episode(ep)
        episodes.append(ep)

    for index, fields in iter_records(records_path):
        kind = fields["type"]
        if kind == "episode":
            flush()
            header, events, units = fields, [], []
        elif kind == "event":
            if header is None:
                raise RecordIntegrityError(f"record {index}: event before episode header")
            if parse_int(fields["idx"]) != len(events):
                raise RecordIntegrityError(f"record {index}: event index out of order")
            events.append(_event_from_fields(fields))
        elif kind == "unit":
            if header is None:
                raise RecordIntegrityError(f"record {index}: unit before episode header")
            units.append(_unit_from_fields(fields, camera_names))
        else:
            raise RecordIntegrityError(f"record {index}: unknown record type {kind!r}")
    flush()

    if len(episodes) != parse_int(manifest["episodes"]):
        raise RecordIntegrityError("manifest episode count does not match records")
    return Dataset(
        episodes=tuple(episodes),
        workspace=workspace,
        channels=channels,
        manifest=dict(manifest),
        extras=extras,
    )


# --- buffered frame shuffle ---------------------------------------------------

def shuffle_indices(
    n: int, buffer_size: int, rng: np.random.Generator
) -> Iterator[int]:
    """Buffered shuffle over range(n): fill a buffer, emit a uniformly
    chosen entry, refill from the incoming order.  buffer_size 1 degenerates
    to file order; buffer_size >= n yields a uniform permutation."""
    if buffer_size < 1:
        raise ConfigError("buffer_size must be >= 1")
    buf = list(range(min(buffer_size, n)))
    nxt = len(buf)
    while buf:
        j = int(rng.integers(len(buf)))
        out = buf[j]
        if nxt < n:
            buf[j] = nxt
            nxt += 1
        else:
            buf[j] = buf[-1]
            buf.pop()
        yield out


def _units_in_file_order(
    source: Sequence[Episode] | Dataset | str | Path | Sequence[str | Path],
) -> list[DataUnit]:
    if isinstance(source, Dataset):
        episodes: Iterable[Episode] = source.episodes
    elif isinstance(source, (str, Path)):
        episodes = read_dataset(source).episodes
    else:
        items = list(source)
        if items and isinstance(items[0], (str, Path)):
            episodes = [ep for p in items for ep in read_dataset(p).episodes]
        else:
            episodes = items  # type: ignore[assignment]
    return [unit for ep in episodes for unit in ep.units]


def shuffle_stream(
    source: Sequence[Episode] | Dataset | str | Path | Sequence[str | Path],
    buffer_size: int,
    seed: int,
    batch_size: int = 64,
    quantization=None,
) -> tuple[list[DataUnit], list[int]]:
    """Deterministic shuffled unit stream plus per-batch diversity counts.

    Diversity is the number of distinct functional-equivalence signatures in
    each consecutive batch of the emitted stream.
    """
    from .metrics import QuantizationSpec, signature

    q = quantization or QuantizationSpec()
    units = _units_in_file_order(source)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    stream = [units[i] for i in shuffle_indices(len(units), buffer_size, rng)]
    diversity = [
        len({signature(u, q) for u in stream[i : i + batch_size]})
        for i in range(0, len(stream), batch_size)
    ]
    return stream, diversity
