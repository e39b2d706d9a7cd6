"""The data-collection loop: reset, expert plus adversary, record, finalize.

One tick engine (`EpisodeRunner`) serves three callers: scripted collection,
byte-exact replay from a persisted event log, and the live session server.
Per tick, in order: perturbation events are applied and logged, instruction
switches re-ground the controller, the expert plans, the unit is recorded
(observation before action), then the world steps.

Collection modes differ in three protocol knobs, all declared here:

- spawn distribution (``traditional`` tight vs ``adc`` wide, in sim-core);
- adversarial-mode episodes keep going after a successful placement — the
  adversary relocates the placed object and the expert re-engages — until a
  tick budget runs out, so one adversarial episode packs several
  disruption-recovery cycles (the protocol's per-episode frame counts come
  from exactly this);
- tele-operation pace: unchallenged demonstrations are driven at a relaxed
  fraction of full speed, while adversarial sessions run at reactive full
  speed.

Every knob lives in ``CollectionConfig`` and is persisted in the dataset
manifest, so replay reconstructs episodes byte-identically from the files
alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import adversary as adv
from .adversary import AdversaryState, PerturbationEvent, PerturbationSchedule
from .config import HarnessConfig, TaskSpec, WorkspaceConfig
from .errors import ConfigError, InvalidEpisodeError, PerturbationError
from .expert import (
    PLACE_PHASES,
    Instruction,
    Phase,
    new_controller,
    on_instruction_change,
    plan,
)
from .records import fmt_float, fmt_int, parse_float, parse_int
from .recorder import (
    Dataset,
    Episode,
    EpisodeBuilder,
    Outcome,
    write_dataset,
)
from .sim.render import semantic_channels
from .sim.state import EefCommand, SceneState
from .sim.world import clamp_command, reset_scene, step

__all__ = [
    "CollectionConfig",
    "EpisodeRunner",
    "ScriptedSource",
    "ReplaySource",
    "collect_episode",
    "collect_dataset",
    "replay_episode",
    "audit_dataset",
    "episode_seed",
    "scale_command",
    "collection_to_fields",
    "collection_from_fields",
]


@dataclass(frozen=True, slots=True)
class CollectionConfig:
    """Protocol-level knobs shared by collection, replay, and sessions."""

    max_ticks: int = 400
    adc_extension_ticks: int = 260  # keep the scenario going until this tick
    done_hold_ticks: int = 12  # verification dwell recorded after completion
    traditional_speed_scale: float = 0.35
    adc_speed_scale: float = 1.0

    def validate(self) -> None:
        if self.max_ticks < 1:
            raise ConfigError("max_ticks must be >= 1")
        if not (0 <= self.adc_extension_ticks <= self.max_ticks):
            raise ConfigError("adc_extension_ticks must lie in [0, max_ticks]")
        if self.done_hold_ticks < 0:
            raise ConfigError("done_hold_ticks must be >= 0")
        for scale in (self.traditional_speed_scale, self.adc_speed_scale):
            if not (0 < scale <= 1.0):
                raise ConfigError("speed scales must lie in (0, 1]")

    def speed_scale(self, mode: str) -> float:
        return self.adc_speed_scale if mode == "adc" else self.traditional_speed_scale


def collection_to_fields(c: CollectionConfig) -> list[tuple[str, str]]:
    return [
        ("max_ticks", fmt_int(c.max_ticks)),
        ("adc_extension_ticks", fmt_int(c.adc_extension_ticks)),
        ("done_hold_ticks", fmt_int(c.done_hold_ticks)),
        ("traditional_speed_scale", fmt_float(c.traditional_speed_scale)),
        ("adc_speed_scale", fmt_float(c.adc_speed_scale)),
    ]


def collection_from_fields(fields: dict[str, str]) -> CollectionConfig:
    return CollectionConfig(
        max_ticks=parse_int(fields["max_ticks"]),
        adc_extension_ticks=parse_int(fields["adc_extension_ticks"]),
        done_hold_ticks=parse_int(fields["done_hold_ticks"]),
        traditional_speed_scale=parse_float(fields["traditional_speed_scale"]),
        adc_speed_scale=parse_float(fields["adc_speed_scale"]),
    )


def scale_command(cmd: EefCommand, scale: float) -> EefCommand:
    """Slow a motion command down without touching the gripper intent."""
    if scale == 1.0:
        return cmd
    return EefCommand(
        vx=cmd.vx * scale,
        vy=cmd.vy * scale,
        vz=cmd.vz * scale,
        dyaw=cmd.dyaw * scale,
        gripper_target=cmd.gripper_target,
    )


def episode_seed(master_seed: int, episode_id: int) -> tuple[int, np.random.Generator]:
    """Derive the scene seed and the adversary stream for one episode."""
    ss = np.random.SeedSequence([master_seed, episode_id])
    scene_seed = int(ss.generate_state(1)[0])
    rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
    return scene_seed, rng


class EventSource(Protocol):
    """Where this tick's perturbations come from (adversary, log, or human).

    ``done_ticks`` counts ticks already recorded in the DONE phase: 0 while
    the task is live, 1 right after completion (the continuation window),
    more during the verification hold.
    """

    def poll(
        self, scene: SceneState, ctrl_phase: Phase, done_ticks: int
    ) -> list[PerturbationEvent]:
        ...

    def notify_instruction(self, instruction: Instruction, scene: SceneState) -> None:
        ...


class ScriptedSource:
    """The seeded adversary, plus the scenario-continuation rule: after a
    successful placement with budget left, relocate the placed object so the
    episode keeps yielding fresh contexts."""

    def __init__(
        self,
        schedule: PerturbationSchedule,
        rng: np.random.Generator,
        instruction: Instruction,
        scene: SceneState,
        catalog,
        collection: CollectionConfig,
    ) -> None:
        self.schedule = schedule
        self.rng = rng
        self.catalog = catalog
        self.collection = collection
        self.state = AdversaryState(
            instruction=instruction, target_object="", target_container=""
        )
        self.state.retarget(scene, instruction)

    def poll(
        self, scene: SceneState, ctrl_phase: Phase, done_ticks: int
    ) -> list[PerturbationEvent]:
        if ctrl_phase == Phase.DONE:
            if done_ticks > 1:
                return []
            if (
                scene.tick < self.collection.adc_extension_ticks
                and self.state.events_emitted < self.schedule.max_events_per_episode
            ):
                event = adv.draw_relocation(
                    scene,
                    self.rng,
                    self.state.target_object,
                    "relocate_object",
                    Phase.DONE.value,
                )
                self.state.events_emitted += 1
                self.state.container_done = False
                self.state.approach_attempts = 0
                self.state.prev_phase = Phase.DONE.value
                return [event]
            return []
        return adv.tick(
            scene, ctrl_phase, self.schedule, self.rng, self.state, self.catalog
        )

    def notify_instruction(self, instruction: Instruction, scene: SceneState) -> None:
        self.state.retarget(scene, instruction)


class ReplaySource:
    """Feed back a persisted event log verbatim at the recorded ticks."""

    def __init__(self, event_log: Sequence[PerturbationEvent]) -> None:
        self._by_tick: dict[int, list[PerturbationEvent]] = {}
        for ev in event_log:
            self._by_tick.setdefault(ev.tick, []).append(ev)

    def poll(
        self, scene: SceneState, ctrl_phase: Phase, done_ticks: int
    ) -> list[PerturbationEvent]:
        return self._by_tick.get(scene.tick, [])

    def notify_instruction(self, instruction: Instruction, scene: SceneState) -> None:
        pass


class EpisodeRunner:
    """Drives one episode tick by tick; shared by collect, replay, serve.

    ``verbatim_events=True`` (replay) logs the supplied events exactly as
    given instead of re-deriving clamp/reject status, so replayed episodes
    serialize to the same bytes as the originals.
    """

    def __init__(
        self,
        workspace: WorkspaceConfig,
        task: TaskSpec,
        mode: str,
        scene_seed: int,
        source: EventSource,
        collection: CollectionConfig,
        episode_id: int,
        catalog=None,
        verbatim_events: bool = False,
        on_event: Callable[[SceneState, PerturbationEvent], None] | None = None,
        grasp_only: bool = False,
    ) -> None:
        collection.validate()
        self.workspace = workspace
        self.mode = mode
        self.collection = collection
        self.source = source
        self.verbatim_events = verbatim_events
        self.on_event = on_event
        self.grasp_only = grasp_only
        self.scene = reset_scene(workspace, task, mode, scene_seed, catalog)
        self.instruction = Instruction(task.verb, task.object_kind, task.container_color)
        self.ctrl = new_controller(self.scene, self.instruction)
        self.builder = EpisodeBuilder(
            episode_id, mode, task, scene_seed, workspace.table_height
        )
        self.picked = False
        self._done_streak = 0
        self.finished = False
        self.flags: list[str] = []

    # -- one tick ---------------------------------------------------------

    def tick_once(self) -> None:
        if self.finished:
            raise InvalidEpisodeError("episode already finished")
        scene, ctrl = self.scene, self.ctrl

        ids: list[int] = []
        for ev in self.source.poll(scene, ctrl.phase, self._done_streak):
            applied = ev
            rejected = ev.rejected
            if rejected:
                # persisted rejected command, replayed verbatim: no effect
                pass
            else:
                try:
                    if self.on_event is not None:
                        self.on_event(scene, ev)
                    scene, applied = adv.apply_event(scene, ev)
                except PerturbationError as exc:
                    if ev.source != "human":
                        raise
                    applied = replace(ev, rejected=True, reason=str(exc))
                    rejected = True
            logged = ev if self.verbatim_events else applied
            ids.append(self.builder.log_event(logged))
            if logged.kind == "instruction_switch" and not rejected:
                assert logged.instruction is not None
                ctrl = on_instruction_change(ctrl, logged.instruction, scene)
                self.source.notify_instruction(logged.instruction, scene)

        cmd, ctrl = plan(scene, ctrl)
        if self.grasp_only and ctrl.phase in PLACE_PHASES:
            # held-out-kind episode reached the grasp/place boundary: stop
            # before recording anything, so no placement of this kind can
            # enter a dataset.  Runner state stays at the last grasp tick.
            if "grasp_only" not in self.flags:
                self.flags.append("grasp_only")
            self.finished = True
            return
        # record the executed command: pacing scale, then workspace limits,
        # so recorded actions match what the world actually did
        cmd = clamp_command(
            self.workspace, scale_command(cmd, self.collection.speed_scale(self.mode))
        )
        self.builder.record(scene, ctrl.instruction, cmd, ctrl.phase, ids)
        scene, _ = step(scene, cmd, self.workspace.tick_dt)

        if scene.eef.held_object == ctrl.target_object:
            self.picked = True
        if ctrl.phase == Phase.DONE:
            self._done_streak += 1
        else:
            self._done_streak = 0

        self.scene, self.ctrl = scene, ctrl
        if self._done_streak > self.collection.done_hold_ticks:
            self.finished = True
        elif len(self.builder) >= self.collection.max_ticks:
            self.flags.append("capped")
            self.finished = True

    def run(self) -> Episode:
        while not self.finished:
            self.tick_once()
        return self.finalize()

    def finalize(self, flags: Sequence[str] | None = None) -> Episode:
        obj = self.scene.object_by_kind(self.ctrl.instruction.object_kind)
        within = self.scene.container_of(obj) if obj is not None else None
        placed = (
            within is not None
            and within.color == self.ctrl.instruction.container_color
            and not self.ctrl.failed
        )
        outcome = Outcome(
            pick_success=self.picked,
            place_success=placed,
            ticks_used=len(self.builder),
            retries=self.ctrl.retry_count,
        )
        return self.builder.finalize(
            outcome, tuple(self.flags) if flags is None else tuple(flags)
        )


# --- scripted collection --------------------------------------------------

def collect_episode(
    cfg: HarnessConfig,
    task: TaskSpec,
    mode: str,
    episode_id: int,
    master_seed: int,
    collection: CollectionConfig | None = None,
    schedule: PerturbationSchedule | None = None,
    height: str = "var1",
) -> Episode:
    """One scripted episode; adversarial mode uses the supplied (or default)
    schedule, traditional mode a zero-rate one."""
    coll = collection or CollectionConfig()
    workspace = cfg.workspace_at(height)
    if mode == "adc":
        sched = schedule or adv.default_schedule()
    else:
        sched = adv.zero_schedule()
    sched.validate()
    scene_seed, rng = episode_seed(master_seed, episode_id)
    scene0 = reset_scene(workspace, task, mode, scene_seed, cfg.catalog)
    instruction = Instruction(task.verb, task.object_kind, task.container_color)
    source = ScriptedSource(
        sched, rng, instruction, scene0, cfg.switch_vocabulary(task), coll
    )
    runner = EpisodeRunner(
        workspace,
        task,
        mode,
        scene_seed,
        source,
        coll,
        episode_id,
        catalog=cfg.catalog,
        grasp_only=task.held_out,
    )
    return runner.run()


def _height_cycle(height: str | Sequence[str]) -> tuple[str, ...]:
    heights = (height,) if isinstance(height, str) else tuple(height)
    if not heights:
        raise ConfigError("need at least one height variant")
    return heights


def _serialize(
    cfg: HarnessConfig,
    episodes: Sequence[Episode],
    tasks: Sequence[TaskSpec],
    heights: tuple[str, ...],
    coll: CollectionConfig,
    out_path: str | Path,
) -> dict[str, str]:
    workspace = cfg.workspace_at(heights[0])
    channels = _dataset_channels(cfg, workspace, tasks)
    return write_dataset(
        episodes,
        out_path,
        workspace,
        channels,
        extra_records=[("collection", collection_to_fields(coll))],
    )


def collect_dataset(
    cfg: HarnessConfig,
    mode: str,
    episodes: int,
    master_seed: int,
    tasks: Sequence[TaskSpec] | None = None,
    collection: CollectionConfig | None = None,
    schedule: PerturbationSchedule | None = None,
    height: str | Sequence[str] = "var1",
    out_path: str | Path | None = None,
) -> tuple[list[Episode], dict[str, str] | None]:
    """Round-robin the collection tasks (and height variants, when several
    are given) for ``episodes`` episodes; optionally serialize with the
    collection config embedded in the manifest."""
    coll = collection or CollectionConfig()
    task_list = list(tasks if tasks is not None else cfg.collection_tasks())
    heights = _height_cycle(height)
    if episodes > 0 and not task_list:
        raise ConfigError("no tasks to collect")
    out: list[Episode] = []
    for i in range(episodes):
        task = task_list[i % len(task_list)]
        out.append(
            collect_episode(
                cfg, task, mode, i, master_seed, coll, schedule,
                heights[i % len(heights)],
            )
        )
    manifest = None
    if out_path is not None:
        manifest = _serialize(cfg, out, task_list, heights, coll, out_path)
    return out, manifest


def collect_frames(
    cfg: HarnessConfig,
    mode: str,
    frames: int,
    master_seed: int,
    tasks: Sequence[TaskSpec] | None = None,
    collection: CollectionConfig | None = None,
    schedule: PerturbationSchedule | None = None,
    height: str | Sequence[str] = "var1",
    out_path: str | Path | None = None,
) -> tuple[list[Episode], dict[str, str] | None]:
    """Collect whole episodes until the data-unit total reaches ``frames``.

    The final episode's tick cap is lowered to the remaining budget, so
    the total lands exactly on ``frames``.  This is how collection modes
    are compared at equal data amounts: adversarial episodes run longer
    than streamlined ones, so an equal episode count would not hold the
    training-set size fixed.
    """
    if frames < 1:
        raise ConfigError("frames must be >= 1")
    coll = collection or CollectionConfig()
    task_list = list(tasks if tasks is not None else cfg.collection_tasks())
    heights = _height_cycle(height)
    if not task_list:
        raise ConfigError("no tasks to collect")
    out: list[Episode] = []
    total = 0
    i = 0
    while total < frames:
        cap = min(coll.max_ticks, frames - total)
        capped = replace(coll, max_ticks=cap,
                         adc_extension_ticks=min(coll.adc_extension_ticks, cap))
        ep = collect_episode(
            cfg, task_list[i % len(task_list)], mode, i, master_seed,
            capped, schedule, heights[i % len(heights)],
        )
        out.append(ep)
        total += len(ep.units)
        i += 1
    manifest = None
    if out_path is not None:
        manifest = _serialize(cfg, out, task_list, heights, coll, out_path)
    return out, manifest


def _dataset_channels(
    cfg: HarnessConfig, workspace: WorkspaceConfig, tasks: Sequence[TaskSpec]
) -> tuple[str, ...]:
    if tasks:
        probe = reset_scene(workspace, tasks[0], "traditional", 0, cfg.catalog)
    else:
        probe = reset_scene(
            workspace, cfg.tasks[0], "traditional", 0, cfg.catalog
        )
    return semantic_channels(probe)


# --- replay and audit -------------------------------------------------------

def replay_episode(
    episode: Episode,
    workspace: WorkspaceConfig,
    collection: CollectionConfig,
    on_event: Callable[[SceneState, PerturbationEvent], None] | None = None,
) -> Episode:
    """Reconstruct an episode from its seed and event log alone.

    The rebuilt episode must match the original byte for byte; a diverging
    phase or tick count raises, which makes this the integrity check behind
    the post-hoc adversary audit.
    """
    source = ReplaySource(episode.event_log)
    runner = EpisodeRunner(
        workspace,
        episode.task,
        episode.mode,
        episode.seed,
        source,
        collection,
        episode.id,
        verbatim_events=True,
        on_event=on_event,
        grasp_only=episode.task.held_out,
    )
    for unit in episode.units:
        runner.tick_once()
        got = runner.builder._units[-1]
        if got.tick != unit.tick or got.phase_label != unit.phase_label:
            raise InvalidEpisodeError(
                f"replay diverged at tick {unit.tick}: "
                f"{got.phase_label} vs {unit.phase_label}"
            )
    return runner.finalize(flags=episode.flags)


@dataclass(frozen=True, slots=True)
class AuditViolation:
    episode_id: int
    tick: int
    kind: str
    detail: str


def audit_dataset(dataset: Dataset) -> list[AuditViolation]:
    """Post-hoc adversary-gating scan over recorded logs.

    Replays every episode and, at each event application, recomputes from
    the reconstructed scene (not from anything the adversary logged):

    - impulses must fire only within the proximity threshold of the target;
    - no perturbation may ever move a held object.
    """
    coll_fields = dataset.extras.get("collection")
    collection = (
        collection_from_fields(coll_fields) if coll_fields else CollectionConfig()
    )
    violations: list[AuditViolation] = []
    threshold = dataset.workspace.proximity_threshold

    for episode in dataset.episodes:
        def check(scene: SceneState, ev: PerturbationEvent) -> None:
            if ev.kind in ("impulse_object", "relocate_object"):
                obj = scene.object_by_id(ev.target_id or "")
                if obj is not None and obj.held:
                    violations.append(
                        AuditViolation(
                            episode.id, ev.tick, ev.kind, "target object is held"
                        )
                    )
            if ev.kind == "impulse_object":
                obj = scene.object_by_id(ev.target_id or "")
                if obj is None:
                    return
                eef = scene.eef
                d = (
                    (eef.x - obj.x) ** 2
                    + (eef.y - obj.y) ** 2
                    + (eef.z - obj.z) ** 2
                ) ** 0.5
                if d >= threshold:
                    violations.append(
                        AuditViolation(
                            episode.id,
                            ev.tick,
                            ev.kind,
                            f"impulse at distance {d:.4f} >= {threshold}",
                        )
                    )
        workspace = dataset.workspace.with_height(episode.table_height)
        replay_episode(episode, workspace, collection, on_event=check)
    return violations
