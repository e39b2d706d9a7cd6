"""Closed-loop evaluation suites for trained policies.

Each rollout runs an actor (policy or scripted expert) against a fresh
scene; the scenario's perturbation plan fires exactly once at a
geometric trigger, mirroring how the live adversary intervenes during
collection.  Suites enumerate fixed scenario grids and report per-cell
success rates over a deterministic set of seeds.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from . import adversary as adv
from .config import HarnessConfig, TaskSpec, default_config
from .errors import ConfigError
from .expert import (
    Instruction,
    Phase,
    new_controller,
    on_instruction_change,
    plan,
)
from .policy import FeatureSpec, PolicyParams, feature_spec, featurize, forward
from .policy.train import TrainConfig, train
from .recorder import Dataset, Episode
from .records import encode_record
from .sim import EefCommand, SceneState, observe, reset_scene, step
from .sim.state import dist3

__all__ = [
    "PerturbationPlan",
    "Scenario",
    "RolloutOutcome",
    "CellResult",
    "EvalReport",
    "PolicyActor",
    "ExpertActor",
    "run_episode",
    "eval_suite",
    "subset_episodes",
    "SUITES",
]

SUITES = ("static", "dynamic_visual", "dynamic_linguistic", "masked", "efficiency")

_PLAN_KINDS = ("none", "visual", "linguistic")
_VISUAL_TARGETS = ("object", "container")
_TIMINGS = ("before", "during", "after")
_POSITION_MODES = ("normal", "varied")

# ticks the goal condition must hold before a rollout ends early
_SETTLE_TICKS = 15
# fallback tick for the object-relocation trigger if the policy never
# approaches; keeps the perturbation "before the effective actions"
_OBJECT_TRIGGER_FALLBACK = 40


@dataclass(frozen=True, slots=True)
class PerturbationPlan:
    """At most one scripted intervention per rollout.

    ``visual`` relocates the instructed object or container once;
    ``linguistic`` replaces the instruction once, at the given timing
    relative to the grasp.
    """

    kind: str = "none"
    visual_target: str | None = None
    timing: str | None = None

    def validate(self) -> None:
        if self.kind not in _PLAN_KINDS:
            raise ConfigError(f"unknown plan kind {self.kind!r}")
        if self.kind == "visual":
            if self.visual_target not in _VISUAL_TARGETS:
                raise ConfigError(
                    f"visual plan needs a target in {_VISUAL_TARGETS}, "
                    f"got {self.visual_target!r}"
                )
        elif self.visual_target is not None:
            raise ConfigError("visual_target only applies to visual plans")
        if self.kind == "linguistic":
            if self.timing not in _TIMINGS:
                raise ConfigError(
                    f"linguistic plan needs a timing in {_TIMINGS}, got {self.timing!r}"
                )
        elif self.timing is not None:
            raise ConfigError("timing only applies to linguistic plans")


@dataclass(frozen=True, slots=True)
class Scenario:
    """One evaluation condition: where things start, what gets perturbed,
    and what the policy is allowed to see."""

    task: TaskSpec
    height: str = "var1"
    position_mode: str = "normal"
    plan: PerturbationPlan = PerturbationPlan()
    mask: tuple[str, ...] = ()
    max_ticks: int = 400

    def validate(self, cfg: HarnessConfig) -> None:
        if self.position_mode not in _POSITION_MODES:
            raise ConfigError(f"unknown position mode {self.position_mode!r}")
        self.plan.validate()
        cfg.height(self.height)  # raises on unknown variant
        camera_names = {c.name for c in cfg.workspace.cameras}
        unknown = set(self.mask) - camera_names
        if unknown:
            raise ConfigError(f"mask names unknown cameras {sorted(unknown)}")
        if self.max_ticks < 1:
            raise ConfigError("max_ticks must be >= 1")

    @property
    def reset_mode(self) -> str:
        """Varied positions use the full-table draw, normal the tight one."""
        return "uniform" if self.position_mode == "varied" else "traditional"


@dataclass(frozen=True, slots=True)
class RolloutOutcome:
    """Judged result of one rollout.

    ``place_success`` requires a completed pick in the same rollout, so a
    perturbation that happens to drop the object near the goal never
    counts as task success."""

    pick_success: bool
    place_success: bool
    ticks_used: int
    events: tuple[adv.PerturbationEvent, ...]
    final_instruction: Instruction


class Actor(Protocol):
    def act(self, scene: SceneState, instruction: Instruction) -> EefCommand: ...


class PolicyActor:
    """Feeds featurized observations through trained parameters."""

    def __init__(
        self,
        params: PolicyParams,
        spec: FeatureSpec,
        mask: Sequence[str] = (),
    ):
        if spec.dim != params.in_dim:
            raise ConfigError(
                f"feature spec dim {spec.dim} does not match params input "
                f"dim {params.in_dim}"
            )
        self.params = params
        self.spec = spec
        self.mask = tuple(mask)

    def act(self, scene: SceneState, instruction: Instruction) -> EefCommand:
        vec = featurize(self.spec, observe(scene), instruction, self.mask)
        out = forward(self.params, vec)
        return EefCommand(
            vx=float(out[0]),
            vy=float(out[1]),
            vz=float(out[2]),
            dyaw=float(out[3]),
            gripper_target=float(out[4]),
        )


class ExpertActor:
    """The scripted teleoperator driven through the same actor interface."""

    def __init__(self) -> None:
        self._ctrl = None

    def act(self, scene: SceneState, instruction: Instruction) -> EefCommand:
        if self._ctrl is None:
            self._ctrl = new_controller(scene, instruction)
        elif self._ctrl.instruction != instruction:
            self._ctrl = on_instruction_change(self._ctrl, instruction, scene)
        cmd, self._ctrl = plan(scene, self._ctrl)
        return cmd

    @property
    def phase(self) -> Phase | None:
        return None if self._ctrl is None else self._ctrl.phase


def _placed(scene: SceneState, instruction: Instruction) -> bool:
    obj = scene.object_by_kind(instruction.object_kind)
    if obj is None or obj.held:
        return False
    container = scene.container_of(obj)
    return container is not None and container.color == instruction.container_color


def _fire_plan(
    scene: SceneState,
    plan_: PerturbationPlan,
    instruction: Instruction,
    rng: np.random.Generator,
    cfg: HarnessConfig,
) -> tuple[bool, SceneState, Instruction, adv.PerturbationEvent | None]:
    """Check the plan's trigger; if it fires, apply it and return the new
    scene/instruction plus the applied event."""
    ws = scene.workspace
    eef = scene.eef
    obj = scene.object_by_kind(instruction.object_kind)
    held_target = obj is not None and scene.eef.held_object == obj.id
    d_obj = (
        dist3(eef.x, eef.y, eef.z, obj.x, obj.y, obj.z) if obj is not None else float("inf")
    )

    if plan_.kind == "visual":
        if plan_.visual_target == "object":
            trigger = (
                obj is not None
                and not obj.held
                and (
                    d_obj < 2 * ws.proximity_threshold
                    or scene.tick >= _OBJECT_TRIGGER_FALLBACK
                )
            )
            target_id = obj.id if obj is not None else None
            kind = "relocate_object"
        else:
            lifted = eef.z >= ws.table_height + ws.lift_height - 1e-9
            trigger = held_target and lifted
            cont = scene.container_by_color(instruction.container_color)
            target_id = cont.id if cont is not None else None
            kind = "relocate_container"
        if not trigger or target_id is None:
            return False, scene, instruction, None
        event = adv.draw_relocation(scene, rng, target_id, kind, "EVAL")
        scene, applied = adv.apply_event(scene, event)
        return True, scene, instruction, applied

    # linguistic: "before" rewrites the goal in mid-flight while the hand
    # is still outside the grasp zone (with a tick fallback so the switch
    # always happens even against a policy that never approaches);
    # "during" rewrites it deep inside the grasp attempt; "after" waits
    # until the object is in hand.  Any rollout that reaches a grasp has
    # necessarily passed both distance triggers, so a switch can never be
    # skipped on a successful trajectory.
    if plan_.timing == "before":
        trigger = not held_target and (
            d_obj < 1.5 * ws.proximity_threshold
            or scene.tick >= _OBJECT_TRIGGER_FALLBACK
        )
        switch_kind = "object"
    elif plan_.timing == "during":
        trigger = not held_target and d_obj < 0.5 * ws.proximity_threshold
        switch_kind = "object"
    else:  # after
        trigger = held_target
        switch_kind = "container"
    if not trigger:
        return False, scene, instruction, None
    new_instr = adv.switch_instruction(
        instruction, switch_kind, rng, cfg.switch_vocabulary()
    )
    event = adv.PerturbationEvent(
        tick=scene.tick,
        kind="instruction_switch",
        source="scripted",
        phase_at_event="EVAL",
        switch_kind=switch_kind,
        instruction=new_instr,
    )
    return True, scene, new_instr, event


def run_episode(
    actor: Actor,
    scenario: Scenario,
    seed: int,
    cfg: HarnessConfig | None = None,
) -> RolloutOutcome:
    """One closed-loop rollout; the plan fires at most once.

    Success is judged from world state: pick needs the instructed object
    held above the lift height, place additionally needs it to end at
    rest inside the instructed container.  Instruction switches re-judge
    against the replacement instruction.
    """
    cfg = cfg or default_config()
    scenario.validate(cfg)
    ws = cfg.workspace_at(scenario.height)
    scene = reset_scene(ws, scenario.task, scenario.reset_mode, seed, cfg.catalog)
    instruction = Instruction(
        scenario.task.verb, scenario.task.object_kind, scenario.task.container_color
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 9001])))

    fired = False
    events: list[adv.PerturbationEvent] = []
    pick = False
    settle = 0
    ticks = 0
    for _ in range(scenario.max_ticks):
        if not fired and scenario.plan.kind != "none":
            fired, scene, instruction, event = _fire_plan(
                scene, scenario.plan, instruction, rng, cfg
            )
            if event is not None:
                events.append(event)
        cmd = actor.act(scene, instruction)
        scene, _sim_events = step(scene, cmd, ws.tick_dt)
        ticks += 1

        obj = scene.object_by_kind(instruction.object_kind)
        if (
            obj is not None
            and scene.eef.held_object == obj.id
            and scene.eef.z >= ws.table_height + ws.lift_height - 1e-9
        ):
            pick = True
        if _placed(scene, instruction) and scene.eef.held_object is None:
            settle += 1
            if settle >= _SETTLE_TICKS:
                break
        else:
            settle = 0

    place = pick and _placed(scene, instruction) and scene.eef.held_object is None
    return RolloutOutcome(
        pick_success=pick,
        place_success=place,
        ticks_used=ticks,
        events=tuple(events),
        final_instruction=instruction,
    )


# --- suites -----------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class CellResult:
    """Success rate of one scenario cell plus its raw outcomes."""

    suite: str
    labels: tuple[tuple[str, str], ...]
    rate: float
    n: int
    outcomes: tuple[RolloutOutcome, ...]

    def label(self, key: str) -> str:
        for k, v in self.labels:
            if k == key:
                return v
        raise KeyError(key)


@dataclass(frozen=True, slots=True)
class EvalReport:
    suite: str
    n_seeds: int
    cells: tuple[CellResult, ...]

    def rate(self, **labels: str) -> float:
        """Rate of the unique cell matching all given labels."""
        matches = [
            c
            for c in self.cells
            if all((k, v) in c.labels for k, v in labels.items())
        ]
        if len(matches) != 1:
            raise KeyError(f"labels {labels} match {len(matches)} cells, need exactly 1")
        return matches[0].rate

    def table_text(self) -> str:
        keys: list[str] = []
        for cell in self.cells:
            for k, _ in cell.labels:
                if k not in keys:
                    keys.append(k)
        header = keys + ["rate", "n"]
        rows = [
            [dict(cell.labels).get(k, "-") for k in keys]
            + [f"{cell.rate:.2f}", str(cell.n)]
            for cell in self.cells
        ]
        widths = [
            max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
            for i in range(len(header))
        ]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [f"suite: {self.suite} ({self.n_seeds} seeds per cell)"]
        lines.append(fmt.format(*header))
        lines.append(fmt.format(*["-" * w for w in widths]))
        lines.extend(fmt.format(*r) for r in rows)
        return "\n".join(lines)

    def records(self) -> list[str]:
        lines = [
            encode_record(
                "eval", [("suite", self.suite), ("n_seeds", str(self.n_seeds))]
            )
        ]
        for cell in self.cells:
            fields = [("suite", self.suite)]
            fields.extend(cell.labels)
            fields.append(("rate", repr(cell.rate)))
            fields.append(("n", str(cell.n)))
            lines.append(encode_record("eval_cell", fields))
        return lines


def _cell_seed(cell_key: str, index: int) -> int:
    """Deterministic per-rollout seed, independent of enumeration order."""
    ss = np.random.SeedSequence([zlib.crc32(cell_key.encode("ascii")), index])
    return int(ss.generate_state(1)[0])


def _rollouts(
    make_actor: Callable[[], Actor],
    scenario_of: Callable[[int, int], Scenario],
    cell_key: str,
    n_seeds: int,
    cfg: HarnessConfig,
) -> list[RolloutOutcome]:
    out = []
    for i in range(n_seeds):
        seed = _cell_seed(cell_key, i)
        out.append(run_episode(make_actor(), scenario_of(i, seed), seed, cfg))
    return out


def _rate(outcomes: Sequence[RolloutOutcome], metric: str) -> float:
    if metric == "pick":
        return sum(o.pick_success for o in outcomes) / len(outcomes)
    return sum(o.place_success for o in outcomes) / len(outcomes)


def _actor_factory(
    params: PolicyParams,
    cfg: HarnessConfig,
    mask: Sequence[str] = (),
    height: str = "var1",
) -> Callable[[], PolicyActor]:
    # the feature layout carries the scenario's work-surface height so the
    # policy's relative-height input stays calibrated across variations
    spec = feature_spec(cfg.workspace_at(height), cfg.catalog)
    return lambda: PolicyActor(params, spec, mask)


def _task_cycle(tasks: Sequence[TaskSpec], i: int) -> TaskSpec:
    return tasks[i % len(tasks)]


def _static_cells(
    params: PolicyParams, n_seeds: int, cfg: HarnessConfig
) -> list[CellResult]:
    trained = cfg.training_tasks()
    heldout = tuple(t for t in cfg.tasks if t.held_out)
    if not heldout:
        raise ConfigError("static suite needs at least one held-out task")
    cells: list[CellResult] = []
    for height, _ in cfg.heights:
        make_actor = _actor_factory(params, cfg, height=height)
        for positions in _POSITION_MODES:
            key = f"static/{height}/{positions}"
            trained_outcomes = _rollouts(
                make_actor,
                lambda i, s, h=height, p=positions: Scenario(
                    task=_task_cycle(trained, i), height=h, position_mode=p
                ),
                key + "/trained",
                n_seeds,
                cfg,
            )
            heldout_outcomes = _rollouts(
                make_actor,
                lambda i, s, h=height, p=positions: Scenario(
                    task=_task_cycle(heldout, i), height=h, position_mode=p
                ),
                key + "/heldout",
                n_seeds,
                cfg,
            )
            for metric, outcomes in (
                ("pick", trained_outcomes),
                ("place", trained_outcomes),
                ("place_c", heldout_outcomes),
            ):
                judged = "place" if metric == "place_c" else metric
                cells.append(
                    CellResult(
                        suite="static",
                        labels=(
                            ("height", height),
                            ("positions", positions),
                            ("metric", metric),
                        ),
                        rate=_rate(outcomes, judged),
                        n=len(outcomes),
                        outcomes=tuple(outcomes),
                    )
                )
    return cells


def _dynamic_visual_cells(
    params: PolicyParams, n_seeds: int, cfg: HarnessConfig
) -> list[CellResult]:
    make_actor = _actor_factory(params, cfg)
    trained = cfg.training_tasks()
    cells = []
    for target in _VISUAL_TARGETS:
        key = f"dynamic_visual/{target}"
        plan_ = PerturbationPlan(kind="visual", visual_target=target)
        outcomes = _rollouts(
            make_actor,
            lambda i, s, p=plan_: Scenario(
                task=_task_cycle(trained, i),
                height="var1",
                position_mode="varied",
                plan=p,
            ),
            key,
            n_seeds,
            cfg,
        )
        for metric in ("pick", "place"):
            cells.append(
                CellResult(
                    suite="dynamic_visual",
                    labels=(("target", target), ("metric", metric)),
                    rate=_rate(outcomes, metric),
                    n=len(outcomes),
                    outcomes=tuple(outcomes),
                )
            )
    return cells


def _dynamic_linguistic_cells(
    params: PolicyParams, n_seeds: int, cfg: HarnessConfig
) -> list[CellResult]:
    make_actor = _actor_factory(params, cfg)
    trained = cfg.training_tasks()
    cells = []
    for timing in _TIMINGS:
        key = f"dynamic_linguistic/{timing}"
        plan_ = PerturbationPlan(kind="linguistic", timing=timing)
        outcomes = _rollouts(
            make_actor,
            lambda i, s, p=plan_: Scenario(
                task=_task_cycle(trained, i),
                height="var1",
                position_mode="varied",
                plan=p,
            ),
            key,
            n_seeds,
            cfg,
        )
        cells.append(
            CellResult(
                suite="dynamic_linguistic",
                labels=(("timing", timing), ("metric", "place")),
                rate=_rate(outcomes, "place"),
                n=len(outcomes),
                outcomes=tuple(outcomes),
            )
        )
    return cells


def _masked_cells(
    params: PolicyParams, n_seeds: int, cfg: HarnessConfig
) -> list[CellResult]:
    trained = cfg.training_tasks()
    cells = []
    for masked in (c.name for c in cfg.workspace.cameras):
        make_actor = _actor_factory(params, cfg, mask=(masked,))
        key = f"masked/{masked}"
        outcomes = _rollouts(
            make_actor,
            lambda i, s, m=masked: Scenario(
                task=_task_cycle(trained, i),
                height="var1",
                position_mode="normal",
                mask=(m,),
            ),
            key,
            n_seeds,
            cfg,
        )
        for metric in ("pick", "place"):
            cells.append(
                CellResult(
                    suite="masked",
                    labels=(("masked", masked), ("metric", metric)),
                    rate=_rate(outcomes, metric),
                    n=len(outcomes),
                    outcomes=tuple(outcomes),
                )
            )
    return cells


def subset_episodes(
    episodes: Sequence[Episode], fraction: float, seed: int
) -> list[Episode]:
    """Seed-deterministic subset with round(fraction * n) episodes, kept in
    collection order."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    n = len(episodes)
    k = int(round(fraction * n))
    if k < 1:
        raise ConfigError(f"fraction {fraction} of {n} episodes leaves none")
    if k == n:
        return list(episodes)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k])))
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
    return [episodes[i] for i in chosen]


def _efficiency_cells(
    adc: Dataset | Sequence[Episode],
    traditional: Dataset | Sequence[Episode],
    n_seeds: int,
    cfg: HarnessConfig,
    train_cfg: TrainConfig | None = None,
) -> list[CellResult]:
    tc = train_cfg or TrainConfig()
    adc_eps = list(adc.episodes) if isinstance(adc, Dataset) else list(adc)
    trad_eps = (
        list(traditional.episodes)
        if isinstance(traditional, Dataset)
        else list(traditional)
    )
    subsets: list[tuple[str, list[Episode]]] = [
        ("adc_20", subset_episodes(adc_eps, 0.2, tc.seed)),
        ("adc_50", subset_episodes(adc_eps, 0.5, tc.seed)),
        ("adc_100", adc_eps),
        ("traditional_100", trad_eps),
    ]
    trained_tasks = cfg.training_tasks()
    conditions: list[tuple[str, PerturbationPlan, str]] = [
        ("static_normal", PerturbationPlan(), "normal"),
        ("static_varied", PerturbationPlan(), "varied"),
        ("relocate_object", PerturbationPlan(kind="visual", visual_target="object"), "normal"),
        ("relocate_container", PerturbationPlan(kind="visual", visual_target="container"), "normal"),
    ]
    cells = []
    for name, episodes in subsets:
        params, _ = train(episodes, tc, catalog=cfg.catalog)
        make_actor = _actor_factory(params, cfg)
        all_outcomes: list[RolloutOutcome] = []
        for cond_name, plan_, positions in conditions:
            key = f"efficiency/{name}/{cond_name}"
            outcomes = _rollouts(
                make_actor,
                lambda i, s, p=plan_, pos=positions: Scenario(
                    task=_task_cycle(trained_tasks, i),
                    height="var1",
                    position_mode=pos,
                    plan=p,
                ),
                key,
                n_seeds,
                cfg,
            )
            all_outcomes.extend(outcomes)
            cells.append(
                CellResult(
                    suite="efficiency",
                    labels=(
                        ("dataset", name),
                        ("condition", cond_name),
                        ("metric", "place"),
                    ),
                    rate=_rate(outcomes, "place"),
                    n=len(outcomes),
                    outcomes=tuple(outcomes),
                )
            )
        cells.append(
            CellResult(
                suite="efficiency",
                labels=(("dataset", name), ("condition", "overall"), ("metric", "place")),
                rate=_rate(all_outcomes, "place"),
                n=len(all_outcomes),
                outcomes=tuple(all_outcomes),
            )
        )
    return cells


def eval_suite(
    params: PolicyParams | None,
    suite: str,
    n_seeds: int = 10,
    cfg: HarnessConfig | None = None,
    adc_data: Dataset | Sequence[Episode] | None = None,
    traditional_data: Dataset | Sequence[Episode] | None = None,
    train_cfg: TrainConfig | None = None,
) -> EvalReport:
    """Run one suite's full scenario grid.

    All suites except ``efficiency`` evaluate the given ``params``; the
    efficiency suite instead trains fresh policies on subsets of
    ``adc_data`` plus all of ``traditional_data``.
    """
    cfg = cfg or default_config()
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    if suite == "efficiency":
        if adc_data is None or traditional_data is None:
            raise ConfigError(
                "efficiency suite needs adc_data and traditional_data"
            )
        cells = _efficiency_cells(adc_data, traditional_data, n_seeds, cfg, train_cfg)
    elif suite == "static":
        cells = _static_cells(_require_params(params), n_seeds, cfg)
    elif suite == "dynamic_visual":
        cells = _dynamic_visual_cells(_require_params(params), n_seeds, cfg)
    elif suite == "dynamic_linguistic":
        cells = _dynamic_linguistic_cells(_require_params(params), n_seeds, cfg)
    elif suite == "masked":
        cells = _masked_cells(_require_params(params), n_seeds, cfg)
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    return EvalReport(suite=suite, n_seeds=n_seeds, cells=tuple(cells))


def _require_params(params: PolicyParams | None) -> PolicyParams:
    if params is None:
        raise ConfigError("this suite requires trained policy parameters")
    return params
