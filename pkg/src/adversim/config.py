"""Workspace, camera, task and catalog configuration.

Everything the harness can be told about the world lives here: table
geometry, camera rig, object/container catalogs with their nominal anchor
poses, table-height variants, and task definitions.  Configurations are
immutable; collection code derives per-episode variants with
``dataclasses.replace``.

On disk a configuration is a single INI file (see docs/config_format.md).
``resolve_config`` looks at an explicit path first, then the
``ADVERSIM_CONFIG`` environment variable, then falls back to built-in
defaults.
"""

from __future__ import annotations

import configparser
import io
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .records import fmt_bool, fmt_float, fmt_int, parse_bool, parse_float, parse_int

__all__ = [
    "SCHEMA_VERSION",
    "CONFIG_ENV_VAR",
    "CameraSpec",
    "WorkspaceConfig",
    "TaskSpec",
    "SceneCatalog",
    "HarnessConfig",
    "default_cameras",
    "default_workspace",
    "default_catalog",
    "default_tasks",
    "default_config",
    "load_config",
    "save_config",
    "resolve_config",
    "workspace_to_fields",
    "workspace_from_fields",
]

SCHEMA_VERSION = 1
CONFIG_ENV_VAR = "ADVERSIM_CONFIG"


@dataclass(frozen=True)
class CameraSpec:
    """One synthetic camera.  ``mount`` is ``fixed`` (world pose) or ``eef``
    (rigid offset from the end-effector, inheriting its yaw)."""

    name: str
    mount: str
    x: float
    y: float
    z: float
    yaw: float = 0.0
    width: int = 32
    height: int = 32
    focal_px: float = 40.0

    def validate(self) -> None:
        if not self.name or not self.name.isidentifier():
            raise ConfigError(f"camera name {self.name!r} must be an identifier")
        if self.mount not in ("fixed", "eef"):
            raise ConfigError(f"camera {self.name}: mount must be fixed|eef, got {self.mount!r}")
        if self.width < 4 or self.height < 4:
            raise ConfigError(f"camera {self.name}: resolution too small")
        if not (self.focal_px > 0):
            raise ConfigError(f"camera {self.name}: focal_px must be positive")
        for v in (self.x, self.y, self.z, self.yaw):
            if not math.isfinite(v):
                raise ConfigError(f"camera {self.name}: non-finite pose value")


@dataclass(frozen=True)
class WorkspaceConfig:
    """Table geometry, end-effector limits and interaction thresholds."""

    x_min: float = -0.30
    x_max: float = 0.30
    y_min: float = -0.22
    y_max: float = 0.22
    table_height: float = 0.75
    proximity_threshold: float = 0.15
    grasp_tolerance: float = 0.03
    lift_height: float = 0.12
    tick_dt: float = 0.05
    max_eef_speed: float = 0.50
    max_yaw_rate: float = 2.0
    gripper_rate: float = 4.0
    close_threshold: float = 0.5
    object_radius: float = 0.022
    object_half_height: float = 0.022
    container_radius: float = 0.055
    home_height: float = 0.15
    reach_x_min: float = -0.34
    reach_x_max: float = 0.34
    reach_y_min: float = -0.26
    reach_y_max: float = 0.26
    reach_z_min: float = 0.55
    reach_z_max: float = 1.20
    cameras: tuple[CameraSpec, ...] = field(default_factory=tuple)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError("table bounds must satisfy min < max")
        if not (self.table_height > 0):
            raise ConfigError("table_height must be positive")
        if not (0 < self.grasp_tolerance < self.proximity_threshold):
            raise ConfigError("need 0 < grasp_tolerance < proximity_threshold")
        if not (self.lift_height > 2 * self.object_half_height):
            raise ConfigError("lift_height must clear the object height")
        if not (self.tick_dt > 0 and self.max_eef_speed > 0 and self.max_yaw_rate > 0):
            raise ConfigError("tick_dt, max_eef_speed and max_yaw_rate must be positive")
        if not (self.gripper_rate > 0):
            raise ConfigError("gripper_rate must be positive")
        if not (0 < self.close_threshold < 1):
            raise ConfigError("close_threshold must lie strictly inside (0, 1)")
        if not (0 < self.object_radius < self.container_radius):
            raise ConfigError("need 0 < object_radius < container_radius")
        if not (self.object_half_height > 0 and self.home_height > 0):
            raise ConfigError("object_half_height and home_height must be positive")
        if not (self.reach_x_min <= self.x_min and self.reach_x_max >= self.x_max):
            raise ConfigError("reach box must cover the table in x")
        if not (self.reach_y_min <= self.y_min and self.reach_y_max >= self.y_max):
            raise ConfigError("reach box must cover the table in y")
        if not (self.reach_z_min < self.table_height):
            raise ConfigError("reach_z_min must lie below the table surface")
        clearance = max(self.lift_height, self.home_height) + 0.02
        if not (self.reach_z_max > self.table_height + clearance):
            raise ConfigError("reach_z_max leaves no room to lift above the table")
        if not self.cameras:
            raise ConfigError("at least one camera is required")
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ConfigError("camera names must be unique")
        for cam in self.cameras:
            cam.validate()
            if cam.mount == "fixed" and cam.z < self.table_height + 0.25:
                raise ConfigError(f"fixed camera {cam.name} sits too close to the table")

    # small geometry helpers used across the package
    def in_bounds_xy(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def clamp_table_xy(self, x: float, y: float) -> tuple[float, float]:
        return (min(max(x, self.x_min), self.x_max), min(max(y, self.y_min), self.y_max))

    def clamp_reach(self, x: float, y: float, z: float) -> tuple[float, float, float]:
        return (
            min(max(x, self.reach_x_min), self.reach_x_max),
            min(max(y, self.reach_y_min), self.reach_y_max),
            min(max(z, max(self.reach_z_min, self.table_height + 0.002)), self.reach_z_max),
        )

    def object_rest_z(self) -> float:
        return self.table_height + self.object_half_height

    def home_pose(self) -> tuple[float, float, float]:
        return (0.0, 0.0, self.table_height + self.home_height)

    def with_height(self, table_height: float) -> "WorkspaceConfig":
        """This workspace with the platform moved to ``table_height``.

        A height variant models one rigid bench at a different setting:
        the table surface, the camera rig and the arm mount travel
        together, so fixed cameras and the vertical reach window shift
        by the same offset as the table.
        """
        dz = table_height - self.table_height
        if dz == 0.0:
            return self
        cams = tuple(
            replace(c, z=c.z + dz) if c.mount == "fixed" else c
            for c in self.cameras
        )
        return replace(
            self,
            table_height=table_height,
            reach_z_min=self.reach_z_min + dz,
            reach_z_max=self.reach_z_max + dz,
            cameras=cams,
        )


@dataclass(frozen=True)
class TaskSpec:
    """A pick-and-place (or push) task: which object goes to which container.

    ``mu`` is the nominal spawn point of the target object; collection draws
    around it with ``sigma_adv`` or ``sigma_trad`` depending on mode.
    """

    name: str
    object_kind: str
    container_color: str
    mu: tuple[float, float]
    sigma_adv: float = 0.085
    sigma_trad: float = 0.005
    verb: str = "grasp_place"
    held_out: bool = False


@dataclass(frozen=True)
class SceneCatalog:
    """Object kinds, container colors, their anchor poses, and verbs."""

    fruits: tuple[str, ...] = ("orange", "kiwi", "peach")
    colors: tuple[str, ...] = ("green", "blue", "purple")
    verbs: tuple[str, ...] = ("grasp_place", "push")
    fruit_anchors: tuple[tuple[str, float, float], ...] = (
        ("orange", -0.10, -0.08),
        ("kiwi", 0.00, -0.12),
        ("peach", 0.10, -0.08),
    )
    container_anchors: tuple[tuple[str, float, float], ...] = (
        ("green", -0.19, 0.14),
        ("blue", 0.19, 0.14),
        ("purple", 0.00, 0.16),
    )
    distractor_sigma: float = 0.004

    def fruit_anchor(self, kind: str) -> tuple[float, float]:
        for name, x, y in self.fruit_anchors:
            if name == kind:
                return (x, y)
        raise ConfigError(f"no anchor for object kind {kind!r}")

    def container_anchor(self, color: str) -> tuple[float, float]:
        for name, x, y in self.container_anchors:
            if name == color:
                return (x, y)
        raise ConfigError(f"no anchor for container color {color!r}")

    def validate(self, workspace: WorkspaceConfig) -> None:
        if not self.fruits or not self.colors or not self.verbs:
            raise ConfigError("catalog lists must be non-empty")
        for group in (self.fruits, self.colors):
            if len(set(group)) != len(group):
                raise ConfigError("catalog entries must be unique")
        if set(self.fruits) & set(self.colors):
            raise ConfigError("object kinds and container colors must not collide")
        anchored_fruits = {name for name, _, _ in self.fruit_anchors}
        anchored_colors = {name for name, _, _ in self.container_anchors}
        if anchored_fruits != set(self.fruits) or anchored_colors != set(self.colors):
            raise ConfigError("every catalog entry needs exactly one anchor")
        for name, x, y in self.fruit_anchors + self.container_anchors:
            if not workspace.in_bounds_xy(x, y):
                raise ConfigError(f"anchor for {name!r} lies outside the table")
        if not (0 < self.distractor_sigma < 0.05):
            raise ConfigError("distractor_sigma out of range")


@dataclass(frozen=True)
class HarnessConfig:
    """Top-level bundle: workspace at the base height, height variants,
    catalog and task table."""

    workspace: WorkspaceConfig
    catalog: SceneCatalog
    heights: tuple[tuple[str, float], ...]
    tasks: tuple[TaskSpec, ...]
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        self.workspace.validate()
        self.catalog.validate(self.workspace)
        if not self.heights:
            raise ConfigError("at least one height variant is required")
        names = [n for n, _ in self.heights]
        if len(set(names)) != len(names):
            raise ConfigError("height variant names must be unique")
        for name, h in self.heights:
            self.workspace.with_height(h).validate()
        if not self.tasks:
            raise ConfigError("at least one task is required")
        task_names = [t.name for t in self.tasks]
        if len(set(task_names)) != len(task_names):
            raise ConfigError("task names must be unique")
        for t in self.tasks:
            if t.object_kind not in self.catalog.fruits:
                raise ConfigError(f"task {t.name}: unknown object kind {t.object_kind!r}")
            if t.container_color not in self.catalog.colors:
                raise ConfigError(f"task {t.name}: unknown container color {t.container_color!r}")
            if t.verb not in self.catalog.verbs:
                raise ConfigError(f"task {t.name}: unknown verb {t.verb!r}")
            if not (t.sigma_adv > 0 and t.sigma_trad > 0):
                raise ConfigError(f"task {t.name}: sigmas must be positive")
            if not self.workspace.in_bounds_xy(*t.mu):
                raise ConfigError(f"task {t.name}: mu lies outside the table")

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"unknown task {name!r}")

    def height(self, name: str) -> float:
        for n, h in self.heights:
            if n == name:
                return h
        raise ConfigError(f"unknown height variant {name!r}")

    def workspace_at(self, height_name: str) -> WorkspaceConfig:
        return self.workspace.with_height(self.height(height_name))

    def training_tasks(self) -> tuple[TaskSpec, ...]:
        return tuple(t for t in self.tasks if not t.held_out)

    def collection_tasks(self) -> tuple[TaskSpec, ...]:
        """Tasks the collector cycles through.

        The training tasks, plus one grasp-source task per held-out object
        kind.  Held-out kinds must still be grasped in training data --
        otherwise their identity embedding never leaves random
        initialization and composition at evaluation time has nothing to
        compose.  Episodes for these extra tasks are cut at the grasp/place
        boundary during collection, and they pair the kind with a container
        color none of its held-out tasks use, so no held-out
        (object, container) combination ever appears in a recorded label.
        """
        trained = self.training_tasks()
        extras: list[TaskSpec] = []
        seen: set[str] = set()
        for task in self.tasks:
            if not task.held_out or task.object_kind in seen:
                continue
            seen.add(task.object_kind)
            reserved = {
                t.container_color
                for t in self.tasks
                if t.held_out and t.object_kind == task.object_kind
            }
            free = [c for c in self.catalog.colors if c not in reserved]
            if not free:
                raise ConfigError(
                    f"no container color left to pair with held-out kind "
                    f"{task.object_kind!r} for grasp collection"
                )
            extras.append(
                replace(
                    task,
                    name=f"{task.object_kind}_{free[0]}_grasp",
                    container_color=free[0],
                )
            )
        return trained + tuple(extras)

    def switch_vocabulary(self, for_task: TaskSpec | None = None) -> SceneCatalog:
        """Catalog restricted to instruction fields a mid-episode switch may
        target: object kinds of held-out tasks are excluded so relabelled
        units never leak held-out placements into training data.  In an
        episode whose own task is held out, container colors reserved for
        that kind's evaluation are excluded too, keeping even the
        instruction *labels* of its grasp units clear of held-out pairs.
        Scene composition always uses the full catalog."""
        held_out = {t.object_kind for t in self.tasks if t.held_out}
        fruits = tuple(k for k in self.catalog.fruits if k not in held_out)
        if not fruits:
            raise ConfigError("every object kind is held out; nothing to switch to")
        colors = self.catalog.colors
        if for_task is not None and for_task.held_out:
            reserved = {
                t.container_color
                for t in self.tasks
                if t.held_out and t.object_kind == for_task.object_kind
            }
            colors = tuple(c for c in colors if c not in reserved)
            if not colors:
                raise ConfigError(
                    f"no switch-safe container color for held-out kind "
                    f"{for_task.object_kind!r}"
                )
        return replace(self.catalog, fruits=fruits, colors=colors)


def default_cameras() -> tuple[CameraSpec, ...]:
    return (
        CameraSpec(name="head", mount="fixed", x=0.0, y=0.0, z=1.75, yaw=0.0, focal_px=40.0),
        CameraSpec(name="wrist", mount="eef", x=0.0, y=0.0, z=0.08, yaw=0.0, focal_px=60.0),
    )


def default_workspace() -> WorkspaceConfig:
    return WorkspaceConfig(cameras=default_cameras())


def default_catalog() -> SceneCatalog:
    return SceneCatalog()


def default_tasks(catalog: SceneCatalog | None = None) -> tuple[TaskSpec, ...]:
    """Six tasks: three fruits crossed with the two training containers.

    Tasks moving the kiwi are flagged held-out: its placements never enter
    training data (collection records kiwi episodes only up to the
    grasp/place boundary, against a third container color), so these tasks
    probe composition of skills never demonstrated together.
    """
    cat = catalog or default_catalog()
    tasks = []
    for kind in cat.fruits:
        for color in ("green", "blue"):
            tasks.append(
                TaskSpec(
                    name=f"{kind}_{color}",
                    object_kind=kind,
                    container_color=color,
                    mu=cat.fruit_anchor(kind),
                    held_out=(kind == "kiwi"),
                )
            )
    return tuple(tasks)


def default_config() -> HarnessConfig:
    cfg = HarnessConfig(
        workspace=default_workspace(),
        catalog=default_catalog(),
        heights=(("var1", 0.75), ("var2", 0.85), ("var3", 0.95)),
        tasks=default_tasks(),
    )
    cfg.validate()
    return cfg


# --- INI serialization ------------------------------------------------------

_WS_FLOATS = (
    "x_min", "x_max", "y_min", "y_max", "table_height", "proximity_threshold",
    "grasp_tolerance", "lift_height", "tick_dt", "max_eef_speed", "max_yaw_rate",
    "gripper_rate", "close_threshold", "object_radius", "object_half_height",
    "container_radius", "home_height", "reach_x_min", "reach_x_max", "reach_y_min",
    "reach_y_max", "reach_z_min", "reach_z_max",
)
_CAM_FLOATS = ("x", "y", "z", "yaw", "focal_px")
_CAM_INTS = ("width", "height")


def save_config(cfg: HarnessConfig, path: str | Path) -> None:
    cfg.validate()
    parser = configparser.ConfigParser(interpolation=None)
    parser["harness"] = {"schema_version": fmt_int(cfg.schema_version)}
    ws = cfg.workspace
    parser["workspace"] = {k: fmt_float(getattr(ws, k)) for k in _WS_FLOATS}
    for cam in ws.cameras:
        sec = f"camera.{cam.name}"
        parser[sec] = {"mount": cam.mount}
        for k in _CAM_FLOATS:
            parser[sec][k] = fmt_float(getattr(cam, k))
        for k in _CAM_INTS:
            parser[sec][k] = fmt_int(getattr(cam, k))
    cat = cfg.catalog
    parser["catalog"] = {
        "fruits": " ".join(cat.fruits),
        "colors": " ".join(cat.colors),
        "verbs": " ".join(cat.verbs),
        "distractor_sigma": fmt_float(cat.distractor_sigma),
    }
    parser["anchors.fruit"] = {n: f"{fmt_float(x)} {fmt_float(y)}" for n, x, y in cat.fruit_anchors}
    parser["anchors.container"] = {
        n: f"{fmt_float(x)} {fmt_float(y)}" for n, x, y in cat.container_anchors
    }
    parser["heights"] = {n: fmt_float(h) for n, h in cfg.heights}
    for t in cfg.tasks:
        parser[f"task.{t.name}"] = {
            "object": t.object_kind,
            "container": t.container_color,
            "mu": f"{fmt_float(t.mu[0])} {fmt_float(t.mu[1])}",
            "sigma_adv": fmt_float(t.sigma_adv),
            "sigma_trad": fmt_float(t.sigma_trad),
            "verb": t.verb,
            "held_out": fmt_bool(t.held_out),
        }
    buf = io.StringIO()
    parser.write(buf)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_xy(raw: str, where: str) -> tuple[float, float]:
    parts = raw.split()
    if len(parts) != 2:
        raise ConfigError(f"{where}: expected two floats, got {raw!r}")
    return (parse_float(parts[0]), parse_float(parts[1]))


def load_config(path: str | Path) -> HarnessConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    try:
        schema = parse_int(parser["harness"]["schema_version"])
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {schema}")
        ws_kwargs = {k: parse_float(parser["workspace"][k]) for k in _WS_FLOATS}
        cams = []
        for sec in parser.sections():
            if not sec.startswith("camera."):
                continue
            name = sec.removeprefix("camera.")
            cam_kwargs = {"name": name, "mount": parser[sec]["mount"]}
            for k in _CAM_FLOATS:
                cam_kwargs[k] = parse_float(parser[sec][k])
            for k in _CAM_INTS:
                cam_kwargs[k] = parse_int(parser[sec][k])
            cams.append(CameraSpec(**cam_kwargs))
        workspace = WorkspaceConfig(cameras=tuple(cams), schema_version=schema, **ws_kwargs)
        cat_sec = parser["catalog"]
        catalog = SceneCatalog(
            fruits=tuple(cat_sec["fruits"].split()),
            colors=tuple(cat_sec["colors"].split()),
            verbs=tuple(cat_sec["verbs"].split()),
            fruit_anchors=tuple(
                (n, *_parse_xy(v, f"anchors.fruit.{n}")) for n, v in parser["anchors.fruit"].items()
            ),
            container_anchors=tuple(
                (n, *_parse_xy(v, f"anchors.container.{n}"))
                for n, v in parser["anchors.container"].items()
            ),
            distractor_sigma=parse_float(cat_sec["distractor_sigma"]),
        )
        heights = tuple((n, parse_float(v)) for n, v in parser["heights"].items())
        tasks = []
        for sec in parser.sections():
            if not sec.startswith("task."):
                continue
            t = parser[sec]
            tasks.append(
                TaskSpec(
                    name=sec.removeprefix("task."),
                    object_kind=t["object"],
                    container_color=t["container"],
                    mu=_parse_xy(t["mu"], sec),
                    sigma_adv=parse_float(t["sigma_adv"]),
                    sigma_trad=parse_float(t["sigma_trad"]),
                    verb=t.get("verb", "grasp_place"),
                    held_out=parse_bool(t.get("held_out", "0")),
                )
            )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    cfg = HarnessConfig(
        workspace=workspace,
        catalog=catalog,
        heights=heights,
        tasks=tuple(tasks),
        schema_version=schema,
    )
    cfg.validate()
    return cfg


def resolve_config(path: str | Path | None = None) -> HarnessConfig:
    """Explicit path > ADVERSIM_CONFIG environment variable > defaults."""
    if path is not None:
        return load_config(path)
    env = os.environ.get(CONFIG_ENV_VAR)
    if env:
        return load_config(env)
    return default_config()


# --- flat key/value form (used inside dataset manifests) --------------------


def workspace_to_fields(ws: WorkspaceConfig) -> list[tuple[str, str]]:
    fields = [(f"ws_{k}", fmt_float(getattr(ws, k))) for k in _WS_FLOATS]
    fields.append(("ws_cameras", " ".join(c.name for c in ws.cameras)))
    for cam in ws.cameras:
        fields.append((f"cam_{cam.name}_mount", cam.mount))
        for k in _CAM_FLOATS:
            fields.append((f"cam_{cam.name}_{k}", fmt_float(getattr(cam, k))))
        for k in _CAM_INTS:
            fields.append((f"cam_{cam.name}_{k}", fmt_int(getattr(cam, k))))
    return fields


def workspace_from_fields(fields: dict[str, str]) -> WorkspaceConfig:
    try:
        ws_kwargs = {k: parse_float(fields[f"ws_{k}"]) for k in _WS_FLOATS}
        cams = []
        for name in fields["ws_cameras"].split():
            cam_kwargs = {"name": name, "mount": fields[f"cam_{name}_mount"]}
            for k in _CAM_FLOATS:
                cam_kwargs[k] = parse_float(fields[f"cam_{name}_{k}"])
            for k in _CAM_INTS:
                cam_kwargs[k] = parse_int(fields[f"cam_{name}_{k}"])
            cams.append(CameraSpec(**cam_kwargs))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed workspace fields: {exc}") from exc
    return WorkspaceConfig(cameras=tuple(cams), **ws_kwargs)
