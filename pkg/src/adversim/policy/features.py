"""Fixed feature extraction from observations and instructions.

Each camera contributes two instruction-pointed blocks of pooled channel
statistics: those of the semantic channel named by the instruction's
object kind, and those of the channel named by its container color.
Pointing the pooled features at the instructed entities -- rather than
concatenating every channel -- makes the policy's geometry input a
function of *role* (the thing to fetch, the place to put it) instead of
identity.  That is what lets skills recombine on object/container
pairings never recorded together: any other channel would otherwise act
as a private landmark whose layout the regressor bakes into its motion
law, and the law breaks the moment an unfamiliar entity fills the role.

The pointed blocks are gated by the gripper: the object block is live
while the hand is open (reaching), the container block while it is
closed (carrying).  Within any one recorded task the object and
container positions are perfectly correlated, so an ungated regressor
will blend container geometry into its reaching law; on a novel
object/container pairing that blend becomes a systematic velocity bias.
Gating removes the correlated signal at the source instead of hoping
the fit ignores it.

The end-effector contributes its proprioception with height expressed
relative to the work surface, and the instruction contributes one-hot
encodings of its three structured fields.  A masked camera contributes
an all-zero block of the same width, so the vector dimensionality never
depends on the mask and a masked camera leaks nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..config import SceneCatalog, WorkspaceConfig
from ..errors import ConfigError
from ..expert import Instruction
from ..recorder import DataUnit
from ..sim import Observation

__all__ = [
    "FEATURES_PER_CHANNEL",
    "PROPRIO_DIM",
    "FeatureSpec",
    "feature_spec",
    "featurize",
    "featurize_units",
]

# visibility flag, equivalent radius, centroid u, centroid v
FEATURES_PER_CHANNEL = 4
# instruction-pointed blocks per camera: target object, target container
POINTED_BLOCKS = 2
PROPRIO_DIM = 5  # x, y, z, yaw, gripper


@dataclass(frozen=True, slots=True)
class FeatureSpec:
    """Everything that fixes the feature layout: camera order, image
    channel order, the instruction vocabularies, and the work-surface
    height that the proprioceptive z entry is expressed against."""

    camera_names: tuple[str, ...]
    channel_names: tuple[str, ...]
    verbs: tuple[str, ...]
    object_kinds: tuple[str, ...]
    container_colors: tuple[str, ...]
    table_height: float = 0.0

    def validate(self) -> None:
        if not math.isfinite(self.table_height):
            raise ConfigError("feature spec table_height must be finite")
        for group, label in (
            (self.camera_names, "camera_names"),
            (self.channel_names, "channel_names"),
            (self.verbs, "verbs"),
            (self.object_kinds, "object_kinds"),
            (self.container_colors, "container_colors"),
        ):
            if not group:
                raise ConfigError(f"feature spec has empty {label}")
            if len(set(group)) != len(group):
                raise ConfigError(f"feature spec has duplicate entries in {label}")

    @property
    def camera_block_dim(self) -> int:
        return POINTED_BLOCKS * FEATURES_PER_CHANNEL

    @property
    def instruction_dim(self) -> int:
        return len(self.verbs) + len(self.object_kinds) + len(self.container_colors)

    @property
    def dim(self) -> int:
        return (
            len(self.camera_names) * self.camera_block_dim
            + PROPRIO_DIM
            + self.instruction_dim
        )

    def camera_slice(self, name: str) -> slice:
        """Index range of one camera's block inside the feature vector."""
        try:
            i = self.camera_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown camera {name!r} in feature spec") from None
        w = self.camera_block_dim
        return slice(i * w, (i + 1) * w)


def feature_spec(
    workspace: WorkspaceConfig, catalog: SceneCatalog
) -> FeatureSpec:
    """Build the canonical layout for a workspace/catalog pair.

    Channel order matches the renderer: sorted object kinds, then sorted
    container colors, then the end-effector marker.
    """
    spec = FeatureSpec(
        camera_names=tuple(c.name for c in workspace.cameras),
        channel_names=tuple(sorted(catalog.fruits))
        + tuple(sorted(catalog.colors))
        + ("eef",),
        verbs=tuple(catalog.verbs),
        object_kinds=tuple(catalog.fruits),
        container_colors=tuple(catalog.colors),
        table_height=workspace.table_height,
    )
    spec.validate()
    return spec


def _channel_stats(channel: np.ndarray) -> tuple[float, float, float, float]:
    """Pooled statistics of one semantic channel.

    Returns (visibility flag, equivalent blob radius as a fraction of the
    image side, centroid u in [-1, 1], centroid v in [-1, 1]).  The radius
    is sqrt of the intensity mass as a fraction of a full-white image, so
    it grows smoothly as the entity nears the camera; the flag makes
    absence a hard zero rather than a vanishing radius.
    """
    h, w = channel.shape
    total = float(channel.sum())
    if total == 0.0:
        return (0.0, 0.0, 0.0, 0.0)
    radius = float(np.sqrt(total / (255.0 * h * w)))
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    mu = float((channel.sum(axis=0) @ us) / total)
    mv = float((channel.sum(axis=1) @ vs) / total)
    cu = 2.0 * mu / (w - 1) - 1.0 if w > 1 else 0.0
    cv = 2.0 * mv / (h - 1) - 1.0 if h > 1 else 0.0
    return (1.0, radius, cu, cv)


def _one_hot(value: str, vocab: Sequence[str], label: str) -> list[float]:
    try:
        i = vocab.index(value)
    except ValueError:
        raise ConfigError(f"{label} {value!r} not in vocabulary {list(vocab)}") from None
    out = [0.0] * len(vocab)
    out[i] = 1.0
    return out


def featurize(
    spec: FeatureSpec,
    obs: Observation,
    instr: Instruction,
    mask: Iterable[str] = (),
) -> np.ndarray:
    """Deterministic feature vector for one observation/instruction pair.

    ``mask`` names cameras whose blocks are forced to exactly zero; it
    must be a subset of the spec's cameras.
    """
    mask_set = frozenset(mask)
    unknown = mask_set - set(spec.camera_names)
    if unknown:
        raise ConfigError(f"mask names unknown cameras {sorted(unknown)}")
    try:
        obj_ch = spec.channel_names.index(instr.object_kind)
        cont_ch = spec.channel_names.index(instr.container_color)
    except ValueError as exc:
        raise ConfigError(
            f"instruction targets {instr.object_kind!r}/{instr.container_color!r} "
            f"lack semantic channels in {list(spec.channel_names)}"
        ) from exc
    hand_open = float(obs.proprio[4]) >= 0.5
    zeros = (0.0,) * FEATURES_PER_CHANNEL

    parts: list[float] = []
    for name in spec.camera_names:
        if name in mask_set:
            parts.extend([0.0] * spec.camera_block_dim)
            continue
        img = obs.images.get(name)
        if img is None:
            raise ConfigError(f"observation lacks camera {name!r}")
        if img.ndim != 3 or img.shape[0] != len(spec.channel_names):
            raise ConfigError(
                f"camera {name!r} image shape {img.shape} does not match "
                f"{len(spec.channel_names)} channels"
            )
        work = img.astype(np.float64, copy=False)
        parts.extend(_channel_stats(work[obj_ch]) if hand_open else zeros)
        parts.extend(zeros if hand_open else _channel_stats(work[cont_ch]))

    x, y, z, yaw, gripper = (float(v) for v in obs.proprio)
    # height is fed back relative to the work surface so the grasp and
    # release laws transfer across platform heights; the aperture is
    # thresholded to open/closed because its continuous value only varies
    # while a close or open is already in flight, and feeding it back raw
    # lets small output errors compound through the aperture loop
    parts.extend(
        (x, y, z - spec.table_height, yaw, 1.0 if gripper >= 0.5 else 0.0)
    )
    parts.extend(_one_hot(instr.verb, spec.verbs, "verb"))
    parts.extend(_one_hot(instr.object_kind, spec.object_kinds, "object kind"))
    parts.extend(
        _one_hot(instr.container_color, spec.container_colors, "container color")
    )

    vec = np.asarray(parts, dtype=np.float64)
    if vec.shape != (spec.dim,):
        raise ConfigError(
            f"feature vector has dim {vec.shape[0]}, spec says {spec.dim}"
        )
    if not np.isfinite(vec).all():
        raise ConfigError("feature vector contains non-finite entries")
    return vec


def featurize_units(
    spec: FeatureSpec,
    units: Sequence[DataUnit],
    mask: Iterable[str] = (),
) -> tuple[np.ndarray, np.ndarray]:
    """Stack features and recorded actions for a unit sequence.

    Returns (features (n, dim), actions (n, 5)) ready for training.
    """
    if not units:
        raise ConfigError("cannot featurize an empty unit sequence")
    feats = np.empty((len(units), spec.dim), dtype=np.float64)
    acts = np.empty((len(units), 5), dtype=np.float64)
    for i, unit in enumerate(units):
        feats[i] = featurize(spec, unit.observation, unit.instruction, mask)
        a = unit.action
        acts[i] = (a.vx, a.vy, a.vz, a.dyaw, a.gripper_target)
    if not np.isfinite(acts).all():
        raise ConfigError("recorded actions contain non-finite entries")
    return feats, acts
