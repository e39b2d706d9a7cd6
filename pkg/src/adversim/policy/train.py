"""Deterministic single-threaded behavior-cloning training loop.

Features are extracted once per data unit, then each epoch visits the
units in a buffered-shuffle order (same scheme as the dataset shuffle
stream) and takes one Adam step per batch.  Everything is seeded, so the
same dataset bytes and config produce byte-identical parameters.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..config import SceneCatalog, default_config
from ..errors import ConfigError, TrainingDivergedError
from ..expert import Instruction
from ..recorder import Dataset, Episode, read_dataset, shuffle_indices
from .features import FeatureSpec, feature_spec, featurize
from .network import PolicyParams, init_params, loss_and_grad

__all__ = ["TrainConfig", "train"]

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True, slots=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    weight_decay: float = 1e-5
    buffer_size: int = 4096
    hidden1: int = 64
    hidden2: int = 64
    # squared-error scale per action component (vx, vy, vz, dyaw, gripper);
    # the gripper gets extra weight because a missed open/close is a hard
    # task failure while an equal velocity error only costs settling time
    gripper_weight: float = 3.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.buffer_size < 1:
            raise ConfigError("batch_size, epochs and buffer_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigError("hidden layer sizes must be >= 1")
        if self.gripper_weight <= 0 or not math.isfinite(self.gripper_weight):
            raise ConfigError("gripper_weight must be positive and finite")

    def output_weights(self) -> tuple[float, float, float, float, float]:
        return (1.0, 1.0, 1.0, 1.0, self.gripper_weight)


def train_config_to_fields(cfg: TrainConfig) -> list[tuple[str, str]]:
    return [
        ("learning_rate", repr(cfg.learning_rate)),
        ("batch_size", str(cfg.batch_size)),
        ("epochs", str(cfg.epochs)),
        ("seed", str(cfg.seed)),
        ("weight_decay", repr(cfg.weight_decay)),
        ("buffer_size", str(cfg.buffer_size)),
        ("hidden1", str(cfg.hidden1)),
        ("hidden2", str(cfg.hidden2)),
        ("gripper_weight", repr(cfg.gripper_weight)),
    ]


def train_config_from_fields(fields: dict[str, str]) -> TrainConfig:
    cfg = TrainConfig(
        learning_rate=float(fields["learning_rate"]),
        batch_size=int(fields["batch_size"]),
        epochs=int(fields["epochs"]),
        seed=int(fields["seed"]),
        weight_decay=float(fields["weight_decay"]),
        buffer_size=int(fields["buffer_size"]),
        hidden1=int(fields["hidden1"]),
        hidden2=int(fields["hidden2"]),
        gripper_weight=float(fields.get("gripper_weight", "3.0")),
    )
    cfg.validate()
    return cfg


def _resolve_episodes(
    source: Sequence[Episode] | Dataset | str | Path | Sequence[str | Path],
) -> tuple[list[Episode], Dataset | None]:
    """Episodes in file order plus the dataset context when available."""
    if isinstance(source, Dataset):
        return list(source.episodes), source
    if isinstance(source, (str, Path)):
        ds = read_dataset(source)
        return list(ds.episodes), ds
    items = list(source)
    if items and isinstance(items[0], (str, Path)):
        episodes: list[Episode] = []
        first: Dataset | None = None
        for p in items:
            ds = read_dataset(p)
            first = first or ds
            episodes.extend(ds.episodes)
        return episodes, first
    return items, None  # type: ignore[return-value]


def _training_features(
    spec: FeatureSpec, episodes: Sequence[Episode], seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Feature/action matrices with subtask-irrelevant instruction fields
    randomized.

    While the hand is open the expert is reaching and the container field
    is idle; while it is closed the expert is carrying and the object kind
    is idle.  Resampling the idle field (deterministically, from the
    training seed) breaks the per-task correlation between the two, so the
    policy meets every (kind, color) combination during training even
    though each recorded episode used exactly one -- which is what lets a
    never-demonstrated pairing execute at evaluation time.  The predicate
    matches the gate inside ``featurize``: the resampled field's pointed
    block is exactly the one currently zeroed, so the only thing
    randomized is the idle one-hot bits, never live geometry.

    Each episode is featurized against its own recorded table height, so
    a dataset spanning several platform heights trains one policy whose
    height input means the same thing everywhere.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 211])))
    n = sum(len(ep.units) for ep in episodes)
    feats = np.empty((n, spec.dim), dtype=np.float64)
    acts = np.empty((n, 5), dtype=np.float64)
    i = 0
    for ep in episodes:
        ep_spec = replace(spec, table_height=ep.table_height)
        for unit in ep.units:
            instr = unit.instruction
            if float(unit.observation.proprio[4]) >= 0.5:
                color = spec.container_colors[
                    rng.integers(len(spec.container_colors))
                ]
                instr = Instruction(instr.verb, instr.object_kind, color)
            else:
                kind = spec.object_kinds[rng.integers(len(spec.object_kinds))]
                instr = Instruction(instr.verb, kind, instr.container_color)
            feats[i] = featurize(ep_spec, unit.observation, instr)
            a = unit.action
            acts[i] = (a.vx, a.vy, a.vz, a.dyaw, a.gripper_target)
            i += 1
    if not np.isfinite(acts).all():
        raise ConfigError("recorded actions contain non-finite entries")
    return feats, acts


def train(
    source: Sequence[Episode] | Dataset | str | Path | Sequence[str | Path],
    cfg: TrainConfig,
    spec: FeatureSpec | None = None,
    catalog: SceneCatalog | None = None,
) -> tuple[PolicyParams, tuple[float, ...]]:
    """Fit the policy to recorded units; returns (params, per-epoch loss).

    ``spec`` defaults to the canonical layout for the dataset's workspace
    (or the default workspace when training from bare episodes) with the
    default catalog vocabularies.
    """
    cfg.validate()
    episodes, ds = _resolve_episodes(source)
    if not any(ep.units for ep in episodes):
        raise ConfigError("training requires a nonempty dataset")
    if spec is None:
        workspace = ds.workspace if ds is not None else default_config().workspace
        spec = feature_spec(workspace, catalog or default_config().catalog)

    feats, acts = _training_features(spec, episodes, cfg.seed)
    n = feats.shape[0]

    values = {
        name: arr.copy()
        for name, arr in init_params(spec.dim, cfg.hidden1, cfg.hidden2, cfg.seed).tensors()
    }
    m = {name: np.zeros_like(arr) for name, arr in values.items()}
    v = {name: np.zeros_like(arr) for name, arr in values.items()}
    step = 0

    losses: list[float] = []
    for epoch in range(cfg.epochs):
        # cosine decay: the plateau of a constant step is dominated by
        # gradient noise, and the closed-loop rollout is sensitive to the
        # last few millimeters-per-second of fit error
        lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed, epoch]))
        )
        order = np.fromiter(
            shuffle_indices(n, cfg.buffer_size, rng), dtype=np.int64, count=n
        )
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            params = PolicyParams(**values)
            loss, grads = loss_and_grad(
                params, feats[idx], acts[idx], cfg.weight_decay,
                output_weights=cfg.output_weights(),
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, step {step}"
                )
            step += 1
            for name in values:
                g = grads[name]
                m[name] = _ADAM_BETA1 * m[name] + (1 - _ADAM_BETA1) * g
                v[name] = _ADAM_BETA2 * v[name] + (1 - _ADAM_BETA2) * (g * g)
                m_hat = m[name] / (1 - _ADAM_BETA1**step)
                v_hat = v[name] / (1 - _ADAM_BETA2**step)
                values[name] = values[name] - lr * m_hat / (
                    np.sqrt(v_hat) + _ADAM_EPS
                )
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / n)

    params = PolicyParams(**values)
    params.validate()
    return params, tuple(losses)
