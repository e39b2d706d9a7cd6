"""Two-hidden-layer perceptron for action regression.

The map is affine - tanh - affine - tanh - affine; the gripper component
of the output is squashed through a sigmoid so it stays in [0, 1], the
other four components (linear velocities and yaw rate) are unbounded.
Gradients are computed analytically by reverse-mode accumulation, not by
any autodiff framework, so they are exact for the declared architecture.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, RecordIntegrityError
from ..records import decode_array, encode_array, encode_record, iter_records, write_records

__all__ = [
    "ACTION_DIM",
    "PARAMS_SCHEMA_VERSION",
    "PolicyParams",
    "init_params",
    "forward",
    "forward_batch",
    "loss_and_grad",
    "params_equal",
    "save_params",
    "load_params",
]

ACTION_DIM = 5  # vx, vy, vz, dyaw, gripper_target
PARAMS_SCHEMA_VERSION = 1

_TENSOR_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True, eq=False, slots=True)
class PolicyParams:
    """All weights of the perceptron, with fixed float64 dtype.

    Shapes: w1 (h1, d), b1 (h1,), w2 (h2, h1), b2 (h2,), w3 (5, h2),
    b3 (5,).  Structural equality goes through ``params_equal``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    schema_version: int = PARAMS_SCHEMA_VERSION

    def validate(self) -> None:
        h1, d = self.w1.shape
        h2 = self.w2.shape[0]
        expected = {
            "w1": (h1, d),
            "b1": (h1,),
            "w2": (h2, h1),
            "b2": (h2,),
            "w3": (ACTION_DIM, h2),
            "b3": (ACTION_DIM,),
        }
        for name in _TENSOR_NAMES:
            arr = getattr(self, name)
            if not isinstance(arr, np.ndarray) or arr.dtype != np.float64:
                raise ConfigError(f"parameter {name} must be a float64 array")
            if arr.shape != expected[name]:
                raise ConfigError(
                    f"parameter {name} has shape {arr.shape}, expected {expected[name]}"
                )
            if not np.isfinite(arr).all():
                raise ConfigError(f"parameter {name} contains non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> tuple[int, int]:
        return (self.w1.shape[0], self.w2.shape[0])

    def tensors(self) -> tuple[tuple[str, np.ndarray], ...]:
        return tuple((name, getattr(self, name)) for name in _TENSOR_NAMES)


def params_equal(a: PolicyParams, b: PolicyParams) -> bool:
    return a.schema_version == b.schema_version and all(
        np.array_equal(getattr(a, n), getattr(b, n)) for n in _TENSOR_NAMES
    )


def init_params(in_dim: int, hidden1: int, hidden2: int, seed: int) -> PolicyParams:
    """Seeded uniform initialization scaled by fan-in + fan-out; zero biases."""
    if min(in_dim, hidden1, hidden2) < 1:
        raise ConfigError("all layer sizes must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))

    def layer(n_out: int, n_in: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    params = PolicyParams(
        w1=layer(hidden1, in_dim),
        b1=np.zeros(hidden1),
        w2=layer(hidden2, hidden1),
        b2=np.zeros(hidden2),
        w3=layer(ACTION_DIM, hidden2),
        b3=np.zeros(ACTION_DIM),
    )
    params.validate()
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward_batch(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    """Predicted actions, shape (n, 5), for a feature matrix (n, d)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != params.in_dim:
        raise ConfigError(
            f"feature matrix shape {f.shape} incompatible with input dim {params.in_dim}"
        )
    h1 = np.tanh(f @ params.w1.T + params.b1)
    h2 = np.tanh(h1 @ params.w2.T + params.b2)
    out = h2 @ params.w3.T + params.b3
    out[:, 4] = _sigmoid(out[:, 4])
    return out


def forward(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    """Predicted action, shape (5,), for a single feature vector."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1:
        raise ConfigError(f"expected a 1-D feature vector, got shape {f.shape}")
    return forward_batch(params, f[None, :])[0]


def loss_and_grad(
    params: PolicyParams,
    features: np.ndarray,
    targets: np.ndarray,
    weight_decay: float = 0.0,
    output_weights: Sequence[float] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over all action components plus L2 weight decay.

    ``output_weights`` rescales each action component's squared error; the
    gripper channel is a near-binary signal whose unweighted share of the
    loss shrinks as the velocity fit improves, so upweighting it keeps the
    open/close decision trained to the end.  The decay term penalizes
    weight matrices only, never biases.  Returns the scalar loss and a
    gradient array per parameter tensor, computed by explicit reverse-mode
    accumulation through the three layers.
    """
    f = np.asarray(features, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ConfigError("loss_and_grad needs a nonempty 2-D feature batch")
    if t.shape != (f.shape[0], ACTION_DIM):
        raise ConfigError(
            f"target shape {t.shape} does not match ({f.shape[0]}, {ACTION_DIM})"
        )
    if f.shape[1] != params.in_dim:
        raise ConfigError(
            f"feature dim {f.shape[1]} incompatible with input dim {params.in_dim}"
        )
    if not (np.isfinite(f).all() and np.isfinite(t).all()):
        raise ConfigError("loss_and_grad inputs contain non-finite entries")
    if weight_decay < 0:
        raise ConfigError("weight_decay must be >= 0")
    if output_weights is None:
        w = np.ones(ACTION_DIM)
    else:
        w = np.asarray(output_weights, dtype=np.float64)
        if w.shape != (ACTION_DIM,) or not np.isfinite(w).all() or (w < 0).any():
            raise ConfigError(
                f"output_weights must be {ACTION_DIM} finite non-negative values"
            )

    n = f.shape[0]
    z1 = f @ params.w1.T + params.b1
    h1 = np.tanh(z1)
    z2 = h1 @ params.w2.T + params.b2
    h2 = np.tanh(z2)
    out = h2 @ params.w3.T + params.b3
    sig = _sigmoid(out[:, 4])
    pred = out.copy()
    pred[:, 4] = sig

    resid = pred - t
    loss = float((w * resid * resid).mean())
    loss += weight_decay * float(
        (params.w1 * params.w1).sum()
        + (params.w2 * params.w2).sum()
        + (params.w3 * params.w3).sum()
    )

    d_pred = (w * resid) * (2.0 / (n * ACTION_DIM))
    d_out = d_pred.copy()
    d_out[:, 4] = d_pred[:, 4] * sig * (1.0 - sig)

    g_w3 = d_out.T @ h2 + 2.0 * weight_decay * params.w3
    g_b3 = d_out.sum(axis=0)
    d_h2 = d_out @ params.w3
    d_z2 = d_h2 * (1.0 - h2 * h2)
    g_w2 = d_z2.T @ h1 + 2.0 * weight_decay * params.w2
    g_b2 = d_z2.sum(axis=0)
    d_h1 = d_z2 @ params.w2
    d_z1 = d_h1 * (1.0 - h1 * h1)
    g_w1 = d_z1.T @ f + 2.0 * weight_decay * params.w1
    g_b1 = d_z1.sum(axis=0)

    grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}
    return loss, grads


def save_params(params: PolicyParams, path: str | Path) -> None:
    """Write parameters as checksummed records: one header, one line per tensor."""
    params.validate()
    lines = [
        encode_record(
            "policy",
            [
                ("schema", str(params.schema_version)),
                ("in_dim", str(params.in_dim)),
                ("hidden1", str(params.hidden[0])),
                ("hidden2", str(params.hidden[1])),
                ("out_dim", str(ACTION_DIM)),
            ],
        )
    ]
    for name, arr in params.tensors():
        shape, payload = encode_array(arr)
        lines.append(encode_record("tensor", [("name", name), ("shape", shape), ("data", payload)]))
    write_records(path, lines)


def load_params(path: str | Path) -> PolicyParams:
    """Read parameters written by ``save_params``, verifying checksums."""
    header: dict[str, str] | None = None
    tensors: dict[str, np.ndarray] = {}
    for idx, fields in iter_records(path):
        if fields["type"] == "policy":
            header = fields
        elif fields["type"] == "tensor":
            tensors[fields["name"]] = decode_array(fields["shape"], fields["data"])
        else:
            raise RecordIntegrityError(
                f"unexpected record type {fields['type']!r}", record_index=idx
            )
    if header is None:
        raise RecordIntegrityError("params file lacks a policy header")
    schema = int(header["schema"])
    if schema != PARAMS_SCHEMA_VERSION:
        raise ConfigError(
            f"params schema {schema} unsupported; this build reads {PARAMS_SCHEMA_VERSION}"
        )
    missing = [n for n in _TENSOR_NAMES if n not in tensors]
    if missing:
        raise RecordIntegrityError(f"params file lacks tensors {missing}")
    params = PolicyParams(schema_version=schema, **{n: tensors[n] for n in _TENSOR_NAMES})
    params.validate()
    declared = (
        int(header["in_dim"]),
        int(header["hidden1"]),
        int(header["hidden2"]),
        int(header["out_dim"]),
    )
    actual = (params.in_dim, *params.hidden, ACTION_DIM)
    if declared != actual:
        raise RecordIntegrityError(
            f"params header declares layout {declared}, tensors have {actual}"
        )
    return params
