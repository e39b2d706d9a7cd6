"""Information-density metrics over recorded datasets.

Two data units are *functionally equivalent* when their quantized context
signatures match: instruction, controller phase, and floor-binned poses of
the target object, target container, and the end-effector relative to the
object.  Everything here builds on that relation:

- ``density``      distinct signatures within an episode (per-demo
                   information content); dataset density is the mean.
- ``redundancy``   fraction of consecutive unit pairs that are equivalent.
- ``fragmentation``signatures appearing in more than one episode.
- ``coverage``     occupancy of (bearing, apparent-size) bins of the target
                   object's blob in the wrist camera — how many distinct
                   viewpoints the data actually observed the object from.

Angles wrap to [0, 2π) and bin edges are centered on 0, so a yaw just below
2π and a yaw of exactly 0 land in the same bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, InvalidEpisodeError
from .records import encode_record, fmt_float, fmt_int
from .recorder import DataUnit, Episode

__all__ = [
    "QuantizationSpec",
    "CoverageBins",
    "CoverageResult",
    "MetricsSummary",
    "signature",
    "density",
    "dataset_density",
    "redundancy",
    "dataset_redundancy",
    "fragmentation",
    "coverage",
    "summarize",
    "report_records",
    "render_report_text",
    "SENSITIVITY_POS_BINS",
]

TWO_PI = 2.0 * math.pi

# The redundancy/density figures are also reported at finer and coarser
# position quantizations, since the equivalence threshold is a judgment call.
SENSITIVITY_POS_BINS = (0.02, 0.05, 0.10)


@dataclass(frozen=True, slots=True)
class QuantizationSpec:
    """Resolution of the functional-equivalence relation."""

    pos_bin: float = 0.05  # meters per position bin
    yaw_bins: int = 8  # bins over [0, 2pi)
    phase_included: bool = True
    instruction_included: bool = True
    rel_pose_included: bool = True

    def validate(self) -> None:
        if not (self.pos_bin > 0):
            raise ConfigError("pos_bin must be > 0")
        if self.yaw_bins < 1:
            raise ConfigError("yaw_bins must be >= 1")


@dataclass(frozen=True, slots=True)
class CoverageBins:
    """Viewing-geometry histogram resolution."""

    bearing_bins: int = 12
    scale_bins: int = 6
    camera: str = "wrist"

    def validate(self) -> None:
        if self.bearing_bins < 1 or self.scale_bins < 1:
            raise ConfigError("coverage bin counts must be >= 1")


def _pos_bin(value: float, pos_bin: float) -> int:
    return math.floor(value / pos_bin)


def _yaw_bin(yaw: float, yaw_bins: int) -> int:
    frac = (yaw % TWO_PI) / TWO_PI
    return int(math.floor(frac * yaw_bins + 0.5)) % yaw_bins


def signature(unit: DataUnit, q: QuantizationSpec) -> tuple:
    """Quantized context signature; equal signatures define equivalence."""
    q.validate()
    ox, oy, oz, oyaw = unit.target_object_pose
    cx, cy, cyaw = unit.target_container_pose
    parts: list = [
        (
            _pos_bin(ox, q.pos_bin),
            _pos_bin(oy, q.pos_bin),
            _pos_bin(oz, q.pos_bin),
            _yaw_bin(oyaw, q.yaw_bins),
        ),
        (
            _pos_bin(cx, q.pos_bin),
            _pos_bin(cy, q.pos_bin),
            _yaw_bin(cyaw, q.yaw_bins),
        ),
    ]
    if q.instruction_included:
        parts.insert(0, unit.instruction.ident())
    if q.phase_included:
        parts.insert(1 if q.instruction_included else 0, unit.phase_label)
    if q.rel_pose_included:
        ex, ey, ez, eyaw, _ = unit.observation.proprio
        parts.append(
            (
                _pos_bin(ex - ox, q.pos_bin),
                _pos_bin(ey - oy, q.pos_bin),
                _pos_bin(ez - oz, q.pos_bin),
                _yaw_bin(eyaw - oyaw, q.yaw_bins),
            )
        )
    return tuple(parts)


def density(episode: Episode, q: QuantizationSpec | None = None) -> int:
    """Distinct signatures among the episode's units."""
    spec = q or QuantizationSpec()
    if not episode.units:
        raise InvalidEpisodeError("density of an empty episode is undefined")
    return len({signature(u, spec) for u in episode.units})


def dataset_density(
    episodes: Sequence[Episode], q: QuantizationSpec | None = None
) -> float:
    if not episodes:
        raise ConfigError("dataset density needs at least one episode")
    spec = q or QuantizationSpec()
    return sum(density(ep, spec) for ep in episodes) / len(episodes)


def redundancy(episode: Episode, q: QuantizationSpec | None = None) -> float:
    """Fraction of consecutive unit pairs that are functionally equivalent."""
    spec = q or QuantizationSpec()
    if len(episode.units) < 2:
        raise InvalidEpisodeError(
            "redundancy is undefined for episodes shorter than 2 units"
        )
    sigs = [signature(u, spec) for u in episode.units]
    equal = sum(1 for a, b in zip(sigs, sigs[1:]) if a == b)
    return equal / (len(sigs) - 1)


def dataset_redundancy(
    episodes: Sequence[Episode], q: QuantizationSpec | None = None
) -> float:
    spec = q or QuantizationSpec()
    eligible = [ep for ep in episodes if len(ep.units) >= 2]
    if not eligible:
        raise ConfigError("no episode has >= 2 units")
    return sum(redundancy(ep, spec) for ep in eligible) / len(eligible)


def fragmentation(
    episodes: Sequence[Episode], q: QuantizationSpec | None = None
) -> int:
    """Signatures shared across episode boundaries (inter-episode overlap)."""
    spec = q or QuantizationSpec()
    seen_in: dict[tuple, set[int]] = {}
    for ep in episodes:
        for u in ep.units:
            seen_in.setdefault(signature(u, spec), set()).add(ep.id)
    return sum(1 for eps in seen_in.values() if len(eps) > 1)


@dataclass(frozen=True, slots=True)
class CoverageResult:
    object_kind: str
    occupancy: float
    visible_units: int
    total_units: int
    histogram: tuple[tuple[tuple[int, int], int], ...]  # ((bearing, scale), count)


def coverage(
    episodes: Sequence[Episode],
    object_kind: str,
    channels: Sequence[str],
    bins: CoverageBins | None = None,
) -> CoverageResult:
    """Viewing-geometry occupancy of ``object_kind`` in the wrist camera.

    For every unit where the object's semantic channel has lit pixels, take
    the blob's bearing around the image center and its apparent size
    (log2 of pixel count), bin both, and report occupied bins / total bins.
    """
    spec = bins or CoverageBins()
    spec.validate()
    if object_kind not in channels:
        raise ConfigError(f"object kind {object_kind!r} not among channels {channels}")
    ch = list(channels).index(object_kind)

    hist: dict[tuple[int, int], int] = {}
    visible = 0
    total = 0
    for ep in episodes:
        for unit in ep.units:
            img = unit.observation.images.get(spec.camera)
            if img is None:
                raise ConfigError(f"no camera named {spec.camera!r} in observations")
            total += 1
            plane = img[ch]
            mass = float(plane.sum())
            if mass <= 0:
                continue
            visible += 1
            h, w = plane.shape
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
            ys, xs = plane.nonzero()
            weights = plane[ys, xs].astype(float)
            my = float((ys * weights).sum() / weights.sum())
            mx = float((xs * weights).sum() / weights.sum())
            bearing = math.atan2(my - cy, mx - cx) % TWO_PI
            b_bin = min(int(bearing / TWO_PI * spec.bearing_bins), spec.bearing_bins - 1)
            area = float(len(ys))
            s_bin = min(max(int(math.floor(math.log2(area))), 0), spec.scale_bins - 1)
            key = (b_bin, s_bin)
            hist[key] = hist.get(key, 0) + 1
    if visible == 0:
        raise ConfigError(
            f"object {object_kind!r} never visible in camera {spec.camera!r}"
        )
    occupancy = len(hist) / (spec.bearing_bins * spec.scale_bins)
    ordered = tuple(sorted(hist.items()))
    return CoverageResult(
        object_kind=object_kind,
        occupancy=occupancy,
        visible_units=visible,
        total_units=total,
        histogram=ordered,
    )


# --- dataset summary and reports ----------------------------------------------

@dataclass(frozen=True, slots=True)
class MetricsSummary:
    label: str
    n_episodes: int
    n_units: int
    density: float
    redundancy: float
    fragmentation: int
    pos_bin: float
    yaw_bins: int
    coverage_by_kind: tuple[tuple[str, float], ...]
    sensitivity: tuple[tuple[float, float, float], ...]  # (pos_bin, density, redundancy)


def summarize(
    label: str,
    episodes: Sequence[Episode],
    channels: Sequence[str],
    q: QuantizationSpec | None = None,
    coverage_bins: CoverageBins | None = None,
) -> MetricsSummary:
    """All-in-one dataset metrics at the given quantization, plus the
    density/redundancy sensitivity sweep over coarser/finer position bins."""
    spec = q or QuantizationSpec()
    spec.validate()
    if not episodes:
        raise ConfigError("cannot summarize an empty dataset")
    kinds = sorted({ep.task.object_kind for ep in episodes})
    cov: list[tuple[str, float]] = []
    for kind in kinds:
        with_kind = [ep for ep in episodes if ep.task.object_kind == kind]
        cov.append(
            (kind, coverage(with_kind, kind, channels, coverage_bins).occupancy)
        )
    sensitivity = []
    for pos_bin in SENSITIVITY_POS_BINS:
        alt = QuantizationSpec(
            pos_bin=pos_bin,
            yaw_bins=spec.yaw_bins,
            phase_included=spec.phase_included,
            instruction_included=spec.instruction_included,
            rel_pose_included=spec.rel_pose_included,
        )
        sensitivity.append(
            (pos_bin, dataset_density(episodes, alt), dataset_redundancy(episodes, alt))
        )
    return MetricsSummary(
        label=label,
        n_episodes=len(episodes),
        n_units=sum(len(ep.units) for ep in episodes),
        density=dataset_density(episodes, spec),
        redundancy=dataset_redundancy(episodes, spec),
        fragmentation=fragmentation(episodes, spec),
        pos_bin=spec.pos_bin,
        yaw_bins=spec.yaw_bins,
        coverage_by_kind=tuple(cov),
        sensitivity=tuple(sensitivity),
    )


def report_records(summaries: Sequence[MetricsSummary]) -> list[str]:
    """Machine-readable report lines in the shared record grammar."""
    lines: list[str] = []
    for s in summaries:
        lines.append(
            encode_record(
                "metrics",
                [
                    ("label", s.label),
                    ("episodes", fmt_int(s.n_episodes)),
                    ("units", fmt_int(s.n_units)),
                    ("pos_bin", fmt_float(s.pos_bin)),
                    ("yaw_bins", fmt_int(s.yaw_bins)),
                    ("density", fmt_float(s.density)),
                    ("redundancy", fmt_float(s.redundancy)),
                    ("fragmentation", fmt_int(s.fragmentation)),
                ],
            )
        )
        for kind, occ in s.coverage_by_kind:
            lines.append(
                encode_record(
                    "coverage",
                    [
                        ("label", s.label),
                        ("object", kind),
                        ("occupancy", fmt_float(occ)),
                    ],
                )
            )
        for pos_bin, dens, red in s.sensitivity:
            lines.append(
                encode_record(
                    "sensitivity",
                    [
                        ("label", s.label),
                        ("pos_bin", fmt_float(pos_bin)),
                        ("density", fmt_float(dens)),
                        ("redundancy", fmt_float(red)),
                    ],
                )
            )
    return lines


def render_report_text(summaries: Sequence[MetricsSummary]) -> str:
    """Human-readable companion to ``report_records``."""
    out: list[str] = []
    for s in summaries:
        out.append(f"dataset {s.label}")
        out.append(
            f"  episodes {s.n_episodes}  units {s.n_units}  "
            f"(pos_bin {s.pos_bin:g} m, yaw_bins {s.yaw_bins})"
        )
        out.append(f"  density      {s.density:.3f} distinct signatures / episode")
        out.append(f"  redundancy   {s.redundancy:.3f} of consecutive pairs equivalent")
        out.append(f"  fragmentation {s.fragmentation} signatures shared across episodes")
        for kind, occ in s.coverage_by_kind:
            out.append(f"  coverage[{kind}]  {occ:.3f} of wrist viewing bins occupied")
        for pos_bin, dens, red in s.sensitivity:
            out.append(
                f"  at pos_bin {pos_bin:g}: density {dens:.3f}, redundancy {red:.3f}"
            )
        out.append("")
    return "\n".join(out)
