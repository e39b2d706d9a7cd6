"""Deterministic kinematic tabletop simulation with synthetic cameras."""

from .state import (
    ContainerState,
    EefCommand,
    EefState,
    ObjectState,
    SceneState,
    SimEvent,
    wrap_angle,
)
from .world import reset_scene, step
from .render import Observation, observations_equal, observe, render, semantic_channels

__all__ = [
    "ContainerState",
    "EefCommand",
    "EefState",
    "ObjectState",
    "SceneState",
    "SimEvent",
    "wrap_angle",
    "reset_scene",
    "step",
    "Observation",
    "observations_equal",
    "observe",
    "render",
    "semantic_channels",
]
