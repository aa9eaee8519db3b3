"""Time-stepped agent-based corridor simulator."""

from .engine import AV, DEFAULT_DT, HDV, AgentPlan, MeasurementFrame, SimulationFault, World, run, step
from .models import BandoFtlParams, CollisionError, IdmParams, bando_ftl_accel, idm_accel
from .ring import RingResult, mean_speed_follower, ring_road

__all__ = [
    "AV", "DEFAULT_DT", "HDV", "AgentPlan", "MeasurementFrame", "SimulationFault", "World", "run", "step",
    "BandoFtlParams", "CollisionError", "IdmParams", "bando_ftl_accel", "idm_accel",
    "RingResult", "mean_speed_follower", "ring_road",
]
