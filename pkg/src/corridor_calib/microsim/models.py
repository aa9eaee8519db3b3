"""Car-following laws: Intelligent Driver Model and Bando follow-the-leader."""

from __future__ import annotations

import math
from dataclasses import dataclass


class CollisionError(RuntimeError):
    """A follower reached or overran its leader."""


@dataclass(frozen=True)
class IdmParams:
    """IDM parameters.

    ``v_m`` is only used by the scalar functions; inside a network run the
    desired speed is the link speed limit times ``speed_factor``.
    """

    a: float = 1.3
    b: float = 2.0
    T: float = 1.5
    s_m: float = 2.0
    v_m: float = 30.0
    delta: float = 4.0
    length: float = 5.0
    b_max: float = 8.0
    speed_factor: float = 1.05

    def __post_init__(self):
        for name in ("a", "b", "T", "s_m", "v_m", "length", "b_max", "speed_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be > 0")
        if self.delta < 1:
            raise ValueError("IdmParams.delta must be >= 1")

    def desired_gap(self, v: float, dv: float) -> float:
        return self.s_m + max(0.0, v * self.T + v * dv / (2.0 * math.sqrt(self.a * self.b)))

    def equilibrium_gap(self, v: float) -> float:
        """Gap at which a follower cruising at `v` behind an equal-speed leader has zero acceleration."""
        if not 0 <= v < self.v_m:
            raise ValueError("equilibrium needs 0 <= v < v_m")
        return self.desired_gap(v, 0.0) / math.sqrt(1.0 - (v / self.v_m) ** self.delta)


@dataclass(frozen=True)
class BandoFtlParams:
    """Optimal-velocity relaxation plus follow-the-leader damping.

    V(gap) = v_max * tanh(gap / d0).  The defaults are string-unstable for the
    22-vehicle, 230 m ring.
    """

    alpha: float = 0.5
    beta: float = 20.0
    v_max: float = 15.0
    d0: float = 10.0
    length: float = 5.0
    b_max: float = 8.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not (self.v_max >= 0 and self.d0 > 0 and self.length > 0 and self.b_max > 0):
            raise ValueError("v_max >= 0, d0 > 0, length > 0 and b_max > 0 required")

    def optimal_velocity(self, gap: float) -> float:
        return self.v_max * math.tanh(gap / self.d0)

    def optimal_velocity_slope(self, gap: float) -> float:
        return self.v_max / self.d0 / math.cosh(gap / self.d0) ** 2


def idm_accel(v: float, dv: float, gap: float, params: IdmParams, v_m: float | None = None) -> float:
    """IDM acceleration; `dv` is the approach rate (own speed minus leader speed).

    Pass ``gap=math.inf`` for a free road.
    """
    if not gap > 0:
        raise CollisionError(f"nonpositive gap {gap}")
    if v < 0:
        raise ValueError("speed must be >= 0")
    v0 = params.v_m if v_m is None else v_m
    free = (v / v0) ** params.delta
    inter = 0.0 if math.isinf(gap) else (params.desired_gap(v, dv) / gap) ** 2
    return max(-params.b_max, params.a * (1.0 - free - inter))


def bando_ftl_accel(v: float, v_leader: float, gap: float, params: BandoFtlParams) -> float:
    if not gap > 0:
        raise CollisionError(f"nonpositive gap {gap}")
    acc = params.alpha * (params.optimal_velocity(gap) - v) + params.beta * (v_leader - v) / gap**2
    return max(-params.b_max, acc)
