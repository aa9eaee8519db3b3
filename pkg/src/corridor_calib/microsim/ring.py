"""Single-lane ring road with periodic boundary, optionally with one controlled vehicle."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .models import BandoFtlParams, CollisionError, IdmParams


class Controller(Protocol):
    def __call__(self, t: float, v: float, gap: float, v_leader: float) -> float: ...


@dataclass
class RingResult:
    times: np.ndarray
    speed_std: np.ndarray
    speeds: np.ndarray  # (n_samples, n_vehicles)
    min_gap: float

    @property
    def initial_std(self) -> float:
        return float(self.speed_std[0])

    @property
    def terminal_std(self) -> float:
        return float(self.speed_std[-1])


class mean_speed_follower:
    """Track the trailing mean of the leader's speed with bounded acceleration.

    The commanded speed is also capped by a time-headway rule so the
    vehicle keeps a buffer it can use to absorb waves.
    """

    def __init__(self, window: float = 30.0, dt: float = 0.1, gain: float = 0.6, a_max: float = 1.0,
                 b_max: float = 3.0, headway: float = 1.0, s_min: float = 3.0):
        self.hist: deque[float] = deque(maxlen=max(1, int(round(window / dt))))
        self.gain, self.a_max, self.b_max = gain, a_max, b_max
        self.headway, self.s_min = headway, s_min

    def __call__(self, t: float, v: float, gap: float, v_leader: float) -> float:
        self.hist.append(v_leader)
        target = sum(self.hist) / len(self.hist)
        v_safe = max(0.0, (gap - self.s_min) / self.headway)
        cmd = self.gain * (min(target, v_safe) - v)
        return min(self.a_max, max(-self.b_max, cmd))


def _bando_ftl(v, v_lead, gap, p: BandoFtlParams):
    acc = p.alpha * (p.v_max * np.tanh(gap / p.d0) - v) + p.beta * (v_lead - v) / gap**2
    return np.maximum(acc, -p.b_max)


def _idm(v, v_lead, gap, p: IdmParams):
    dyn = np.maximum(0.0, v * p.T + v * (v - v_lead) / (2 * np.sqrt(p.a * p.b)))
    acc = p.a * (1 - (v / p.v_m) ** p.delta - ((p.s_m + dyn) / gap) ** 2)
    return np.maximum(acc, -p.b_max)


def equilibrium_speed(gap: float, params) -> float:
    if isinstance(params, BandoFtlParams):
        return params.optimal_velocity(gap)
    lo, hi = 0.0, params.v_m * (1 - 1e-12)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if params.equilibrium_gap(mid) < gap:
            lo = mid
        else:
            hi = mid
    return lo


def ring_road(
    n_vehicles: int,
    circumference: float,
    params: BandoFtlParams | IdmParams | None = None,
    controller: Controller | Callable | None = None,
    duration: float = 300.0,
    dt: float = 0.1,
    perturbation: float = 0.01,
    sample_every: float = 1.0,
) -> RingResult:
    """Simulate a ring and return the across-vehicle speed spread over time.

    All vehicles start evenly spaced at the equilibrium speed; vehicle
    ``n // 2`` is slowed by the fraction `perturbation`.  When a controller
    is given it drives vehicle 0.
    """
    params = params or BandoFtlParams()
    length = params.length
    s_m = getattr(params, "s_m", 0.0)
    if n_vehicles < 1 or n_vehicles * (length + s_m) >= circumference:
        raise ValueError(f"{n_vehicles} vehicles do not fit on a {circumference} m ring")
    spacing = circumference / n_vehicles
    gap0 = spacing - length
    v_eq = equilibrium_speed(gap0, params)
    x = np.arange(n_vehicles) * spacing
    v = np.full(n_vehicles, v_eq)
    v[n_vehicles // 2] *= 1.0 - perturbation
    law = _bando_ftl if isinstance(params, BandoFtlParams) else _idm

    n_steps = int(round(duration / dt))
    every = max(1, int(round(sample_every / dt)))
    times, stds, speeds = [], [], []
    min_gap = np.inf
    lead = np.roll(np.arange(n_vehicles), -1)

    def record(t):
        times.append(t)
        stds.append(float(np.std(v)))
        speeds.append(v.copy())

    record(0.0)
    for s in range(n_steps):
        gap = (x[lead] - x) % circumference - length
        if n_vehicles == 1:
            gap = np.array([circumference - length])
        if np.any(gap <= 0):
            raise CollisionError(f"ring collision at t={s * dt:.1f}s")
        min_gap = min(min_gap, float(gap.min()))
        acc = law(v, v[lead], gap, params)
        if controller is not None:
            acc[0] = controller(s * dt, float(v[0]), float(gap[0]), float(v[lead[0]]))
        v_new = np.maximum(0.0, v + acc * dt)
        x = (x + 0.5 * (v + v_new) * dt)
        v = v_new
        if (s + 1) % every == 0:
            record((s + 1) * dt)
    return RingResult(np.array(times), np.array(stds), np.array(speeds), min_gap)
