"""Synthetic quasi-static load and PV deviations.

Each channel is a fraction of the rating of one load (negative loads model PV
injection): a sum of slow sinusoids plus first-order low-pass filtered white
noise, all zero at t = 0. Profiles are sampled on a fixed global grid so that
every segment of a scenario sees the same realization.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import scipy.signal

from errors import ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProfileChannel:
    load: str
    amplitude: float = 0.05
    periods_s: Tuple[float, ...] = (60.0,)
    noise: float = 0.0
    tau_s: float = 1.0

    def __post_init__(self):
        if any(p <= 0 for p in self.periods_s):
            raise ParameterError(f"profile '{self.load}': periods must be > 0")
        if self.noise < 0 or self.tau_s <= 0:
            raise ParameterError(f"profile '{self.load}': noise must be >= 0 and tau_s > 0")


@dataclass
class ProfileSet:
    channels: List[ProfileChannel] = field(default_factory=list)
    seed: int = 0
    dt: float = 1e-3
    t_end: float = 0.0
    _samples: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [c.load for c in self.channels]
        if len(set(ids)) != len(ids):
            raise ParameterError("duplicate profile channels")
        self.realize(self.t_end)

    @property
    def loads(self) -> Tuple[str, ...]:
        return tuple(c.load for c in self.channels)

    def realize(self, t_end: float):
        """Draw every channel on the grid 0, dt, ..., t_end (deterministic in the seed)."""
        self.t_end = float(t_end)
        steps = int(math.ceil(self.t_end / self.dt)) + 1
        t = self.dt * np.arange(steps)
        rng = np.random.default_rng(self.seed)
        samples = {}
        for channel in self.channels:
            phases = rng.uniform(0.0, 2.0 * math.pi, len(channel.periods_s))
            wave = np.zeros(steps)
            for period, phase in zip(channel.periods_s, phases):
                wave += np.sin(2.0 * math.pi * t / period + phase) - math.sin(phase)
            wave *= channel.amplitude / max(len(channel.periods_s), 1)
            white = rng.standard_normal(steps) * channel.noise
            white[0] = 0.0
            alpha = self.dt / (self.dt + channel.tau_s)
            noise = scipy.signal.lfilter([alpha], [1.0, alpha - 1.0], white)
            samples[channel.load] = wave + noise
        self._samples = samples
        logger.debug("profiles realized: %d channels over %.1f s", len(self.channels), self.t_end)

    def sample(self, times: Sequence[float], loads: Sequence[str]) -> np.ndarray:
        """Values (len(times) x len(loads)); loads without a channel read zero."""
        times = np.asarray(times, dtype=float)
        out = np.zeros((times.size, len(loads)))
        if not self._samples:
            return out
        index = np.clip(np.rint(times / self.dt).astype(int), 0, len(next(iter(self._samples.values()))) - 1)
        for col, load in enumerate(loads):
            series = self._samples.get(load)
            if series is not None:
                out[:, col] = series[index]
        return out

    def to_dict(self) -> dict:
        return {
            "channels": [
                {
                    "load": c.load,
                    "amplitude": c.amplitude,
                    "periods_s": list(c.periods_s),
                    "noise": c.noise,
                    "tau_s": c.tau_s,
                }
                for c in self.channels
            ]
        }


def profiles_from_dict(data: dict, seed: int = 0, dt: float = 1e-3) -> ProfileSet:
    channels = [
        ProfileChannel(
            load=item["load"],
            amplitude=float(item.get("amplitude", 0.05)),
            periods_s=tuple(float(p) for p in item.get("periods_s", (60.0,))),
            noise=float(item.get("noise", 0.0)),
            tau_s=float(item.get("tau_s", 1.0)),
        )
        for item in (data or {}).get("channels", [])
    ]
    return ProfileSet(channels, seed=seed, dt=dt)
