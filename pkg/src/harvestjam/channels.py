"""Finite-state Markov chains, SINR, packet arrival rates and battery dynamics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfc

from .errors import ModelValidationError


@dataclass(frozen=True)
class MarkovChain:
    """Finite-state chain with a physical value attached to each state."""

    values: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        k = values.shape[0]
        if values.ndim != 1 or k == 0:
            raise ModelValidationError("chain values must be a non-empty vector")
        if P.shape != (k, k):
            raise ModelValidationError(f"transition matrix must be {k}x{k}, got {P.shape}")
        if not np.all(np.isfinite(values)):
            raise ModelValidationError("chain values must be finite")
        if np.any(P < 0.0) or np.any(P > 1.0):
            raise ModelValidationError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ModelValidationError("transition matrix rows must sum to 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "P", P)
        cdf = np.cumsum(P, axis=1)
        cdf[:, -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @property
    def size(self):
        return self.values.shape[0]

    @property
    def cdf(self):
        return self._cdf

    def step(self, current, u):
        return chain_step(self, current, u)

    def to_dict(self):
        return {"values": self.values.tolist(), "rows": self.P.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["values"], dtype=float), np.asarray(d["rows"], dtype=float))

    @classmethod
    def constant(cls, value):
        return cls(np.array([float(value)]), np.array([[1.0]]))


def chain_step(chain: MarkovChain, current: int, u: float) -> int:
    """Inverse-CDF draw of the next state from row ``current``."""
    row = chain.cdf[current]
    j = int(np.searchsorted(row, u, side="right"))
    return min(j, chain.size - 1)


def q_function(x):
    """Gaussian upper tail probability ``Q(x) = erfc(x / sqrt 2) / 2``."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


@dataclass(frozen=True)
class QamModulation:
    b: float

    def __post_init__(self):
        if not self.b > 0:
            raise ModelValidationError("QAM parameter b must be positive")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return 1.0 - q_function(np.sqrt(self.b * s))


@dataclass(frozen=True)
class TableModulation:
    """Arrival rate from a monotone table, linearly interpolated, clamped at the ends."""

    sinr: tuple
    rate: tuple

    def __post_init__(self):
        x = np.asarray(self.sinr, dtype=float)
        y = np.asarray(self.rate, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size == 0:
            raise ModelValidationError("modulation table needs matching non-empty sinr/rate lists")
        if np.any(np.diff(x) <= 0):
            raise ModelValidationError("modulation table sinr points must be strictly increasing")
        if np.any(np.diff(y) < 0):
            raise ModelValidationError("modulation table rates must be nondecreasing")
        if np.any(y < 0) or np.any(y > 1):
            raise ModelValidationError("modulation table rates must lie in [0, 1]")
        object.__setattr__(self, "sinr", tuple(float(v) for v in x))
        object.__setattr__(self, "rate", tuple(float(v) for v in y))

    def __call__(self, s):
        return np.interp(np.asarray(s, dtype=float), self.sinr, self.rate)


@dataclass(frozen=True)
class LinkModel:
    """One sensor-to-estimator link under jamming.

    ``jam_gain`` multiplies ``G * p`` in the SINR denominator; 1 gives the
    plain interference model.
    """

    sigma2: float
    modulation: object
    jam_gain: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ModelValidationError("sigma2 must be positive")
        if not self.jam_gain >= 0:
            raise ModelValidationError("jam_gain must be nonnegative")


def sinr(link: LinkModel, H, G, p):
    return np.asarray(H, dtype=float) / (link.jam_gain * np.asarray(G, dtype=float) * p + link.sigma2)


def arrival_rate(link: LinkModel, s):
    return link.modulation(s)


@dataclass(frozen=True)
class BatteryModel:
    b_max: int
    p_max: float

    def __post_init__(self):
        if int(self.b_max) != self.b_max or self.b_max < 0:
            raise ModelValidationError("b_max must be a nonnegative integer")
        if not self.p_max >= 0:
            raise ModelValidationError("p_max must be nonnegative")
        object.__setattr__(self, "b_max", int(self.b_max))

    @property
    def power_levels(self):
        return tuple(range(int(math.floor(self.p_max)) + 1))

    @property
    def max_power(self):
        return int(math.floor(self.p_max))


def battery_update(model: BatteryModel, b: int, total_p: int, E: float) -> int:
    if total_p < 0 or total_p > b:
        raise ValueError(f"infeasible power {total_p} for battery level {b}")
    return min(b - total_p + int(math.floor(E)), model.b_max)


def parse_modulation(spec) -> object:
    """Build a modulation object from a config mapping."""
    kind = spec.get("kind", "qam")
    if kind == "qam":
        return QamModulation(float(spec["b"]))
    if kind == "table":
        return TableModulation(tuple(spec["sinr"]), tuple(spec["rate"]))
    if kind == "constant":
        return TableModulation((0.0,), (float(spec["rate"]),))
    raise ModelValidationError(f"unknown modulation kind {kind!r}")


def modulation_to_dict(mod) -> dict:
    if isinstance(mod, QamModulation):
        return {"kind": "qam", "b": mod.b}
    return {"kind": "table", "sinr": list(mod.sinr), "rate": list(mod.rate)}


def link_arrival_table(link: LinkModel, gains: Sequence[float], powers: Sequence[int]):
    """``lam[h, g, p]`` over all channel-state pairs and power levels."""
    H = np.asarray(gains, dtype=float)[:, None, None]
    G = np.asarray(gains, dtype=float)[None, :, None]
    p = np.asarray(powers, dtype=float)[None, None, :]
    lam = np.asarray(arrival_rate(link, sinr(link, H, G, p)), dtype=float)
    return np.broadcast_to(lam, (len(gains), len(gains), len(powers))).copy()
