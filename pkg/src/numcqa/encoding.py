"""Deterministic real-to-vector encodings of numerical values (DICE, sinusoidal)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DICE = "dice"
SINUSOIDAL = "sinusoidal"


@dataclass
class EncodingSpec:
    kind: str
    dim: int
    ranges: dict = field(default_factory=dict)  # value type -> (min, max), DICE only
    base: float = 10000.0

    def __post_init__(self):
        if self.kind not in (DICE, SINUSOIDAL):
            raise ValueError(f"unknown encoding kind {self.kind!r}")
        if self.dim < 2:
            raise ValueError("encoding dimension must be at least 2")
        if self.kind == SINUSOIDAL and self.dim % 2:
            raise ValueError("sinusoidal encoding needs an even dimension")
        if self.base <= 1:
            raise ValueError("sinusoidal base must exceed 1")
        self.ranges = {t: (float(lo), float(hi)) for t, (lo, hi) in self.ranges.items()}
        for t, (lo, hi) in self.ranges.items():
            if not lo < hi:
                raise ValueError(f"empty DICE range for type {t!r}: [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "base": self.base,
                "ranges": {t: list(r) for t, r in sorted(self.ranges.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingSpec":
        return cls(d["kind"], int(d["dim"]), {t: tuple(r) for t, r in d["ranges"].items()}, float(d["base"]))

    @classmethod
    def from_graph(cls, kind: str, dim: int, g, base: float = 10000.0) -> "EncodingSpec":
        """Spec whose DICE ranges are the observed per-type min/max of ``g``.

        Only values touched by an edge of ``g`` count; types with a single
        observed value get a unit-wide range around it.
        """
        observed: dict[str, list[float]] = {}
        for x in g.active_values():
            v, t = g.values[x]
            observed.setdefault(t, []).append(v)
        for v, t in g.values:
            observed.setdefault(t, [])
        ranges = {}
        for t, vs in observed.items():
            if not vs:
                vs = [v for v, tt in g.values if tt == t]
            lo, hi = min(vs), max(vs)
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            ranges[t] = (lo, hi)
        return cls(kind, dim, ranges, base)

    def encode(self, values, types=None) -> np.ndarray:
        """Vectorized encoding: returns an array of shape ``(len(values), dim)``."""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if self.kind == SINUSOIDAL:
            return _sinusoidal(values, self.dim, self.base)
        if types is None:
            raise ValueError("DICE encoding needs value types")
        if isinstance(types, str):
            types = [types] * len(values)
        lo = np.empty_like(values)
        hi = np.empty_like(values)
        for i, t in enumerate(types):
            try:
                lo[i], hi[i] = self.ranges[t]
            except KeyError:
                raise KeyError(f"no DICE range for value type {t!r}") from None
        return _dice(values, lo, hi, self.dim)


def _dice(values, lo, hi, dim):
    frac = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    # reflected arguments keep sin(pi) and cos(pi/2) exactly zero
    sin_a = np.sin(np.pi * np.minimum(frac, 1.0 - frac))
    cos_a = np.sin(np.pi * (0.5 - frac))
    out = np.empty((len(values), dim))
    powers = np.ones_like(sin_a)
    for d in range(dim - 1):
        out[:, d] = powers * cos_a
        powers = powers * sin_a
    out[:, dim - 1] = sin_a ** dim
    return out


def _sinusoidal(values, dim, base):
    out = np.empty((len(values), dim))
    for d in range(0, dim, 2):
        freq = base ** (d / dim)
        out[:, d] = np.sin(values / freq)
        out[:, d + 1] = np.cos(values / freq)
    return out


def dice_encode(v: float, value_type: str, spec: EncodingSpec) -> np.ndarray:
    """DICE: map ``v`` linearly onto an angle in [0, pi], then to polar coordinates.

    Component ``d`` (1-indexed) is ``sin(a)**(d-1) * cos(a)`` for ``d < D``
    and ``sin(a)**D`` for the last one.
    """
    if value_type not in spec.ranges:
        raise KeyError(f"no DICE range for value type {value_type!r}")
    lo, hi = spec.ranges[value_type]
    return _dice(np.array([float(v)]), np.array([lo]), np.array([hi]), spec.dim)[0]


def sinusoidal_encode(v: float, spec: EncodingSpec) -> np.ndarray:
    return _sinusoidal(np.array([float(v)]), spec.dim, spec.base)[0]
