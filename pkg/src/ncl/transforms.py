"""Element-wise strictly monotone bijections: identity, x**p and log."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

POSITIVE_FLOOR = 1e-12
MIN_ABS_P = 1e-6


class DomainError(ValueError):
    """A component fell outside a transform's domain.

    ``index`` is the flat index of the first offending component; ``context``
    carries whatever the caller knows (node, iteration, dimension).
    """

    def __init__(self, msg: str, index=None, context=None):
        super().__init__(msg)
        self.index = index
        self.context = context or {}


@dataclass(frozen=True)
class Transform:
    kind: str  # identity | power | log
    p: float = 1.0

    @property
    def positive_domain(self) -> bool:
        return self.kind != "identity"

    @property
    def increasing(self) -> bool:
        return self.kind != "power" or self.p > 0

    def _guard(self, v: np.ndarray, clamp: bool) -> np.ndarray:
        if not self.positive_domain:
            return v
        if not clamp:
            bad = np.flatnonzero(~(v > 0))
            if bad.size:
                raise DomainError(
                    f"{self.kind}(p={self.p}) needs positive input, got {v.flat[bad[0]]!r}",
                    index=int(bad[0]))
            return v
        bad = np.flatnonzero(~(v > -np.inf))  # NaN slips past maximum; catch it here
        if bad.size:
            raise DomainError(f"non-numeric input to {self.kind}", index=int(bad[0]))
        return np.maximum(v, POSITIVE_FLOOR)

    def forward(self, v, clamp: bool = False) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.kind == "identity":
            return v
        v = self._guard(v, clamp)
        if self.kind == "log":
            return np.log(v)
        if self.p == 1.0:
            return v
        return np.power(v, self.p)

    def inverse(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.kind == "identity":
            return v
        if self.kind == "log":
            return np.exp(v)
        if self.p == 1.0:
            return v
        # image of R+ under x**p is R+; round-off can leave tiny negatives
        return np.power(np.maximum(v, 0.0), 1.0 / self.p)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.ones_like(x)
        if self.kind == "log":
            return 1.0 / x
        return self.p * np.power(x, self.p - 1.0)


IDENTITY = Transform("identity")


def make_transform(kind: str, p: float | None = None) -> Transform:
    """``make_transform("power", 0)`` gives the log transform (geometric-mean limit)."""
    if kind == "identity":
        return IDENTITY
    if kind == "log":
        return Transform("log", 0.0)
    if kind == "power":
        if p is None or not math.isfinite(p):
            raise ValueError(f"power transform needs a finite exponent, got {p!r}")
        if p == 0:
            return Transform("log", 0.0)
        if abs(p) < MIN_ABS_P:
            # x**p rounds to 1 for every x; the average carries no information
            raise ValueError(f"exponent {p!r} is too close to 0; use p = 0 for the geometric mean")
        return Transform("power", float(p))
    raise ValueError(f"unknown transform kind {kind!r}")


def transform_from_config(cfg) -> Transform:
    if cfg is None:
        return IDENTITY
    if isinstance(cfg, Transform):
        return cfg
    return make_transform(cfg["kind"], cfg.get("p"))


def apply(t: Transform, v, clamp: bool = False) -> np.ndarray:
    return t.forward(v, clamp=clamp)


def apply_inverse(t: Transform, v) -> np.ndarray:
    return t.inverse(v)


def lipschitz_bounds(t: Transform, interval: tuple[float, float]) -> tuple[float, float]:
    """(sup |φ'| on [a, b], sup |(φ⁻¹)'| on φ([a, b])), closed form."""
    a, b = map(float, interval)
    if not a < b:
        raise ValueError(f"empty interval [{a}, {b}]")
    if t.kind == "identity":
        return 1.0, 1.0
    if a <= 0:
        raise ValueError(f"interval [{a}, {b}] touches the singularity of {t.kind}")
    if t.kind == "log":
        # φ' = 1/x, (φ⁻¹)' = e^y = x
        return 1.0 / a, b
    p = t.p
    # φ'(x) = p x^(p-1); (φ⁻¹)'(φ(x)) = 1/φ'(x); both monotone in x, so check ends
    d = np.abs(p * np.power(np.array([a, b]), p - 1.0))
    return float(d.max()), float(1.0 / d.min())


@dataclass(frozen=True)
class TransformSchedule:
    """Assignment (node, iteration) -> Transform.

    The default is one transform everywhere. ``hook`` may override it; it must
    be a pure function of its arguments so runs stay reproducible.
    """

    default: Transform = IDENTITY
    hook: Callable[[int, int], Transform] | None = None

    def at(self, i: int, t: int) -> Transform:
        if self.hook is None:
            return self.default
        return self.hook(i, t)

    @property
    def uniform(self) -> bool:
        return self.hook is None
