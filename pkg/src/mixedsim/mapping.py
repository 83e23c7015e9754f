"""Signed weight <-> differential device pair conversion.

Mapping 1 parks one leg at the floor state; mapping 2 keeps both legs
symmetric around a bias state.  In both schemes ``plus - minus`` equals
``range * w / w_max``, so a single inversion serves both.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .device_models import DomainError, Technology


class Scheme(str, Enum):
    MAP1 = "map1"
    MAP2 = "map2"


class RuleKind(str, Enum):
    CONSTANT = "constant"
    LINEAR_IN_ABS_W = "linear_in_abs_w"


@dataclass(frozen=True)
class StateOptRule:
    """``max(clamp_low, intercept + slope * |w|/w_max)``."""

    kind: RuleKind = RuleKind.LINEAR_IN_ABS_W
    intercept: float = 0.0
    slope: float = 0.0
    clamp_low: float = -np.inf

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if self.kind is RuleKind.CONSTANT:
            object.__setattr__(self, "slope", 0.0)

    @classmethod
    def constant(cls, value: float) -> "StateOptRule":
        return cls(RuleKind.CONSTANT, float(value), 0.0, -np.inf)

    def to_record(self) -> dict:
        clamp = None if np.isneginf(self.clamp_low) else self.clamp_low
        return {"kind": self.kind.value, "intercept": self.intercept, "slope": self.slope, "clamp_low": clamp}

    @classmethod
    def from_record(cls, rec: dict) -> "StateOptRule":
        clamp = rec.get("clamp_low")
        return cls(rec.get("kind", "linear_in_abs_w"), float(rec["intercept"]), float(rec.get("slope", 0.0)),
                   -np.inf if clamp is None else float(clamp))


def eval_state_opt(rule: StateOptRule, w_norm):
    w_norm = np.asarray(w_norm, dtype=float)
    if np.any(w_norm < 0) or np.any(w_norm > 1) or not np.all(np.isfinite(w_norm)):
        raise DomainError("normalised weight magnitude must lie in [0, 1]")
    out = np.maximum(rule.clamp_low, rule.intercept + rule.slope * w_norm)
    return out if out.ndim else float(out)


def _as_rule(value) -> StateOptRule:
    if isinstance(value, StateOptRule):
        return value
    return StateOptRule.constant(float(value))


@dataclass(frozen=True)
class MappingConfig:
    """Mapping parameters for one layer.

    ``floor`` is G_min / I_min (mapping 1), ``bias`` is G_b / I_b (mapping 2);
    either may be a :class:`StateOptRule` for weight-dependent states.  Units
    are uS for memristors and nA for eFlash.
    """

    scheme: Scheme = Scheme.MAP1
    technology: Technology = Technology.MEMRISTOR
    floor: float | StateOptRule = 10.0
    range: float = 90.0
    bias: float | StateOptRule = 55.0
    w_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "technology", Technology(self.technology))
        if not self.range > 0:
            raise DomainError("mapping range must be positive")
        if not self.w_max > 0:
            raise DomainError("w_max must be positive")
        grid = np.linspace(0.0, 1.0, 101)
        if self.scheme is Scheme.MAP1:
            if np.any(eval_state_opt(self.floor_rule, grid) < 0):
                raise DomainError("floor must be non-negative")
        elif np.any(eval_state_opt(self.bias_rule, grid) - self.range * grid / 2 < 0):
            raise DomainError("mapping 2 bias too small: minus leg would go negative")

    @property
    def floor_rule(self) -> StateOptRule:
        return _as_rule(self.floor)

    @property
    def bias_rule(self) -> StateOptRule:
        return _as_rule(self.bias)

    def with_w_max(self, w_max: float) -> "MappingConfig":
        return replace(self, w_max=float(w_max))

    def common_level(self, w):
        """Per-weight floor (mapping 1) or bias (mapping 2) state."""
        w_norm = np.abs(np.asarray(w, dtype=float)) / self.w_max
        rule = self.floor_rule if self.scheme is Scheme.MAP1 else self.bias_rule
        return eval_state_opt(rule, np.minimum(w_norm, 1.0))

    def state_bounds(self) -> tuple[float, float]:
        """Smallest and largest leg state reachable over ``|w| <= w_max``."""
        grid = np.linspace(-self.w_max, self.w_max, 401)
        plus, minus = map_weight(self, grid)
        return float(min(plus.min(), minus.min())), float(max(plus.max(), minus.max()))

    def to_record(self) -> dict:
        rec = {"scheme": self.scheme.value, "technology": self.technology.value, "range": self.range, "w_max": self.w_max}
        for key, val in (("floor", self.floor), ("bias", self.bias)):
            if isinstance(val, StateOptRule):
                rec[key + "_rule"] = val.to_record()
            else:
                rec[key] = val
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "MappingConfig":
        allowed = {"scheme", "technology", "floor", "floor_rule", "range", "bias", "bias_rule", "w_max"}
        unknown = set(rec) - allowed
        if unknown:
            raise ValueError(f"unknown mapping keys: {sorted(unknown)}")
        kw = {k: rec[k] for k in ("scheme", "technology", "range", "w_max", "floor", "bias") if k in rec}
        if "floor_rule" in rec:
            kw["floor"] = StateOptRule.from_record(rec["floor_rule"])
        if "bias_rule" in rec:
            kw["bias"] = StateOptRule.from_record(rec["bias_rule"])
        return cls(**kw)


def map_weight(cfg: MappingConfig, w):
    """Return ``(plus, minus)`` device states encoding signed weight(s) ``w``."""
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite")
    if np.any(np.abs(w) > cfg.w_max * (1 + 1e-12)):
        raise DomainError(f"|w| exceeds w_max={cfg.w_max}")
    level = cfg.common_level(w)
    if cfg.scheme is Scheme.MAP1:
        plus = level + cfg.range * (np.abs(w) + w) / (2 * cfg.w_max)
        minus = level + cfg.range * (np.abs(w) - w) / (2 * cfg.w_max)
    else:
        plus = level + cfg.range * w / (2 * cfg.w_max)
        minus = level - cfg.range * w / (2 * cfg.w_max)
    if plus.ndim == 0:
        return float(plus), float(minus)
    return plus, minus


def unmap_pair(cfg: MappingConfig, plus, minus):
    """Signed weight encoded by a device pair."""
    out = (np.asarray(plus, dtype=float) - np.asarray(minus, dtype=float)) * cfg.w_max / cfg.range
    return out if out.ndim else float(out)


class PairMapper(TransformerMixin, BaseEstimator):
    """Maps a weight array onto device pairs; ``w_max`` is learned in ``fit``.

    ``transform`` returns an array with a trailing axis of length 2 holding
    ``(plus, minus)``; ``inverse_transform`` undoes it.
    """

    def __init__(self, scheme="map1", technology="memristor", floor=10.0, range=90.0, bias=55.0, w_max=None):
        self.scheme = scheme
        self.technology = technology
        self.floor = floor
        self.range = range
        self.bias = bias
        self.w_max = w_max

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        w_max = self.w_max if self.w_max is not None else float(np.max(np.abs(X)))
        if w_max == 0:
            w_max = 1.0
        self.config_ = MappingConfig(self.scheme, self.technology, self.floor, self.range, self.bias, w_max)
        return self

    def transform(self, X):
        check_is_fitted(self)
        plus, minus = map_weight(self.config_, X)
        return np.stack([plus, minus], axis=-1)

    def inverse_transform(self, X):
        check_is_fitted(self)
        X = np.asarray(X, dtype=float)
        return unmap_pair(self.config_, X[..., 0], X[..., 1])


def default_mapping(technology=Technology.MEMRISTOR, scheme=Scheme.MAP1, w_max: float = 1.0) -> MappingConfig:
    """Nominal design points: 10-100 uS memristors, 0-30 nA eFlash."""
    technology = Technology(technology)
    if technology is Technology.MEMRISTOR:
        return MappingConfig(scheme, technology, floor=10.0, range=90.0, bias=55.0, w_max=w_max)
    return MappingConfig(scheme, technology, floor=0.0, range=30.0, bias=15.0, w_max=w_max)
