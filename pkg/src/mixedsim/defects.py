"""Stuck-at faults on differential pairs and their compensation.

Two mitigations are provided: retuning the healthy leg of a pair so the
pair difference encodes the intended weight as closely as the state bounds
allow, and a per-neuron compensation column that cancels the mean
preactivation shift left by faults, measured on a small calibration batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .mapping import MappingConfig, map_weight, unmap_pair
from .rng import make_rng


class FaultKind(IntEnum):
    HEALTHY = 0
    STUCK_HIGH = 1
    STUCK_LOW = 2
    STUCK_RANDOM = 3


class _Uncompensatable:
    """Marker returned when both legs of a pair are stuck."""

    def __repr__(self):
        return "UNCOMPENSATABLE"

    def __bool__(self):
        return False


UNCOMPENSATABLE = _Uncompensatable()


@dataclass
class FaultMap:
    """Per-device fault tags with the frozen state of each stuck device.

    For network layers the arrays have shape ``(fan_in, fan_out, 2)`` with
    the trailing axis holding the (plus, minus) legs.
    """

    kinds: np.ndarray
    values: np.ndarray
    ppm: float = 0.0
    seed: int = 0
    bounds: tuple[float, float] = (10.0, 100.0)

    @property
    def faulty(self) -> np.ndarray:
        return self.kinds != FaultKind.HEALTHY

    def counts(self) -> dict:
        return {k.name.lower(): int(np.sum(self.kinds == k)) for k in FaultKind}

    def apply(self, states: np.ndarray) -> np.ndarray:
        """States with stuck devices frozen; healthy devices pass through."""
        return np.where(self.faulty, self.values, states)


def inject_faults(shape, ppm: float, mix=(1 / 3, 1 / 3, 1 / 3), seed: int = 0, bounds=(10.0, 100.0),
                  index: tuple = ()) -> FaultMap:
    """Mark each device faulty with probability ``ppm * 1e-6``.

    ``mix`` gives the (stuck-high, stuck-low, stuck-random) proportions;
    random stuck states are uniform strictly inside ``bounds``.  ``index``
    selects an independent stream (e.g. the layer number).
    """
    mix = np.asarray(mix, dtype=float)
    if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError("mix must be three non-negative fractions summing to 1")
    if not 0 <= ppm <= 1e6:
        raise ValueError("ppm must lie in [0, 1e6]")
    lo, hi = bounds
    rng = make_rng(seed, "defects.inject", *index)
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    hit = rng.random(shape) < ppm * 1e-6
    kind = rng.choice(3, size=shape, p=mix) + 1
    u = rng.random(shape)
    u = np.where(u == 0.0, 0.5, u)
    kinds = np.where(hit, kind, FaultKind.HEALTHY).astype(np.int8)
    values = np.full(shape, np.nan)
    values[kinds == FaultKind.STUCK_HIGH] = hi
    values[kinds == FaultKind.STUCK_LOW] = lo
    rnd = kinds == FaultKind.STUCK_RANDOM
    values[rnd] = lo + (hi - lo) * u[rnd]
    return FaultMap(kinds, values, float(ppm), int(seed), (float(lo), float(hi)))


@dataclass(frozen=True)
class PairFault:
    """Fault state of one pair; ``*_value`` is the stuck state (random case)."""

    plus: FaultKind = FaultKind.HEALTHY
    minus: FaultKind = FaultKind.HEALTHY
    plus_value: float | None = None
    minus_value: float | None = None


def _stuck_value(kind, value, lo, hi):
    kind = FaultKind(kind)
    if kind is FaultKind.STUCK_HIGH:
        return hi
    if kind is FaultKind.STUCK_LOW:
        return lo
    if value is None:
        raise ValueError("stuck-random fault needs its stuck state")
    return float(value)


def _retune_partner(cfg: MappingConfig, w, kind, stuck, leg_is_plus, lo, hi):
    """Healthy-leg state for a pair whose other leg is stuck at ``stuck``."""
    r, wm = cfg.range, cfg.w_max
    aw = np.abs(w)
    if leg_is_plus:  # plus stuck, retune minus
        out = np.where(kind == FaultKind.STUCK_HIGH, hi - r * (w + aw) / (2 * wm),
                       np.where(kind == FaultKind.STUCK_LOW, lo + r * (aw - w) / (2 * wm), stuck - r * w / wm))
    else:  # minus stuck, retune plus
        out = np.where(kind == FaultKind.STUCK_HIGH, hi + r * (w - aw) / (2 * wm),
                       np.where(kind == FaultKind.STUCK_LOW, lo + r * (aw + w) / (2 * wm), stuck + r * w / wm))
    return np.clip(out, lo, hi)


def pair_retune(cfg: MappingConfig, w: float, fault: PairFault, bounds=None):
    """Retuned ``(plus, minus)`` for one pair, or ``UNCOMPENSATABLE``.

    A healthy pair is returned as mapped.  ``bounds`` defaults to the
    mapping's reachable state range.
    """
    lo, hi = bounds if bounds is not None else cfg.state_bounds()
    plus_f, minus_f = FaultKind(fault.plus), FaultKind(fault.minus)
    if plus_f is not FaultKind.HEALTHY and minus_f is not FaultKind.HEALTHY:
        return UNCOMPENSATABLE
    plus, minus = map_weight(cfg, w)
    if plus_f is not FaultKind.HEALTHY:
        plus = _stuck_value(plus_f, fault.plus_value, lo, hi)
        minus = float(_retune_partner(cfg, w, plus_f, plus, True, lo, hi))
    elif minus_f is not FaultKind.HEALTHY:
        minus = _stuck_value(minus_f, fault.minus_value, lo, hi)
        plus = float(_retune_partner(cfg, w, minus_f, minus, False, lo, hi))
    return plus, minus


def faulty_pairs(cfg: MappingConfig, W, fmap: FaultMap, retune: bool = True, states=None):
    """Programmed (plus, minus) arrays for weights ``W`` under ``fmap``.

    Without ``retune`` the healthy leg keeps its mapped state (taken from
    ``states`` when given).  Returns ``(plus, minus, uncompensatable)``.
    """
    W = np.asarray(W, dtype=float)
    lo, hi = fmap.bounds
    if states is None:
        plus, minus = map_weight(cfg, W)
        plus, minus = np.asarray(plus, dtype=float), np.asarray(minus, dtype=float)
    else:
        plus, minus = (np.array(s, dtype=float) for s in states)
    kp, km = fmap.kinds[..., 0], fmap.kinds[..., 1]
    vp, vm = fmap.values[..., 0], fmap.values[..., 1]
    fp, fm = kp != FaultKind.HEALTHY, km != FaultKind.HEALTHY
    both = fp & fm
    if retune:
        only_p = fp & ~fm
        only_m = fm & ~fp
        minus = np.where(only_p, _retune_partner(cfg, W, kp, vp, True, lo, hi), minus)
        plus = np.where(only_m, _retune_partner(cfg, W, km, vm, False, lo, hi), plus)
    plus = np.where(fp, vp, plus)
    minus = np.where(fm, vm, minus)
    return plus, minus, both


def realized_weights(cfg: MappingConfig, plus, minus):
    return unmap_pair(cfg, plus, minus)


# -- average-error compensation ------------------------------------------------


@dataclass
class LayerCompensation:
    """Per-neuron compensation for one synaptic layer.

    ``column`` holds one weight per (kernel slice, neuron), realised by an
    extra pair driven at the layer's full input range ``x_max``.
    ``bn_shift`` is the part the column could not absorb; it is equivalent to
    moving the following batch-norm mean.  ``flagged`` marks neurons that
    needed it.
    """

    column: np.ndarray
    x_max: float
    bn_shift: np.ndarray
    flagged: np.ndarray

    @property
    def offset(self) -> np.ndarray:
        return self.column.sum(axis=0) * self.x_max + self.bn_shift


@dataclass
class Compensation:
    layers: dict = field(default_factory=dict)

    def offset(self, i: int):
        comp = self.layers.get(i)
        return None if comp is None else comp.offset


def compensate_average_error(net, stack, X_calib, slice_rows: int = 64) -> Compensation:
    """Cancel each neuron's mean fault-induced preactivation shift.

    Layers are processed in order, so later layers see inputs already
    corrected upstream.  The shift is measured as ``mean(cols) @ dW`` where
    ``dW`` is the realised weight error caused by faults alone.  ``stack``
    must contain a ``Faults`` effect; noise is not applied during
    calibration.
    """
    X_calib = np.asarray(X_calib, dtype=float)
    if len(X_calib) == 0:
        raise ValueError("calibration batch is empty")
    calib = stack.without("noise")
    # same state path with the faults switched off, so dW holds fault error only
    clean = calib._derive([replace(e, ppm=0.0, approach="none", compensation=None) if e.kind == "faults" else e
                           for e in calib.effects]).realize(net)
    comp = Compensation()
    for layer in net.synaptic:
        i = layer.index
        view = calib.with_compensation(comp).realize(net)
        net.forward(X_calib, view=view)
        cols = layer._cols
        dW = view.weight(i, layer.W) - clean.weight(i, layer.W)
        mean_in = cols.mean(axis=0)
        n_slices = int(np.ceil(layer.fan_in / slice_rows))
        w_max = float(np.max(np.abs(layer.W))) or 1.0
        x_max = layer.x_max
        column = np.zeros((n_slices, layer.fan_out))
        shift_total = mean_in @ dW
        for s in range(n_slices):
            rows = slice(s * slice_rows, (s + 1) * slice_rows)
            shift = mean_in[rows] @ dW[rows]
            column[s] = np.clip(-shift / x_max, -w_max, w_max)
        bn_shift = -shift_total - column.sum(axis=0) * x_max
        flagged = np.abs(bn_shift) > 1e-12 * max(1.0, float(np.abs(shift_total).max()))
        comp.layers[i] = LayerCompensation(column, x_max, bn_shift, flagged)
    return comp
