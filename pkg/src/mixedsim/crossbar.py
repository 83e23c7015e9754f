"""Write-verify tuning of a passive crossbar under V/2 half-select disturbance.

Devices are programmed one at a time in raster order.  Each pulse on the
selected device also applies a half-amplitude pulse of the same polarity to
every other device on its row and column.  Columns ``2k`` and ``2k + 1`` form
a differential pair (plus, minus); an odd trailing column is unpaired.

The per-visit loop runs in a numba kernel; everything else is numpy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numba
import numpy as np
from scipy import ndimage

from .device_models import DeviceModelSet, DomainError, SwitchingModel, default_model_set
from .rng import make_rng

G_INIT_MEAN = 36.25
G_INIT_STD = 9.0
VERIFY_RESOLUTION = 1e-3
THRESHOLD_GRID_STEP = 0.01


class Approach(str, Enum):
    NAIVE = "naive"
    APPROACH1 = "approach1"
    APPROACH2 = "approach2"


SET_CAPS = (2.2, 0.0, 2.1, 1.7, 1.5, 1.3, 1.1, 0.9, 0.7)
RESET_CAPS = (0.0, 2.2, 2.1, 1.7, 1.5, 1.3, 1.1, 0.9, 0.7)


def default_cap_schedule(rounds: int, caps=SET_CAPS) -> tuple[float, ...]:
    """Stock caps cut or padded (with the last cap) to ``rounds - 1`` entries."""
    n = max(rounds - 1, 0)
    return tuple(caps[:n]) + (caps[-1],) * max(n - len(caps), 0)


@dataclass
class CrossbarState:
    g: np.ndarray
    alpha_set: np.ndarray
    alpha_reset: np.ndarray
    bounds: tuple[float, float] = (2.0, 150.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.g.shape

    def copy(self) -> "CrossbarState":
        return CrossbarState(self.g.copy(), self.alpha_set.copy(), self.alpha_reset.copy(), tuple(self.bounds))


@dataclass(frozen=True)
class TuningConfig:
    target_rel_error: float = 0.01
    v_start: float = 0.5
    v_step: float = 0.1
    v_max_set: float = 2.0
    v_max_reset: float = 2.5
    rounds: int = 10
    max_alternations: int = 5
    max_pulses_per_visit: int = 500
    approach: Approach = Approach.NAIVE
    cap_schedule_set: tuple[float, ...] | None = None  # None: stock schedule fitted to ``rounds``
    cap_schedule_reset: tuple[float, ...] | None = None
    preset_threshold: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "approach", Approach(self.approach))
        for name, stock in (("cap_schedule_set", SET_CAPS), ("cap_schedule_reset", RESET_CAPS)):
            caps = getattr(self, name)
            caps = default_cap_schedule(self.rounds, stock) if caps is None else caps
            object.__setattr__(self, name, tuple(float(c) for c in caps))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.target_rel_error < 1:
            raise ValueError("target_rel_error must lie in (0, 1)")
        if self.v_step <= 0 or self.v_start <= 0:
            raise ValueError("v_start and v_step must be positive")
        if self.v_start > min(self.v_max_set, self.v_max_reset):
            raise ValueError("v_start exceeds the maximum pulse amplitude")
        if self.approach is not Approach.NAIVE:
            for name in ("cap_schedule_set", "cap_schedule_reset"):
                if len(getattr(self, name)) != self.rounds - 1:
                    raise ValueError(f"{name} needs one cap per round after the first ({self.rounds - 1})")

    def caps_for_round(self, k: int) -> tuple[float, float]:
        """Effective (set, reset) amplitude limits for 0-based round ``k``; 0 disables a polarity."""
        if self.approach is Approach.NAIVE or k == 0:
            return self.v_max_set, self.v_max_reset
        cs = self.cap_schedule_set[k - 1]
        cr = self.cap_schedule_reset[k - 1]
        return (min(cs, self.v_max_set) if cs > 0 else 0.0, min(cr, self.v_max_reset) if cr > 0 else 0.0)


@dataclass
class TuneReport:
    rel_error: np.ndarray
    targets: np.ndarray
    effective_targets: np.ndarray
    final_g: np.ndarray
    pulses: np.ndarray
    pulses_per_round: list[int]
    rounds: int
    disturbance_events: int
    anchored: np.ndarray = field(default=None)

    def summary(self, threshold: float = 0.05) -> dict:
        stats = error_stats(self.rel_error, threshold)
        return {
            "rounds": self.rounds,
            "pulses_total": int(self.pulses.sum()),
            "pulses_per_round": [int(p) for p in self.pulses_per_round],
            "disturbance_events": int(self.disturbance_events),
            "anchored_devices": int(self.anchored.sum()) if self.anchored is not None else 0,
            "error_stats": {k: v for k, v in stats.items() if k not in ("cdf_x", "cdf_y")},
        }

    def to_json(self, threshold: float = 0.05) -> str:
        return json.dumps(self.summary(threshold), indent=2, sort_keys=True)

    def device_rows(self):
        rows, cols = self.targets.shape
        for r in range(rows):
            for c in range(cols):
                yield r, c, float(self.effective_targets[r, c]), float(self.final_g[r, c]), float(self.rel_error[r, c])


# -- numba kernel -------------------------------------------------------------


@numba.njit(cache=True)
def _response(p, g, v, alpha):
    u = alpha * v
    den = 1.0 + p[1] * u * u
    return np.exp(p[0] / den) * np.sinh(p[2] * u / den) * (p[3] + p[4] * np.sqrt(g) + p[5] * g)


@numba.njit(cache=True)
def _pulse(g, a_set, a_reset, r, c, v, p_set, p_reset, lo, hi, half_select):
    """One pulse of signed amplitude ``v`` on (r, c); returns disturbed-device count."""
    if v > 0:
        p, a = p_set, a_set
    else:
        p, a = p_reset, a_reset
    x = g[r, c] * (1.0 + _response(p, g[r, c], v, a[r, c]))
    g[r, c] = min(max(x, lo), hi)
    if not half_select:
        return 0
    rows, cols = g.shape
    h = 0.5 * v
    for j in range(cols):
        if j != c:
            x = g[r, j] * (1.0 + _response(p, g[r, j], h, a[r, j]))
            g[r, j] = min(max(x, lo), hi)
    for i in range(rows):
        if i != r:
            x = g[i, c] * (1.0 + _response(p, g[i, c], h, a[i, c]))
            g[i, c] = min(max(x, lo), hi)
    return rows + cols - 2


# Visit outcomes.
_DONE = 0
_BUDGET = 1
_BLOCKED = 2  # needed polarity disabled this round
_ABOVE_CAP = 3  # needed polarity's threshold exceeds the cap (approach 2)


@numba.njit(cache=True)
def _visit(g, a_set, a_reset, thr_set, thr_reset, r, c, target, tol, v_start, v_step, cap_set, cap_reset,
           max_alt, max_pulses, p_set, p_reset, lo, hi, check_caps, half_select, stats):
    """Write-verify one device; ``stats`` accumulates [pulses, disturbed]."""
    if abs(g[r, c] - target) <= tol * target:
        return _DONE
    direction = 1.0 if target > g[r, c] else -1.0
    v = v_start
    pulses = 0
    alts = 0
    while pulses < max_pulses:
        cap = cap_set if direction > 0 else cap_reset
        if cap <= 0.0:
            return _BLOCKED
        if check_caps:
            thr = thr_set[r, c] if direction > 0 else thr_reset[r, c]
            if thr > cap:
                return _ABOVE_CAP
        amp = min(v, cap)
        before = g[r, c]
        stats[1] += _pulse(g, a_set, a_reset, r, c, direction * amp, p_set, p_reset, lo, hi, half_select)
        stats[0] += 1
        pulses += 1
        if abs(g[r, c] - target) <= tol * target:
            return _DONE
        nd = 1.0 if target > g[r, c] else -1.0
        if nd != direction:
            alts += 1
            if alts >= max_alt:
                return _BUDGET
            direction = nd
            v = v_start
        elif amp >= cap and abs(g[r, c] - before) < VERIFY_RESOLUTION * before:
            # stalled at the amplitude limit
            return _BUDGET
        else:
            v += v_step
    return _BUDGET


@numba.njit(cache=True)
def _reencode(g, eff, orig, anchored, r, c, lo, hi):
    """Anchor (r, c) at its current state and retarget its partner to keep the pair difference."""
    cols = g.shape[1]
    partner = c + 1 if c % 2 == 0 else c - 1
    if partner >= cols or anchored[r, partner]:
        return -1
    anchored[r, c] = True
    eff[r, c] = g[r, c]
    if c % 2 == 0:
        diff = orig[r, c] - orig[r, partner]
        t = g[r, c] - diff
    else:
        diff = orig[r, partner] - orig[r, c]
        t = g[r, c] + diff
    eff[r, partner] = min(max(t, lo), hi)
    return partner


@numba.njit(cache=True)
def _visit_counted(g, a_set, a_reset, thr_set, thr_reset, r, c, eff, tol, v_start, v_step, cap_set, cap_reset,
                   max_alt, max_pulses, p_set, p_reset, lo, hi, approach2, half_select, pulses, stats):
    local = np.zeros(2, dtype=np.int64)
    out = _visit(g, a_set, a_reset, thr_set, thr_reset, r, c, eff[r, c], tol, v_start, v_step, cap_set,
                 cap_reset, max_alt, max_pulses, p_set, p_reset, lo, hi, approach2, half_select, local)
    pulses[r, c] += local[0]
    stats[0] += local[0]
    stats[1] += local[1]
    return out


@numba.njit(cache=True)
def _tune_round(g, a_set, a_reset, thr_set, thr_reset, eff, orig, anchored, pulses, tol, v_start, v_step,
                cap_set, cap_reset, max_alt, max_pulses, p_set, p_reset, lo, hi, approach2, half_select, stats):
    rows, cols = g.shape
    for r in range(rows):
        for c in range(cols):
            out = _visit_counted(g, a_set, a_reset, thr_set, thr_reset, r, c, eff, tol, v_start, v_step,
                                 cap_set, cap_reset, max_alt, max_pulses, p_set, p_reset, lo, hi, approach2,
                                 half_select, pulses, stats)
            if out == _ABOVE_CAP:
                partner = _reencode(g, eff, orig, anchored, r, c, lo, hi)
                if 0 <= partner < c:
                    # partner already visited this round: tune it now
                    _visit_counted(g, a_set, a_reset, thr_set, thr_reset, r, partner, eff, tol, v_start, v_step,
                                   cap_set, cap_reset, max_alt, max_pulses, p_set, p_reset, lo, hi, approach2,
                                   half_select, pulses, stats)


# -- public operations ----------------------------------------------------------


def init_crossbar(rows: int, cols: int, sigma_alpha: float, seed: int, bounds=(2.0, 150.0)) -> CrossbarState:
    """Random pre-tuning state: g ~ N(36.25, 9) clamped, alpha ~ N(1, sigma) truncated to > 0."""
    if rows < 1 or cols < 1:
        raise ValueError("crossbar needs at least one row and column")
    if not 0 <= sigma_alpha < 1:
        raise ValueError("sigma_alpha must lie in [0, 1)")
    rng = make_rng(seed, "crossbar.init", rows, cols)
    g = np.clip(rng.normal(G_INIT_MEAN, G_INIT_STD, (rows, cols)), *bounds)
    alphas = []
    for _ in range(2):
        a = np.ones((rows, cols))
        if sigma_alpha > 0:
            a = rng.normal(1.0, sigma_alpha, (rows, cols))
            bad = a <= 0
            while bad.any():
                a[bad] = rng.normal(1.0, sigma_alpha, int(bad.sum()))
                bad = a <= 0
        alphas.append(a)
    return CrossbarState(g, alphas[0], alphas[1], tuple(float(b) for b in bounds))


def effective_thresholds(alpha: np.ndarray, model: SwitchingModel, g_mid: float = G_INIT_MEAN,
                         v_limit: float = 5.0) -> np.ndarray:
    """Smallest amplitude on a 10 mV grid whose response exceeds the verify resolution.

    Devices that never exceed it below ``v_limit`` get ``inf``.
    """
    sign = 1.0 if model.polarity.value == "set" else -1.0
    grid = np.arange(1, int(round(v_limit / THRESHOLD_GRID_STEP)) + 1) * THRESHOLD_GRID_STEP
    p = model.vector()
    flat = np.asarray(alpha, dtype=float).ravel()
    out = np.full(flat.shape, np.inf)
    for start in range(0, flat.size, 4096):
        a = flat[start:start + 4096, None]
        u = a * sign * grid[None, :]
        den = 1.0 + p[1] * u * u
        resp = np.abs(np.exp(p[0] / den) * np.sinh(p[2] * u / den) * (p[3] + p[4] * np.sqrt(g_mid) + p[5] * g_mid))
        hit = resp > VERIFY_RESOLUTION
        idx = np.argmax(hit, axis=1)
        found = hit[np.arange(len(a)), idx]
        out[start:start + 4096][found] = grid[idx[found]]
    return out.reshape(np.shape(alpha))


def _params(models: DeviceModelSet):
    return models.switch_set.vector(), models.switch_reset.vector()


def write_verify_device(state: CrossbarState, row: int, col: int, target_g: float, cfg: TuningConfig,
                        models: DeviceModelSet | None = None, caps: tuple[float, float] | None = None) -> int:
    """Tune one device in place; returns the number of pulses applied."""
    models = models or default_model_set()
    lo, hi = state.bounds
    if not lo <= target_g <= hi:
        raise DomainError("target outside conductance bounds")
    cap_set, cap_reset = caps if caps is not None else (cfg.v_max_set, cfg.v_max_reset)
    p_set, p_reset = _params(models)
    stats = np.zeros(2, dtype=np.int64)
    dummy = np.zeros((1, 1))
    _visit(state.g, state.alpha_set, state.alpha_reset, dummy, dummy, row, col, float(target_g),
           cfg.target_rel_error, cfg.v_start, cfg.v_step, cap_set, cap_reset, cfg.max_alternations,
           cfg.max_pulses_per_visit, p_set, p_reset, lo, hi, False, True, stats)
    return int(stats[0])


def apply_half_select(state: CrossbarState, row: int, col: int, v: float, models: DeviceModelSet | None = None) -> int:
    """Disturb the selected device's row and column at ``v / 2``; returns the count disturbed."""
    models = models or default_model_set()
    p_set, p_reset = _params(models)
    p = p_set if v > 0 else p_reset
    a = state.alpha_set if v > 0 else state.alpha_reset
    lo, hi = state.bounds
    g = state.g
    h = 0.5 * v
    mask_r = np.arange(g.shape[1]) != col
    mask_c = np.arange(g.shape[0]) != row
    rr = g[row, mask_r]
    g[row, mask_r] = np.clip(rr * (1 + _switch_np(p, rr, h, a[row, mask_r])), lo, hi)
    cc = g[mask_c, col]
    g[mask_c, col] = np.clip(cc * (1 + _switch_np(p, cc, h, a[mask_c, col])), lo, hi)
    return int(mask_r.sum() + mask_c.sum())


def _switch_np(p, g, v, alpha):
    u = alpha * v
    den = 1.0 + p[1] * u * u
    return np.exp(p[0] / den) * np.sinh(p[2] * u / den) * (p[3] + p[4] * np.sqrt(g) + p[5] * g)


def tune_crossbar(state: CrossbarState, targets: np.ndarray, cfg: TuningConfig,
                  models: DeviceModelSet | None = None, half_select: bool = True) -> TuneReport:
    """Tune ``state`` in place towards ``targets`` over ``cfg.rounds`` raster passes."""
    models = models or default_model_set()
    targets = np.asarray(targets, dtype=float)
    if targets.shape != state.shape:
        raise ValueError(f"targets shape {targets.shape} does not match crossbar {state.shape}")
    lo, hi = state.bounds
    if np.any(targets < lo) or np.any(targets > hi):
        raise DomainError("targets outside conductance bounds")
    p_set, p_reset = _params(models)
    eff = targets.copy()
    anchored = np.zeros(state.shape, dtype=bool)
    pulses = np.zeros(state.shape, dtype=np.int64)
    approach2 = cfg.approach is Approach.APPROACH2
    if approach2:
        thr_set = effective_thresholds(state.alpha_set, models.switch_set)
        thr_reset = effective_thresholds(state.alpha_reset, models.switch_reset)
        high = thr_set > cfg.preset_threshold
        low = (thr_reset > cfg.preset_threshold) & ~high
        state.g[high] = hi
        state.g[low] = lo
        for r, c in zip(*np.nonzero(high | low)):
            _reencode(state.g, eff, targets, anchored, r, c, lo, hi)
    else:
        thr_set = thr_reset = np.zeros((1, 1))
    stats = np.zeros(2, dtype=np.int64)
    per_round = []
    for k in range(cfg.rounds):
        cap_set, cap_reset = cfg.caps_for_round(k)
        before = int(stats[0])
        _tune_round(state.g, state.alpha_set, state.alpha_reset, thr_set, thr_reset, eff, targets, anchored,
                    pulses, cfg.target_rel_error, cfg.v_start, cfg.v_step, cap_set, cap_reset,
                    cfg.max_alternations, cfg.max_pulses_per_visit, p_set, p_reset, lo, hi, approach2,
                    half_select, stats)
        per_round.append(int(stats[0]) - before)
    rel = (state.g - eff) / eff
    return TuneReport(rel, targets, eff, state.g.copy(), pulses, per_round, cfg.rounds, int(stats[1]), anchored)


def error_stats(rel_error, threshold: float = 0.05, quantiles=(0.5, 0.9, 0.99)) -> dict:
    """Summary of absolute relative errors, including an empirical CDF."""
    e = np.abs(np.asarray(rel_error, dtype=float)).ravel()
    xs = np.sort(e)
    cdf = np.arange(1, xs.size + 1) / xs.size
    return {
        "mean": float(e.mean()),
        "std": float(e.std()),
        "quantiles": {str(q): float(np.quantile(e, q)) for q in quantiles},
        "threshold": threshold,
        "tail_fraction": float(np.mean(e > threshold)),
        "cdf_x": xs,
        "cdf_y": cdf,
    }


def tuning_error_stats(state: CrossbarState, targets, threshold: float = 0.05, quantiles=(0.5, 0.9, 0.99)) -> dict:
    targets = np.asarray(targets, dtype=float)
    return error_stats((state.g - targets) / targets, threshold, quantiles)


def pseudo_image(rows: int, cols: int, seed: int, levels: int = 16, g_range=(10.0, 100.0), smooth: float = 3.0) -> np.ndarray:
    """Seeded smooth random field quantised to ``levels`` grey levels in ``g_range`` (uS)."""
    rng = make_rng(seed, "crossbar.image", rows, cols)
    field_ = ndimage.gaussian_filter(rng.normal(size=(rows, cols)), smooth, mode="wrap")
    lo, hi = field_.min(), field_.max()
    norm = (field_ - lo) / (hi - lo) if hi > lo else np.zeros_like(field_)
    q = np.round(norm * (levels - 1)) / (levels - 1)
    return g_range[0] + q * (g_range[1] - g_range[0])


def config_record(cfg: TuningConfig) -> dict:
    rec = asdict(cfg)
    rec["approach"] = cfg.approach.value
    return rec
