"""Temperature-drift mitigation.

Three techniques that can be combined:

* training with weights perturbed at a temperature that sweeps up and down
  between batches,
* banks of batch-norm parameters calibrated at k reference temperatures,
  selected at run time by the sensed temperature,
* choosing mapping ranges and floor/bias states that minimise the worst-case
  relative weight error over temperature.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .device_models import DomainError, Technology, TemperatureModel, default_model_set, temp_shift_state
from .imperfections import ImperfectionStack, TempShift
from .mapping import MappingConfig, RuleKind, Scheme, StateOptRule, map_weight, unmap_pair
from .network import Network, accuracy, train


@dataclass(frozen=True)
class TempSchedule:
    """Triangular per-batch temperature sweep."""

    t_low: float = 25.0
    t_high: float = 95.0
    step: float = 10.0

    def __post_init__(self):
        if self.step <= 0 or self.t_high < self.t_low:
            raise ValueError("schedule needs t_high >= t_low and a positive step")

    @property
    def period(self) -> int:
        return max(1, 2 * int(round((self.t_high - self.t_low) / self.step)))

    def at(self, batch: int) -> float:
        n = self.period // 2
        if n == 0:
            return self.t_low
        k = batch % self.period
        return self.t_low + self.step * (k if k <= n else self.period - k)

    def sequence(self, n: int) -> list[float]:
        return [self.at(b) for b in range(n)]


def temp_perturb_weights(W, cfg: MappingConfig, model: TemperatureModel, t: float):
    """Weights realised after both legs of every pair drift to temperature ``t``."""
    if not 0 <= t <= 120:
        raise DomainError("temperature outside the model range [0, 120] degC")
    plus, minus = map_weight(cfg, W)
    # add the drift to W rather than unmapping, so zero drift is an exact identity
    return W + unmap_pair(cfg, temp_shift_state(model, plus, t) - plus, temp_shift_state(model, minus, t) - minus)


def _temp_stack(base: ImperfectionStack, t: float) -> ImperfectionStack:
    return base.without("temp").with_effect(TempShift(t))


def train_with_temp_sweep(net: Network, X, y, schedule: TempSchedule = TempSchedule(),
                          hardware: ImperfectionStack | None = None, **train_kw):
    """Train with each batch's weights perturbed at the schedule's temperature."""
    base = hardware or ImperfectionStack()

    def perturb(step):
        return _temp_stack(base, schedule.at(step)).realize(net)

    return train(net, X, y, perturb=perturb, **train_kw)


# -- batch-norm banks ---------------------------------------------------------------


def reference_temperatures(k: int, t_low: float = 25.0, t_high: float = 100.0) -> list[float]:
    if k < 1:
        raise ValueError("k must be at least 1")
    if k == 1:
        return [float(t_low)]
    return [float(t) for t in np.linspace(t_low, t_high, k)]


@dataclass
class BnBank:
    """Folded (scale, shift) of every batch-norm layer at each reference temperature."""

    references: list[float]
    params: list[list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.references)

    def params_per_neuron(self) -> int:
        return 2 * self.k

    def to_record(self) -> dict:
        return {"references": self.references,
                "params": [[{"scale": s.tolist(), "shift": b.tolist()} for s, b in ref] for ref in self.params]}


def calibrate_bn_bank(net: Network, X, y, k: int | None = None, references=None,
                      hardware: ImperfectionStack | None = None, lr: float = 1e-3, epochs: int = 1,
                      batch_size: int = 64, seed: int = 0) -> BnBank:
    """Re-fit batch-norm parameters at each reference temperature.

    For every reference a copy of ``net`` is trained for ``epochs`` with all
    synaptic weights frozen and perturbed at that temperature; its folded
    batch-norm parameters are stored.  ``net`` itself is not modified.
    """
    refs = list(references) if references is not None else reference_temperatures(k or 1)
    refs = sorted(float(t) for t in refs)
    base = hardware or ImperfectionStack()
    bank = BnBank(refs)
    for t in refs:
        work = net.copy()
        stack = _temp_stack(base, t)
        train(work, X, y, epochs=epochs, batch_size=batch_size, lr=lr, trainable="bn", seed=seed,
              perturb=lambda step, w=work, s=stack: s.realize(w))
        bank.params.append([tuple(np.array(a) for a in bn.folded()) for bn in work.batchnorms])
    return bank


def select_bn(bank: BnBank, t: float):
    """Parameters of the nearest reference; ties go to the lower reference."""
    if not np.isfinite(t):
        raise ValueError("temperature must be finite")
    dist = [abs(t - r) for r in bank.references]
    return bank.params[int(np.argmin(dist))]


def apply_bn(net: Network, params) -> None:
    for bn, p in zip(net.batchnorms, params):
        bn.override = p


def clear_bn(net: Network) -> None:
    for bn in net.batchnorms:
        bn.override = None


def temperature_drops(net: Network, X, y, temps, hardware: ImperfectionStack | None = None,
                      bank: BnBank | None = None) -> dict:
    """Accuracy drop (percentage points) at each temperature versus the clean network."""
    base = hardware or ImperfectionStack()
    clean = 100.0 * accuracy(net, X, y)
    out = {}
    try:
        for t in temps:
            if bank is not None:
                apply_bn(net, select_bn(bank, t))
            out[float(t)] = clean - 100.0 * accuracy(net, X, y, _temp_stack(base, t).realize(net))
    finally:
        clear_bn(net)
    return out


# -- state optimisation ---------------------------------------------------------------


@dataclass(frozen=True)
class StateOptConfig:
    """Search space and quadrature of the worst-case relative-error cost.

    ``levels`` are floor (mapping 1) or bias (mapping 2) candidates and
    ``ranges`` the dynamic-range candidates, in uS or nA.  ``max_state``
    caps the largest reachable leg state and ``min_range`` the smallest
    usable range.
    """

    t0: float = 25.0
    t_max: float = 100.0
    eps_plus: float = 0.01
    t_step: float = 5.0
    w_points: int = 100
    ranges: tuple = ()
    levels: tuple = ()
    max_state: float = np.inf
    min_range: float = 0.0

    def __post_init__(self):
        if not 0 < self.eps_plus < 1:
            raise ValueError("eps_plus must lie in (0, 1)")

    def temperatures(self) -> np.ndarray:
        n = int(round((self.t_max - self.t0) / self.t_step))
        return self.t0 + self.t_step * np.arange(n + 1)

    def weights(self) -> np.ndarray:
        return np.linspace(self.eps_plus, 1.0, self.w_points)


def default_state_opt_config(technology) -> StateOptConfig:
    if Technology(technology) is Technology.MEMRISTOR:
        return StateOptConfig(ranges=tuple(np.arange(20.0, 91.0, 10.0)), levels=tuple(np.arange(0.0, 91.0, 2.5)),
                              max_state=100.0, min_range=40.0)
    return StateOptConfig(ranges=tuple(np.arange(6.0, 31.0, 3.0)), levels=tuple(np.arange(0.0, 30.1, 0.5)),
                          max_state=30.0, min_range=12.0)


def relative_errors(cfg: MappingConfig, model: TemperatureModel, w_norm, temps) -> np.ndarray:
    """``E_r(w, T)`` for normalised weights ``w`` (columns) at ``temps`` (rows)."""
    w = np.asarray(w_norm, dtype=float) * cfg.w_max
    plus, minus = map_weight(cfg, w)
    out = np.empty((len(temps), len(w)))
    for k, t in enumerate(temps):
        drift = unmap_pair(cfg, temp_shift_state(model, plus, t), temp_shift_state(model, minus, t))
        out[k] = (drift - w) / w
    return out


def worst_case_cost(cfg: MappingConfig, model: TemperatureModel, opt: StateOptConfig) -> float:
    """Largest (over temperature) integral over ``|w|`` of the absolute relative error."""
    err = np.abs(relative_errors(cfg, model, opt.weights(), opt.temperatures()))
    return float(np.max(np.trapezoid(err, opt.weights(), axis=1)))


def _energy_proxy(scheme: Scheme, rng_: float, level: float) -> float:
    # mean common-mode state for |w| uniform on [0, 1]
    return 2 * level + rng_ / 2 if scheme is Scheme.MAP1 else 2 * level


@dataclass
class StateOptResult:
    mapping: MappingConfig
    cost: float
    heatmap: np.ndarray
    ranges: np.ndarray
    levels: np.ndarray
    rule: StateOptRule
    rule_cost: float
    violations: dict

    def rule_mapping(self) -> MappingConfig:
        if self.mapping.scheme is Scheme.MAP1:
            return MappingConfig(self.mapping.scheme, self.mapping.technology, floor=self.rule,
                                 range=self.mapping.range, w_max=self.mapping.w_max)
        return MappingConfig(self.mapping.scheme, self.mapping.technology, bias=self.rule,
                             range=self.mapping.range, w_max=self.mapping.w_max)


def _feasible(scheme, r, level, opt):
    if r < opt.min_range:
        return "min_range"
    top = level + r if scheme is Scheme.MAP1 else level + r / 2
    if top > opt.max_state + 1e-12:
        return "max_state"
    if scheme is Scheme.MAP2 and level - r / 2 < -1e-12:
        return "bias_below_half_range"
    return None


def _make_cfg(scheme, technology, r, level):
    if scheme is Scheme.MAP1:
        return MappingConfig(scheme, technology, floor=level, range=r)
    return MappingConfig(scheme, technology, bias=level, range=r)


def fit_level_rule(technology, scheme, model: TemperatureModel, r: float, opt: StateOptConfig) -> StateOptRule:
    """Per-``|w|`` best floor/bias for range ``r``, fitted as ``max(clamp, a + b|w|)``."""
    scheme = Scheme(scheme)
    temps = opt.temperatures()
    ws = opt.weights()
    levels = np.asarray(opt.levels, dtype=float)
    best = np.empty(len(ws))
    for j, w in enumerate(ws):
        if scheme is Scheme.MAP1:
            plus, minus = levels + r * w, levels
            ok = plus <= opt.max_state + 1e-12
        else:
            plus, minus = levels + r * w / 2, levels - r * w / 2
            ok = (minus >= 0) & (plus <= opt.max_state + 1e-12)
        worst = np.full(len(levels), np.inf)
        for t in temps:
            drift = temp_shift_state(model, plus, t) - temp_shift_state(model, minus, t)
            worst = np.where(ok, np.maximum(np.where(np.isinf(worst), 0.0, worst), np.abs(drift / (r * w) - 1)),
                             np.inf)
        best[j] = levels[int(np.argmin(worst))]
    if scheme is Scheme.MAP2:
        slope, intercept = np.polyfit(ws, best, 1)
        # both legs non-negative at |w| = 0 and |w| = 1 (linear, so everywhere)
        intercept = max(intercept, 0.0, r / 2 - slope)
        return StateOptRule(RuleKind.LINEAR_IN_ABS_W, float(intercept), float(slope), -np.inf)
    clamp = float(levels.min())
    free = best > clamp + 1e-12
    if free.sum() >= 2:
        slope, intercept = np.polyfit(ws[free], best[free], 1)
    else:
        slope, intercept = 0.0, float(best.mean())
    return StateOptRule(RuleKind.LINEAR_IN_ABS_W, float(intercept), float(slope), clamp)


def state_opt_search(opt: StateOptConfig, model: TemperatureModel, technology, scheme) -> StateOptResult:
    """Grid search of (range, level) minimising the worst-case temperature cost.

    Ties are broken towards the lowest energy (smallest common-mode state).
    Raises ``ValueError`` listing the violated constraints when no candidate
    is feasible.
    """
    technology, scheme = Technology(technology), Scheme(scheme)
    ranges = np.asarray(opt.ranges, dtype=float)
    levels = np.asarray(opt.levels, dtype=float)
    if ranges.size == 0 or levels.size == 0:
        raise ValueError("state-optimisation grid is empty")
    heat = np.full((len(ranges), len(levels)), np.nan)
    violations: dict[str, int] = {}
    best = None
    for a, r in enumerate(ranges):
        for b, level in enumerate(levels):
            why = _feasible(scheme, r, level, opt)
            if why:
                violations[why] = violations.get(why, 0) + 1
                continue
            cost = worst_case_cost(_make_cfg(scheme, technology, r, level), model, opt)
            heat[a, b] = cost
            key = (round(cost, 12), _energy_proxy(scheme, r, level), r, level)
            if best is None or key < best[0]:
                best = (key, r, level, cost)
    if best is None:
        raise ValueError(f"no feasible state-optimisation candidate; violated constraints: {violations}")
    _, r, level, cost = best
    rule = fit_level_rule(technology, scheme, model, r, opt)
    result = StateOptResult(_make_cfg(scheme, technology, r, level), cost, heat, ranges, levels, rule, np.nan,
                            violations)
    try:
        result.rule_cost = worst_case_cost(result.rule_mapping(), model, opt)
    except DomainError:
        result.rule_cost = np.nan
    return result


def default_temperature_model(technology) -> TemperatureModel:
    return default_model_set().temperature[Technology(technology)]
