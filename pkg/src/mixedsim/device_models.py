"""Phenomenological device models and their least-squares fitter.

All evaluators are pure and vectorised over numpy arrays.  Coefficients are
configuration inputs; :func:`default_model_set` ships stand-in values whose
curve shapes mimic typical TiO2 memristor and gate-coupled eFlash behaviour.
They are not measured data.
"""
from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

BOLTZMANN_EV_PER_K = 8.617333262e-5
KELVIN_OFFSET = 273.15


class DomainError(ValueError):
    """An input lies outside the domain of a model or mapping."""


class FitError(RuntimeError):
    """Least-squares fit failed; ``best`` holds the best coefficients seen."""

    def __init__(self, message: str, best: np.ndarray | None = None, cost: float = math.inf):
        super().__init__(message)
        self.best = best
        self.cost = cost


class Technology(str, Enum):
    MEMRISTOR = "memristor"
    EFLASH = "eflash"


class Polarity(str, Enum):
    SET = "set"
    RESET = "reset"


class ModelShape(str, Enum):
    TEMP_MEMRISTOR = "temp_memristor"
    TEMP_EFLASH = "temp_eflash"
    NL_MEMRISTOR = "nl_memristor"
    NL_EFLASH = "nl_eflash"
    SWITCH_SET = "switch_set"
    SWITCH_RESET = "switch_reset"


TEMP_COEFFS = {
    Technology.MEMRISTOR: ("p00", "p10", "p20", "p30"),
    Technology.EFLASH: ("p00", "p10", "p01", "p20", "p11", "p21"),
}
NL_COEFFS = {
    Technology.MEMRISTOR: ("p01", "p03", "p10", "p20", "p30"),
    Technology.EFLASH: ("p01", "p03", "p10", "p20", "p30", "p11", "p22"),
}
SWITCH_COEFFS = ("beta1", "beta2", "beta3", "gamma1", "gamma2", "gamma3")


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


def _coeff_dict(names: Sequence[str], coefficients) -> dict[str, float]:
    if isinstance(coefficients, Mapping):
        missing = set(names) - set(coefficients)
        extra = set(coefficients) - set(names)
        if missing or extra:
            raise ValueError(f"expected coefficients {list(names)}, got {sorted(coefficients)}")
        return {n: float(coefficients[n]) for n in names}
    values = list(coefficients)
    if len(values) != len(names):
        raise ValueError(f"expected {len(names)} coefficients {list(names)}, got {len(values)}")
    return {n: float(v) for n, v in zip(names, values)}


@dataclass(frozen=True)
class TemperatureModel:
    """Relative state drift ``dw/w0`` versus die temperature.

    Memristor weights ``w0`` are conductances normalised so that 1 is the
    maximum conductance (100 uS); eFlash weights are ``I_state / I_max``.
    """

    technology: Technology
    coefficients: dict[str, float]
    t0: float = 25.0
    i_max: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "technology", Technology(self.technology))
        object.__setattr__(self, "coefficients", _coeff_dict(TEMP_COEFFS[self.technology], self.coefficients))

    def vector(self) -> np.ndarray:
        return np.array([self.coefficients[n] for n in TEMP_COEFFS[self.technology]])


@dataclass(frozen=True)
class NonlinearityModel:
    technology: Technology
    coefficients: dict[str, float]
    x_tune: float = 0.6
    x_max: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "technology", Technology(self.technology))
        object.__setattr__(self, "coefficients", _coeff_dict(NL_COEFFS[self.technology], self.coefficients))
        if not 0.0 <= self.x_tune <= 1.0:
            raise DomainError("x_tune must lie in [0, 1]")

    def vector(self) -> np.ndarray:
        return np.array([self.coefficients[n] for n in NL_COEFFS[self.technology]])


@dataclass(frozen=True)
class SwitchingModel:
    """Average pulse response ``dG/G`` of a memristor for one polarity.

    Reset models are evaluated at negative voltages directly.
    """

    polarity: Polarity
    beta: tuple[float, float, float]
    gamma: tuple[float, float, float]
    pulse_width_ms: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if len(self.beta) != 3 or len(self.gamma) != 3:
            raise ValueError("beta and gamma need three entries each")

    def vector(self) -> np.ndarray:
        return np.array(self.beta + self.gamma)


@dataclass(frozen=True)
class RetentionProjector:
    activation_energy_ev: float = 1.1
    boltzmann_ev_per_k: float = BOLTZMANN_EV_PER_K

    def __post_init__(self):
        if self.activation_energy_ev < 0:
            raise DomainError("activation energy must be non-negative")


@dataclass
class MeasurementTable:
    """Rows of (state, stimulus, response[, temperature])."""

    state: np.ndarray
    stimulus: np.ndarray
    response: np.ndarray
    temperature: np.ndarray | None = None
    line_numbers: np.ndarray | None = None

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float)
        self.stimulus = np.asarray(self.stimulus, dtype=float)
        self.response = np.asarray(self.response, dtype=float)
        if self.temperature is not None:
            self.temperature = np.asarray(self.temperature, dtype=float)
        n = len(self.response)
        cols = [self.state, self.stimulus, self.response]
        if self.temperature is not None:
            cols.append(self.temperature)
        if any(c.shape != (n,) for c in cols):
            raise ValueError("all table columns must be 1-D and of equal length")
        if not all(np.all(np.isfinite(c)) for c in cols):
            raise DomainError("measurement table contains non-finite values")

    def __len__(self) -> int:
        return len(self.response)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MeasurementTable):
            return NotImplemented
        if (self.temperature is None) != (other.temperature is None):
            return False
        same = (
            np.array_equal(self.state, other.state)
            and np.array_equal(self.stimulus, other.stimulus)
            and np.array_equal(self.response, other.response)
        )
        if self.temperature is not None:
            same = same and np.array_equal(self.temperature, other.temperature)
        return same


# -- evaluators ---------------------------------------------------------------


def _temp_poly(tech: Technology, p: np.ndarray, w0: np.ndarray, t: np.ndarray) -> np.ndarray:
    if tech is Technology.MEMRISTOR:
        p00, p10, p20, p30 = p
        return p00 + p10 / w0 + p20 * w0**2 + p30 * w0**3
    p00, p10, p01, p20, p11, p21 = p
    return p00 + p10 * w0 + p01 * t + p20 * w0**2 + p11 * t * w0 + p21 * w0**2 * t


def temp_weight_shift(model: TemperatureModel, w0, t):
    """Per-unit relative shift ``dw/w0`` of a device state at temperature ``t`` (degC)."""
    w0 = _as_float_array(w0, "w0")
    t = _as_float_array(t, "t")
    if model.technology is Technology.MEMRISTOR:
        if np.any(w0 <= 0) or np.any(w0 > 1):
            raise DomainError("memristor w0 must lie in (0, 1]")
    elif np.any(w0 < 0) or np.any(w0 > 1):
        raise DomainError("eFlash w0 must lie in [0, 1]")
    out = (t - model.t0) * _temp_poly(model.technology, model.vector(), w0, t)
    return out if out.ndim else float(out)


MEMRISTOR_FULL_SCALE_US = 100.0


def temp_shift_state(model: TemperatureModel, state, t):
    """Device states (uS or nA) after drifting from ``t0`` to ``t``.

    States outside the model's normalised domain are evaluated at the
    nearest domain edge.
    """
    state = _as_float_array(state, "state")
    if model.technology is Technology.MEMRISTOR:
        w0 = np.clip(state / MEMRISTOR_FULL_SCALE_US, 1e-6, 1.0)
    else:
        w0 = np.clip(state / model.i_max, 0.0, 1.0)
    out = state * (1.0 + (t - model.t0) * _temp_poly(model.technology, model.vector(), w0, np.asarray(t, dtype=float)))
    return out if out.ndim else float(out)


def _nl_poly(tech: Technology, p: np.ndarray, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    if tech is Technology.MEMRISTOR:
        p01, p03, p10, p20, p30 = p
        return p01 * x + p03 * x**3 + p10 * w + p20 * w**2 + p30 * w**3
    p01, p03, p10, p20, p30, p11, p22 = p
    return p01 * x + p03 * x**3 + p10 * w + p20 * w**2 + p30 * w**3 + p11 * x * w + p22 * x**2 * w**2


def nl_error(model: NonlinearityModel, w, x):
    """Static nonlinearity error of a device tuned to ``w`` and driven at normalised input ``x``."""
    w = _as_float_array(w, "w")
    x = _as_float_array(x, "x")
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("normalised stimulus x must lie in [0, 1]")
    out = x * (x - model.x_tune) * _nl_poly(model.technology, model.vector(), w, x)
    return out if out.ndim else float(out)


def _switch_eval(p: np.ndarray, g: np.ndarray, v: np.ndarray, alpha) -> np.ndarray:
    b1, b2, b3, c1, c2, c3 = p
    u = alpha * v
    den = 1.0 + b2 * u * u
    return np.exp(b1 / den) * np.sinh(b3 * u / den) * (c1 + c2 * np.sqrt(g) + c3 * g)


def pulse_response(model: SwitchingModel, g, v, alpha=1.0):
    """Relative conductance change ``dG/G`` for one pulse of amplitude ``v`` volts."""
    g = _as_float_array(g, "g")
    if np.any(g <= 0):
        raise DomainError("conductance must be positive")
    alpha = _as_float_array(alpha, "alpha")
    if np.any(alpha <= 0):
        raise DomainError("alpha must be positive")
    out = _switch_eval(model.vector(), g, _as_float_array(v, "v"), alpha)
    return out if out.ndim else float(out)


def project_retention(t_elapsed: float, t_bake: float, t_target: float, proj: RetentionProjector | None = None) -> float:
    """Equivalent hours at ``t_target`` for ``t_elapsed`` hours baked at ``t_bake`` (Arrhenius)."""
    proj = proj or RetentionProjector()
    if t_elapsed < 0:
        raise DomainError("elapsed time must be non-negative")
    if t_bake <= -KELVIN_OFFSET or t_target <= -KELVIN_OFFSET:
        raise DomainError("temperatures must be above absolute zero")
    tb = t_bake + KELVIN_OFFSET
    tt = t_target + KELVIN_OFFSET
    return t_elapsed * math.exp(proj.activation_energy_ev / proj.boltzmann_ev_per_k * (1.0 / tt - 1.0 / tb))


# -- fitting ------------------------------------------------------------------


@dataclass(frozen=True)
class _ShapeSpec:
    names: tuple[str, ...]
    predict: Callable[[np.ndarray, MeasurementTable], np.ndarray]
    needs_temperature: bool = False


def _shape_spec(shape: ModelShape, x_tune: float, t0: float) -> _ShapeSpec:
    if shape is ModelShape.TEMP_MEMRISTOR:
        return _ShapeSpec(
            TEMP_COEFFS[Technology.MEMRISTOR],
            lambda p, tb: (tb.temperature - t0) * _temp_poly(Technology.MEMRISTOR, p, tb.state, tb.temperature),
            True,
        )
    if shape is ModelShape.TEMP_EFLASH:
        return _ShapeSpec(
            TEMP_COEFFS[Technology.EFLASH],
            lambda p, tb: (tb.temperature - t0) * _temp_poly(Technology.EFLASH, p, tb.state, tb.temperature),
            True,
        )
    if shape in (ModelShape.NL_MEMRISTOR, ModelShape.NL_EFLASH):
        tech = Technology.MEMRISTOR if shape is ModelShape.NL_MEMRISTOR else Technology.EFLASH
        return _ShapeSpec(
            NL_COEFFS[tech],
            lambda p, tb: tb.stimulus * (tb.stimulus - x_tune) * _nl_poly(tech, p, tb.state, tb.stimulus),
        )
    return _ShapeSpec(SWITCH_COEFFS, lambda p, tb: _switch_eval(p, tb.state, tb.stimulus, 1.0))


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    p0,
    max_iter: int = 200,
    rtol: float = 1e-10,
    rel_step: float = 1e-6,
) -> tuple[np.ndarray, float, int]:
    """Minimise ``sum(residual(p)**2)`` with a damped Gauss-Newton iteration.

    The Jacobian is taken by central differences with step
    ``rel_step * max(|p_i|, 1)``.  Returns ``(p, cost, iterations)``.
    Raises :class:`FitError` on a rank-deficient Jacobian or when the
    iteration cap is hit before the relative cost change drops below ``rtol``.
    """
    p = np.array(p0, dtype=float)
    r = residual(p)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise FitError("residual is not finite at the initial point", p.copy(), cost)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        if cost == 0.0:
            return p, cost, it - 1
        h = rel_step * np.maximum(np.abs(p), 1.0)
        jac = np.empty((r.size, p.size))
        for i in range(p.size):
            dp = np.zeros_like(p)
            dp[i] = h[i]
            jac[:, i] = (residual(p + dp) - residual(p - dp)) / (2.0 * h[i])
        sv = np.linalg.svd(jac, compute_uv=False)
        if sv[-1] <= sv[0] * 1e-13 or not np.all(np.isfinite(sv)):
            raise FitError("rank-deficient Jacobian", p.copy(), cost)
        jtj = jac.T @ jac
        grad = jac.T @ r
        diag = np.diag(jtj).copy()
        while True:
            step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
            trial = p + step
            r_new = residual(trial)
            new_cost = float(r_new @ r_new)
            if np.isfinite(new_cost) and new_cost <= cost:
                break
            lam *= 4.0
            if lam > 1e16:
                # No descent direction left at working precision: a minimum.
                return p, cost, it
        change = (cost - new_cost) / max(cost, np.finfo(float).tiny)
        p, r, cost = trial, r_new, new_cost
        lam = max(lam / 3.0, 1e-12)
        if change < rtol:
            return p, cost, it
    raise FitError(f"no convergence after {max_iter} iterations", p.copy(), cost)


@dataclass
class FitResult:
    shape: ModelShape
    coefficients: dict[str, float]
    rmse: float
    r_squared: float
    iterations: int = 0
    metadata: dict = field(default_factory=dict)

    def to_record(self, fitted_at: str | None = None) -> dict:
        return {
            "shape": self.shape.value,
            "coefficients": dict(self.coefficients),
            "metadata": {"rmse": self.rmse, "r2": self.r_squared, "fitted_at": fitted_at, **self.metadata},
        }

    def to_json(self, fitted_at: str | None = "now") -> str:
        if fitted_at == "now":
            fitted_at = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        return json.dumps(self.to_record(fitted_at), indent=2, sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "FitResult":
        meta = dict(rec.get("metadata", {}))
        return cls(
            ModelShape(rec["shape"]),
            {k: float(v) for k, v in rec["coefficients"].items()},
            float(meta.pop("rmse", math.nan)),
            float(meta.pop("r2", math.nan)),
            metadata={k: v for k, v in meta.items() if k != "fitted_at"},
        )

    def to_model(self, **kwargs):
        """Build the evaluator object matching this fit."""
        c = self.coefficients
        if self.shape is ModelShape.TEMP_MEMRISTOR:
            return TemperatureModel(Technology.MEMRISTOR, c, **kwargs)
        if self.shape is ModelShape.TEMP_EFLASH:
            return TemperatureModel(Technology.EFLASH, c, **kwargs)
        if self.shape is ModelShape.NL_MEMRISTOR:
            return NonlinearityModel(Technology.MEMRISTOR, c, **kwargs)
        if self.shape is ModelShape.NL_EFLASH:
            return NonlinearityModel(Technology.EFLASH, c, **kwargs)
        pol = Polarity.SET if self.shape is ModelShape.SWITCH_SET else Polarity.RESET
        return SwitchingModel(pol, [c["beta1"], c["beta2"], c["beta3"]], [c["gamma1"], c["gamma2"], c["gamma3"]], **kwargs)


def coefficient_names(shape) -> tuple[str, ...]:
    return _shape_spec(ModelShape(shape), 0.0, 25.0).names


def predict_table(shape, coefficients, table: MeasurementTable, x_tune: float = 0.6, t0: float = 25.0) -> np.ndarray:
    spec = _shape_spec(ModelShape(shape), x_tune, t0)
    if spec.needs_temperature and table.temperature is None:
        raise ValueError(f"shape {ModelShape(shape).value} needs a temperature column")
    return spec.predict(np.array([_coeff_dict(spec.names, coefficients)[n] for n in spec.names]), table)


def fit_model(
    table: MeasurementTable,
    shape,
    init,
    x_tune: float = 0.6,
    t0: float = 25.0,
    max_iter: int = 200,
) -> FitResult:
    """Least-squares coefficients of ``shape`` for the rows of ``table``.

    ``x_tune`` (nonlinearity shapes) and ``t0`` (temperature shapes) are held
    fixed.  Switching shapes use ``state`` as conductance and ``stimulus`` as
    pulse voltage with unit threshold factor.
    """
    shape = ModelShape(shape)
    spec = _shape_spec(shape, x_tune, t0)
    p0 = np.array([_coeff_dict(spec.names, init)[n] for n in spec.names])
    if len(table) < len(spec.names):
        raise ValueError(f"{len(table)} rows cannot determine {len(spec.names)} coefficients")
    if spec.needs_temperature and table.temperature is None:
        raise ValueError(f"shape {shape.value} needs a temperature column")
    if shape is ModelShape.TEMP_MEMRISTOR and np.any(table.state <= 0):
        raise DomainError("memristor temperature fits need w0 > 0")

    y = table.response

    def residual(p):
        return spec.predict(p, table) - y

    p, cost, iters = levenberg_marquardt(residual, p0, max_iter=max_iter)
    n = len(y)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - cost / ss_tot if ss_tot > 0 else (1.0 if cost == 0 else 0.0)
    return FitResult(shape, dict(zip(spec.names, p.tolist())), math.sqrt(cost / n), r2, iters)


class DeviceModelRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_model`.

    ``X`` columns are ``state, stimulus`` plus ``temperature`` for the
    temperature shapes.
    """

    def __init__(self, shape="switch_set", init=None, x_tune=0.6, t0=25.0, max_iter=200):
        self.shape = shape
        self.init = init
        self.x_tune = x_tune
        self.t0 = t0
        self.max_iter = max_iter

    def _table(self, X, y=None):
        X = np.asarray(X, dtype=float)
        temp = X[:, 2] if X.shape[1] > 2 else None
        resp = np.zeros(len(X)) if y is None else y
        return MeasurementTable(X[:, 0], X[:, 1], resp, temp)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        shape = ModelShape(self.shape)
        init = self.init if self.init is not None else default_init(shape)
        self.result_ = fit_model(self._table(X, y), shape, init, self.x_tune, self.t0, self.max_iter)
        self.coef_ = np.array(list(self.result_.coefficients.values()))
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return predict_table(self.shape, self.result_.coefficients, self._table(X), self.x_tune, self.t0)


# -- shipped stand-in coefficients ---------------------------------------------

# Stand-ins with the qualitative shapes of the measured curves: memristor drift
# changes sign near 70 uS (PTAT below, CTAT above); eFlash currents in weak
# inversion rise with temperature, more strongly for small states.
DEFAULT_TEMP_MEMRISTOR = {"p00": 1.27e-3, "p10": 5.4e-4, "p20": -5.04e-3, "p30": 1.23e-3}
DEFAULT_TEMP_EFLASH = {"p00": 6.0e-3, "p10": -6.0e-3, "p01": 2.0e-5, "p20": 2.0e-3, "p11": -2.0e-5, "p21": 1.0e-5}
DEFAULT_NL_MEMRISTOR = {"p01": 2.0e-2, "p03": -1.0e-2, "p10": 4.0e-3, "p20": -2.0e-5, "p30": 1.0e-7}
DEFAULT_NL_EFLASH = {"p01": 2.0e-2, "p03": -1.0e-2, "p10": 5.0e-2, "p20": -2.0e-2, "p30": 5.0e-3, "p11": 1.0e-2, "p22": -5.0e-3}
DEFAULT_SWITCH_SET = {"beta1": -34.1, "beta2": 1.557, "beta3": 11.61, "gamma1": 1.6, "gamma2": -0.1, "gamma3": 0.0}
DEFAULT_SWITCH_RESET = {"beta1": -35.2, "beta2": 1.177, "beta3": 11.66, "gamma1": 0.2, "gamma2": 0.1, "gamma3": 0.004}


def default_init(shape) -> dict[str, float]:
    return {
        ModelShape.TEMP_MEMRISTOR: DEFAULT_TEMP_MEMRISTOR,
        ModelShape.TEMP_EFLASH: DEFAULT_TEMP_EFLASH,
        ModelShape.NL_MEMRISTOR: DEFAULT_NL_MEMRISTOR,
        ModelShape.NL_EFLASH: DEFAULT_NL_EFLASH,
        ModelShape.SWITCH_SET: DEFAULT_SWITCH_SET,
        ModelShape.SWITCH_RESET: DEFAULT_SWITCH_RESET,
    }[ModelShape(shape)]


@dataclass(frozen=True)
class DeviceModelSet:
    temperature: dict[Technology, TemperatureModel]
    nonlinearity: dict[Technology, NonlinearityModel]
    switch_set: SwitchingModel
    switch_reset: SwitchingModel


def _switch_from(d: dict, polarity: Polarity) -> SwitchingModel:
    return SwitchingModel(polarity, (d["beta1"], d["beta2"], d["beta3"]), (d["gamma1"], d["gamma2"], d["gamma3"]))


def default_model_set() -> DeviceModelSet:
    return DeviceModelSet(
        temperature={
            Technology.MEMRISTOR: TemperatureModel(Technology.MEMRISTOR, DEFAULT_TEMP_MEMRISTOR),
            Technology.EFLASH: TemperatureModel(Technology.EFLASH, DEFAULT_TEMP_EFLASH, i_max=30.0),
        },
        nonlinearity={
            Technology.MEMRISTOR: NonlinearityModel(Technology.MEMRISTOR, DEFAULT_NL_MEMRISTOR, x_tune=0.6, x_max=0.1),
            Technology.EFLASH: NonlinearityModel(Technology.EFLASH, DEFAULT_NL_EFLASH, x_tune=0.7, x_max=30.0),
        },
        switch_set=_switch_from(DEFAULT_SWITCH_SET, Polarity.SET),
        switch_reset=_switch_from(DEFAULT_SWITCH_RESET, Polarity.RESET),
    )
