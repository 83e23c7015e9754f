"""Software-equivalent preactivation noise and noise-budget optimisation.

Memristor crossbars are dominated by thermal noise, which depends only on
the summed pair conductances.  eFlash arrays are dominated by shot noise,
which scales with the input signal.  Both are expressed as the variance
of a Gaussian added to a neuron's preactivation, in software units.

The energy scaler ``rho`` divides noise power.  Layer energy is modelled
as ``E_l = m_l * rho_l`` with ``m_l`` the layer's operation count, so a
larger ``rho`` buys less noise with more energy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .device_models import Technology
from .mapping import Scheme

BOLTZMANN_J_PER_K = 1.380649e-23
ELECTRON_CHARGE = 1.602176634e-19
BANDWIDTH_HZ = 1e8
TEMPERATURE_K = 300.0
ALPHA_M = 4 * BOLTZMANN_J_PER_K * TEMPERATURE_K * BANDWIDTH_HZ
ALPHA_F = 2 * ELECTRON_CHARGE * BANDWIDTH_HZ


@dataclass(frozen=True)
class LayerNoiseConfig:
    """Noise constants and signal ranges of one layer.

    Conductances are in uS, currents in nA, voltages in V; ``x_max`` and
    ``w_max`` are the layer's software input and weight ranges.
    """

    technology: Technology = Technology.MEMRISTOR
    scheme: Scheme = Scheme.MAP1
    rho: float = 1.0
    alpha_m: float = ALPHA_M
    alpha_f: float = ALPHA_F
    v_max: float = 0.1
    delta_g_max: float = 90.0
    i_max: float = 30.0
    delta_i_max: float = 30.0
    x_max: float = 1.0
    w_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "technology", Technology(self.technology))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        for name in ("alpha_m", "alpha_f", "v_max", "delta_g_max", "i_max", "delta_i_max", "x_max", "w_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def with_rho(self, rho: float) -> "LayerNoiseConfig":
        return replace(self, rho=float(rho))

    @property
    def coefficient(self) -> float:
        """Prefactor multiplying the per-neuron state sum."""
        if self.technology is Technology.MEMRISTOR:
            scale = self.x_max * self.w_max / (self.v_max * self.delta_g_max * 1e-6)
            return self.alpha_m / self.rho * scale**2 * 1e-6
        gain = self.w_max * self.i_max / self.delta_i_max
        return self.alpha_f / self.rho * self.x_max / (self.i_max * 1e-9) * gain**2

    def state_kernel(self, plus, minus):
        """Per-synapse factor summed by the variance formula (memristor: G_CM in uS)."""
        plus = np.asarray(plus, dtype=float)
        minus = np.asarray(minus, dtype=float)
        if self.technology is Technology.MEMRISTOR:
            return plus + minus
        p, m = plus / self.i_max, minus / self.i_max
        return p + m + p * p + m * m


def preactivation_noise_var(cfg: LayerNoiseConfig, pairs, inputs) -> float:
    """Noise variance of one neuron fed by ``pairs`` (n, 2) with ``inputs`` (n,)."""
    pairs = np.asarray(pairs, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or len(inputs) != len(pairs):
        raise ValueError("pairs must be (n, 2) and inputs length n")
    if np.any(inputs < 0) or np.any(inputs > cfg.x_max * (1 + 1e-12)):
        raise ValueError("inputs must lie in [0, x_max]")
    k = cfg.state_kernel(pairs[:, 0], pairs[:, 1])
    if cfg.technology is Technology.MEMRISTOR:
        return float(cfg.coefficient * k.sum())
    return float(cfg.coefficient * inputs @ k)


def noise_variance(cfg: LayerNoiseConfig, plus, minus, cols=None):
    """Vectorised variance: ``(fan_out,)`` for memristors, ``(rows, fan_out)`` for eFlash."""
    k = cfg.state_kernel(plus, minus)
    if cfg.technology is Technology.MEMRISTOR:
        return cfg.coefficient * k.sum(axis=0)
    return cfg.coefficient * (np.asarray(cols, dtype=float) @ k)


# -- energy ---------------------------------------------------------------------


def layer_energy(rho, op_counts) -> np.ndarray:
    return np.asarray(op_counts, dtype=float) * np.asarray(rho, dtype=float)


def energy_report(rho, op_counts) -> dict:
    """Per-layer and total energy, absolute and relative to all ``rho = 1``."""
    m = np.asarray(op_counts, dtype=float)
    e = layer_energy(rho, m)
    return {"layer": e.tolist(), "total": float(e.sum()), "relative_layer": (e / m).tolist(),
            "relative_total": float(e.sum() / m.sum())}


# -- layer-wise SNR optimisation ------------------------------------------------------


@dataclass
class SnrOptState:
    rho: np.ndarray
    op_counts: np.ndarray
    a: float
    budget: float
    metric: float
    trace: list = field(default_factory=list)

    @property
    def energy(self) -> np.ndarray:
        return layer_energy(self.rho, self.op_counts)


def _recipient_shares(dd_plus, de_plus):
    tot_d = dd_plus.sum()
    tot_e = de_plus.sum()
    raw = dd_plus / tot_d * np.log10(tot_e / de_plus)
    raw = np.maximum(raw, 0.0)
    if raw.sum() <= 0:
        return np.full(len(raw), 1.0 / len(raw))
    return raw / raw.sum()


def snr_optimize(eval_fn, op_counts, rho=None, a: float = 2.0, max_iters: int = 20, eps: float = 1e-6) -> SnrOptState:
    """Move energy between layers while the evaluated accuracy drop falls.

    ``eval_fn(rho)`` returns the accuracy drop (lower is better) for a
    per-layer ``rho`` vector and must be deterministic.  Each iteration
    probes every layer with ``rho * a`` and ``rho / a``, picks the donor that
    frees the most energy per unit of added drop, and shares the freed
    energy among the other layers in proportion to their benefit.  A step
    that does not strictly lower the drop is rejected and the next donor in
    the ranking is tried.
    """
    if not a > 1:
        raise ValueError("multiplier a must exceed 1")
    m = np.asarray(op_counts, dtype=float)
    rho = np.ones(len(m)) if rho is None else np.asarray(rho, dtype=float).copy()
    budget = float(layer_energy(rho, m).sum())
    state = SnrOptState(rho, m, a, budget, float(eval_fn(rho.copy())))
    state.trace.append({"iter": 0, "rho": rho.tolist(), "metric": state.metric, "energy": budget, "donor": None})
    if len(m) < 2:
        return state
    for it in range(1, max_iters + 1):
        e = state.energy
        d0 = state.metric
        dd_minus = np.empty(len(m))
        dd_plus = np.empty(len(m))
        for l in range(len(m)):
            r = state.rho.copy()
            r[l] /= a
            dd_minus[l] = max(eval_fn(r) - d0, eps)
            r[l] = state.rho[l] * a
            dd_plus[l] = max(d0 - eval_fn(r), eps)
        de_minus = e * (1 - 1 / a)
        de_plus = e * (a - 1)
        order = np.argsort(-(de_minus / dd_minus), kind="stable")
        accepted = False
        for x in order:
            others = np.array([l for l in range(len(m)) if l != x])
            shares = _recipient_shares(dd_plus[others], de_plus[others])
            e_new = e.copy()
            e_new[x] -= de_minus[x]
            e_new[others] += de_minus[x] * shares
            rho_new = e_new / m
            d_new = float(eval_fn(rho_new.copy()))
            if d_new < d0:
                state.rho, state.metric = rho_new, d_new
                state.trace.append({"iter": it, "rho": rho_new.tolist(), "metric": d_new,
                                    "energy": float(layer_energy(rho_new, m).sum()), "donor": int(x)})
                accepted = True
                break
        if not accepted:
            break
    return state


def layer_sensitivity(eval_fn, n_layers: int, rho_values) -> np.ndarray:
    """Drop with only one layer noisy at each ``rho``; rows are layers."""
    out = np.empty((n_layers, len(rho_values)))
    for l in range(n_layers):
        for j, r in enumerate(rho_values):
            rho = np.full(n_layers, np.inf)
            rho[l] = r
            out[l, j] = eval_fn(rho)
    return out


# -- dynamic-range optimisation --------------------------------------------------------


@dataclass(frozen=True)
class ClipSchedule:
    percentages: tuple[float, ...] = (2, 4, 5, 7, 10, 20, 30, 40)
    rounds: int = 3


def _layer_inputs(net, X):
    """Positive input activations seen by each synaptic layer (clips applied upstream)."""
    acts = {l.index: [] for l in net.synaptic}
    net.forward(X)
    for layer in net.synaptic:
        cols = layer._cols
        acts[layer.index] = cols[cols > 0]
    return acts


def optimize_dynamic_range(net, eval_fn, X_calib, schedule: ClipSchedule = ClipSchedule()) -> dict:
    """Progressive search for per-layer input clipping bounds.

    For each layer in turn, each percentage ``p`` sets the layer's input
    bound to the ``100 - p`` percentile of its positive input activations
    (computed without that layer's own clip).  A bound is kept only if
    ``eval_fn(net)`` (lower is better) strictly improves on the incumbent.
    Layers' ``clip`` attributes are updated in place.
    """
    best = float(eval_fn(net))
    accepted = {l.index: None for l in net.synaptic}
    trace = [{"round": 0, "layer": None, "percent": None, "metric": best}]
    for rnd in range(1, schedule.rounds + 1):
        for layer in net.synaptic:
            incumbent_clip = layer.clip
            layer.clip = None
            acts = _layer_inputs(net, X_calib)[layer.index]
            layer.clip = incumbent_clip
            for p in sorted(schedule.percentages):
                if acts.size == 0:
                    break
                bound = float(np.percentile(acts, 100 - p))
                if bound <= 0:
                    continue
                previous = layer.clip
                layer.clip = bound
                d = float(eval_fn(net))
                if d < best:
                    best = d
                    accepted[layer.index] = p
                    trace.append({"round": rnd, "layer": layer.index, "percent": p, "metric": d})
                else:
                    layer.clip = previous
    return {"percent": accepted, "clip": {l.index: l.clip for l in net.synaptic}, "metric": best,
            "trace": trace}


def noise_config_for(technology, scheme, mapping_range: float, x_max: float, w_max: float, rho: float = 1.0,
                     **overrides) -> LayerNoiseConfig:
    """Layer noise config whose full-scale range matches the mapping range."""
    technology = Technology(technology)
    kw = dict(technology=technology, scheme=Scheme(scheme), rho=rho, x_max=x_max, w_max=w_max)
    if technology is Technology.MEMRISTOR:
        kw["delta_g_max"] = mapping_range
    else:
        kw["delta_i_max"] = mapping_range
    kw.update(overrides)
    return LayerNoiseConfig(**kw)


def rho_is_silent(rho) -> bool:
    return rho is None or math.isinf(rho)
