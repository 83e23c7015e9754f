"""Composable hardware imperfections for network evaluation.

An :class:`ImperfectionStack` lists effects in the order they act.
State-level effects (temperature drift, tuning error, stuck faults) change
the device pair states of every synaptic layer, and the realised weights
are recovered by unmapping.  Static nonlinearity adds a per-synapse output
error and noise adds a Gaussian to each preactivation; both act after the
vector-matrix product whatever their list position.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .defects import Compensation, faulty_pairs, inject_faults
from .device_models import DeviceModelSet, Technology, default_model_set, temp_shift_state
from .mapping import MappingConfig, Scheme, default_mapping, map_weight, unmap_pair
from .noise import LayerNoiseConfig, noise_config_for, noise_variance, rho_is_silent
from .rng import make_rng

NOISE_BLOCK = 256


@dataclass(frozen=True)
class TempShift:
    t: float = 25.0
    kind = "temp"


@dataclass(frozen=True)
class TuningError:
    """Independent relative error ``N(0, sigma)`` on every device state."""

    sigma: float = 0.01
    seed: int = 0
    kind = "tuning"


@dataclass(frozen=True)
class Faults:
    """Stuck-at faults; ``approach`` is ``none``, ``retune`` or ``retune+column``.

    The column part needs a :class:`Compensation` from
    ``compensate_average_error``; without it only retuning is applied.
    """

    ppm: float = 0.0
    mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    approach: str = "none"
    compensation: Compensation | None = None
    kind = "faults"

    def __post_init__(self):
        if self.approach not in ("none", "retune", "retune+column"):
            raise ValueError(f"unknown fault approach {self.approach!r}")


@dataclass(frozen=True)
class StaticNonlinearity:
    kind = "nonlinearity"


@dataclass(frozen=True)
class Noise:
    """Preactivation noise; ``rho`` is one energy scaler or one per layer (``inf`` silences a layer)."""

    seed: int = 0
    rho: float | tuple = 1.0
    enabled: bool = True
    kind = "noise"

    def rho_for(self, i: int):
        if not self.enabled:
            return None
        if np.ndim(self.rho) == 0:
            return float(self.rho)
        return float(self.rho[i])


_SEEDED = (TuningError, Faults, Noise)
_STATE_KINDS = ("temp", "tuning", "faults")


@dataclass
class LayerHardware:
    mapping: MappingConfig
    W_eff: np.ndarray
    plus: np.ndarray | None = None
    minus: np.ndarray | None = None
    nl_terms: tuple | None = None
    nl_scale: float = 0.0
    x_tune: float = 0.0
    x_max: float = 1.0
    noise: LayerNoiseConfig | None = None
    offset: np.ndarray | None = None
    uncompensatable: int = 0


class HardwareView:
    """Per-layer realisation of a stack for one network state."""

    def __init__(self, layers: dict, noise_seed: int = 0):
        self.layers = layers
        self.noise_seed = noise_seed

    def weight(self, i, W):
        hw = self.layers.get(i)
        return W if hw is None else hw.W_eff

    def post(self, i, cols, y, sample_ids):
        hw = self.layers.get(i)
        if hw is None:
            return y
        if hw.nl_terms is not None:
            xn = np.clip(cols / hw.x_max, 0.0, 1.0)
            a = xn * (xn - hw.x_tune)
            d1, d2, d3 = hw.nl_terms
            err = a @ d1
            if d2 is not None:
                err += (a * xn) @ d2 + (a * xn * xn) @ d3
            y = y + hw.nl_scale * err
        if hw.offset is not None:
            y = y + hw.offset
        if hw.noise is not None:
            var = noise_variance(hw.noise, hw.plus, hw.minus, cols)
            y = y + np.sqrt(var) * gaussian_rows(self.noise_seed, i, sample_ids, y.shape[1])
        return y


def gaussian_rows(seed: int, layer: int, ids, width: int) -> np.ndarray:
    """Standard normals for rows tagged by sample id, independent of batching.

    Rows of one sample must be contiguous (conv positions); each sample owns
    a fixed slice of the stream keyed by ``(seed, layer, id // 256)``.
    """
    ids = np.asarray(ids)
    samples, starts, counts = np.unique(ids, return_index=True, return_counts=True)
    per = int(counts[0])
    if np.any(counts != per):
        raise ValueError("every sample must contribute the same number of rows")
    out = np.empty((len(ids), width))
    blocks = samples // NOISE_BLOCK
    for b in np.unique(blocks):
        z = make_rng(seed, "noise.preactivation", layer, int(b)).standard_normal((NOISE_BLOCK, per * width))
        for s, st in zip(samples[blocks == b], starts[blocks == b]):
            out[st:st + per] = z[s % NOISE_BLOCK].reshape(per, width)
    return out


def _nl_terms(model, technology, plus, minus, i_max):
    p = model.vector()
    if technology is Technology.MEMRISTOR:
        _, _, p10, p20, p30 = p
        f = lambda w: p10 * w + p20 * w**2 + p30 * w**3  # noqa: E731
        return (f(plus) - f(minus), None, None)
    _, _, p10, p20, p30, p11, p22 = p
    wp, wm = plus / i_max, minus / i_max
    f = lambda w: p10 * w + p20 * w**2 + p30 * w**3  # noqa: E731
    return (f(wp) - f(wm), p11 * (wp - wm), p22 * (wp**2 - wm**2))


class ImperfectionStack:
    """Ordered imperfection effects plus the hardware they act on.

    ``mappings`` optionally maps a synaptic-layer index (or ``"default"``)
    to a :class:`MappingConfig` whose ``w_max`` is replaced by the layer's
    largest weight magnitude.
    """

    def __init__(self, effects=(), technology="memristor", scheme="map1", models: DeviceModelSet | None = None,
                 mappings: dict | None = None, noise_overrides: dict | None = None):
        self.effects = tuple(effects)
        self.technology = Technology(technology)
        self.scheme = Scheme(scheme)
        self.models = models or default_model_set()
        self.mappings = dict(mappings or {})
        self.noise_overrides = dict(noise_overrides or {})

    def _derive(self, effects):
        return ImperfectionStack(effects, self.technology, self.scheme, self.models, self.mappings,
                                 self.noise_overrides)

    def __repr__(self):
        return f"ImperfectionStack({list(self.effects)!r}, {self.technology.value}, {self.scheme.value})"

    def with_seed(self, seed: int) -> "ImperfectionStack":
        out = []
        for e in self.effects:
            if isinstance(e, Faults):
                e = replace(e, seed=seed, compensation=None)
            elif isinstance(e, _SEEDED):
                e = replace(e, seed=seed)
            out.append(e)
        return self._derive(out)

    def without(self, kind: str) -> "ImperfectionStack":
        return self._derive([e for e in self.effects if e.kind != kind])

    def with_compensation(self, comp: Compensation) -> "ImperfectionStack":
        return self._derive([replace(e, compensation=comp) if isinstance(e, Faults) else e for e in self.effects])

    def with_effect(self, effect) -> "ImperfectionStack":
        return self._derive([*self.effects, effect])

    def mapping_for(self, i: int, W) -> MappingConfig:
        w_max = float(np.max(np.abs(W))) or 1.0
        base = self.mappings.get(i, self.mappings.get("default"))
        if base is None:
            return default_mapping(self.technology, self.scheme, w_max)
        return base.with_w_max(w_max)

    def realize(self, net) -> HardwareView:
        if not self.effects:
            return HardwareView({})
        noise = next((e for e in self.effects if isinstance(e, Noise)), None)
        nonlin = any(isinstance(e, StaticNonlinearity) for e in self.effects)
        state_effects = [e for e in self.effects if e.kind in _STATE_KINDS]
        layers = {}
        for layer in net.synaptic:
            i = layer.index
            W = layer.W
            cfg = self.mapping_for(i, W)
            plus0, minus0 = (np.asarray(s, dtype=float) for s in map_weight(cfg, W))
            plus, minus = plus0, minus0
            unc = 0
            offset = None
            for e in state_effects:
                if isinstance(e, TempShift):
                    model = self.models.temperature[self.technology]
                    plus = temp_shift_state(model, plus, e.t)
                    minus = temp_shift_state(model, minus, e.t)
                elif isinstance(e, TuningError):
                    rng = make_rng(e.seed, "stack.tuning_error", i)
                    plus = plus * (1.0 + rng.normal(0.0, e.sigma, plus.shape))
                    minus = minus * (1.0 + rng.normal(0.0, e.sigma, minus.shape))
                elif isinstance(e, Faults):
                    fmap = inject_faults(W.shape + (2,), e.ppm, e.mix, e.seed, cfg.state_bounds(), index=(i,))
                    plus, minus, both = faulty_pairs(cfg, W, fmap, retune=e.approach != "none",
                                                     states=(plus, minus))
                    unc = int(both.sum())
                    if e.approach == "retune+column" and e.compensation is not None:
                        offset = e.compensation.offset(i)
            # state changes are added to W so an all-zero change leaves W bit-exact
            W_eff = W + unmap_pair(cfg, plus - plus0, minus - minus0) if state_effects else W
            hw = LayerHardware(cfg, W_eff, plus, minus, x_max=layer.x_max, offset=offset, uncompensatable=unc)
            if nonlin:
                model = self.models.nonlinearity[self.technology]
                i_max = self.models.temperature[Technology.EFLASH].i_max
                hw.nl_terms = _nl_terms(model, self.technology, plus, minus, i_max)
                coord_range = cfg.range if self.technology is Technology.MEMRISTOR else cfg.range / i_max
                hw.nl_scale = layer.x_max * cfg.w_max / coord_range
                hw.x_tune = model.x_tune
            if noise is not None and not rho_is_silent(noise.rho_for(i)):
                hw.noise = noise_config_for(self.technology, self.scheme, cfg.range, layer.x_max, cfg.w_max,
                                            noise.rho_for(i), **self.noise_overrides)
            layers[i] = hw
        return HardwareView(layers, noise.seed if noise is not None else 0)

    def uncompensatable_count(self, net) -> int:
        return sum(hw.uncompensatable for hw in self.realize(net).layers.values())
