"""Small builders shared by the unit and acceptance tests."""
import numpy as np

from mixedsim.imperfections import ImperfectionStack, Noise
from mixedsim.mapping import map_weight
from mixedsim.network import build_mlp
from mixedsim.noise import noise_config_for, preactivation_noise_var


def single_neuron(W, x_max=1.0):
    net = build_mlp([len(W), 1], seed=0)
    net.synaptic[0].W = np.asarray(W, dtype=float).reshape(-1, 1)
    net.synaptic[0].x_range = x_max
    return net


def engine_noise_samples(tech, scheme, W, x, rho, draws, seed=0, chunk=100_000):
    """Noisy minus clean preactivation of one neuron, ``draws`` repeats of input ``x``."""
    net = single_neuron(W)
    view = ImperfectionStack([Noise(seed, rho)], tech, scheme).realize(net)
    out = np.empty(draws)
    xb = np.broadcast_to(x, (min(chunk, draws), len(x)))
    clean = {}
    net.forward(xb[:1], taps=clean)
    for s in range(0, draws, chunk):
        m = min(chunk, draws - s)
        taps = {}
        net.forward(xb[:m], view=view, sample_ids=np.arange(s, s + m), taps=taps)
        out[s:s + m] = taps[0][:, 0] - clean[0][0, 0]
    return out


def analytic_noise_var(tech, scheme, W, x, rho, x_max=1.0):
    net = single_neuron(W, x_max)
    cfg = ImperfectionStack(technology=tech, scheme=scheme).mapping_for(0, net.synaptic[0].W)
    plus, minus = map_weight(cfg, np.asarray(W, dtype=float))
    ncfg = noise_config_for(tech, scheme, cfg.range, x_max, cfg.w_max, rho)
    return preactivation_noise_var(ncfg, np.column_stack([plus, minus]), x), (plus, minus, cfg)
