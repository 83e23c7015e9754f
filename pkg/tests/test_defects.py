import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixedsim.defects import (UNCOMPENSATABLE, FaultKind, PairFault, compensate_average_error, faulty_pairs,
                              inject_faults, pair_retune)
from mixedsim.imperfections import Faults, ImperfectionStack
from mixedsim.mapping import default_mapping, map_weight, unmap_pair
from mixedsim.network import build_mlp

KINDS = (FaultKind.STUCK_HIGH, FaultKind.STUCK_LOW, FaultKind.STUCK_RANDOM)
COMBOS = [(t, s) for t in ("memristor", "eflash") for s in ("map1", "map2")]


def test_inject_extremes():
    assert not inject_faults((50, 50), 0.0).faulty.any()
    assert inject_faults((50, 50), 1e6).faulty.all()


def test_inject_binomial_count():
    fm = inject_faults((1000, 1000), 2e4, seed=3)
    n, p = 1e6, 0.02
    assert abs(fm.faulty.sum() - n * p) < 3 * np.sqrt(n * p * (1 - p))


def test_inject_mix_and_values():
    fm = inject_faults((400, 400), 1e5, mix=(0.5, 0.0, 0.5), seed=1, bounds=(10.0, 100.0))
    c = fm.counts()
    assert c["stuck_low"] == 0 and c["stuck_high"] > 0 and c["stuck_random"] > 0
    np.testing.assert_array_equal(fm.values[fm.kinds == FaultKind.STUCK_HIGH], 100.0)
    rnd = fm.values[fm.kinds == FaultKind.STUCK_RANDOM]
    assert np.all((rnd > 10.0) & (rnd < 100.0))


def test_inject_deterministic():
    a, b = inject_faults((30, 30, 2), 5e4, seed=9), inject_faults((30, 30, 2), 5e4, seed=9)
    np.testing.assert_array_equal(a.kinds, b.kinds)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.kinds, inject_faults((30, 30, 2), 5e4, seed=10).kinds)


def test_inject_validation():
    with pytest.raises(ValueError):
        inject_faults((4,), 10.0, mix=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        inject_faults((4,), 2e6)


def test_retune_zero_weight_examples():
    cfg = default_mapping("memristor", "map1")
    plus, minus = pair_retune(cfg, 0.0, PairFault(plus=FaultKind.STUCK_HIGH))
    assert (plus, minus) == (100.0, 100.0)
    plus, minus = pair_retune(cfg, 0.0, PairFault(plus=FaultKind.STUCK_LOW))
    assert (plus, minus) == (10.0, 10.0)


def test_retune_clip_residual():
    cfg = default_mapping("memristor", "map1")
    plus, minus = pair_retune(cfg, 0.9, PairFault(plus=FaultKind.STUCK_RANDOM, plus_value=30.0))
    assert minus == 10.0
    # the intended minus state 30 - 81 is below the floor; the residual is the clip distance
    assert 0.9 - unmap_pair(cfg, plus, minus) == pytest.approx((10.0 - (30.0 - 81.0)) / 90.0)


def test_both_legs_faulty():
    cfg = default_mapping()
    out = pair_retune(cfg, 0.3, PairFault(FaultKind.STUCK_LOW, FaultKind.STUCK_HIGH))
    assert out is UNCOMPENSATABLE and not out


def test_healthy_pair_unchanged():
    cfg = default_mapping("eflash", "map2")
    assert pair_retune(cfg, -0.4, PairFault()) == map_weight(cfg, -0.4)


@pytest.mark.parametrize("tech,scheme", COMBOS)
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("leg", ("plus", "minus"))
def test_retune_never_worse_exhaustive(tech, scheme, kind, leg):
    cfg = default_mapping(tech, scheme)
    lo, hi = cfg.state_bounds()
    w = np.round(np.arange(-1000, 1001) * 1e-3, 12)
    stuck_values = [None] if kind is not FaultKind.STUCK_RANDOM else list(np.linspace(lo, hi, 7)[1:-1])
    for value in stuck_values:
        kinds = np.zeros(w.shape + (2,), dtype=np.int8)
        values = np.full(w.shape + (2,), np.nan)
        j = 0 if leg == "plus" else 1
        kinds[:, j] = kind
        values[:, j] = {FaultKind.STUCK_HIGH: hi, FaultKind.STUCK_LOW: lo}.get(kind, value)
        fm = inject_faults(w.shape + (2,), 0.0, bounds=(lo, hi))
        fm.kinds, fm.values = kinds, values
        p0, m0, _ = faulty_pairs(cfg, w, fm, retune=False)
        p1, m1, _ = faulty_pairs(cfg, w, fm, retune=True)
        before = np.abs(unmap_pair(cfg, p0, m0) - w)
        after = np.abs(unmap_pair(cfg, p1, m1) - w)
        assert np.all(after <= before + 1e-12)
        assert np.all((p1 >= lo - 1e-12) & (p1 <= hi + 1e-12) & (m1 >= lo - 1e-12) & (m1 <= hi + 1e-12))


@settings(max_examples=200)
@given(w=st.floats(-1, 1), kind=st.sampled_from(KINDS), leg=st.sampled_from(("plus", "minus")),
       u=st.floats(0.01, 0.99), tech=st.sampled_from(("memristor", "eflash")))
def test_retune_mapping_independent(w, kind, leg, u, tech):
    c1, c2 = default_mapping(tech, "map1"), default_mapping(tech, "map2")
    lo, hi = c1.state_bounds()
    assert (lo, hi) == c2.state_bounds()
    value = lo + u * (hi - lo)
    fault = PairFault(plus=kind, plus_value=value) if leg == "plus" else PairFault(minus=kind, minus_value=value)
    r1 = unmap_pair(c1, *pair_retune(c1, w, fault))
    r2 = unmap_pair(c2, *pair_retune(c2, w, fault))
    assert r1 == pytest.approx(r2, abs=1e-12)


def _dense_net(seed=0, fan_in=6, fan_out=3):
    net = build_mlp([fan_in, fan_out], seed=seed)
    net.synaptic[0].x_range = 1.0
    return net


def test_compensation_zero_without_faults(rng):
    net = _dense_net()
    stack = ImperfectionStack([Faults(0.0, approach="retune+column")])
    comp = compensate_average_error(net, stack, rng.random((32, 6)))
    lc = comp.layers[0]
    assert np.all(lc.column == 0) and np.all(lc.bn_shift == 0)


def test_compensation_cancels_single_fault_on_constant_inputs():
    net = _dense_net(fan_in=4, fan_out=2)
    seed = next(s for s in range(5000)
                if inject_faults((4, 2, 2), 8e4, seed=s, index=(0,)).faulty.sum() == 1)
    stack = ImperfectionStack([Faults(8e4, seed=seed, approach="retune+column")])
    x = np.full((8, 4), 0.5)
    comp = compensate_average_error(net, stack, x)
    clean_taps, comp_taps = {}, {}
    net.forward(x, taps=clean_taps)
    net.forward(x, view=stack.with_compensation(comp).realize(net), taps=comp_taps)
    np.testing.assert_allclose(comp_taps[0], clean_taps[0], atol=1e-12)


def test_compensation_is_additive_constant(rng):
    net = _dense_net(fan_in=70, fan_out=5)
    stack = ImperfectionStack([Faults(1e5, seed=2, approach="retune+column")])
    comp = compensate_average_error(net, stack, rng.random((40, 70)))
    x = rng.random((25, 70))
    a, b = {}, {}
    net.forward(x, view=stack.realize(net), taps=a)
    net.forward(x, view=stack.with_compensation(comp).realize(net), taps=b)
    diff = b[0] - a[0]
    np.testing.assert_allclose(diff, np.broadcast_to(diff[0], diff.shape), atol=1e-12)
    # two slices of at most 64 rows each
    assert comp.layers[0].column.shape == (2, 5)


def test_compensation_column_bounded(rng):
    net = _dense_net(fan_in=70, fan_out=5)
    stack = ImperfectionStack([Faults(3e5, seed=4, approach="retune+column")])
    comp = compensate_average_error(net, stack, rng.random((40, 70)))
    w_max = np.abs(net.synaptic[0].W).max()
    assert np.all(np.abs(comp.layers[0].column) <= w_max + 1e-12)


def test_calibration_batch_required():
    with pytest.raises(ValueError):
        compensate_average_error(_dense_net(), ImperfectionStack([Faults(1e4)]), np.zeros((0, 6)))


def test_uncompensatable_flagged():
    net = _dense_net(fan_in=50, fan_out=20)
    stack = ImperfectionStack([Faults(3e5, seed=0, approach="retune")])
    fm = inject_faults((50, 20, 2), 3e5, seed=0, bounds=stack.mapping_for(0, net.synaptic[0].W).state_bounds(),
                       index=(0,))
    expected = int((fm.faulty[..., 0] & fm.faulty[..., 1]).sum())
    assert expected > 0
    assert stack.uncompensatable_count(net) == expected
