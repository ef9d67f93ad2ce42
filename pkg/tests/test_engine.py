from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import audit_events
from moesim.core import CacheGeometry, ConfigError, CostModel, ModelSpec, derive_cache_geometry, zero_geometry
from moesim.engine import (
    EventKind,
    MissExecution,
    Strategy,
    StrategyTag,
    SweepFailure,
    check_event_log,
    point_seed,
    run_sweep,
    simulate,
)
from moesim.trace import RoutingTrace, SynthParams, generate_trace

C, OD, PF, CPU = (StrategyTag.COLLABORATIVE, StrategyTag.ON_DEMAND,
                  StrategyTag.PREFETCH_IDEAL, StrategyTag.CPU_ONLY)


@pytest.fixture(scope="module")
def setup(mixtral):
    model, hw, costs = mixtral
    trace = generate_trace(model, SynthParams(0.45, 0.0, seed=1, tokens=40))
    return model, hw, costs, trace


def zero_other(costs):
    return costs.with_updates(t_other_layer_ms=0.0)


def test_cpu_only_closed_form(setup):
    model, _, costs, trace = setup
    r = simulate(trace, model, zero_other(costs), zero_geometry(), Strategy(CPU, 24))
    # 32 * (7.34 + 0.11) by hand
    assert np.allclose(r.latencies, 238.4, rtol=1e-9)


def test_on_demand_closed_form(setup):
    model, _, costs, trace = setup
    r = simulate(trace, model, zero_other(costs), zero_geometry(), Strategy(OD, 24))
    # 32 * (28.02 + 0.25) by hand
    assert np.allclose(r.latencies, 904.64, rtol=1e-9)


def test_prefetch_steady_state_is_transfer_bound(setup):
    model, _, costs, trace = setup
    c = zero_other(costs)
    r = simulate(trace, model, c, zero_geometry(), Strategy(PF, 24))
    assert np.allclose(r.latencies[1:], 32 * 28.02, rtol=1e-9)
    od = simulate(trace, model, c, zero_geometry(), Strategy(OD, 24))
    assert (r.latencies <= od.latencies + 1e-9).all()


def test_t_other_adds_per_layer(setup):
    model, _, costs, trace = setup
    r = simulate(trace, model, costs.with_updates(t_other_layer_ms=1.0), zero_geometry(),
                 Strategy(CPU, 24))
    assert np.allclose(r.latencies, 238.4 + 32.0)


def test_zero_slots_equals_cpu_only(setup):
    model, _, costs, trace = setup
    col = simulate(trace, model, costs, zero_geometry(4), Strategy(C, 8))
    cpu = simulate(trace, model, costs, zero_geometry(), Strategy(CPU, 8))
    assert [(t.start, t.end) for t in col.token_timings] == [(t.start, t.end) for t in cpu.token_timings]


def test_full_coverage_all_hits_after_warmup(mixtral):
    model, _, costs = mixtral
    tiny = replace(model, num_layers=2)
    arr = np.tile(np.array([1, 2]), (10, 2, 1))
    trace = RoutingTrace(tiny.name, 8, arr)
    r = simulate(trace, tiny, costs, CacheGeometry.from_slots(4, 2, 2), Strategy(C, 24))
    # the fetch is 28.02 ms; the first token takes 2*(t_other + act + t_cpu) ~ 17.5 ms,
    # so hits begin once the copies land
    late = r.token_timings[-1]
    assert late.layer_latency == pytest.approx([costs.t_other_layer_ms + 0.25] * 2)


def test_whole_layer_cpu_runs_everything_on_cpu_for_partial_hits(mixtral):
    model, hw, costs = mixtral
    tiny = replace(model, num_layers=1)
    arr = np.array([[[0, 1]]] * 30 + [[[0, 5]]])
    trace = RoutingTrace(tiny.name, 8, arr)
    geo = CacheGeometry.from_slots(4, 4, 1)
    split = simulate(trace, tiny, costs, geo, Strategy(C, 24))
    whole = simulate(trace, tiny, costs, geo,
                     Strategy(C, 24, miss_execution=MissExecution.WHOLE_LAYER_CPU))
    o, a, cpu = costs.t_other_layer_ms, costs.t_act_roundtrip_ms, costs.t_cpu(24)
    assert split.latencies[-1] == pytest.approx(o + a + cpu / 2)
    assert whole.latencies[-1] == pytest.approx(o + a + cpu)
    last = [e for e in whole.events if e.token == 30 and e.kind is EventKind.CPU_EXPERT]
    assert len(last) == 2


def test_collaborative_beats_on_demand(setup):
    model, hw, costs, trace = setup
    geo = derive_cache_geometry(model, hw, 4)
    col = simulate(trace, model, costs, geo, Strategy(C, 24))
    od = simulate(trace, model, costs, zero_geometry(), Strategy(OD, 24))
    assert col.latencies.sum() < od.latencies.sum()


def test_event_log_is_clean(setup):
    model, hw, costs, trace = setup
    for ways in (2, 4, 8):
        r = simulate(trace, model, costs, derive_cache_geometry(model, hw, ways), Strategy(C, 24))
        assert audit_events(r.events, model.top_k, fetched_only=True) == []
        assert check_event_log(r.events, model.top_k) == []
    for tag in (OD, PF, CPU):
        r = simulate(trace, model, costs, zero_geometry(), Strategy(tag, 24))
        assert audit_events(r.events, model.top_k) == []


def test_audit_catches_injected_overlap(setup):
    model, hw, costs, trace = setup
    r = simulate(trace, model, costs, zero_geometry(), Strategy(OD, 24))
    starts = [e for e in r.events if e.kind is EventKind.WEIGHT_XFER_START]
    starts[1].payload["duration_ms"] = 1e6
    assert audit_events(r.events, model.top_k)


def test_determinism_bytes(setup):
    model, hw, costs, trace = setup
    geo = derive_cache_geometry(model, hw, 4)
    a = simulate(trace, model, costs, geo, Strategy(C, 16), seed=4).events_jsonl()
    b = simulate(trace, model, costs, geo, Strategy(C, 16), seed=4).events_jsonl()
    assert a == b and a


def test_single_point_sweep_equals_simulate(setup):
    model, hw, costs, trace = setup
    [res] = run_sweep(trace, model, hw, costs, [(8, 4)], seed=3)
    direct = simulate(trace, model, costs, derive_cache_geometry(model, hw, 4),
                      Strategy(C, 8), point_seed(3, 8, 4), record_events=False)
    assert np.array_equal(res.latencies, direct.latencies)


def test_sweep_failure_is_reported(setup):
    model, hw, costs, trace = setup
    out = run_sweep(trace, model, hw, costs, [(24, 4), (3, 4)])
    assert not isinstance(out[0], SweepFailure)
    assert isinstance(out[1], SweepFailure) and out[1].threads == 3


def test_parallel_sweep_matches_serial(setup):
    model, hw, costs, trace = setup
    grid = [(1, 2), (24, 8)]
    serial = run_sweep(trace, model, hw, costs, grid)
    par = run_sweep(trace, model, hw, costs, grid, jobs=2)
    for a, b in zip(serial, par):
        assert np.array_equal(a.latencies, b.latencies)


def test_unknown_threads_rejected(setup):
    model, _, costs, trace = setup
    with pytest.raises(ConfigError):
        simulate(trace, model, costs, zero_geometry(), Strategy(CPU, 3))


def test_trace_model_mismatch(setup, phi):
    model, _, costs, trace = setup
    with pytest.raises(ValueError):
        simulate(trace, phi[0], phi[2], zero_geometry(), Strategy(CPU, 24))


def _costs(t_gpu, t_cpu, t_act, t_weight, t_other):
    power = {1: 1.0}
    return CostModel(t_gpu, {1: t_cpu}, t_act, t_weight, power, power, t_other)


cost_values = st.floats(0.01, 50.0)


@settings(max_examples=40, deadline=None)
@given(
    t_gpu=cost_values, t_cpu=cost_values, t_act=cost_values, t_weight=cost_values,
    t_other=st.floats(0.0, 5.0), bump=st.floats(0.0, 30.0),
    tag=st.sampled_from([OD, PF, CPU]), seed=st.integers(0, 1000),
)
def test_monotone_degradation_cache_free(t_gpu, t_cpu, t_act, t_weight, t_other, bump, tag, seed):
    model = ModelSpec("p", 3, 6, 2, 1, 0)
    trace = generate_trace(model, SynthParams(0.5, 0.2, seed, 8))
    base = _costs(t_gpu, t_cpu, t_act, t_weight, t_other)
    slower = _costs(t_gpu, t_cpu + bump, t_act, t_weight + bump, t_other)
    a = simulate(trace, model, base, zero_geometry(), Strategy(tag, 1), record_events=False)
    b = simulate(trace, model, slower, zero_geometry(), Strategy(tag, 1), record_events=False)
    assert (b.latencies >= a.latencies - 1e-9).all()


def test_collaborative_is_not_monotone_in_transfer_time(mixtral):
    # a slower copy can keep a useful expert resident longer, so per-token
    # latency of the cached strategy is not monotone in t_weight
    model, _, costs = mixtral
    tiny = replace(model, num_layers=1)
    arr = np.array([[[0, 1]], [[2, 3]], [[0, 1]], [[0, 1]]])
    trace = RoutingTrace(tiny.name, 8, arr)
    geo = CacheGeometry.from_slots(2, 2, 1)
    fast = simulate(trace, tiny, costs.with_updates(t_weight_moe_layer_ms=1.0), geo, Strategy(C, 24))
    slow = simulate(trace, tiny, costs.with_updates(t_weight_moe_layer_ms=30.0), geo, Strategy(C, 24))
    assert (slow.latencies < fast.latencies - 1e-9).any()


@settings(max_examples=40, deadline=None)
@given(
    t_gpu=st.floats(0.01, 5.0), t_cpu=st.floats(5.0, 50.0), t_act=cost_values,
    t_weight=cost_values, t_other=st.floats(0.0, 5.0), slots=st.integers(0, 12),
    ways=st.integers(1, 4), p=st.floats(0, 1), seed=st.integers(0, 1000),
    whole=st.booleans(),
)
def test_collaborative_dominates_cpu_only(t_gpu, t_cpu, t_act, t_weight, t_other, slots, ways,
                                         p, seed, whole):
    model = ModelSpec("p", 3, 6, 2, 1, 0)
    trace = generate_trace(model, SynthParams(p, 0.3, seed, 10))
    costs = _costs(t_gpu, t_cpu, t_act, t_weight, t_other)
    mode = MissExecution.WHOLE_LAYER_CPU if whole else MissExecution.SPLIT
    col = simulate(trace, model, costs, CacheGeometry.from_slots(slots, ways, 3),
                   Strategy(C, 1, miss_execution=mode), record_events=False)
    cpu = simulate(trace, model, costs, zero_geometry(), Strategy(CPU, 1), record_events=False)
    assert (col.latencies <= cpu.latencies + 1e-9).all()


def test_multiple_weight_channels_never_slower(setup):
    model, hw, costs, trace = setup
    geo = derive_cache_geometry(model, hw, 4)
    one = simulate(trace, model, costs, zero_geometry(), Strategy(OD, 24))
    two = simulate(trace, model, costs, zero_geometry(), Strategy(OD, 24), weight_channels=2)
    assert two.latencies.sum() < one.latencies.sum()
    r = simulate(trace, model, costs, geo, Strategy(C, 24), weight_channels=2)
    assert audit_events(r.events, model.top_k, fetched_only=True) == []


def test_event_json_lines(setup, tmp_path):
    model, hw, costs, trace = setup
    r = simulate(trace, model, costs, derive_cache_geometry(model, hw, 4), Strategy(C, 24))
    path = tmp_path / "events.jsonl"
    r.write_events(path)
    lines = path.read_text().splitlines()
    # first line echoes the run config
    assert len(lines) == len(r.events) + 1
    assert '"total_slots": 56' in lines[0]
    assert '"kind": "LAYER_OTHER"' in lines[1]
