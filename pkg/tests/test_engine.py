import numpy as np
import pytest

from conftest import small_settings
from lib.engine import (
    CostModel,
    EngineConfig,
    SyntheticModel,
    paged_attention_forward,
    run_workload,
    settings_from_config,
    synthetic_states,
)
from lib.errors import ConfigError
from lib.metrics import to_artifact
from lib.oracles import dense_attention_output, random_paged_request
from lib.paged_store import allocate_block, gather_contiguous
from workloads.spec import RequestSpec, WorkloadSpec, generate_workload

MODEL = SyntheticModel(seed=3, num_layers=2, query_heads=4, kv_heads=2, head_dim=8)


def _workload(count=6, output=(10, 30), prompt=6, seed=1, every=0):
    generator = {
        "count": count,
        "prompt": {"dist": "fixed", "value": prompt},
        "output": {"dist": "uniform", "low": output[0], "high": output[1]},
        "arrival": {"every": every},
    }
    return generate_workload(generator, seed=seed)


def _checked(**overrides):
    return {"check_invariants": True, **overrides}


# -----------------------------------------------------------------------------
# Synthetic model & attention
# -----------------------------------------------------------------------------
def test_synthetic_states_are_deterministic_unit_vectors():
    first = synthetic_states(MODEL, 42, 7, 1, 3)
    second = synthetic_states(MODEL, 42, 7, 1, 3)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert a.shape == (8,)


def test_synthetic_states_differ_across_positions():
    keys = {synthetic_states(MODEL, 0, position, 0, 0)[1].tobytes() for position in range(10_000)}
    assert len(keys) == 10_000


def test_grouped_query_heads_share_kv():
    _, k0, v0 = synthetic_states(MODEL, 5, 1, 0, 0)
    _, k1, v1 = synthetic_states(MODEL, 5, 1, 0, 1)
    _, k2, _ = synthetic_states(MODEL, 5, 1, 0, 2)
    np.testing.assert_array_equal(k0, k1)
    np.testing.assert_array_equal(v0, v1)
    assert not np.array_equal(k0, k2)


def test_forward_over_one_entry_returns_its_value(pool_factory):
    pool, _ = pool_factory()
    block = allocate_block(pool, 0)
    pool.values[0, block, 0, 0] = [3.0, -1.0]
    pool.keys[0, block, 0, 0] = [0.5, 0.5]
    out = paged_attention_forward(pool, np.array([1.0, 2.0]), pool.table(0), 1, 0, 0)
    np.testing.assert_allclose(out, [3.0, -1.0])


def test_forward_over_equal_keys_averages_values(pool_factory):
    pool, _ = pool_factory(block_size=4, window=1)
    first, second = allocate_block(pool, 0), allocate_block(pool, 0)
    pool.keys[0, [first, second]] = 1.0
    pool.values[0, first, 3, 0] = [2.0, 0.0]
    pool.values[0, second, 0, 0] = [4.0, 2.0]
    table = pool.table(0)
    table.blocks = [second, first]
    out = paged_attention_forward(pool, np.array([0.3, -0.7]), table, 5, 0, 0)
    expected = (pool.values[0, second, :, 0].sum(axis=0) + pool.values[0, first, 0, 0]) / 5
    np.testing.assert_allclose(out, expected)


@pytest.mark.parametrize("n_blocks, block_size, logical_len", [(1, 4, 4), (3, 4, 10), (5, 8, 33)])
def test_forward_matches_dense_attention(n_blocks, block_size, logical_len):
    rng = np.random.default_rng(logical_len)
    pool, _, table = random_paged_request(rng, n_blocks, block_size, 8)
    query = rng.standard_normal(8)
    keys, values = gather_contiguous(pool, table, logical_len, 0, 0)
    np.testing.assert_allclose(
        paged_attention_forward(pool, query, table, logical_len, 0, 0),
        dense_attention_output(query, keys, values),
        atol=1e-5,
    )


# -----------------------------------------------------------------------------
# Settings
# -----------------------------------------------------------------------------
def test_budget_sets_pool_capacity():
    settings = settings_from_config(
        {
            "pool": {"block_size": 16, "window": 4},
            "budget": {"m_available": 100, "m_kv": 2, "m_q": 4, "n_max": 4},
            "scoring": {"use_global": False},
        }
    )
    assert (settings.pool.max_concurrency, settings.pool.total_blocks) == (8, 33)
    assert settings.scheduler.n_max == settings.compressor.n_max == 4


def test_baseline_spends_the_budget_on_blocks():
    settings = settings_from_config(
        {"budget": {"m_available": 100, "m_kv": 2, "m_q": 4, "n_max": 4}, "engine": {"compression": False}}
    )
    assert settings.pool.total_blocks == 50
    assert not settings.pool.global_score_enabled
    assert not settings.scheduler.compression


def test_lambda_key_maps_to_scoring_weight():
    assert settings_from_config({"scoring": {"lambda": 0.5}}).compressor.scoring.lam == 0.5


@pytest.mark.parametrize(
    "raw",
    [
        {"telemetry": {}},
        {"pool": {"colour": 1}},
        {"engine": {"clock": "sundial"}},
        {"cost": {"c2": -1.0}},
        {"scheduler": {"mode": "greedy"}},
    ],
)
def test_bad_config_is_rejected(raw):
    with pytest.raises(ConfigError):
        settings_from_config(raw)


def test_cost_model_ticks():
    cost = CostModel()
    assert cost.decode_ticks(4) == pytest.approx(1.2)
    assert cost.prefill_ticks(0) == 0.0
    assert cost.prefill_ticks(100) == pytest.approx(1.0)


def test_engine_config_validation():
    with pytest.raises(ConfigError):
        EngineConfig(seed=-1)


def test_pool_too_small_for_m_compressed_requests_is_rejected():
    raw = {"pool": {"total_blocks": 8, "max_concurrency": 6}, "compressor": {"n_max": 4}}
    with pytest.raises(ConfigError, match="max_concurrency"):
        settings_from_config(raw)
    raw["engine"] = {"compression": False}
    assert settings_from_config(raw).pool.total_blocks == 8


# -----------------------------------------------------------------------------
# Runs
# -----------------------------------------------------------------------------
def test_empty_workload_terminates_immediately():
    engine = run_workload(small_settings(), WorkloadSpec())
    assert engine.metrics.total_steps == 0
    assert engine.metrics.total_tokens == 0
    assert engine.metrics.concurrency == []


@pytest.mark.parametrize("mode", ["constrained", "hybrid"])
@pytest.mark.parametrize("prefix_sharing", [False, True])
def test_run_completes_with_invariants_checked(mode, prefix_sharing):
    settings = small_settings(_checked(), scheduler={"mode": mode, "prefix_sharing": prefix_sharing})
    workload = _workload(count=8, every=2)
    engine = run_workload(settings, workload)

    assert len(engine.state.finished) == 8
    assert engine.metrics.total_tokens == sum(r.output_len for r in workload.requests)
    assert engine.metrics.compressions > 0
    assert not engine.pool.tables
    assert engine.pool.num_free == settings.pool.total_blocks
    assert max(engine.metrics.concurrency) >= 2


def test_sync_and_async_retain_the_same_kv():
    workload = _workload(count=6)
    engines = {
        flag: run_workload(small_settings(_checked(capture_final=True, async_compression=flag)), workload)
        for flag in (False, True)
    }
    sync, asynchronous = engines[False], engines[True]
    assert sync.final_kv.keys() == asynchronous.final_kv.keys()
    for request_id, (keys, length) in sync.final_kv.items():
        other_keys, other_length = asynchronous.final_kv[request_id]
        assert length == other_length
        np.testing.assert_array_equal(keys, other_keys)
    assert asynchronous.metrics.total_time <= sync.metrics.total_time


def test_wallclock_mode_retains_the_same_kv():
    workload = _workload(count=4)
    simulated = run_workload(small_settings(_checked(capture_final=True)), workload)
    threaded = run_workload(small_settings({"capture_final": True, "clock": "wallclock", "workers": 2}), workload)
    assert threaded.metrics.total_tokens == simulated.metrics.total_tokens
    for request_id, (keys, _) in simulated.final_kv.items():
        np.testing.assert_array_equal(keys, threaded.final_kv[request_id][0])


def test_simulated_runs_are_reproducible():
    workload = _workload(count=6, every=1)
    first = to_artifact(run_workload(small_settings(), workload).metrics)
    second = to_artifact(run_workload(small_settings(), workload).metrics)
    assert first == second


def test_compressed_requests_stay_within_n_max_blocks():
    seen = []

    def on_step(engine, decision):
        for request in engine.state.running:
            if request.compressed:
                seen.append(len(engine.pool.tables[request.id].blocks))

    run_workload(small_settings(), _workload(count=4, output=(40, 60)), on_step=on_step)
    assert seen and max(seen) <= 3


# Memory-bound pool: M=12 requests of N_max=3 blocks of 16 tokens, the full-KV baseline gets 60 blocks
AMC_POOL = {"block_size": 16, "window": 4}
AMC_BUDGET = {"m_available": 240, "m_kv": 4, "m_q": 8, "n_max": 3}


def _amc_settings(engine_overrides=None, **sections):
    return small_settings(
        engine_overrides,
        pool=AMC_POOL,
        budget=AMC_BUDGET,
        scoring={"use_global": False},
        scheduler={"mode": "constrained"},
        **sections,
    )


def test_compression_beats_the_baseline_on_a_memory_bound_workload():
    workload = _workload(count=12, output=(500, 600), prompt=8)
    settings = _amc_settings()
    ceiling = settings.pool.max_concurrency
    compressed = run_workload(settings, workload).metrics
    baseline = run_workload(_amc_settings({"kv_payload": False}, engine={"compression": False}), workload).metrics

    assert ceiling == 12
    assert compressed.total_tokens == baseline.total_tokens
    assert compressed.tps >= 1.3 * baseline.tps

    def mid_run(metrics):
        return np.mean(metrics.concurrency[metrics.total_steps // 10 : metrics.total_steps // 2])

    assert abs(mid_run(compressed) - ceiling) <= 0.1 * ceiling
    assert mid_run(baseline) < mid_run(compressed)
    assert baseline.preemptions > 0 and compressed.preemptions == 0
    assert compressed.compressions > 0 and baseline.compressions == 0


def test_compression_fraction_is_about_one_per_block():
    b = AMC_POOL["block_size"]
    generator = {
        "count": 24,
        "prompt": {"dist": "uniform", "low": 4, "high": 40},
        "output": {"dist": "uniform", "low": 300, "high": 400},
    }
    metrics = run_workload(_amc_settings({"async_compression": False}), generate_workload(generator, seed=2)).metrics

    fraction = metrics.compression_fraction(warmup=metrics.total_steps // 10)
    assert 0.5 / b <= fraction <= 1.5 / b
    assert metrics.compression_fraction(warmup=metrics.total_steps) == 0.0


def test_wallclock_async_run_records_compression_time():
    settings = small_settings({"clock": "wallclock", "workers": 2})
    metrics = run_workload(settings, _workload(count=4, output=(40, 60))).metrics
    assert metrics.compressions > 0
    assert metrics.stage_times["compression"] > 0.0
    assert metrics.stage_shares["compression"] > 0.0


def test_peak_activation_counts_compressions_launched_together():
    # Identical requests arriving together compress in lockstep: 2 * l * h_q * N * b * w = 2 * 1 * 2 * 3 * 4 * 2
    single = run_workload(small_settings(), _workload(count=1, output=(20, 20))).metrics
    paired = run_workload(small_settings(), _workload(count=2, output=(20, 20))).metrics
    assert single.peak_activation == 48
    assert paired.peak_activation == 96


@pytest.mark.parametrize("prefix_sharing", [False, True])
def test_payload_free_engine_schedules_like_the_full_engine(prefix_sharing):
    workload = _workload(count=8, every=2)
    full, bare = (
        run_workload(small_settings(_checked(kv_payload=flag), scheduler={"prefix_sharing": prefix_sharing}), workload)
        for flag in (True, False)
    )
    assert bare.metrics.concurrency == full.metrics.concurrency
    assert bare.metrics.compression_set == full.metrics.compression_set
    assert bare.metrics.total_time == full.metrics.total_time
    assert bare.metrics.compressions == full.metrics.compressions > 0
    assert not bare.pool.keys.any()


def test_prefix_sharing_writes_only_the_unmatched_remainder():
    prompt = list(range(10))
    workload = WorkloadSpec(
        requests=[
            RequestSpec(arrival_step=0, output_len=2, prompt_tokens=prompt, seed=0),
            RequestSpec(arrival_step=1, output_len=2, prompt_tokens=prompt, seed=1),
        ]
    )
    shared = run_workload(small_settings(_checked(), scheduler={"prefix_sharing": True}), workload)
    private = run_workload(small_settings(_checked()), workload)
    assert shared.metrics.prefill_token_writes == 12
    assert private.metrics.prefill_token_writes == 20


def test_forward_check_runs_during_decode():
    engine = run_workload(small_settings(_checked(forward_check=True)), _workload(count=2, output=(12, 12)))
    assert engine.metrics.total_tokens == 24


def test_on_step_sees_every_step_and_step_limit_stops_early():
    steps = []
    engine = run_workload(
        small_settings(), _workload(count=3), on_step=lambda e, d: steps.append(e.step), step_limit=5
    )
    assert steps == [0, 1, 2, 3, 4]
    assert engine.metrics.total_steps == 5
    assert len(engine.metrics.concurrency) == 5
