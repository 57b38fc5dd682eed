import pytest

from lib.errors import CapacityExceeded, ConfigError, NoPreemptable
from lib.paged_store import allocate_block, block_hash_chain, check_conservation, register_prefix_block
from lib.scheduler import (
    Request,
    RequestState,
    SchedulerConfig,
    SchedulerState,
    admit,
    assign_freed_slots,
    check_slotless_eligibility,
    finish,
    meets_trigger,
    preempt,
    step_schedule,
)


def _state(pool_factory, mode="constrained", max_concurrency=2, prefix_sharing=False, total_blocks=16, **extra):
    pool, cache = pool_factory(total_blocks=total_blocks, block_size=4, window=2, max_concurrency=max_concurrency)
    config = SchedulerConfig(
        mode=mode,
        prefix_sharing=prefix_sharing,
        max_concurrency=max_concurrency,
        n_max=4,
        block_size=4,
        window=2,
        **extra,
    )
    return SchedulerState(config, pool, cache)


def _request(request_id, prompt_len=4, arrival_step=0, tokens=None):
    prompt = tokens if tokens is not None else [request_id * 1000 + i for i in range(prompt_len)]
    return Request(id=request_id, arrival_step=arrival_step, prompt_tokens=prompt, output_len=10, seed=request_id)


def _enqueue(state, *requests):
    state.waiting.extend(requests)
    return list(requests)


# -----------------------------------------------------------------------------
# Admission
# -----------------------------------------------------------------------------
def test_constrained_admission_stops_at_slot_limit(pool_factory):
    state = _state(pool_factory, mode="constrained", max_concurrency=2)
    r0, r1, r2 = _enqueue(state, _request(0), _request(1), _request(2))
    admitted = admit(state)
    assert admitted == [r0, r1]
    assert [r.slot for r in admitted] == [0, 1]
    assert list(state.waiting) == [r2]


def test_hybrid_admission_adds_slotless_requests(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=2)
    _enqueue(state, _request(0), _request(1), _request(2))
    admitted = admit(state)
    assert len(admitted) == 3
    assert admitted[2].slot is None
    assert admitted[2].state == RequestState.RUNNING_NO_SLOT
    assert not state.waiting


def test_hybrid_refuses_slotless_prompt_that_is_already_ineligible(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=1)
    _enqueue(state, _request(0), _request(1, prompt_len=15))
    assert len(admit(state)) == 1
    assert len(state.waiting) == 1


def test_admission_waits_for_blocks(pool_factory):
    state = _state(pool_factory, total_blocks=4)
    allocate_block(state.pool, "other")
    allocate_block(state.pool, "other")
    _enqueue(state, _request(0, prompt_len=12))
    assert admit(state) == []
    assert len(state.waiting) == 1


def test_admission_rejects_prompt_larger_than_pool(pool_factory):
    state = _state(pool_factory, total_blocks=2)
    _enqueue(state, _request(0, prompt_len=12))
    with pytest.raises(CapacityExceeded):
        admit(state)


def test_admission_is_fcfs(pool_factory):
    state = _state(pool_factory, total_blocks=4)
    _enqueue(state, _request(0, prompt_len=16), _request(1))
    allocate_block(state.pool, "other")
    assert admit(state) == []


def test_admission_respects_arrival_step(pool_factory):
    state = _state(pool_factory)
    r0, r1 = _enqueue(state, _request(0), _request(1, arrival_step=5))
    assert admit(state, step=0) == [r0]
    assert admit(state, step=5) == [r1]


def test_admission_allocates_prefill_blocks(pool_factory):
    state = _state(pool_factory)
    (r0,) = _enqueue(state, _request(0, prompt_len=10))
    admit(state)
    assert len(state.pool.table(r0.id).blocks) == 3
    assert check_conservation(state.pool) == []


def test_admission_shares_a_cached_prefix(pool_factory):
    state = _state(pool_factory, prefix_sharing=True)
    tokens = list(range(10))
    (r0,) = _enqueue(state, _request(0, tokens=tokens))
    admit(state)
    for block_id, block_hash in zip(state.pool.table(r0.id).blocks, block_hash_chain(tokens, 4)):
        register_prefix_block(state.pool, block_id, block_hash)

    (r1,) = _enqueue(state, _request(1, tokens=tokens))
    free_before = state.pool.num_free
    admit(state)
    shared = state.pool.table(r0.id).blocks[:2]
    assert state.pool.table(r1.id).blocks[:2] == shared
    assert all(state.pool.ref_counts[b] == 2 for b in shared)
    assert state.pool.num_free == free_before - 1
    assert state.pool.table(r1.id).length == 8
    assert check_conservation(state.pool) == []


# -----------------------------------------------------------------------------
# Eligibility & trigger
# -----------------------------------------------------------------------------
@pytest.mark.parametrize(
    "n_blocks, last_fill, eligible",
    [
        (1, 10, True),
        (4, 240, False),
        (4, 1, True),
        (4, 239, True),
        (5, 256, False),
    ],
)
def test_slotless_eligibility(n_blocks, last_fill, eligible):
    state = SchedulerState(SchedulerConfig(mode="hybrid", n_max=4, block_size=256, window=16), None, None)
    assert check_slotless_eligibility(state, None, n_blocks, last_fill) is eligible


def test_trigger_needs_n_max_blocks_and_a_full_last_block(pool_factory):
    state = _state(pool_factory)
    (r0,) = _enqueue(state, _request(0, prompt_len=15))
    admit(state)
    table = state.pool.table(r0.id)
    table.length = 15
    assert not meets_trigger(state, r0)
    table.length = 16
    assert meets_trigger(state, r0)


def test_trigger_is_off_without_compression(pool_factory):
    state = _state(pool_factory, compression=False)
    (r0,) = _enqueue(state, _request(0, prompt_len=16))
    admit(state)
    state.pool.table(r0.id).length = 16
    assert not meets_trigger(state, r0)


# -----------------------------------------------------------------------------
# Slots
# -----------------------------------------------------------------------------
def test_freed_slot_goes_to_the_earliest_blocked_request(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=1)
    r0, r1, r2 = _enqueue(state, _request(0), _request(1), _request(2))
    admit(state)
    for request in (r1, r2):
        request.state = RequestState.BLOCKED
        request.blocked_on = "slot"

    finish(state, r0)
    assert r1.slot == 0
    assert r1.state == RequestState.RUNNING_WITH_SLOT
    assert r2.slot is None and r2.state == RequestState.BLOCKED
    assert r0.state == RequestState.FINISHED
    assert check_conservation(state.pool) == []


def test_freed_slot_returns_to_free_set_without_slotless_requests(pool_factory):
    state = _state(pool_factory, max_concurrency=2)
    r0, _ = _enqueue(state, _request(0), _request(1))
    admit(state)
    finish(state, r0)
    assert list(state.cache.free_slots) == [0]


def test_compressing_owner_keeps_its_slot(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=1)
    r0, r1 = _enqueue(state, _request(0), _request(1))
    admit(state)
    r0.compressing = True
    assign_freed_slots(state)
    assert r0.slot == 0
    assert r1.slot is None


def test_slot_binding_notifies_the_engine(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=1)
    bound = []
    state.on_slot_bound = bound.append
    r0, r1 = _enqueue(state, _request(0), _request(1))
    admit(state)
    finish(state, r0)
    assert bound == [r1]


# -----------------------------------------------------------------------------
# Preemption
# -----------------------------------------------------------------------------
def test_hybrid_preempts_the_last_slotless_request(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=1)
    requests = _enqueue(state, _request(3), _request(5), _request(7))
    admit(state)
    victim = preempt(state)
    assert victim is requests[2]
    assert victim.state == RequestState.WAITING
    assert state.waiting[0] is victim
    assert victim.id not in state.pool.tables
    assert state.preemptions == 1
    assert check_conservation(state.pool) == []


def test_hybrid_without_slotless_requests_blocks_instead(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=2)
    _enqueue(state, _request(0), _request(1))
    admit(state)
    assert preempt(state) is None


def test_constrained_without_sharing_never_preempts(pool_factory):
    state = _state(pool_factory, mode="constrained")
    _enqueue(state, _request(0), _request(1))
    admit(state)
    assert preempt(state) is None


def test_prefix_sharing_preempts_last_uncompressed_request_and_frees_its_slot(pool_factory):
    state = _state(pool_factory, mode="constrained", max_concurrency=2, prefix_sharing=True)
    r1, r3 = _enqueue(state, _request(1), _request(3))
    (r4,) = _enqueue(state, _request(4))
    admit(state)
    assert r4 in state.waiting

    victim = preempt(state)
    assert victim is r3
    assert victim.slot is None
    assert state.waiting[0] is r3
    assert list(state.cache.free_slots) == [1]


def test_compressed_requests_are_never_preempted(pool_factory):
    state = _state(pool_factory, prefix_sharing=True)
    r0, r1 = _enqueue(state, _request(0), _request(1))
    admit(state)
    r1.compressed = True
    assert preempt(state) is r0
    with pytest.raises(NoPreemptable):
        preempt(state)


def test_baseline_preempts_last_request(pool_factory):
    state = _state(pool_factory, compression=False)
    r0, r1 = _enqueue(state, _request(0), _request(1))
    admit(state)
    assert r0.slot is None and r1.slot is None
    assert preempt(state) is r1


# -----------------------------------------------------------------------------
# Per-step decision
# -----------------------------------------------------------------------------
def test_step_schedule_sorts_requests(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=1)
    r0, r1 = _enqueue(state, _request(0, prompt_len=16), _request(1))
    first = step_schedule(state)
    assert first.prefill == [r0, r1]
    assert first.decode == [] and first.compress == []

    for _ in range(3):
        allocate_block(state.pool, r1.id)
    state.pool.table(r0.id).length = 16
    state.pool.table(r1.id).length = 16
    second = step_schedule(state, step=1)
    assert second.compress == [r0]
    assert second.decode == []
    assert r1.state == RequestState.BLOCKED and r1.blocked_on == "slot"


def test_step_schedule_skips_compressing_requests(pool_factory):
    state = _state(pool_factory)
    (r0,) = _enqueue(state, _request(0))
    step_schedule(state)
    state.pool.table(r0.id).length = 4
    r0.compressing = True
    decision = step_schedule(state, step=1)
    assert decision.decode == [] and decision.compress == []


def test_step_schedule_decodes_eligible_requests(pool_factory):
    state = _state(pool_factory, mode="hybrid", max_concurrency=1)
    r0, r1 = _enqueue(state, _request(0), _request(1))
    step_schedule(state)
    for request in (r0, r1):
        state.pool.table(request.id).length = 4
    decision = step_schedule(state, step=1)
    assert decision.decode == [r0, r1]


def test_scheduler_config_validation():
    with pytest.raises(ConfigError):
        SchedulerConfig(mode="greedy")
    with pytest.raises(ConfigError):
        SchedulerConfig(max_concurrency=0)


def test_request_blocked_on_blocks_sits_out_until_a_block_frees(pool_factory):
    state = _state(pool_factory, total_blocks=4)
    r0, r1 = _enqueue(state, _request(0, prompt_len=8), _request(1, prompt_len=8))
    step_schedule(state)
    for request in (r0, r1):
        state.pool.table(request.id).length = 8
    r0.state = RequestState.BLOCKED
    r0.blocked_on = "blocks"

    decision = step_schedule(state, step=1)
    assert decision.decode == [r1]
    assert decision.compress == []
    assert r0.state == RequestState.BLOCKED

    finish(state, r1)
    decision = step_schedule(state, step=2)
    assert decision.decode == [r0]
    assert r0.state == RequestState.RUNNING_WITH_SLOT
    assert r0.blocked_on is None


def test_overflowing_prompt_with_partial_tail_compresses_once_the_tail_fills(pool_factory):
    state = _state(pool_factory)
    (r0,) = _enqueue(state, _request(0, prompt_len=22))
    step_schedule(state)
    table = state.pool.table(r0.id)
    table.length = 22
    assert len(table.blocks) == 6

    for length in (22, 23):
        table.length = length
        decision = step_schedule(state, step=length)
        assert decision.decode == [r0] and decision.compress == []
    table.length = 24
    assert step_schedule(state, step=24).compress == [r0]
