"""
Request lifecycle and scheduling: constrained / hybrid admission, query-slot
hand-off, preemption and the per-step schedule decision.

Running-queue order is admission order; "last request" always means the most
recently admitted one.
"""

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from lib.errors import CapacityExceeded, ConfigError, NoFreeBlocks, NoPreemptable
from lib.paged_store import (
    acquire_query_slot,
    allocate_block,
    block_hash_chain,
    match_prefix,
    release_query_slot,
    release_request,
)

SCHEDULER_MODES = ("constrained", "hybrid")


class RequestState(Enum):
    WAITING = "waiting"
    RUNNING_WITH_SLOT = "running_with_slot"
    RUNNING_NO_SLOT = "running_no_slot"
    BLOCKED = "blocked"
    FINISHED = "finished"


RUNNING_STATES = (RequestState.RUNNING_WITH_SLOT, RequestState.RUNNING_NO_SLOT, RequestState.BLOCKED)


@dataclass(eq=False)
class Request:
    id: int
    arrival_step: int
    prompt_tokens: list
    output_len: int
    seed: int
    state: RequestState = RequestState.WAITING
    slot: int = None
    compressed: bool = False
    compressing: bool = False
    blocked_on: str = None
    generated: int = 0
    preemptions: int = 0
    admitted_at: int = None
    first_token_time: float = None
    last_token_time: float = None

    @property
    def prompt_len(self):
        return len(self.prompt_tokens)

    @property
    def total_tokens(self):
        """Absolute positions produced so far (prompt plus generated)."""
        return self.prompt_len + self.generated

    @property
    def is_running(self):
        return self.state in RUNNING_STATES


@dataclass(frozen=True)
class SchedulerConfig:
    mode: str = "constrained"
    prefix_sharing: bool = False
    max_concurrency: int = 1
    n_max: int = 4
    block_size: int = 16
    window: int = 4
    compression: bool = True

    def __post_init__(self):
        if self.mode not in SCHEDULER_MODES:
            raise ConfigError(f"scheduler.mode must be one of {SCHEDULER_MODES}, got '{self.mode}'")
        if self.max_concurrency < 1:
            raise ConfigError(f"scheduler.max_concurrency must be >= 1, got {self.max_concurrency}")


@dataclass
class ScheduleDecision:
    prefill: list = field(default_factory=list)
    decode: list = field(default_factory=list)
    compress: list = field(default_factory=list)


class SchedulerState:
    def __init__(self, config, pool, cache):
        self.config = config
        self.pool = pool
        self.cache = cache
        self.waiting = deque()
        self.running = []
        self.finished = []
        self.admissions = 0
        self.preemptions = 0
        self.on_slot_bound = None

    def bind_slot(self, request, slot):
        request.slot = slot
        if request.state != RequestState.BLOCKED or request.blocked_on == "slot":
            request.state = RequestState.RUNNING_WITH_SLOT
            request.blocked_on = None
        if self.on_slot_bound is not None:
            self.on_slot_bound(request)

    def slotted_count(self):
        return sum(1 for r in self.running if r.slot is not None)


# -----------------------------------------------------------------------------
# Predicates
# -----------------------------------------------------------------------------
def meets_trigger(state, request):
    """
    N >= N_max with the last block fully occupied. A prompt that overflows N_max with a
    partial tail block waits for that block to fill, so its first compression can come
    up to b - 1 decode steps after prefill.
    """
    if not state.config.compression:
        return False
    table = state.pool.tables.get(request.id)
    if table is None:
        return False
    return len(table.blocks) >= state.config.n_max and table.is_last_full(state.config.block_size)


def check_slotless_eligibility(state, request, n_blocks=None, last_fill=None):
    """A slotless request may decode while it has fewer than N_max blocks
    or fewer than b - w tokens in its last block.
    """
    cfg = state.config
    if n_blocks is None:
        table = state.pool.tables[request.id]
        n_blocks = len(table.blocks)
        last_fill = table.last_fill(cfg.block_size)
    return n_blocks < cfg.n_max or last_fill < cfg.block_size - cfg.window


def _prefill_shape(state, request):
    """Blocks and last-block fill the request will have once its prefill is written."""
    b = state.config.block_size
    n_blocks = -(-request.total_tokens // b)
    return n_blocks, request.total_tokens - (n_blocks - 1) * b


# -----------------------------------------------------------------------------
# Admission
# -----------------------------------------------------------------------------
def admit(state, step=0):
    """
    FCFS admission from the waiting queue; stops at the first request that cannot be
    admitted. Constrained mode needs a free query slot; hybrid mode also admits slotless
    requests that are allowed to decode without one. Prefix blocks are matched and the
    remaining prefill blocks allocated here; the engine writes their contents.
    """
    cfg = state.config
    pool = state.pool
    admitted = []

    while state.waiting and state.waiting[0].arrival_step <= step:
        request = state.waiting[0]
        chain = block_hash_chain(request.prompt_tokens, cfg.block_size) if cfg.prefix_sharing else []
        matched = _peek_prefix(pool, chain)
        n_blocks, last_fill = _prefill_shape(state, request)
        needed = n_blocks - matched

        if needed > pool.config.total_blocks:
            raise CapacityExceeded(
                f"request {request.id} needs {n_blocks} blocks, the pool holds {pool.config.total_blocks}"
            )
        if needed > pool.num_free:
            break

        has_free_slot = bool(state.cache.free_slots)
        if cfg.compression:
            if cfg.mode == "constrained" and not has_free_slot:
                break
            if cfg.mode == "hybrid" and not has_free_slot:
                if not check_slotless_eligibility(state, request, n_blocks, last_fill):
                    break

        state.waiting.popleft()
        if chain:
            match_prefix(pool, chain, request.id)
        try:
            while len(pool.table(request.id).blocks) < n_blocks:
                allocate_block(pool, request.id)
        except NoFreeBlocks:
            # A concurrent compression dropped a matched prefix block since the peek
            release_request(pool, request.id)
            state.waiting.appendleft(request)
            break

        request.admitted_at = state.admissions
        state.admissions += 1
        request.state = RequestState.RUNNING_NO_SLOT
        request.blocked_on = None
        state.running.append(request)
        if cfg.compression and has_free_slot:
            slot = acquire_query_slot(state.cache, request.id)
            request.slot = slot
            request.state = RequestState.RUNNING_WITH_SLOT
        admitted.append(request)

    return admitted


def _peek_prefix(pool, chain):
    count = 0
    for block_hash in chain:
        if block_hash not in pool.prefix_index:
            break
        count += 1
    return count


# -----------------------------------------------------------------------------
# Slots & preemption
# -----------------------------------------------------------------------------
def assign_freed_slots(state):
    """Hands free slots to the foremost running requests that lack one; compressing owners keep theirs."""
    for request in state.running:
        if not state.cache.free_slots:
            return
        if request.slot is None and request.is_running:
            slot = acquire_query_slot(state.cache, request.id)
            state.bind_slot(request, slot)


def release_slot(state, request):
    if request.slot is not None:
        release_query_slot(state.cache, request.slot)
        request.slot = None


def preempt(state, requester=None):
    """
    Offloads one running request after a failed allocation and returns it (None when
    the requester must block instead). Without prefix sharing only slotless requests
    are candidates (the last one goes first); with prefix sharing, or with compression
    off, the last uncompressed request goes, slot or not. Compressed and compressing
    requests are never offloaded.
    """
    cfg = state.config
    candidates = [r for r in state.running if not r.compressing and not r.compressed]

    if cfg.compression and not cfg.prefix_sharing:
        if cfg.mode == "constrained":
            return None
        candidates = [r for r in candidates if r.slot is None]
        if not candidates:
            return None
    elif not candidates:
        raise NoPreemptable("no uncompressed request left to preempt")

    victim = candidates[-1]
    state.running.remove(victim)
    release_slot(state, victim)
    release_request(state.pool, victim.id)
    victim.state = RequestState.WAITING
    victim.blocked_on = None
    victim.preemptions += 1
    state.waiting.appendleft(victim)
    state.preemptions += 1
    assign_freed_slots(state)
    return victim


def finish(state, request):
    """Slot first so it can be handed over in the same step, then the blocks."""
    state.running.remove(request)
    release_slot(state, request)
    assign_freed_slots(state)
    release_request(state.pool, request.id)
    request.state = RequestState.FINISHED
    state.finished.append(request)


# -----------------------------------------------------------------------------
# Per-step decision
# -----------------------------------------------------------------------------
def step_schedule(state, step=0):
    """
    Admission, then classification of every running request: triggered requests with a
    slot go to the compression set, slotless requests that lost eligibility block on a
    slot, everything else that is not compressing decodes. A request blocked on blocks
    is in no set until the pool has a free block again; it then retries in the batch.
    """
    decision = ScheduleDecision()
    decision.prefill = admit(state, step)
    fresh = set(id(r) for r in decision.prefill)

    for request in state.running:
        if request.compressing or id(request) in fresh:
            continue
        if request.state == RequestState.BLOCKED and request.blocked_on == "blocks":
            if not state.pool.num_free:
                continue
            request.state = RequestState.RUNNING_NO_SLOT if request.slot is None else RequestState.RUNNING_WITH_SLOT
            request.blocked_on = None
        if meets_trigger(state, request):
            if request.slot is not None:
                decision.compress.append(request)
                continue
            request.state = RequestState.BLOCKED
            request.blocked_on = "slot"
            continue

        if state.config.compression and request.slot is None and state.config.mode == "hybrid":
            if not check_slotless_eligibility(state, request):
                request.state = RequestState.BLOCKED
                request.blocked_on = "slot"
                continue
            request.state = RequestState.RUNNING_NO_SLOT
            request.blocked_on = None

        decision.decode.append(request)

    return decision
