"""
Engine driver: prefill and decode over a deterministic synthetic model, the
compression trigger, synchronous / asynchronous compression and metrics.

Clock modes:
    simulated  ticks from the cost model; compression launched at clock T is
               applied at the first step boundary with clock >= T + c2.
    wallclock  compressions run on a thread pool and are harvested when done;
               timings are measured, so runs are not bit-reproducible.

With `kv_payload` off no K/V, query or score state is produced: only block tables,
lengths and the clock advance, which is all the scheduler simulations need.
"""

import math
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np

from lib.capacity import MemoryBudget, plan_capacity
from lib.compressor import CompressorConfig, compress_blocks_only, compress_request, plan_targets
from lib.errors import ConfigError, KVDeskError, NoFreeBlocks, SchedulerStalled
from lib.metrics import EngineMetrics
from lib.paged_store import (
    PoolConfig,
    allocate_block,
    block_hash_chain,
    check_conservation,
    free_blocks,
    init_pool,
    is_shared,
    push_window_token,
    register_prefix_block,
    reset_window,
    write_token,
)
from lib.scheduler import (
    Request,
    RequestState,
    SchedulerConfig,
    SchedulerState,
    finish,
    preempt,
    step_schedule,
)
from lib.scoring import ScoreConfig

CLOCK_MODES = ("simulated", "wallclock")

# Stream kinds of the synthetic generator
PROMPT_STREAM = 0
GENERATED_STREAM = 1


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class CostModel:
    c0: float = 1.0
    c1: float = 0.05
    c2: float = 4.0
    prefill_base: float = 0.0
    prefill_per_token: float = 0.01

    def __post_init__(self):
        for name in ("c0", "c1", "c2", "prefill_base", "prefill_per_token"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cost.{name} must be >= 0, got {getattr(self, name)}")

    def decode_ticks(self, batch_size):
        return self.c0 + self.c1 * batch_size

    def prefill_ticks(self, tokens):
        return self.prefill_base + self.prefill_per_token * tokens if tokens else 0.0


@dataclass(frozen=True)
class EngineConfig:
    seed: int = 0
    clock: str = "simulated"
    async_compression: bool = True
    compression: bool = True
    forward_check: bool = False
    max_steps: int = 1_000_000
    verbose: bool = False
    progress_every: int = 1000
    workers: int = 4
    capture_final: bool = False
    check_invariants: bool = False
    kv_payload: bool = True
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        if self.clock not in CLOCK_MODES:
            raise ConfigError(f"engine.clock must be one of {CLOCK_MODES}, got '{self.clock}'")
        if self.seed < 0:
            raise ConfigError(f"engine.seed must be >= 0, got {self.seed}")
        if self.max_steps < 1:
            raise ConfigError(f"engine.max_steps must be >= 1, got {self.max_steps}")


@dataclass(frozen=True)
class EngineSettings:
    pool: PoolConfig
    compressor: CompressorConfig
    scheduler: SchedulerConfig
    engine: EngineConfig
    plan: object = None


# Allowed keys per config section; anything else is a ConfigError
CONFIG_KEYS = {
    "pool": {
        "num_layers",
        "block_size",
        "kv_heads",
        "query_heads",
        "head_dim",
        "window",
        "total_blocks",
        "max_concurrency",
        "dtype",
    },
    "budget": {"m_available", "m_kv", "m_q", "n_max", "d", "capacity"},
    "scoring": {"alpha", "lambda", "tau", "p", "pooling", "kernel", "redundancy", "use_global"},
    "compressor": {"layer_stride", "n_max"},
    "scheduler": {"mode", "prefix_sharing"},
    "engine": {
        "seed",
        "clock",
        "async_compression",
        "compression",
        "forward_check",
        "max_steps",
        "verbose",
        "progress_every",
        "workers",
        "kv_payload",
    },
    "cost": {"c0", "c1", "c2", "prefill_base", "prefill_per_token"},
}

POOL_DEFAULTS = {
    "num_layers": 2,
    "block_size": 16,
    "kv_heads": 2,
    "query_heads": 4,
    "head_dim": 16,
    "window": 4,
    "total_blocks": 64,
    "max_concurrency": 4,
    "dtype": "float32",
}


def settings_from_config(raw, seed=None):
    """
    Builds every config dataclass from a parsed config document (section -> dict).
    With a [budget] section the capacity plan decides total_blocks and
    max_concurrency; the full-KV baseline spends the whole budget on blocks.
    """
    for section, values in raw.items():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in values:
            if key not in CONFIG_KEYS[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")

    engine_raw = dict(raw.get("engine", {}))
    if seed is not None and "seed" not in engine_raw:
        engine_raw["seed"] = seed
    engine_config = EngineConfig(cost=CostModel(**raw.get("cost", {})), **engine_raw)

    scoring_raw = dict(raw.get("scoring", {}))
    if "lambda" in scoring_raw:
        scoring_raw["lam"] = scoring_raw.pop("lambda")
    score_config = ScoreConfig(**scoring_raw)

    pool_raw = {**POOL_DEFAULTS, **raw.get("pool", {})}
    compressor_raw = dict(raw.get("compressor", {}))
    n_max = compressor_raw.pop("n_max", 4)

    plan = None
    budget_raw = dict(raw.get("budget", {}))
    if budget_raw:
        method = budget_raw.pop("capacity", "closed_form")
        budget = MemoryBudget(**budget_raw)
        n_max = budget.n_max
        if engine_config.compression:
            plan = plan_capacity(budget, use_global=score_config.use_global, method=method)
            pool_raw["total_blocks"] = plan.total_blocks
            pool_raw["max_concurrency"] = plan.max_concurrency
        else:
            pool_raw["total_blocks"] = budget.m_available // budget.m_kv
            if pool_raw["total_blocks"] == 0:
                raise ConfigError("budget.m_available cannot hold a single block")

    pool_config = PoolConfig(
        global_score_enabled=engine_config.compression and score_config.use_global,
        **pool_raw,
    )
    if engine_config.compression and pool_config.max_concurrency * n_max > pool_config.total_blocks:
        raise ConfigError(
            f"pool.max_concurrency * n_max = {pool_config.max_concurrency} * {n_max} exceeds "
            f"pool.total_blocks = {pool_config.total_blocks}"
        )
    scheduler_raw = raw.get("scheduler", {})
    scheduler_config = SchedulerConfig(
        mode=scheduler_raw.get("mode", "constrained"),
        prefix_sharing=scheduler_raw.get("prefix_sharing", False),
        max_concurrency=pool_config.max_concurrency,
        n_max=n_max,
        block_size=pool_config.block_size,
        window=pool_config.window,
        compression=engine_config.compression,
    )
    compressor_config = CompressorConfig(
        n_max=n_max,
        prefix_sharing=scheduler_config.prefix_sharing,
        scoring=score_config,
        **compressor_raw,
    )
    return EngineSettings(
        pool=pool_config,
        compressor=compressor_config,
        scheduler=scheduler_config,
        engine=engine_config,
        plan=plan,
    )


# -----------------------------------------------------------------------------
# Synthetic model
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticModel:
    seed: int
    num_layers: int
    query_heads: int
    kv_heads: int
    head_dim: int

    @classmethod
    def from_pool(cls, seed, config):
        return cls(seed, config.num_layers, config.query_heads, config.kv_heads, config.head_dim)


def _normalize(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return x / norms


def synthetic_token(model, stream, position, kind=GENERATED_STREAM):
    """
    Unit-norm states of one token for every layer and head: q [L][h_q][d], k and v [L][h_kv][d].
    Counter-based: the generator is seeded by (model seed, kind, stream, position) only.
    """
    rng = np.random.default_rng([model.seed, kind, int(stream), int(position)])
    heads = model.query_heads + 2 * model.kv_heads
    states = _normalize(rng.standard_normal((model.num_layers, heads, model.head_dim)))
    q = states[:, : model.query_heads]
    k = states[:, model.query_heads : model.query_heads + model.kv_heads]
    v = states[:, model.query_heads + model.kv_heads :]
    return q, k, v


def synthetic_states(model, request_seed, position, layer, head):
    """(q, k, v) each [d]; q belongs to query head `head`, k/v to the kv head serving it."""
    q, k, v = synthetic_token(model, request_seed, position)
    kv_head = head // (model.query_heads // model.kv_heads)
    return q[layer, head], k[layer, kv_head], v[layer, kv_head]


def token_states(engine, request, position):
    """Prompt positions are keyed by token id so identical prefixes produce identical KV."""
    if position < request.prompt_len:
        return synthetic_token(engine.model, request.prompt_tokens[position], position, PROMPT_STREAM)
    return synthetic_token(engine.model, request.seed, position, GENERATED_STREAM)


# -----------------------------------------------------------------------------
# Attention
# -----------------------------------------------------------------------------
def paged_attention_forward(pool, query_vec, block_table, logical_len, layer, kv_head):
    """softmax(q K^T / sqrt(d)) V over the paged entries, streamed block by block."""
    assert logical_len >= 1, "attention over an empty sequence"
    b = pool.config.block_size
    q = np.asarray(query_vec, dtype=np.float64)
    scale = math.sqrt(q.shape[-1])

    running_max = -np.inf
    denom = 0.0
    acc = np.zeros_like(q)
    for i in range(-(-logical_len // b)):
        fill = min(b, logical_len - i * b)
        block_id = block_table.blocks[i]
        keys = pool.keys[layer, block_id, :fill, kv_head].astype(np.float64)
        values = pool.values[layer, block_id, :fill, kv_head].astype(np.float64)
        logits = keys @ q / scale
        new_max = max(running_max, float(logits.max()))
        correction = math.exp(running_max - new_max) if running_max > -np.inf else 0.0
        weights = np.exp(logits - new_max)
        denom = denom * correction + weights.sum()
        acc = acc * correction + weights @ values
        running_max = new_max
    return acc / denom


# -----------------------------------------------------------------------------
# Engine
# -----------------------------------------------------------------------------
@dataclass
class CompressionTask:
    request: Request
    plan: object
    held: list
    due: float = 0.0
    future: object = None
    batch_size: int = 1
    elapsed: float = 0.0


class Engine:
    def __init__(self, settings):
        self.settings = settings
        self.config = settings.engine
        self.pool, self.cache = init_pool(settings.pool)
        self.model = SyntheticModel.from_pool(self.config.seed, settings.pool)
        self.state = SchedulerState(settings.scheduler, self.pool, self.cache)
        self.state.on_slot_bound = lambda request: rebuild_window(self, request)
        self.metrics = EngineMetrics(
            total_blocks=settings.pool.total_blocks,
            max_concurrency=settings.pool.max_concurrency if self.config.compression else 0,
        )
        self.clock = 0.0
        self.step = 0
        self.inflight = []
        self.reports = []
        self.final_kv = {}
        self.started = None
        self.executor = None

    def now(self):
        if self.config.clock == "wallclock":
            return time.perf_counter() - self.started
        return self.clock

    def log(self, message):
        if self.config.verbose:
            print(message)


def rebuild_window(engine, request):
    """Refills the request's slot with the query states of its last min(w, length) positions."""
    w = engine.settings.pool.window
    reset_window(engine.cache, request.slot)
    if not engine.config.kv_payload:
        return
    total = request.total_tokens
    for position in range(max(0, total - w), total):
        q, _, _ = token_states(engine, request, position)
        push_window_token(engine.cache, request.slot, q)


def prefill(engine, request):
    """
    Writes K/V for every prompt (and, after a preemption, already generated) position
    past the matched prefix, publishes the new full prompt blocks for prefix matching
    and seeds the query window. Returns the number of positions written.
    """
    pool = engine.pool
    b = pool.config.block_size
    table = pool.tables[request.id]
    total = request.total_tokens
    start = table.length
    if len(table.blocks) * b < total:
        raise NoFreeBlocks(f"request {request.id} holds {len(table.blocks)} blocks for {total} tokens")

    if engine.config.kv_payload:
        for position in range(start, total):
            _, k, v = token_states(engine, request, position)
            block_id, slot = table.slot_of(position, b)
            write_token(pool, block_id, slot, k, v)
    table.length = total

    if engine.settings.scheduler.prefix_sharing:
        chain = block_hash_chain(request.prompt_tokens, b)
        for j in range(start // b, len(chain)):
            register_prefix_block(pool, table.blocks[j], chain[j])

    if request.slot is not None:
        rebuild_window(engine, request)
    return total - start


def _ensure_room(engine, request):
    """Allocates the next block when the last one is full, preempting on exhaustion.

    False if the request cannot decode.
    """
    pool, state = engine.pool, engine.state
    table = pool.tables[request.id]
    if table.blocks and not table.is_last_full(pool.config.block_size):
        return True
    assert not request.compressed or not engine.config.compression, (
        f"compressed request {request.id} asked for a block beyond its reserve"
    )
    while True:
        try:
            allocate_block(pool, request.id)
            return True
        except NoFreeBlocks:
            victim = preempt(state, request)
            if victim is None:
                request.state = RequestState.BLOCKED
                request.blocked_on = "blocks"
                return False
            engine.log(f"[Preempt]: request {victim.id} at step {engine.step}")
            if victim is request:
                return False


def decode_step(engine, batch):
    """
    One token for every request of the batch: K/V write (allocating when due), optional
    forward pass validation, window push, token bookkeeping and completion. Returns the
    requests that produced a token.
    """
    pool, cache = engine.pool, engine.cache
    cfg = pool.config
    produced = []

    for request in batch:
        if not request.is_running or request.compressing:
            continue
        if not _ensure_room(engine, request):
            continue
        if request.state == RequestState.BLOCKED and request.blocked_on == "blocks":
            request.state = RequestState.RUNNING_NO_SLOT if request.slot is None else RequestState.RUNNING_WITH_SLOT
            request.blocked_on = None

        table = pool.tables[request.id]
        if not engine.config.kv_payload:
            table.length += 1
            request.generated += 1
            produced.append(request)
            continue

        q, k, v = token_states(engine, request, request.total_tokens)
        block_id, slot = table.slot_of(table.length, cfg.block_size)
        write_token(pool, block_id, slot, k, v)
        table.length += 1

        if engine.config.forward_check:
            for layer in range(cfg.num_layers):
                for head in range(cfg.query_heads):
                    paged_attention_forward(pool, q[layer, head], table, table.length, layer, head // cfg.group_size)

        if request.slot is not None:
            push_window_token(cache, request.slot, q)
        request.generated += 1
        produced.append(request)

    if engine.config.clock == "simulated" and produced:
        ticks = engine.config.cost.decode_ticks(len(produced))
        engine.clock += ticks
        engine.metrics.stage_times["decode"] += ticks

    now = engine.now()
    for request in produced:
        if request.first_token_time is None:
            request.first_token_time = now
        request.last_token_time = now
        if request.generated >= request.output_len:
            _finish(engine, request)
    return produced


def _finish(engine, request):
    if engine.config.capture_final and engine.config.kv_payload:
        table = engine.pool.tables[request.id]
        ids = table.blocks
        engine.final_kv[request.id] = (
            engine.pool.keys[:, ids].reshape(engine.pool.config.num_layers, -1, *engine.pool.keys.shape[3:])[
                :, : table.length
            ].copy(),
            table.length,
        )
    finish(engine.state, request)
    engine.metrics.record_request(request)


# -----------------------------------------------------------------------------
# Compression lifecycle
# -----------------------------------------------------------------------------
def _plan_with_preemption(engine, request):
    cfg = engine.settings.compressor
    while True:
        try:
            return plan_targets(engine.pool, request.id, cfg.n_max, cfg.prefix_sharing)
        except NoFreeBlocks:
            victim = preempt(engine.state, request)
            if victim is not None:
                engine.log(f"[Preempt]: request {victim.id} at step {engine.step}")
            if victim is None or victim is request:
                return None


def launch_compressions(engine, requests):
    """Plans targets for every triggered request and marks its blocks exclusive to the compression."""
    pool = engine.pool
    tasks = []
    for request in requests:
        if not request.is_running:
            continue
        plan = _plan_with_preemption(engine, request)
        if plan is None:
            continue
        request.compressing = True
        held = [b for b in pool.tables[request.id].blocks if not is_shared(pool, b)] + plan.fresh_blocks
        with pool.lock:
            pool.compressing.update(held)
        tasks.append(CompressionTask(request=request, plan=plan, held=held))
    for task in tasks:
        task.batch_size = len(tasks)
    return tasks


def _execute(engine, task):
    config = engine.settings.compressor
    if not engine.config.kv_payload:
        return compress_blocks_only(
            engine.pool, task.request, config, task.plan, release=False, batch_size=task.batch_size
        )
    return compress_request(
        engine.pool, engine.cache, task.request, config, task.plan, release=False, batch_size=task.batch_size
    )


def _timed_execute(engine, task):
    """Worker body in wallclock mode; the task keeps its own compression time."""
    started = time.perf_counter()
    report = _execute(engine, task)
    task.elapsed = time.perf_counter() - started
    return report


def _complete(engine, task, report):
    pool = engine.pool
    with pool.lock:
        pool.compressing.difference_update(task.held)
    free_blocks(pool, report.released_blocks)
    task.request.compressing = False
    engine.reports.append(report)
    engine.metrics.compressions += 1
    engine.metrics.peak_activation = max(engine.metrics.peak_activation, report.peak_activation_estimate)


def run_compressions(engine, requests):
    """Launch step of the compression set. Returns the requests that may decode in this same step."""
    tasks = launch_compressions(engine, requests)
    if not tasks:
        return []
    cfg = engine.config
    c2 = cfg.cost.c2

    if cfg.clock == "simulated":
        engine.metrics.stage_times["compression"] += c2
        if cfg.async_compression:
            for task in tasks:
                task.due = engine.clock + c2
            engine.inflight.extend(tasks)
            return []
        for task in tasks:
            _complete(engine, task, _execute(engine, task))
        engine.clock += c2
        return [task.request for task in tasks]

    if engine.executor is None:
        engine.executor = ThreadPoolExecutor(max_workers=cfg.workers)
    started = time.perf_counter()
    for task in tasks:
        task.future = engine.executor.submit(_timed_execute, engine, task)
    if cfg.async_compression:
        engine.inflight.extend(tasks)
        return []
    for task in tasks:
        _complete(engine, task, task.future.result())
    engine.metrics.stage_times["compression"] += time.perf_counter() - started
    return [task.request for task in tasks]


def harvest_compressions(engine, block=False):
    """Applies every in-flight compression that is due (simulated) or done (wallclock), in launch order."""
    if not engine.inflight:
        return 0
    if engine.config.clock == "simulated":
        if block:
            engine.clock = max(engine.clock, min(task.due for task in engine.inflight))
        ready = [task for task in engine.inflight if task.due <= engine.clock]
        for task in ready:
            _complete(engine, task, _execute(engine, task))
    else:
        if block:
            wait([task.future for task in engine.inflight], return_when=FIRST_COMPLETED)
        ready = [task for task in engine.inflight if task.future.done()]
        for task in ready:
            _complete(engine, task, task.future.result())
            engine.metrics.stage_times["compression"] += task.elapsed
    engine.inflight = [task for task in engine.inflight if task not in ready]
    return len(ready)


# -----------------------------------------------------------------------------
# Driver
# -----------------------------------------------------------------------------
def build_requests(workload):
    return [
        Request(
            id=i,
            arrival_step=spec.arrival_step,
            prompt_tokens=list(spec.prompt_tokens),
            output_len=spec.output_len,
            seed=spec.seed,
        )
        for i, spec in enumerate(workload.requests)
    ]


def _check_step(engine, decision):
    problems = check_conservation(engine.pool)
    if problems:
        raise KVDeskError(f"block conservation broken at step {engine.step}: {problems[0]}")
    state = engine.state
    if engine.config.compression and state.slotted_count() > engine.settings.pool.max_concurrency:
        raise KVDeskError(f"{state.slotted_count()} slotted requests exceed M at step {engine.step}")
    for request in decision.decode:
        assert not request.compressing, f"request {request.id} decoded while compressing"
    for request in state.waiting:
        if request.compressed:
            raise KVDeskError(f"compressed request {request.id} was preempted")


def _check_progress(engine, decision):
    """An unblocked, idle running request implies a non-empty decode batch."""
    if decision.decode:
        return
    busy = {id(r) for r in decision.prefill + decision.compress}
    for request in engine.state.running:
        if request.state != RequestState.BLOCKED and not request.compressing and id(request) not in busy:
            raise KVDeskError(f"request {request.id} is runnable but the decode batch is empty")


def run(engine, workload, on_step=None, step_limit=None):
    """
    Drives the workload to completion: arrivals, compression harvest, admission and
    prefill, compression launch, decode. `on_step(engine, decision)` is called after
    every step; `step_limit` ends the run early without error. Returns the engine's
    EngineMetrics.
    """
    cfg = engine.config
    requests = build_requests(workload)
    pending = deque(sorted(requests, key=lambda r: (r.arrival_step, r.id)))
    state = engine.state
    engine.started = time.perf_counter()
    total = len(requests)

    try:
        while pending or state.waiting or state.running or engine.inflight:
            if step_limit is not None and engine.step >= step_limit:
                break
            if engine.step >= cfg.max_steps:
                raise KVDeskError(f"run exceeded engine.max_steps={cfg.max_steps}")
            clock_before = engine.now()

            while pending and pending[0].arrival_step <= engine.step:
                state.waiting.append(pending.popleft())

            harvested = harvest_compressions(engine)
            decision = step_schedule(state, engine.step)
            if cfg.check_invariants:
                _check_progress(engine, decision)

            prefill_tokens = 0
            prefill_started = time.perf_counter()
            for request in decision.prefill:
                prefill_tokens += prefill(engine, request)
            engine.metrics.prefill_token_writes += prefill_tokens
            if cfg.clock == "simulated":
                ticks = cfg.cost.prefill_ticks(prefill_tokens)
                engine.clock += ticks
                engine.metrics.stage_times["prefill"] += ticks
            else:
                engine.metrics.stage_times["prefill"] += time.perf_counter() - prefill_started

            rejoined = run_compressions(engine, decision.compress)
            decode_started = time.perf_counter()
            produced = decode_step(engine, decision.decode + rejoined)
            if cfg.clock == "wallclock":
                engine.metrics.stage_times["decode"] += time.perf_counter() - decode_started

            progressed = produced or decision.prefill or decision.compress or harvested
            if not progressed:
                if engine.inflight:
                    harvest_compressions(engine, block=True)
                elif pending:
                    if cfg.clock == "simulated":
                        engine.clock += cfg.cost.decode_ticks(0)
                elif state.waiting or state.running:
                    raise SchedulerStalled(
                        f"step {engine.step}: {len(state.running)} running, {len(state.waiting)} waiting, "
                        f"{engine.pool.num_free} free blocks and nothing can progress"
                    )

            if cfg.check_invariants:
                _check_step(engine, decision)
            engine.metrics.record_step(
                running=len(state.running),
                waiting=len(state.waiting),
                owned_blocks=engine.pool.num_owned,
                tokens=len(produced),
                elapsed=engine.now() - clock_before,
                compression_set=len(decision.compress),
            )
            if on_step is not None:
                on_step(engine, decision)
            engine.step += 1
            if cfg.verbose and cfg.progress_every and engine.step % cfg.progress_every == 0:
                print(f"[RunProgress]: {engine.step}|{len(state.finished)}|{total}")
    finally:
        if engine.executor is not None:
            engine.executor.shutdown(wait=True)
            engine.executor = None

    engine.metrics.total_time = engine.now()
    engine.metrics.preemptions = state.preemptions
    return engine.metrics


def run_workload(settings, workload, on_step=None, step_limit=None):
    """Fresh engine for `settings`, run to completion."""
    engine = Engine(settings)
    run(engine, workload, on_step, step_limit)
    return engine
