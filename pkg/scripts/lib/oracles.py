"""
Brute-force references and randomized verification suites.

Each suite returns an OracleReport; `kvdesk.py oracle` prints them and the
tests run them at reduced sizes.
"""

import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from lib.capacity import MemoryBudget, enumerate_feasible, solve_capacity, solve_capacity_with_global
from lib.compressor import CompressorConfig, compact, compress_request, pin_window, plan_targets, topk_tag
from lib.engine import paged_attention_forward, run_workload, settings_from_config
from lib.errors import InfeasibleBudget, KVDeskError
from lib.paged_store import (
    PoolConfig,
    acquire_query_slot,
    allocate_block,
    gather_contiguous,
    init_pool,
    push_window_query,
)
from lib.scoring import (
    ScoreConfig,
    attention_scores,
    redundancy_flash,
    redundancy_from_rowsums,
    redundancy_lightning,
    redundancy_naive,
    softmax_with_temperature,
    zero_last_above,
)
from workloads.spec import generate_workload

SUITES = ("redundancy", "attention", "topk", "capacity", "scheduler", "stride")


@dataclass
class OracleReport:
    suite: str
    cases: int = 0
    failures: list = field(default_factory=list)
    max_error: float = 0.0

    @property
    def passed(self):
        return not self.failures

    def fail(self, case, message):
        self.failures.append(f"case {case}: {message}")

    def summary(self):
        status = "PASS" if self.passed else f"FAIL ({len(self.failures)} failing)"
        return f"{self.suite}: {status} over {self.cases} cases, max error {self.max_error:.3g}"


def _progress(suite, done, total, verbose):
    if verbose and (done == total or done % max(1, total // 10) == 0):
        print(f"[OracleProgress]: {suite}|{done}|{total}")


def _tracked(results, suite, total, verbose):
    for done, result in enumerate(results, start=1):
        _progress(suite, done, total, verbose)
        yield result


# -----------------------------------------------------------------------------
# Dense references
# -----------------------------------------------------------------------------
def dense_attention_output(query_vec, keys, values):
    q = np.asarray(query_vec, dtype=np.float64)
    logits = np.asarray(keys, dtype=np.float64) @ q / math.sqrt(q.shape[-1])
    weights = softmax_with_temperature(logits)
    return weights @ np.asarray(values, dtype=np.float64)


def dense_attention_scores(queries, keys, block_size):
    """
    Single pass over the contiguous keys: queries [w][G][d] sit at the last w positions,
    keys [n][d]; causal softmax per head, max over heads, mean over the window.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    w, n = queries.shape[0], keys.shape[0]
    logits = np.einsum("ugd,nd->gun", queries, keys) / math.sqrt(keys.shape[-1])
    future = np.arange(n)[None, :] > (n - w + np.arange(w))[:, None]
    logits[:, future] = -np.inf
    probs = softmax_with_temperature(logits, axis=-1)
    return probs.max(axis=0).mean(axis=0).reshape(-1, block_size)


def redundancy_block_diagonal(block_keys, p, tau=1.0):
    """Naive redundancy with every cross-block similarity removed before zeroing."""
    keys = np.asarray(block_keys, dtype=np.float64)
    n_blocks, b = keys.shape[0], keys.shape[1]
    flat = keys.reshape(-1, keys.shape[-1])
    unit = flat / np.linalg.norm(flat, axis=-1, keepdims=True)
    similarity = unit @ unit.T
    block_of = np.repeat(np.arange(n_blocks), b)
    similarity[block_of[:, None] != block_of[None, :]] = 0.0
    np.fill_diagonal(similarity, 0.0)
    zero_last_above(similarity, p)
    return redundancy_from_rowsums(similarity.sum(axis=1), tau)


def exhaustive_topk(scores, k, window, length):
    """Positions kept by sorting every candidate: window pinned, ties to later positions."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)[:length]
    pinned = set(range(length - window, length))
    order = sorted(range(length), key=lambda i: (i not in pinned, -flat[i], -i))
    return set(order[:k])


# -----------------------------------------------------------------------------
# Random fixtures
# -----------------------------------------------------------------------------
def random_paged_request(rng, n_blocks, block_size, head_dim, num_layers=1, kv_heads=1, query_heads=1, window=1):
    """Pool with one request (id 0) whose blocks are a random permutation of a larger pool."""
    total = n_blocks + int(rng.integers(0, n_blocks + 1))
    config = PoolConfig(
        num_layers=num_layers,
        total_blocks=total,
        block_size=block_size,
        kv_heads=kv_heads,
        query_heads=query_heads,
        head_dim=head_dim,
        max_concurrency=1,
        window=window,
        global_score_enabled=True,
        dtype="float64",
    )
    pool, cache = init_pool(config)
    pool.free_list = deque(int(i) for i in rng.permutation(total))
    for _ in range(n_blocks):
        allocate_block(pool, 0)
    pool.keys[:] = rng.standard_normal(pool.keys.shape)
    pool.values[:] = rng.standard_normal(pool.values.shape)
    pool.global_scores[:] = rng.random(pool.global_scores.shape)
    table = pool.tables[0]
    table.length = n_blocks * block_size
    return pool, cache, table


def _fill_window(rng, cache, config):
    slot = acquire_query_slot(cache, 0)
    for layer in range(config.num_layers):
        for _ in range(config.window):
            push_window_query(cache, slot, layer, rng.standard_normal((config.query_heads, config.head_dim)))
    return slot


# -----------------------------------------------------------------------------
# Suites
# -----------------------------------------------------------------------------
def run_redundancy_suite(cases=500, seed=0, verbose=False):
    """flash == naive and lightning == block-diagonal naive, within 1e-6."""
    rng = np.random.default_rng(seed)
    report = OracleReport("redundancy")
    for case in range(cases):
        n_blocks = int(rng.integers(1, 9))
        b = int(rng.integers(2, 33))
        d = int(rng.integers(2, 17))
        p = float(rng.choice([0.3, 0.5, 0.8]))
        tau = float(rng.uniform(0.2, 2.0))
        pool, _, table = random_paged_request(rng, n_blocks, b, d)
        keys = pool.keys[0, table.blocks, :, 0]

        naive = redundancy_naive(keys, p, tau)
        flash = redundancy_flash(pool, table, 0, 0, p, tau)
        lightning = redundancy_lightning(pool, table, 0, 0, p, tau)
        diagonal = redundancy_block_diagonal(keys, p, tau)

        error = max(np.max(np.abs(flash - naive)), np.max(np.abs(lightning - diagonal)))
        report.max_error = max(report.max_error, float(error))
        if error > 1e-6:
            report.fail(case, f"N={n_blocks} b={b} d={d} p={p}: error {error:.3g}")
        report.cases += 1
        _progress(report.suite, case + 1, cases, verbose)
    return report


def run_attention_suite(cases=200, seed=0, verbose=False):
    """Paged forward vs contiguous gather (1e-5) and paged scores vs a dense single pass (1e-6)."""
    rng = np.random.default_rng(seed)
    report = OracleReport("attention")
    for case in range(cases):
        n_blocks = int(rng.integers(1, 7))
        b = int(rng.integers(2, 17))
        d = int(rng.integers(2, 17))
        kv_heads = int(rng.integers(1, 3))
        group = int(rng.integers(1, 3))
        window = int(rng.integers(1, b))
        pool, cache, table = random_paged_request(
            rng, n_blocks, b, d, kv_heads=kv_heads, query_heads=kv_heads * group, window=window
        )
        config = pool.config
        kv_head = int(rng.integers(0, kv_heads))

        length = int(rng.integers(1, n_blocks * b + 1))
        query = rng.standard_normal(d)
        keys, values = gather_contiguous(pool, table, length, 0, kv_head)
        paged = paged_attention_forward(pool, query, table, length, 0, kv_head)
        forward_error = np.max(np.abs(paged - dense_attention_output(query, keys, values)))

        slot = _fill_window(rng, cache, config)
        scores = attention_scores(pool, cache, slot, table, 0, kv_head)
        all_keys, _ = gather_contiguous(pool, table, table.length, 0, kv_head)
        queries = cache.queries[0, slot, :, kv_head * group : (kv_head + 1) * group]
        score_error = np.max(np.abs(scores - dense_attention_scores(queries, all_keys, b)))

        report.max_error = max(report.max_error, float(forward_error), float(score_error))
        if forward_error > 1e-5:
            report.fail(case, f"forward error {forward_error:.3g} (len={length}, b={b})")
        if score_error > 1e-6:
            report.fail(case, f"score error {score_error:.3g} (N={n_blocks}, b={b}, w={window})")
        report.cases += 1
        _progress(report.suite, case + 1, cases, verbose)
    return report


def run_topk_suite(cases=200, seed=0, verbose=False):
    """Tag equals exhaustive top-k; compaction keeps payloads bit-identical, in order, k per head."""
    rng = np.random.default_rng(seed)
    report = OracleReport("topk")
    for case in range(cases):
        n_max = int(rng.integers(2, 6))
        n_blocks = n_max + int(rng.integers(0, 4))
        b = int(rng.integers(2, 17))
        window = int(rng.integers(1, b))
        pool, _, table = random_paged_request(rng, n_blocks, b, int(rng.integers(2, 9)), window=window)
        length = table.length
        k = (n_max - 1) * b

        # Coarse scores force ties
        scores = rng.integers(0, 6, size=(n_blocks, b)).astype(np.float64)
        tag = topk_tag(pin_window(scores, window, length), k, length)
        expected = exhaustive_topk(scores, k, window, length)
        kept = np.flatnonzero(tag.reshape(-1))
        if set(kept.tolist()) != expected:
            report.fail(case, "tag differs from exhaustive top-k")
        if not set(range(length - window, length)) <= set(kept.tolist()):
            report.fail(case, "window position dropped")

        keys, values = gather_contiguous(pool, table, length, 0, 0)
        flat_f = pool.global_scores[0, table.blocks, :, 0].reshape(-1).copy()
        plan = plan_targets(pool, 0, n_max, prefix_sharing=False)
        written = compact(pool, table, tag, plan, 0, 0)
        retained = SimpleNamespace(blocks=plan.target_blocks, length=k)
        new_keys, new_values = gather_contiguous(pool, retained, k, 0, 0)
        new_f = pool.global_scores[0, plan.target_blocks, :, 0].reshape(-1)

        if written != k:
            report.fail(case, f"{written} entries written, expected {k}")
        if not (
            np.array_equal(new_keys, keys[kept])
            and np.array_equal(new_values, values[kept])
            and np.array_equal(new_f, flat_f[kept])
        ):
            report.fail(case, "retained payloads differ or lost their order")
        report.cases += 1
        _progress(report.suite, case + 1, cases, verbose)
    return report


def run_capacity_suite(cases=200, seed=0, verbose=False):
    """Closed-form M equals the brute-force optimum; every plan is feasible; the global plan is no larger."""
    rng = np.random.default_rng(seed)
    report = OracleReport("capacity")
    for case in range(cases):
        budget = MemoryBudget(
            m_available=int(rng.integers(1, 100_001)),
            m_kv=int(rng.integers(1, 65)),
            m_q=int(rng.integers(1, 257)),
            n_max=int(rng.integers(2, 17)),
            d=int(rng.integers(1, 129)),
        )
        try:
            closed = solve_capacity(budget)
        except InfeasibleBudget:
            closed = None
        try:
            tight = enumerate_feasible(budget)
        except InfeasibleBudget:
            tight = None

        if (closed is None) != (tight is None):
            report.fail(case, f"feasibility disagrees for {budget}")
        elif closed is not None:
            if closed.max_concurrency != tight.max_concurrency:
                report.fail(case, f"M {closed.max_concurrency} != brute force {tight.max_concurrency}")
            if not closed.satisfies(budget) or not tight.satisfies(budget):
                report.fail(case, f"infeasible plan for {budget}")
            try:
                with_global = solve_capacity_with_global(budget)
            except InfeasibleBudget:
                with_global = None
            if with_global is not None and (
                with_global.max_concurrency > closed.max_concurrency or with_global.total_blocks > closed.total_blocks
            ):
                report.fail(case, "global-score plan exceeds the base plan")
            if with_global is not None and not with_global.satisfies(budget, with_global=True):
                report.fail(case, "global-score plan violates its budget")
        report.cases += 1
        _progress(report.suite, case + 1, cases, verbose)
    return report


def scheduler_settings(rng, mode, prefix_sharing):
    """Small randomized engine config for lifecycle simulations."""
    b = 8
    n_max = int(rng.integers(2, 5))
    total = int(rng.integers(3 * n_max, 8 * n_max))
    return settings_from_config(
        {
            "pool": {
                "num_layers": 1,
                "block_size": b,
                "kv_heads": 1,
                "query_heads": 2,
                "head_dim": 8,
                "window": 2,
                "total_blocks": total,
                "max_concurrency": int(rng.integers(1, total // n_max + 1)),
            },
            "compressor": {"n_max": n_max},
            "scheduler": {"mode": mode, "prefix_sharing": prefix_sharing},
            "engine": {"seed": int(rng.integers(0, 2**31))},
        }
    )


def scheduler_workload(rng, steps, prefix_sharing):
    generator = {
        "count": max(4, steps // 6),
        "prompt": {"dist": "uniform", "low": 4, "high": 40},
        "output": {"dist": "uniform", "low": 4, "high": 80},
        "arrival": {"rate": 0.5},
        "seed": int(rng.integers(0, 2**31)),
    }
    if prefix_sharing:
        generator["shared_prefix"] = {"groups": 2, "len": 24}
    return generate_workload(generator)


def _scheduler_case(mode, prefix_sharing, run_seed, seed, steps):
    """One lifecycle simulation on a payload-free engine. Returns (label, failure messages)."""
    rng = np.random.default_rng([seed, run_seed, int(prefix_sharing), mode == "hybrid"])
    settings = scheduler_settings(rng, mode, prefix_sharing)
    settings = replace(settings, engine=replace(settings.engine, check_invariants=True, kv_payload=False))
    workload = scheduler_workload(rng, steps, prefix_sharing)
    admitted = []

    def on_step(engine, decision):
        admitted.extend(r.id for r in decision.prefill)

    label = f"{mode}/prefix={prefix_sharing}/seed={run_seed}"
    failures = []
    try:
        engine = run_workload(settings, workload, on_step=on_step, step_limit=steps)
    except (KVDeskError, AssertionError) as e:
        failures.append(str(e))
    else:
        if mode == "constrained" and not prefix_sharing:
            if engine.state.preemptions:
                failures.append(f"{engine.state.preemptions} preemptions in constrained mode")
            if admitted != sorted(admitted):
                failures.append("prefill order broke FCFS")
    return label, failures


def run_scheduler_suite(steps=2000, seeds=3, seed=0, verbose=False, workers=1):
    """
    Lifecycle invariants for every mode x prefix-sharing combination: block conservation,
    slot ceiling, no preemption in constrained mode without sharing, compressed requests
    never preempted, progress, no stall, FCFS prefill order in constrained mode.
    Simulations only track blocks and lengths; with workers > 1 they run in separate processes.
    """
    report = OracleReport("scheduler")
    cases = [
        (mode, prefix, run_seed, seed, steps)
        for mode in ("constrained", "hybrid")
        for prefix in (False, True)
        for run_seed in range(seeds)
    ]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = executor.map(_scheduler_case, *zip(*cases))
            outcomes = list(_tracked(results, report.suite, len(cases), verbose))
    else:
        outcomes = list(_tracked((_scheduler_case(*case) for case in cases), report.suite, len(cases), verbose))

    for label, failures in outcomes:
        for message in failures:
            report.fail(label, message)
        report.cases += 1
    return report


def run_stride_suite(cases=20, seed=0, verbose=False):
    """Compression results are bit-identical for layer strides 1, 2 and L."""
    rng = np.random.default_rng(seed)
    report = OracleReport("stride")
    for case in range(cases):
        num_layers = int(rng.integers(2, 5))
        n_max = int(rng.integers(2, 5))
        n_blocks = n_max + int(rng.integers(0, 3))
        b = int(rng.integers(4, 13))
        window = int(rng.integers(1, 4))
        case_seed = int(rng.integers(0, 2**31))
        scoring = ScoreConfig(redundancy=str(rng.choice(["naive", "flash", "lightning"])))

        results = []
        for stride in sorted({1, 2, num_layers}):
            # Same seed, same pool: every stride starts from identical state
            case_rng = np.random.default_rng(case_seed)
            pool, cache, _ = random_paged_request(
                case_rng, n_blocks, b, 8, num_layers=num_layers, kv_heads=2, query_heads=4, window=window
            )
            slot = _fill_window(case_rng, cache, pool.config)
            request = SimpleNamespace(id=0, slot=slot, compressed=False)
            config = CompressorConfig(n_max=n_max, layer_stride=stride, scoring=scoring)
            compress_request(pool, cache, request, config)
            retained = pool.tables[0]
            results.append(
                (
                    pool.keys[:, retained.blocks].copy(),
                    pool.values[:, retained.blocks].copy(),
                    pool.global_scores[:, retained.blocks[:-1]].copy(),
                )
            )
        first = results[0]
        for other in results[1:]:
            if not all(np.array_equal(a[:, : n_max - 1], o[:, : n_max - 1]) for a, o in zip(first, other)):
                report.fail(case, "retained state depends on the layer stride")
        report.cases += 1
        _progress(report.suite, case + 1, cases, verbose)
    return report


def run_suite(name, cases=None, seed=0, steps=2000, seeds=3, verbose=False, workers=1):
    if name == "redundancy":
        return run_redundancy_suite(cases or 500, seed, verbose)
    if name == "attention":
        return run_attention_suite(cases or 200, seed, verbose)
    if name == "topk":
        return run_topk_suite(cases or 200, seed, verbose)
    if name == "capacity":
        return run_capacity_suite(cases or 200, seed, verbose)
    if name == "scheduler":
        return run_scheduler_suite(steps, seeds, seed, verbose, workers)
    if name == "stride":
        return run_stride_suite(cases or 20, seed, verbose)
    raise KVDeskError(f"unknown oracle suite '{name}' (choose from {', '.join(SUITES)})")
