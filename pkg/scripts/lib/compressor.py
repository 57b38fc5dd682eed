"""
Compression of one request: window pinning, top-k tagging, compaction into the
plan's target blocks (in place, or redirected away from shared prefix blocks),
global-score relocation, layer-stride chunking and block release.
"""

from dataclasses import dataclass, field

import numpy as np

from lib.errors import BudgetExceedsLength, ConfigError
from lib.paged_store import allocate_detached, free_blocks, is_shared, unregister_prefix_block
from lib.scoring import ScoreConfig, score


@dataclass(frozen=True)
class CompressorConfig:
    n_max: int
    layer_stride: int = 1
    prefix_sharing: bool = False
    scoring: ScoreConfig = field(default_factory=ScoreConfig)

    def __post_init__(self):
        if self.n_max < 2:
            raise ConfigError(f"compressor.n_max must be >= 2, got {self.n_max}")
        if self.layer_stride < 1:
            raise ConfigError(f"compressor.layer_stride must be >= 1, got {self.layer_stride}")


@dataclass
class CompressionPlan:
    target_blocks: list
    reuse_count: int
    release_list: list
    shared_blocks: list
    reserve_block: int
    fresh_blocks: list


@dataclass
class CompressionReport:
    entries_moved: int
    total_entries_moved: int
    blocks_released: int
    layer_chunks: int
    peak_activation_estimate: int
    released_blocks: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)


# -----------------------------------------------------------------------------
# Selection
# -----------------------------------------------------------------------------
def pin_window(scores, window, length=None):
    """Gives the last `window` logical positions a score of +inf."""
    pinned = np.array(scores, dtype=np.float64, copy=True)
    flat = pinned.reshape(-1)
    if length is None:
        length = flat.size
    if window > 0:
        flat[length - window : length] = np.inf
    return pinned


def topk_tag(scores, k, length=None):
    """
    Boolean tag of the k highest scores among the first `length` positions.
    Ties prefer later positions.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flat = scores.reshape(-1)
    if length is None:
        length = flat.size
    if k > length:
        raise BudgetExceedsLength(f"budget k={k} exceeds logical length {length}")

    positions = np.arange(length)
    order = np.lexsort((-positions, -flat[:length]))
    tag = np.zeros(flat.size, dtype=bool)
    tag[order[:k]] = True
    return tag.reshape(scores.shape)


# -----------------------------------------------------------------------------
# Target planning
# -----------------------------------------------------------------------------
def plan_targets(pool, request_id, n_max, prefix_sharing=True):
    """
    Picks N_max - 1 exclusively owned target blocks plus one reserved decode block.

    Target j reuses the request's own block j unless that block is shared, in which
    case a fresh block takes its place. With the shared blocks forming the prefix of
    the table this is: no sharing -> in place; N_prefix >= N_max - 1 -> all fresh;
    otherwise N_prefix fresh + N_max - 1 - N_prefix reused. Every write then lands on
    a logical position that has already been read, so compaction stays in place safe.
    """
    table = pool.tables[request_id]
    blocks = list(table.blocks)
    if len(blocks) < n_max:
        raise ConfigError(f"request {request_id} holds {len(blocks)} blocks, compression needs {n_max}")

    shared = [b for b in blocks if prefix_sharing and is_shared(pool, b)]
    head = blocks[: n_max - 1]
    fresh_slots = [j for j, b in enumerate(head) if b in shared]

    spare_own = [b for b in blocks[n_max - 1 :] if b not in shared]
    reserve_fresh = not spare_own

    fresh = allocate_detached(pool, len(fresh_slots) + (1 if reserve_fresh else 0))
    targets = list(head)
    for j, block_id in zip(fresh_slots, fresh):
        targets[j] = block_id
    reserve = fresh[-1] if reserve_fresh else spare_own[0]

    # Reused blocks are about to be rewritten; they must not be matched by new requests
    for block_id in targets + [reserve]:
        unregister_prefix_block(pool, block_id)

    keep = set(targets) | {reserve}
    release_list = [b for b in blocks if b not in keep and b not in shared]
    return CompressionPlan(
        target_blocks=targets,
        reuse_count=n_max - 1 - len(fresh_slots),
        release_list=release_list,
        shared_blocks=shared,
        reserve_block=reserve,
        fresh_blocks=fresh,
    )


# -----------------------------------------------------------------------------
# Compaction
# -----------------------------------------------------------------------------
def compact(pool, block_table, tag, plan, layer, kv_head, global_grid=None):
    """
    Two-pointer move of the tagged entries into the target sequence: the read side walks
    logical positions block by block, the write side fills target slots in order,
    advancing to the next target every b writes. F scalars follow their K/V entries;
    for shared source blocks F comes from `global_grid` since their cache is immutable.
    Returns the number of entries written.
    """
    b = pool.config.block_size
    src_positions = np.flatnonzero(np.asarray(tag).reshape(-1))
    src_blocks = np.asarray(block_table.blocks)[src_positions // b]
    src_slots = src_positions % b

    written = np.arange(src_positions.size)
    dst_blocks = np.asarray(plan.target_blocks)[written // b]
    dst_slots = written % b

    pool.keys[layer, dst_blocks, dst_slots, kv_head] = pool.keys[layer, src_blocks, src_slots, kv_head]
    pool.values[layer, dst_blocks, dst_slots, kv_head] = pool.values[layer, src_blocks, src_slots, kv_head]

    if pool.global_scores is not None:
        moved = pool.global_scores[layer, src_blocks, src_slots, kv_head].copy()
        if global_grid is not None:
            from_shared = np.array([is_shared(pool, blk) for blk in src_blocks], dtype=bool)
            flat_grid = np.asarray(global_grid).reshape(-1)
            moved[from_shared] = flat_grid[src_positions[from_shared]]
        pool.global_scores[layer, dst_blocks, dst_slots, kv_head] = moved

    return int(src_positions.size)


# -----------------------------------------------------------------------------
# Whole-request compression
# -----------------------------------------------------------------------------
def _commit(pool, request, plan, k, release):
    """Rewrites the table to [targets..., reserve], hands the fresh targets to it and drops the rest."""
    table = pool.tables[request.id]
    released = plan.release_list + plan.shared_blocks
    table.blocks = list(plan.target_blocks) + [plan.reserve_block]
    table.length = k
    with pool.lock:
        pool.detached.difference_update(plan.fresh_blocks)
    if release:
        free_blocks(pool, released)
    request.compressed = True
    return released


def peak_activation_estimate(config, pool_config, n_blocks, batch_size=1):
    """n * l * h_q * N * b * w: score activations alive at once for a batch of n compressions."""
    b, w = pool_config.block_size, pool_config.window
    return batch_size * config.layer_stride * pool_config.query_heads * n_blocks * b * w


def compress_request(pool, cache, request, config, plan=None, release=True, batch_size=1):
    """
    Scores, tags and compacts every (layer, kv_head) in chunks of `layer_stride` layers,
    then rewrites the table to [targets..., reserved empty block] and releases the rest.
    With `release=False` the dropped blocks are only listed in the report; the caller
    frees them once it no longer treats them as held by the compression.

    The last block must be full. A prompt that overflows N_max with a partial tail
    block keeps decoding past N_max until that block fills, then compresses like any
    other request; the scores never see unwritten slots.
    """
    cfg = pool.config
    b, w = cfg.block_size, cfg.window
    table = pool.tables[request.id]
    assert len(table.blocks) >= config.n_max and table.is_last_full(b), (
        f"request {request.id} does not meet the compression trigger"
    )

    if plan is None:
        plan = plan_targets(pool, request.id, config.n_max, config.prefix_sharing)

    k = (config.n_max - 1) * b
    n_blocks = len(table.blocks)
    is_first = not request.compressed
    tags = {}
    moved = []
    chunks = 0

    for start in range(0, cfg.num_layers, config.layer_stride):
        layers = range(start, min(start + config.layer_stride, cfg.num_layers))
        chunks += 1

        selected = {}
        for layer in layers:
            for kv_head in range(cfg.kv_heads):
                final, global_grid = score(
                    pool, cache, request, layer, kv_head, config.scoring, is_first, return_global=True
                )
                tag = topk_tag(pin_window(final, w, table.length), k, table.length)
                selected[(layer, kv_head)] = (tag, global_grid)

        for (layer, kv_head), (tag, global_grid) in selected.items():
            moved.append(compact(pool, table, tag, plan, layer, kv_head, global_grid))
            tags[(layer, kv_head)] = tag

    released = _commit(pool, request, plan, k, release)

    assert all(count == k for count in moved)
    return CompressionReport(
        entries_moved=k,
        total_entries_moved=sum(moved),
        blocks_released=len(plan.release_list),
        released_blocks=released,
        layer_chunks=chunks,
        peak_activation_estimate=peak_activation_estimate(config, cfg, n_blocks, batch_size),
        tags=tags,
    )


def compress_blocks_only(pool, request, config, plan=None, release=True, batch_size=1):
    """
    Block accounting of a compression without touching K/V: the table ends up with the
    same shape compress_request gives it. Used by payload-free scheduler simulations.
    """
    table = pool.tables[request.id]
    assert len(table.blocks) >= config.n_max and table.is_last_full(pool.config.block_size), (
        f"request {request.id} does not meet the compression trigger"
    )
    if plan is None:
        plan = plan_targets(pool, request.id, config.n_max, config.prefix_sharing)
    n_blocks = len(table.blocks)
    k = (config.n_max - 1) * pool.config.block_size
    released = _commit(pool, request, plan, k, release)
    return CompressionReport(
        entries_moved=k,
        total_entries_moved=0,
        blocks_released=len(plan.release_list),
        released_blocks=released,
        layer_chunks=0,
        peak_activation_estimate=peak_activation_estimate(config, pool.config, n_blocks, batch_size),
    )
