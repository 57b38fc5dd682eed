"""
Pre-allocated paged KV storage.

Owns the key/value tensors K, V shaped [layer][block][slot][kv_head][dim], the
optional global-score cache F shaped [layer][block][slot][kv_head], the query
slot cache Q shaped [layer][slot][window][q_head][dim], the free list, the
per-block reference counts and the prefix-sharing index.

Ownership contract: pool metadata (free list, ref counts, tables, prefix index,
slot bindings) is only mutated under `pool.lock`. Tensor payloads may be touched
concurrently for different blocks because a request under compression is never
in a decode batch; blocks of in-flight compressions are recorded in
`pool.compressing` and every decode write asserts it is not one of them.
"""

import hashlib
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from lib.errors import (
    ConfigError,
    DoubleFree,
    NoFreeBlocks,
    SharedBlockWrite,
    SlotOutOfRange,
    UnboundSlot,
)

DTYPES = {"float32": np.float32, "float64": np.float64}


# -----------------------------------------------------------------------------
# Types
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class PoolConfig:
    num_layers: int
    total_blocks: int
    block_size: int
    kv_heads: int
    query_heads: int
    head_dim: int
    max_concurrency: int
    window: int
    global_score_enabled: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in (
            "num_layers",
            "total_blocks",
            "block_size",
            "kv_heads",
            "query_heads",
            "head_dim",
            "max_concurrency",
            "window",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"pool.{name} must be positive, got {getattr(self, name)}")
        if self.query_heads % self.kv_heads:
            raise ConfigError(
                f"pool.query_heads ({self.query_heads}) must be a multiple of pool.kv_heads ({self.kv_heads})"
            )
        if self.window >= self.block_size:
            raise ConfigError(f"pool.window ({self.window}) must be smaller than pool.block_size ({self.block_size})")
        if self.dtype not in DTYPES:
            raise ConfigError(f"pool.dtype must be one of {sorted(DTYPES)}, got '{self.dtype}'")

    @property
    def group_size(self):
        return self.query_heads // self.kv_heads


@dataclass
class BlockTable:
    blocks: list = field(default_factory=list)
    length: int = 0

    def last_fill(self, block_size):
        """Tokens held by the last block (0 for an empty table)."""
        if not self.blocks:
            return 0
        return self.length - (len(self.blocks) - 1) * block_size

    def is_last_full(self, block_size):
        return bool(self.blocks) and self.length == len(self.blocks) * block_size

    def slot_of(self, position, block_size):
        """Physical (block id, slot) of a logical position."""
        return self.blocks[position // block_size], position % block_size


class PagedPool:
    def __init__(self, config):
        self.config = config
        dtype = DTYPES[config.dtype]
        shape = (config.num_layers, config.total_blocks, config.block_size, config.kv_heads, config.head_dim)
        self.keys = np.zeros(shape, dtype=dtype)
        self.values = np.zeros(shape, dtype=dtype)
        self.global_scores = np.zeros(shape[:-1], dtype=dtype) if config.global_score_enabled else None

        self.free_list = deque(range(config.total_blocks))
        self.ref_counts = [0] * config.total_blocks
        self.tables = {}
        self.block_hash = {}
        self.prefix_index = {}
        self.compressing = set()
        self.detached = set()
        self.lock = threading.Lock()

    @property
    def num_free(self):
        return len(self.free_list)

    @property
    def num_owned(self):
        return self.config.total_blocks - len(self.free_list)

    def table(self, request_id):
        return self.tables.setdefault(request_id, BlockTable())


class QuerySlotCache:
    def __init__(self, config):
        self.config = config
        self.queries = np.zeros(
            (config.num_layers, config.max_concurrency, config.window, config.query_heads, config.head_dim),
            dtype=DTYPES[config.dtype],
        )
        self.free_slots = deque(range(config.max_concurrency))
        self.bindings = {}
        self.cursor = np.zeros((config.max_concurrency, config.num_layers), dtype=np.int64)
        self.fill = np.zeros((config.max_concurrency, config.num_layers), dtype=np.int64)
        self.lock = threading.Lock()

    def is_full(self, slot):
        return bool(np.all(self.fill[slot] == self.config.window))


# -----------------------------------------------------------------------------
# Pool lifecycle & block allocation
# -----------------------------------------------------------------------------
def init_pool(config):
    """Zero-initialised K/V(/F) pool and query-slot cache, every block and slot free."""
    return PagedPool(config), QuerySlotCache(config)


def allocate_block(pool, request_id):
    """Pops a free block, gives it ref_count 1 and appends it to the request's table."""
    with pool.lock:
        if not pool.free_list:
            raise NoFreeBlocks(f"no free blocks for request {request_id}")
        block_id = pool.free_list.popleft()
        pool.ref_counts[block_id] = 1
        pool.table(request_id).blocks.append(block_id)
    return block_id


def allocate_detached(pool, count):
    """Allocates `count` blocks that no table references yet (compression targets)."""
    with pool.lock:
        if len(pool.free_list) < count:
            raise NoFreeBlocks(f"need {count} free blocks, {len(pool.free_list)} available")
        blocks = [pool.free_list.popleft() for _ in range(count)]
        for block_id in blocks:
            pool.ref_counts[block_id] = 1
        pool.detached.update(blocks)
    return blocks


def free_blocks(pool, block_ids):
    """Drops one reference per id; a block returns to the free list when its count reaches 0."""
    with pool.lock:
        for block_id in block_ids:
            if pool.ref_counts[block_id] <= 0:
                raise DoubleFree(f"block {block_id} is already free")
            pool.ref_counts[block_id] -= 1
            if pool.ref_counts[block_id] == 0:
                _unregister_locked(pool, block_id)
                pool.free_list.append(block_id)


def release_request(pool, request_id):
    """Frees every block referenced by the request's table and forgets the table."""
    table = pool.tables.pop(request_id, None)
    if table is not None and table.blocks:
        free_blocks(pool, table.blocks)


def is_shared(pool, block_id):
    return pool.ref_counts[block_id] > 1


def check_conservation(pool):
    """
    Verifies free + distinct owned == N_total and that every ref count equals
    the number of tables holding the block (a detached compression target counts
    as one holder). Returns a list of violations.
    """
    problems = []
    membership = [0] * pool.config.total_blocks
    for request_id, table in pool.tables.items():
        if len(set(table.blocks)) != len(table.blocks):
            problems.append(f"request {request_id} lists a block twice")
        for block_id in table.blocks:
            membership[block_id] += 1
    for block_id in pool.detached:
        membership[block_id] += 1

    free = set(pool.free_list)
    if len(free) != len(pool.free_list):
        problems.append("free list holds duplicates")
    owned = {b for b, count in enumerate(membership) if count}
    if free & owned:
        problems.append(f"blocks both free and owned: {sorted(free & owned)}")
    if len(free) + len(owned) != pool.config.total_blocks:
        problems.append(f"{len(free)} free + {len(owned)} owned != {pool.config.total_blocks}")
    for block_id, count in enumerate(membership):
        if pool.ref_counts[block_id] != count:
            problems.append(f"block {block_id}: ref_count {pool.ref_counts[block_id]} but {count} tables")
    return problems


# -----------------------------------------------------------------------------
# K/V payload access
# -----------------------------------------------------------------------------
def _check_writable(pool, block_id, slot):
    if not 0 <= slot < pool.config.block_size:
        raise SlotOutOfRange(f"slot {slot} outside block of size {pool.config.block_size}")
    if pool.ref_counts[block_id] > 1:
        raise SharedBlockWrite(f"block {block_id} is shared by {pool.ref_counts[block_id]} requests")
    assert block_id not in pool.compressing, f"block {block_id} written while its request is compressing"


def write_kv(pool, layer, block_id, slot, head, key_vec, value_vec):
    _check_writable(pool, block_id, slot)
    pool.keys[layer, block_id, slot, head] = key_vec
    pool.values[layer, block_id, slot, head] = value_vec


def read_kv(pool, layer, block_id, slot, head):
    if not 0 <= slot < pool.config.block_size:
        raise SlotOutOfRange(f"slot {slot} outside block of size {pool.config.block_size}")
    return pool.keys[layer, block_id, slot, head].copy(), pool.values[layer, block_id, slot, head].copy()


def write_token(pool, block_id, slot, keys, values):
    """Writes one token's K/V for every layer and kv-head at once ([layer][kv_head][dim])."""
    _check_writable(pool, block_id, slot)
    pool.keys[:, block_id, slot] = keys
    pool.values[:, block_id, slot] = values


def append_token(pool, request_id, keys, values):
    """Writes a token at the end of the request's table, allocating a block when the last one is full."""
    table = pool.table(request_id)
    block_size = pool.config.block_size
    if not table.blocks or table.is_last_full(block_size):
        allocate_block(pool, request_id)
    block_id, slot = table.slot_of(table.length, block_size)
    write_token(pool, block_id, slot, keys, values)
    table.length += 1
    return block_id


def gather_contiguous(pool, block_table, logical_len, layer, head):
    """Dense copies of the first `logical_len` keys and values of a table, in logical order."""
    block_size = pool.config.block_size
    n_blocks = -(-logical_len // block_size)
    ids = block_table.blocks[:n_blocks]
    keys = pool.keys[layer, ids, :, head].reshape(-1, pool.config.head_dim)[:logical_len]
    values = pool.values[layer, ids, :, head].reshape(-1, pool.config.head_dim)[:logical_len]
    return keys.copy(), values.copy()


# -----------------------------------------------------------------------------
# Prefix sharing
# -----------------------------------------------------------------------------
def block_hash_chain(tokens, block_size):
    """Content hash of every full block, each chained with its predecessor's hash."""
    chain = []
    parent = b""
    tokens = np.asarray(tokens, dtype=np.int64)
    for start in range(0, len(tokens) - block_size + 1, block_size):
        digest = hashlib.blake2b(parent + tokens[start : start + block_size].tobytes(), digest_size=16).digest()
        chain.append(digest)
        parent = digest
    return chain


def register_prefix_block(pool, block_id, block_hash):
    """Publishes a fully written prompt block for later matches (first writer wins)."""
    with pool.lock:
        if block_hash in pool.prefix_index or block_id in pool.block_hash:
            return
        pool.prefix_index[block_hash] = block_id
        pool.block_hash[block_id] = block_hash


def unregister_prefix_block(pool, block_id):
    """Removes a block from the prefix index before its content is rewritten."""
    with pool.lock:
        _unregister_locked(pool, block_id)


def _unregister_locked(pool, block_id):
    block_hash = pool.block_hash.pop(block_id, None)
    if block_hash is not None and pool.prefix_index.get(block_hash) == block_id:
        del pool.prefix_index[block_hash]


def match_prefix(pool, token_hash_chain, request_id=None):
    """
    Longest run of cached full blocks matching the chain. Each matched block gains
    a reference and, when a request id is given, is appended to that request's table.
    """
    matched = []
    with pool.lock:
        for block_hash in token_hash_chain:
            block_id = pool.prefix_index.get(block_hash)
            if block_id is None:
                break
            matched.append(block_id)
        for block_id in matched:
            pool.ref_counts[block_id] += 1
        if request_id is not None and matched:
            table = pool.table(request_id)
            table.blocks.extend(matched)
            table.length += len(matched) * pool.config.block_size
    return matched, len(matched) * pool.config.block_size


# -----------------------------------------------------------------------------
# Query slots (observation window)
# -----------------------------------------------------------------------------
def acquire_query_slot(cache, request_id):
    """Binds a free slot to the request; None when every slot is taken."""
    with cache.lock:
        if not cache.free_slots:
            return None
        slot = cache.free_slots.popleft()
        cache.bindings[slot] = request_id
        cache.cursor[slot] = 0
        cache.fill[slot] = 0
    return slot


def release_query_slot(cache, slot):
    with cache.lock:
        if slot not in cache.bindings:
            raise UnboundSlot(f"slot {slot} is not bound")
        del cache.bindings[slot]
        cache.free_slots.append(slot)


def push_window_query(cache, slot, layer, query_vec):
    """Ring-buffer push of one token's query states ([q_head][dim]) for one layer."""
    if slot not in cache.bindings:
        raise UnboundSlot(f"slot {slot} is not bound")
    w = cache.config.window
    cursor = cache.cursor[slot, layer]
    cache.queries[layer, slot, cursor] = query_vec
    cache.cursor[slot, layer] = (cursor + 1) % w
    cache.fill[slot, layer] = min(cache.fill[slot, layer] + 1, w)


def push_window_token(cache, slot, queries):
    """Pushes one token's query states for every layer ([layer][q_head][dim])."""
    for layer in range(cache.config.num_layers):
        push_window_query(cache, slot, layer, queries[layer])


def window_queries(cache, slot, layer):
    """Stored query states of one layer, oldest first: [fill][q_head][dim]."""
    fill = int(cache.fill[slot, layer])
    data = cache.queries[layer, slot]
    if fill < cache.config.window:
        return data[:fill].copy()
    cursor = int(cache.cursor[slot, layer])
    return np.concatenate([data[cursor:], data[:cursor]])


def reset_window(cache, slot):
    """Empties a bound slot's window for every layer."""
    if slot not in cache.bindings:
        raise UnboundSlot(f"slot {slot} is not bound")
    cache.cursor[slot] = 0
    cache.fill[slot] = 0
