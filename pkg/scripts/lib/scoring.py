"""
Importance scoring of cached KV entries for one (request, layer, kv_head).

Pipeline (in order): paged attention scores -> global score update -> sequence max
pooling -> redundancy score with temperature softmax -> S - lambda * R.

All score grids are float64 arrays shaped [blocks][block_size].
"""

import math
from dataclasses import dataclass

import numpy as np

from lib.errors import ConfigError, GlobalDisabled, WindowNotFull, ZeroNormKey
from lib.paged_store import is_shared, window_queries

POOLING_POLICIES = ("never", "first-only", "always")
REDUNDANCY_VARIANTS = ("naive", "flash", "lightning")


@dataclass(frozen=True)
class ScoreConfig:
    alpha: float = 0.8
    lam: float = 0.2
    tau: float = 0.4
    p: float = 0.8
    pooling: str = "first-only"
    kernel: int = 7
    redundancy: str = "lightning"
    use_global: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"scoring.alpha must be in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"scoring.lambda must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ConfigError(f"scoring.tau must be > 0, got {self.tau}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"scoring.p must be in [0, 1], got {self.p}")
        if self.pooling not in POOLING_POLICIES:
            raise ConfigError(f"scoring.pooling must be one of {POOLING_POLICIES}, got '{self.pooling}'")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"scoring.kernel must be a positive odd integer, got {self.kernel}")
        if self.redundancy not in REDUNDANCY_VARIANTS:
            raise ConfigError(f"scoring.redundancy must be one of {REDUNDANCY_VARIANTS}, got '{self.redundancy}'")


# -----------------------------------------------------------------------------
# Softmax
# -----------------------------------------------------------------------------
def softmax_with_temperature(x, tau=1.0, axis=-1):
    """softmax(x / tau) with max subtraction."""
    x = np.asarray(x, dtype=np.float64) / tau
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


# -----------------------------------------------------------------------------
# Attention scores
# -----------------------------------------------------------------------------
def block_attention_logits(window_queries, block_keys, is_last_block, query_positions=None, key_positions=None):
    """
    Q K^T / sqrt(d) for one block: [w][d] x [b][d] -> [w][b].

    With explicit positions, a key later than the query is masked. Otherwise the
    last block is assumed full, so window row u sits at block position u + b - w
    and positions v > u + b - w are masked.
    """
    q = np.asarray(window_queries, dtype=np.float64)
    k = np.asarray(block_keys, dtype=np.float64)
    logits = q @ k.T / math.sqrt(q.shape[-1])

    if query_positions is not None and key_positions is not None:
        future = np.asarray(key_positions)[None, :] > np.asarray(query_positions)[:, None]
        logits[future] = -np.inf
    elif is_last_block:
        w, b = logits.shape
        u = np.arange(w)[:, None]
        v = np.arange(b)[None, :]
        logits[v > u + b - w] = -np.inf
    return logits


def attention_scores(pool, cache, slot, block_table, layer, kv_head):
    """
    Window attention over the paged keys, softmax per query head across all N*b
    positions, max-reduced over the kv_head's query group, averaged over the window.
    """
    cfg = pool.config
    w, b = cfg.window, cfg.block_size
    queries = window_queries(cache, slot, layer)
    if len(queries) < w:
        raise WindowNotFull(f"slot {slot} holds {len(queries)} of {w} window queries")

    group = queries[:, kv_head * cfg.group_size : (kv_head + 1) * cfg.group_size]
    length = block_table.length
    n_blocks = len(block_table.blocks)
    query_positions = np.arange(length - w, length)

    logits = np.empty((cfg.group_size, w, n_blocks * b))
    for i, block_id in enumerate(block_table.blocks):
        keys = pool.keys[layer, block_id, :, kv_head]
        key_positions = np.arange(i * b, (i + 1) * b)
        for h in range(cfg.group_size):
            logits[h, :, i * b : (i + 1) * b] = block_attention_logits(
                group[:, h],
                keys,
                is_last_block=i == n_blocks - 1,
                query_positions=query_positions,
                key_positions=key_positions,
            )

    probs = softmax_with_temperature(logits, 1.0, axis=-1)
    return probs.max(axis=0).mean(axis=0).reshape(n_blocks, b)


# -----------------------------------------------------------------------------
# Global score
# -----------------------------------------------------------------------------
def update_global_scores(scores, pool, block_table, layer, kv_head, alpha, is_compressed):
    """
    Uncompressed requests have no history: F <- S. Compressed requests keep a decayed
    running max on every block but the last (fresh tokens): S <- max(alpha * F, S), F <- S.
    Shared blocks are immutable, their F entries are left untouched.
    """
    if pool.global_scores is None:
        raise GlobalDisabled("pool was built without a global-score cache")

    blocks = block_table.blocks
    updated = np.array(scores, dtype=np.float64, copy=True)
    if is_compressed and len(blocks) > 1:
        history = pool.global_scores[layer, blocks[:-1], :, kv_head].astype(np.float64)
        updated[:-1] = np.maximum(alpha * history, updated[:-1])

    for i, block_id in enumerate(blocks):
        if not is_shared(pool, block_id):
            pool.global_scores[layer, block_id, :, kv_head] = updated[i]
    return updated


# -----------------------------------------------------------------------------
# Pooling
# -----------------------------------------------------------------------------
def max_pool_scores(scores, kernel):
    """Stride-1 sliding max of odd width over the flattened sequence, edge-replicated padding."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"pooling kernel must be a positive odd integer, got {kernel}")
    scores = np.asarray(scores, dtype=np.float64)
    if kernel == 1:
        return scores.copy()
    flat = scores.reshape(-1)
    padded = np.pad(flat, kernel // 2, mode="edge")
    pooled = np.lib.stride_tricks.sliding_window_view(padded, kernel).max(axis=-1)
    return pooled.reshape(scores.shape)


# -----------------------------------------------------------------------------
# Redundancy
# -----------------------------------------------------------------------------
def _unit_rows(keys):
    keys = np.asarray(keys, dtype=np.float64)
    norms = np.linalg.norm(keys, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormKey("cosine similarity undefined for a zero-norm key")
    return keys / norms


def zero_last_above(similarity, p, skip_columns=None):
    """
    Zeroes, per column, the last (largest row index) entry strictly above p, in place.
    Columns flagged in `skip_columns` are left alone. Returns the columns that were zeroed.
    """
    above = similarity > p
    if skip_columns is not None:
        above &= ~skip_columns[None, :]
    hit = above.any(axis=0)
    rows = similarity.shape[0] - 1 - np.argmax(above[::-1], axis=0)
    cols = np.nonzero(hit)[0]
    similarity[rows[cols], cols] = 0.0
    return hit


def redundancy_from_rowsums(row_sums, tau=1.0):
    """Length normalisation then softmax over the sequence."""
    row_sums = np.asarray(row_sums, dtype=np.float64)
    return softmax_with_temperature(row_sums / row_sums.size, tau)


def redundancy_naive(block_keys, p, tau=1.0):
    """Full [N*b][N*b] cosine matrix: diagonal and each column's last entry above p zeroed."""
    keys = np.asarray(block_keys)
    unit = _unit_rows(keys.reshape(-1, keys.shape[-1]))
    similarity = unit @ unit.T
    np.fill_diagonal(similarity, 0.0)
    zero_last_above(similarity, p)
    return redundancy_from_rowsums(similarity.sum(axis=1), tau)


def _table_unit_keys(pool, block_table, layer, kv_head):
    keys = pool.keys[layer, block_table.blocks, :, kv_head]
    return _unit_rows(keys)


def redundancy_flash(pool, block_table, layer, kv_head, p, tau=1.0):
    """
    Block-pair streaming form of the naive score. For every column block m, row
    blocks are visited from the last one backwards; a per-column zero-out tag makes
    sure only the globally last above-threshold entry is zeroed. Row sums are kept
    in an [N][N][b] accumulator and reduced sequentially over m.
    """
    unit = _table_unit_keys(pool, block_table, layer, kv_head)
    n_blocks, b = unit.shape[0], unit.shape[1]
    accum = np.zeros((n_blocks, n_blocks, b))

    for m in range(n_blocks):
        tags = np.zeros(b, dtype=bool)
        for i in range(n_blocks - 1, -1, -1):
            similarity = unit[i] @ unit[m].T
            if i == m:
                np.fill_diagonal(similarity, 0.0)
            tags |= zero_last_above(similarity, p, skip_columns=tags)
            accum[i, m] = similarity.sum(axis=1)

    row_sums = np.zeros((n_blocks, b))
    for m in range(n_blocks):
        row_sums += accum[:, m]
    return redundancy_from_rowsums(row_sums.reshape(-1), tau)


def redundancy_lightning(pool, block_table, layer, kv_head, p, tau=1.0):
    """Similarity only within each block: O(N * b^2) instead of O(N^2 * b^2)."""
    unit = _table_unit_keys(pool, block_table, layer, kv_head)
    row_sums = np.empty(unit.shape[:2])
    for i, block_keys in enumerate(unit):
        similarity = block_keys @ block_keys.T
        np.fill_diagonal(similarity, 0.0)
        zero_last_above(similarity, p)
        row_sums[i] = similarity.sum(axis=1)
    return redundancy_from_rowsums(row_sums.reshape(-1), tau)


def combine_scores(scores, redundancy, lam):
    scores = np.asarray(scores, dtype=np.float64)
    return scores - lam * np.asarray(redundancy, dtype=np.float64).reshape(scores.shape)


# -----------------------------------------------------------------------------
# Full pipeline
# -----------------------------------------------------------------------------
def score(pool, cache, request, layer, kv_head, config, is_first_compression=None, return_global=False):
    """
    Scores every cached entry of `request` for one (layer, kv_head).
    With `return_global` the post-global-update grid is returned alongside (None when
    the global score is off); compaction relocates it with the entries.
    """
    table = pool.tables[request.id]
    if is_first_compression is None:
        is_first_compression = not request.compressed

    scores = attention_scores(pool, cache, request.slot, table, layer, kv_head)

    global_grid = None
    if config.use_global:
        scores = update_global_scores(scores, pool, table, layer, kv_head, config.alpha, request.compressed)
        global_grid = scores

    if config.pooling == "always" or (config.pooling == "first-only" and is_first_compression):
        scores = max_pool_scores(scores, config.kernel)

    if config.lam != 0:
        if config.redundancy == "naive":
            keys = pool.keys[layer, table.blocks, :, kv_head]
            redundancy = redundancy_naive(keys, config.p, config.tau)
        elif config.redundancy == "flash":
            redundancy = redundancy_flash(pool, table, layer, kv_head, config.p, config.tau)
        else:
            redundancy = redundancy_lightning(pool, table, layer, kv_head, config.p, config.tau)
        scores = combine_scores(scores, redundancy, config.lam)

    if return_global:
        return scores, global_grid
    return scores
