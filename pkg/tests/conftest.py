import pytest

from lib.paged_store import PoolConfig, init_pool


def make_config(**overrides):
    values = dict(
        num_layers=1,
        total_blocks=8,
        block_size=4,
        kv_heads=1,
        query_heads=1,
        head_dim=2,
        max_concurrency=3,
        window=2,
        global_score_enabled=False,
        dtype="float64",
    )
    values.update(overrides)
    return PoolConfig(**values)


@pytest.fixture
def pool_factory():
    """Builds (pool, cache) pairs from PoolConfig overrides on a small float64 default."""

    def build(**overrides):
        return init_pool(make_config(**overrides))

    return build


SMALL_CONFIG = {
    "pool": {
        "num_layers": 1,
        "block_size": 4,
        "kv_heads": 1,
        "query_heads": 2,
        "head_dim": 4,
        "window": 2,
        "total_blocks": 32,
        "max_concurrency": 2,
        "dtype": "float64",
    },
    "compressor": {"n_max": 3},
    "scheduler": {"mode": "hybrid"},
}


def small_settings(engine_overrides=None, **sections):
    """Engine settings for a tiny float64 pool; sections update SMALL_CONFIG key by key."""
    from dataclasses import replace

    from lib.engine import settings_from_config

    raw = {name: dict(values) for name, values in SMALL_CONFIG.items()}
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    settings = settings_from_config(raw)
    if engine_overrides:
        settings = replace(settings, engine=replace(settings.engine, **engine_overrides))
    return settings
