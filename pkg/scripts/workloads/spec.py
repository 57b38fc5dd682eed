"""
Workload specs: explicit request lists, JSONL traces and seeded generators.

A JSON workload is either a list of requests or a document
    {"seed": 7, "requests": [...], "generators": [...]}
A JSONL trace holds one request object per line. Request fields:
    arrival_step (default 0), output_len, prompt_len or prompt_tokens,
    optional prefix_group / prefix_len (shared prompt prefix) and seed.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lib.errors import SchemaError

VOCAB_SIZE = 32000
REQUEST_FIELDS = {"arrival_step", "prompt_len", "prompt_tokens", "output_len", "prefix_group", "prefix_len", "seed"}
GENERATOR_FIELDS = {"preset", "count", "prompt", "output", "seed", "arrival", "shared_prefix", "mix"}

# Length shapes of the workload taxonomy, scaled to desk-size pools
PRESETS = {
    # short prompts, long outputs
    "amc": {"prompt": {"dist": "uniform", "low": 20, "high": 60}, "output": {"dist": "uniform", "low": 300, "high": 600}},
    # short prompts, short outputs
    "gsm8k": {"prompt": {"dist": "uniform", "low": 30, "high": 80}, "output": {"dist": "uniform", "low": 40, "high": 120}},
    # long prompts sharing prefixes, short outputs
    "longbench": {
        "prompt": {"dist": "uniform", "low": 200, "high": 400},
        "output": {"dist": "uniform", "low": 16, "high": 64},
        "shared_prefix": {"groups": 4, "len": 128},
    },
    "mixed": {"mix": {"gsm8k": 0.7, "amc": 0.3}},
}


@dataclass
class RequestSpec:
    arrival_step: int
    output_len: int
    prompt_tokens: list
    seed: int
    prefix_group: int = None
    prefix_len: int = 0

    @property
    def prompt_len(self):
        return len(self.prompt_tokens)


@dataclass
class WorkloadSpec:
    requests: list = field(default_factory=list)
    seed: int = 0


@dataclass
class _Draft:
    arrival_step: int
    output_len: int
    prompt_len: int
    prompt_tokens: list = None
    prefix_group: int = None
    prefix_len: int = 0
    seed: int = None


# -----------------------------------------------------------------------------
# Token materialisation
# -----------------------------------------------------------------------------
def prefix_tokens(seed, group, length):
    """Token ids of a shared prefix group; identical for every request of the group."""
    return np.random.default_rng([seed, 1, group]).integers(0, VOCAB_SIZE, size=length).tolist()


def materialize(drafts, seed):
    """Fixes the final request order (stable by arrival) and derives prompt tokens and request seeds."""
    ordered = sorted(drafts, key=lambda d: d.arrival_step)
    requests = []
    for index, draft in enumerate(ordered):
        tokens = draft.prompt_tokens
        if tokens is None:
            tokens = []
            if draft.prefix_group is not None and draft.prefix_len:
                tokens = prefix_tokens(seed, draft.prefix_group, min(draft.prefix_len, draft.prompt_len))
            unique = draft.prompt_len - len(tokens)
            tokens = tokens + np.random.default_rng([seed, 2, index]).integers(0, VOCAB_SIZE, size=unique).tolist()
        requests.append(
            RequestSpec(
                arrival_step=draft.arrival_step,
                output_len=draft.output_len,
                prompt_tokens=[int(t) for t in tokens],
                seed=draft.seed if draft.seed is not None else index,
                prefix_group=draft.prefix_group,
                prefix_len=draft.prefix_len,
            )
        )
    return requests


# -----------------------------------------------------------------------------
# Validation
# -----------------------------------------------------------------------------
def _int_field(obj, key, where, line, minimum=1, default=None):
    value = obj.get(key, default)
    if value is None:
        raise SchemaError("missing required field", line=line, field=f"{where}{key}")
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"expected an integer, got {value!r}", line=line, field=f"{where}{key}")
    if value < minimum:
        raise SchemaError(f"must be >= {minimum}, got {value}", line=line, field=f"{where}{key}")
    return value


def _parse_request(obj, where="", line=None):
    if not isinstance(obj, dict):
        raise SchemaError("request must be an object", line=line, field=where.rstrip(".") or None)
    unknown = set(obj) - REQUEST_FIELDS
    if unknown:
        raise SchemaError("unknown field", line=line, field=f"{where}{sorted(unknown)[0]}")

    tokens = obj.get("prompt_tokens")
    if tokens is not None:
        if not isinstance(tokens, list) or not tokens:
            raise SchemaError("expected a non-empty list of token ids", line=line, field=f"{where}prompt_tokens")
        for token in tokens:
            if isinstance(token, bool) or not isinstance(token, int) or token < 0:
                raise SchemaError(f"invalid token id {token!r}", line=line, field=f"{where}prompt_tokens")
        prompt_len = len(tokens)
    else:
        prompt_len = _int_field(obj, "prompt_len", where, line)

    prefix_group = obj.get("prefix_group")
    if prefix_group is not None:
        prefix_group = _int_field(obj, "prefix_group", where, line, minimum=0)
    return _Draft(
        arrival_step=_int_field(obj, "arrival_step", where, line, minimum=0, default=0),
        output_len=_int_field(obj, "output_len", where, line),
        prompt_len=prompt_len,
        prompt_tokens=tokens,
        prefix_group=prefix_group,
        prefix_len=_int_field(obj, "prefix_len", where, line, minimum=0, default=0),
        seed=_int_field(obj, "seed", where, line, minimum=0) if "seed" in obj else None,
    )


def _check_arrivals(drafts, lines=None):
    for i in range(1, len(drafts)):
        if drafts[i].arrival_step < drafts[i - 1].arrival_step:
            line = lines[i] if lines else None
            field_name = None if lines else f"requests[{i}].arrival_step"
            raise SchemaError("arrival steps must be nondecreasing", line=line, field=field_name)


# -----------------------------------------------------------------------------
# Generators
# -----------------------------------------------------------------------------
def _draw(rng, dist, count, where):
    kind = dist.get("dist", "uniform")
    if kind == "fixed":
        value = dist.get("value")
        if not isinstance(value, int) or value < 1:
            raise SchemaError(f"fixed length must be a positive integer, got {value!r}", field=f"{where}.value")
        return np.full(count, value, dtype=np.int64)
    if kind == "uniform":
        low, high = dist.get("low"), dist.get("high")
        if not isinstance(low, int) or not isinstance(high, int) or low < 1 or high < low:
            raise SchemaError(f"uniform bounds must satisfy 1 <= low <= high, got {low!r}..{high!r}", field=where)
        return rng.integers(low, high + 1, size=count)
    raise SchemaError(f"unknown distribution '{kind}'", field=f"{where}.dist")


def _arrivals(rng, arrival, count, where):
    arrival = arrival or {}
    start = arrival.get("start", 0)
    if "rate" in arrival:
        rate = arrival["rate"]
        if not isinstance(rate, (int, float)) or rate <= 0:
            raise SchemaError(f"rate must be > 0, got {rate!r}", field=f"{where}.rate")
        gaps = rng.poisson(1.0 / rate, size=count)
        if count:
            gaps[0] = 0
        return start + np.cumsum(gaps)
    every = arrival.get("every", 0)
    if not isinstance(every, int) or every < 0:
        raise SchemaError(f"every must be a non-negative integer, got {every!r}", field=f"{where}.every")
    return start + every * np.arange(count)


def generate_drafts(generator, seed, where="generator"):
    """Expands one generator block into request drafts, deterministically from its seed."""
    unknown = set(generator) - GENERATOR_FIELDS
    if unknown:
        raise SchemaError("unknown field", field=f"{where}.{sorted(unknown)[0]}")

    preset_name = generator.get("preset")
    if preset_name is not None and preset_name not in PRESETS:
        raise SchemaError(f"unknown preset '{preset_name}' (choose from {sorted(PRESETS)})", field=f"{where}.preset")
    merged = {**PRESETS.get(preset_name, {}), **generator}

    count = merged.get("count")
    if isinstance(count, bool) or not isinstance(count, int) or count < 0:
        raise SchemaError(f"count must be a non-negative integer, got {count!r}", field=f"{where}.count")
    seed = merged.get("seed", seed)
    rng = np.random.default_rng(seed)
    arrivals = _arrivals(rng, merged.get("arrival"), count, f"{where}.arrival")

    if "mix" in merged:
        names = sorted(merged["mix"])
        weights = np.array([merged["mix"][name] for name in names], dtype=np.float64)
        picks = rng.choice(len(names), size=count, p=weights / weights.sum())
        drafts = []
        for i, pick in enumerate(picks):
            sub = {k: v for k, v in PRESETS[names[pick]].items()}
            sub_seed = int(rng.integers(0, 2**31))
            draft = generate_drafts({**sub, "count": 1, "seed": sub_seed}, sub_seed, f"{where}.mix")[0]
            draft.arrival_step = int(arrivals[i])
            drafts.append(draft)
        return drafts

    for key in ("prompt", "output"):
        if key not in merged:
            raise SchemaError("missing required field", field=f"{where}.{key}")
    prompts = _draw(rng, merged["prompt"], count, f"{where}.prompt")
    outputs = _draw(rng, merged["output"], count, f"{where}.output")

    shared = merged.get("shared_prefix")
    groups = rng.integers(0, shared["groups"], size=count) if shared else [None] * count
    return [
        _Draft(
            arrival_step=int(arrivals[i]),
            output_len=int(outputs[i]),
            prompt_len=int(prompts[i]),
            prefix_group=None if groups[i] is None else int(groups[i]),
            prefix_len=shared["len"] if shared else 0,
        )
        for i in range(count)
    ]


def generate_workload(generator, seed=0, count=None):
    """WorkloadSpec of a single generator block (a preset name is accepted for convenience)."""
    if isinstance(generator, str):
        generator = {"preset": generator}
    if count is not None:
        generator = {**generator, "count": count}
    seed = generator.get("seed", seed)
    return WorkloadSpec(requests=materialize(generate_drafts(generator, seed), seed), seed=seed)


# -----------------------------------------------------------------------------
# Parsing & writing
# -----------------------------------------------------------------------------
def _parse_jsonl(text):
    drafts, lines = [], []
    for number, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON: {e.msg}", line=number) from e
        drafts.append(_parse_request(obj, line=number))
        lines.append(number)
    _check_arrivals(drafts, lines)
    return drafts, None


def _parse_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e.msg}", line=e.lineno) from e

    if isinstance(doc, list):
        doc = {"requests": doc}
    if not isinstance(doc, dict):
        raise SchemaError("workload must be an object or a list of requests")
    unknown = set(doc) - {"seed", "requests", "generators"}
    if unknown:
        raise SchemaError("unknown field", field=sorted(unknown)[0])

    seed = doc.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise SchemaError(f"seed must be a non-negative integer, got {seed!r}", field="seed")

    drafts = [_parse_request(obj, where=f"requests[{i}].") for i, obj in enumerate(doc.get("requests", []))]
    _check_arrivals(drafts)
    return drafts, (doc.get("generators", []), seed)


def parse_workload(path, default_seed=0):
    """Validated WorkloadSpec from a .json document or a .jsonl trace."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SchemaError(f"cannot read workload {path}: {e.strerror}") from e

    if path.suffix == ".jsonl":
        drafts, _ = _parse_jsonl(text)
        return WorkloadSpec(requests=materialize(drafts, default_seed), seed=default_seed)

    drafts, (generators, seed) = _parse_json(text)
    seed = default_seed if seed is None else seed
    for i, generator in enumerate(generators):
        if not isinstance(generator, dict):
            raise SchemaError("generator must be an object", field=f"generators[{i}]")
        drafts.extend(generate_drafts(generator, seed + i, where=f"generators[{i}]"))
    return WorkloadSpec(requests=materialize(drafts, seed), seed=seed)


def write_workload(workload, path):
    """Writes an explicit request list that parses back to the same requests."""
    requests = []
    for request in workload.requests:
        entry = {
            "arrival_step": request.arrival_step,
            "output_len": request.output_len,
            "prompt_tokens": request.prompt_tokens,
            "seed": request.seed,
        }
        if request.prefix_group is not None:
            entry["prefix_group"] = request.prefix_group
            entry["prefix_len"] = request.prefix_len
        requests.append(entry)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"seed": workload.seed, "requests": requests}) + "\n", encoding="utf-8")
    return path
