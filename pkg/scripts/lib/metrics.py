"""
Run metrics and their JSON / CSV emission.

Every per-step series has exactly one entry per engine step.
"""

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

SERIES = ("concurrency", "waiting", "utilization", "throughput", "tokens", "compression_set")
STAGES = ("prefill", "decode", "compression")


@dataclass
class EngineMetrics:
    total_blocks: int = 0
    max_concurrency: int = 0
    total_tokens: int = 0
    total_time: float = 0.0
    total_steps: int = 0
    preemptions: int = 0
    compressions: int = 0
    prefill_token_writes: int = 0
    peak_activation: int = 0
    request_tpot: dict = field(default_factory=dict)
    stage_times: dict = field(default_factory=lambda: {stage: 0.0 for stage in STAGES})
    concurrency: list = field(default_factory=list)
    waiting: list = field(default_factory=list)
    utilization: list = field(default_factory=list)
    throughput: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    compression_set: list = field(default_factory=list)

    def record_step(self, running, waiting, owned_blocks, tokens, elapsed, compression_set):
        self.total_steps += 1
        self.total_tokens += tokens
        self.concurrency.append(running)
        self.waiting.append(waiting)
        self.utilization.append(owned_blocks / self.total_blocks if self.total_blocks else 0.0)
        self.throughput.append(tokens / elapsed if elapsed > 0 else 0.0)
        self.tokens.append(tokens)
        self.compression_set.append(compression_set)

    def record_request(self, request):
        """Time from first to last token divided by the tokens generated."""
        if request.generated and request.first_token_time is not None:
            span = request.last_token_time - request.first_token_time
            self.request_tpot[request.id] = span / request.generated

    @property
    def tps(self):
        return self.total_tokens / self.total_time if self.total_time > 0 else 0.0

    @property
    def mean_tpot(self):
        if not self.request_tpot:
            return 0.0
        return sum(self.request_tpot.values()) / len(self.request_tpot)

    @property
    def stage_shares(self):
        total = sum(self.stage_times.values())
        return {stage: (self.stage_times[stage] / total if total else 0.0) for stage in STAGES}

    @property
    def concurrency_histogram(self):
        return dict(sorted(Counter(self.concurrency).items()))

    def compression_fraction(self, warmup=0):
        """Mean per-step share of running requests that entered the compression set."""
        fractions = [
            triggered / running
            for triggered, running in zip(self.compression_set[warmup:], self.concurrency[warmup:])
            if running
        ]
        return sum(fractions) / len(fractions) if fractions else 0.0


@dataclass
class MetricsArtifact:
    summary: dict
    series: dict


def to_artifact(metrics):
    summary = {
        "tps": metrics.tps,
        "mean_tpot": metrics.mean_tpot,
        "total_tokens": metrics.total_tokens,
        "total_time": metrics.total_time,
        "total_steps": metrics.total_steps,
        "preemptions": metrics.preemptions,
        "compressions": metrics.compressions,
        "prefill_token_writes": metrics.prefill_token_writes,
        "peak_activation_estimate": metrics.peak_activation,
        "stage_shares": metrics.stage_shares,
        "concurrency_histogram": {str(k): v for k, v in metrics.concurrency_histogram.items()},
    }
    series = {name: list(getattr(metrics, name)) for name in SERIES}
    return MetricsArtifact(summary=summary, series=series)


def _flatten(summary):
    flat = {}
    for key, value in summary.items():
        if isinstance(value, dict):
            for sub, sub_value in value.items():
                flat[f"{key}.{sub}"] = sub_value
        else:
            flat[key] = value
    return flat


def emit_metrics(metrics, fmt, path):
    """
    json: one document {"summary", "series"} at `path`.
    csv:  `<stem>.summary.csv` (key,value) plus `<stem>.<series>.csv` (step,value) per series.
    Returns the written paths.
    """
    artifact = to_artifact(metrics)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    if fmt == "json":
        document = {"summary": artifact.summary, "series": artifact.series}
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return [path]

    if fmt != "csv":
        raise ValueError(f"unknown metrics format '{fmt}'")

    stem = path.with_suffix("") if path.suffix == ".csv" else path
    written = []
    summary_path = stem.with_name(f"{stem.name}.summary.csv")
    with open(summary_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["key", "value"])
        for key, value in sorted(_flatten(artifact.summary).items()):
            writer.writerow([key, repr(value) if isinstance(value, float) else value])
    written.append(summary_path)

    for name, values in artifact.series.items():
        series_path = stem.with_name(f"{stem.name}.{name}.csv")
        with open(series_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", name])
            for step, value in enumerate(values):
                writer.writerow([step, repr(value) if isinstance(value, float) else value])
        written.append(series_path)
    return written
