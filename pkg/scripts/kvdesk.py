import argparse
import sys

from lib.capacity import MemoryBudget, plan_capacity
from lib.engine import Engine, run, settings_from_config
from lib.errors import KVDeskError
from lib.metrics import emit_metrics
from lib.oracles import SUITES, run_suite
from utils import get_default_seed, load_config_file, resolve_output
from workloads.spec import PRESETS, generate_workload, parse_workload, write_workload

# --- Constants ---
DEFAULT_METRICS_NAME = "metrics.json"
DEFAULT_WORKLOAD_NAME = "workload.json"


def _length_range(text):
    """'20:50' -> uniform length distribution; '64' -> fixed."""
    try:
        if ":" in text:
            low, high = (int(part) for part in text.split(":", 1))
            return {"dist": "uniform", "low": low, "high": high}
        return {"dist": "fixed", "value": int(text)}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW:HIGH or a single length, got '{text}'") from None


# --- Subcommands ---
def cmd_plan(args):
    budget = MemoryBudget(m_available=args.mem, m_kv=args.mkv, m_q=args.mq, n_max=args.nmax, d=args.d)
    for method in ("closed_form", "tight"):
        plan = plan_capacity(budget, use_global=args.use_global, method=method)
        print(f"[Plan]: {method} M={plan.max_concurrency} N_total={plan.total_blocks}")


def cmd_gen_workload(args):
    seed = args.seed if args.seed is not None else (get_default_seed() or 0)
    generator = {"preset": args.preset} if args.preset else {}
    if args.prompt:
        generator["prompt"] = args.prompt
    if args.output:
        generator["output"] = args.output
    if args.every:
        generator["arrival"] = {"every": args.every}
    workload = generate_workload(generator, seed=seed, count=args.count)
    out_path = write_workload(workload, resolve_output(args.out, DEFAULT_WORKLOAD_NAME))
    print(f"[Workload]: {len(workload.requests)} requests (seed {seed}) written to {out_path}")


def cmd_run(args):
    seed = args.seed if args.seed is not None else get_default_seed()
    raw = load_config_file(args.config)
    if args.seed is not None:
        raw.setdefault("engine", {})["seed"] = args.seed
    if args.verbose:
        raw.setdefault("engine", {})["verbose"] = True
    settings = settings_from_config(raw, seed=seed)

    if settings.plan is not None:
        print(f"[Plan]: M={settings.plan.max_concurrency} N_total={settings.plan.total_blocks}")

    if args.workload:
        workload = parse_workload(args.workload, default_seed=seed or 0)
    else:
        workload = generate_workload(args.preset, seed=seed or 0, count=args.count)
    print(f"[Workload]: {len(workload.requests)} requests")

    engine = Engine(settings)
    metrics = run(engine, workload)
    written = emit_metrics(metrics, args.format, resolve_output(args.out, DEFAULT_METRICS_NAME))
    print(
        f"[Metrics]: {metrics.total_tokens} tokens in {metrics.total_steps} steps, "
        f"tps={metrics.tps:.4f}, mean_tpot={metrics.mean_tpot:.4f}, preemptions={metrics.preemptions}"
    )
    print(f"[Metrics]: written to {', '.join(str(p) for p in written)}")


def cmd_oracle(args):
    suites = SUITES if args.suite == "all" else (args.suite,)
    failed = False
    for name in suites:
        report = run_suite(
            name,
            cases=args.cases,
            seed=args.seed,
            steps=args.steps,
            seeds=args.seeds,
            verbose=args.verbose,
            workers=args.workers,
        )
        print(f"[Oracle]: {report.summary()}")
        for failure in report.failures[:10]:
            print(f"  {failure}")
        failed = failed or not report.passed
    if failed:
        sys.exit(1)


# --- Main Entry Point ---
def build_parser():
    parser = argparse.ArgumentParser(description="Compressed paged KV cache engine at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Run a workload and write metrics")
    p_run.add_argument("--config", type=str, help="Engine config (TOML)")
    source = p_run.add_mutually_exclusive_group()
    source.add_argument("--workload", type=str, help="Workload spec (.json or .jsonl trace)")
    source.add_argument("--preset", choices=sorted(PRESETS), default="amc", help="Generated workload preset")
    p_run.add_argument("--count", type=int, default=32, help="Requests for --preset")
    p_run.add_argument("--out", type=str, help=f"Metrics path (defaults to WORKSPACE_PATH/{DEFAULT_METRICS_NAME})")
    p_run.add_argument("--format", choices=["json", "csv"], default="json")
    p_run.add_argument("--seed", type=int, help="Seed override (defaults to KVDESK_SEED)")
    p_run.add_argument("--verbose", action="store_true")
    p_run.set_defaults(handler=cmd_run)

    p_plan = sub.add_parser("plan", help="Print the capacity plan for a memory budget")
    p_plan.add_argument("--mem", type=int, required=True, help="Available memory units")
    p_plan.add_argument("--mkv", type=int, required=True, help="Units per KV block")
    p_plan.add_argument("--mq", type=int, required=True, help="Units per query slot")
    p_plan.add_argument("--nmax", type=int, required=True, help="Blocks per request after compression")
    p_plan.add_argument("--d", type=int, default=1, help="Head dimension (global-score overhead)")
    p_plan.add_argument("--global", dest="use_global", action="store_true", help="Account for the global-score cache")
    p_plan.set_defaults(handler=cmd_plan)

    p_gen = sub.add_parser("gen-workload", help="Emit a workload spec from a generator")
    p_gen.add_argument("--preset", choices=sorted(PRESETS))
    p_gen.add_argument("--count", type=int, default=100)
    p_gen.add_argument("--prompt", type=_length_range, help="Prompt lengths LOW:HIGH or N")
    p_gen.add_argument("--output", type=_length_range, help="Output lengths LOW:HIGH or N")
    p_gen.add_argument("--every", type=int, default=0, help="Steps between arrivals")
    p_gen.add_argument("--seed", type=int, help="Generator seed (defaults to KVDESK_SEED)")
    p_gen.add_argument("--out", type=str, help=f"Output path (defaults to WORKSPACE_PATH/{DEFAULT_WORKLOAD_NAME})")
    p_gen.set_defaults(handler=cmd_gen_workload)

    p_oracle = sub.add_parser("oracle", help="Run the brute-force verification suites")
    p_oracle.add_argument("--suite", choices=list(SUITES) + ["all"], default="all")
    p_oracle.add_argument("--cases", type=int, help="Random instances per suite")
    p_oracle.add_argument("--steps", type=int, default=2000, help="Steps per scheduler simulation")
    p_oracle.add_argument("--seeds", type=int, default=3, help="Seeds per scheduler configuration")
    p_oracle.add_argument("--workers", type=int, default=1, help="Processes for the scheduler simulations")
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.add_argument("--verbose", action="store_true")
    p_oracle.set_defaults(handler=cmd_oracle)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except KVDeskError as e:
        print(f"[Error]: {e}")
        sys.exit(1)
    except OSError as e:
        print(f"[Error]: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
