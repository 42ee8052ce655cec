"""
Command line for the benchmark harness.

    python bench.py run --experiment speedup --algorithm fast-small --replicas 5 --rate 50..1600 --out results/
"""
import argparse
import os
import sys
from typing import Optional, Tuple

from config import ConfigError, EngineConfig, load_config_file
from harness import ALGORITHMS, EXPERIMENTS, ExperimentSpec, detect_knee, parse_span, run_experiment
from ledger import EXIT_CORRUPT, LedgerCorruptError
from utils import setup_logging

# Keys a config file may set besides the engine keys
BENCH_KEYS = ('experiment', 'algorithm', 'replicas', 'rate', 'duration', 'transport', 'seed', 'out')


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog='bench', description="Consensus benchmark harness")
    sub = ap.add_subparsers(dest='command', required=True)
    run = sub.add_parser('run', help="run one experiment sweep")
    run.add_argument('--experiment', choices=EXPERIMENTS)
    run.add_argument('--algorithm', choices=sorted(ALGORITHMS))
    run.add_argument('--replicas', help="N, N..M or a comma list")
    run.add_argument('--rate', help="R, R..S (doubling) or a comma list, in op/s")
    run.add_argument('--duration', type=float, help="seconds of offered load per point")
    run.add_argument('--transport', choices=('sim', 'udp'))
    run.add_argument('--seed', type=int)
    run.add_argument('--out', help="directory for the per-point CSVs and summary.csv")
    run.add_argument('--config', help="key = value file; flags override it")
    run.add_argument('--log-level', default=os.environ.get('LOG_LEVEL', 'WARNING'))
    return ap


def resolve(args: argparse.Namespace) -> Tuple[ExperimentSpec, Optional[str]]:
    """Merges config file, environment and flags into one experiment."""
    file_values = load_config_file(args.config) if args.config else {}
    bench = {k: v for k, v in file_values.items() if k in BENCH_KEYS}
    engine_values = {k: v for k, v in file_values.items() if k not in BENCH_KEYS}
    for key in BENCH_KEYS:
        value = getattr(args, key)
        if value is not None:
            bench[key] = value

    if 'experiment' not in bench:
        raise ConfigError("--experiment is required (flag or config file)")
    engine = EngineConfig.from_env(EngineConfig.from_mapping(engine_values))

    overrides = {}
    for key, kind in (('algorithm', str), ('duration', float), ('transport', str), ('seed', int)):
        if key in bench:
            overrides[key if key != 'duration' else 'duration_s'] = kind(bench[key])
    if 'replicas' in bench:
        overrides['replicas'] = parse_span(bench['replicas'], int)
    if 'rate' in bench:
        overrides['rates'] = parse_span(bench['rate'], float, doubling=True)
    return ExperimentSpec.defaults(str(bench['experiment']), config=engine, **overrides), bench.get('out')


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        spec, out = resolve(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2

    out = out or os.path.join('results', spec.name)
    print(f"🚀 {spec.name}: {spec.algorithm}, replicas {spec.replicas}, rates {spec.rates} op/s, "
          f"{spec.duration_s:g}s per point over {spec.transport}")

    def report(point):
        s = point.summary
        print(f"  ✅ n={point.replicas} rate={point.rate:g} -> {s['served_ops']:.1f} op/s, "
              f"{s['mean_rt_ms']:.2f} ms, retried {s['retried_ratio']:.1%}, collisions {s['collision_ratio']:.1%}")
        if point.markers is not None:
            m = point.markers
            print(f"  ⚡ killed r{m.replica} at {m.killed_ns}, recovered at {m.recovered_ns}")

    try:
        table = run_experiment(spec, out, on_point=report)
    except LedgerCorruptError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CORRUPT

    if table.empty:
        print("❌ no sweep point completed")
        return 1
    if spec.name == 'speedup':
        knee = detect_knee(list(table['rate']), list(table['served_ops']))
        print(f"📈 knee: {knee:g} op/s" if knee is not None else "📈 no knee: served load tracked every rate")
    print(f"📁 wrote {len(table)} point(s) and summary.csv to {out}")
    return 0


if __name__ == '__main__':
    sys.exit(main())
