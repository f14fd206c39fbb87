"""Command line front end.

Subcommands:

  run      execute a job over a topology, in sim or tcp mode
  bench    duplication / migration cost sweeps, CSV out
  compare  run a job and put it next to the centralized baseline
  oracle   single-process reference result for the same data

Set LOCOMAP_LOG to control log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys
from pathlib import Path

from .cost import (
    BaselineParams,
    compare,
    duplication_experiment,
    migration_experiment,
    write_cost_csv,
)
from .errors import AllSlavesFailed, ConfigError, LocomapError
from .nodes import load_records_tsv
from .orchestration import Cluster, builtin_job, run_job, sequential_oracle
from .registry import BUILTIN_JOBS
from .tcp_cluster import run_tcp_job
from .tcp_node import FrameServer
from .transport import SimTransport, TcpTransport, Topology

logger = logging.getLogger("locomap.cli")

_SIZE_SUFFIX = {"k": 1024, "m": 1024 * 1024, "g": 1024 * 1024 * 1024}


def parse_sizes(text: str) -> list[int]:
    """'1k,10k,1m' -> [1024, 10240, 1048576]; suffixes are binary."""
    sizes = []
    for token in text.split(","):
        token = token.strip().lower()
        if not token:
            continue
        factor = 1
        if token[-1] in _SIZE_SUFFIX:
            factor = _SIZE_SUFFIX[token[-1]]
            token = token[:-1]
        try:
            sizes.append(int(token) * factor)
        except ValueError:
            raise ConfigError(f"cannot parse size {token!r}") from None
    if not sizes:
        raise ConfigError("no sizes given")
    return sizes


def _write_output(doc: dict, output: str | None) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _load_topology(args) -> tuple[Topology, dict]:
    if not args.topology:
        raise ConfigError("--topology is required")
    path = Path(args.topology)
    if not path.exists():
        raise ConfigError(f"topology file {path} does not exist")
    topology = Topology.from_file(path)
    raw = json.loads(path.read_text())
    return topology, raw


def _resolve_seed(args, raw_topology: dict, topology: Topology) -> int:
    if args.seed is not None:
        topology.rng_seed = args.seed
        return args.seed
    if "rng_seed" in raw_topology:
        return topology.rng_seed
    raise ConfigError("sim mode needs a seed: pass --seed or put rng_seed in the topology file")


def _load_cluster(topology: Topology, data_dir: str | None, mem_limit: int) -> Cluster:
    cluster = Cluster.from_topology(topology, mem_bytes_limit=mem_limit)
    if data_dir is None:
        return cluster
    root = Path(data_dir)
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    for node_id, node in cluster.nodes.items():
        data_file = root / f"node_{node_id}.tsv"
        if data_file.exists():
            node.ingest(load_records_tsv(data_file))
    return cluster


def _job_spec(args):
    if args.job not in BUILTIN_JOBS:
        raise ConfigError(f"unknown job {args.job!r}; available: {sorted(BUILTIN_JOBS)}")
    return builtin_job(args.job, job_id=args.job_id, slave_count=args.slave_count)


def _execute(args) -> tuple[dict, object, int]:
    """Shared by run and compare: run the job per the config, build the
    output document, map total failure to exit code 2."""
    if args.job_module:
        importlib.import_module(args.job_module)
    topology, raw = _load_topology(args)
    spec = _job_spec(args)
    code = 0
    try:
        if args.mode == "sim":
            seed = _resolve_seed(args, raw, topology)
            cluster = _load_cluster(topology, args.data_dir, args.mem_limit)
            result = run_job(
                spec,
                cluster,
                SimTransport(topology),
                results_only=args.results_only,
                process_master_heap=args.process_master_heap,
            )
        else:
            seed = args.seed
            if args.data_dir is not None and not Path(args.data_dir).is_dir():
                raise ConfigError(f"data directory {args.data_dir} does not exist")
            result = run_tcp_job(
                spec,
                topology,
                args.data_dir,
                results_only=args.results_only,
                base_port=args.base_port,
                timeout_s=args.timeout,
                node_mem_limit=args.mem_limit,
                job_module=args.job_module,
                log_dir=args.node_logs,
            )
    except AllSlavesFailed as exc:
        if exc.result is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        result = exc.result
        code = 2
    doc = {"job": args.job, "job_id": args.job_id, "mode": args.mode, "seed": seed, "results_only": args.results_only}
    doc.update(result.to_json_dict())
    return doc, result, code


def _cmd_run(args) -> int:
    doc, _, code = _execute(args)
    _write_output(doc, args.output)
    return code


def _cmd_compare(args) -> int:
    doc, result, code = _execute(args)
    if code:
        return code
    data_bytes = result.raw_data_bytes if args.data_bytes == "auto" else int(args.data_bytes)
    params = BaselineParams(
        data_bytes=data_bytes,
        bandwidth_bytes_per_s=args.bandwidth_bytes_per_s,
        replication=args.replication,
        compute_bytes_per_s=args.compute_bytes_per_s,
        node_count=args.node_count,
    )
    report = compare(result, params)
    rows = list(report.to_json_dict().items())
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        if isinstance(value, float):
            print(f"{key:<{width}}  {value:.6f}")
        else:
            print(f"{key:<{width}}  {value}")
    if report.reduction_ratio >= 1.0 and report.framework_bytes_transferred > 0:
        print("warning: reduction ratio >= 1, this job does not aggregate", file=sys.stderr)
    if args.output:
        _write_output({**doc, "comparison": report.to_json_dict()}, args.output)
    return 0


def _cmd_oracle(args) -> int:
    if args.job_module:
        importlib.import_module(args.job_module)
    root = Path(args.data_dir)
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    spec = _job_spec(args)
    records = []
    for path in sorted(root.glob("node_*.tsv")):
        records.extend(load_records_tsv(path))
    final = sequential_oracle(spec.task, spec.combine, records)
    _write_output({"job": args.job, "final": final}, args.output)
    return 0


def _cmd_bench(args) -> int:
    sizes = parse_sizes(args.sizes)
    if args.kind == "duplication":
        mode = "sim" if args.mode == "sim" else "measured"
        records = duplication_experiment(sizes, repeats=args.repeats, mode=mode)
    else:
        if args.mode == "sim":
            if args.topology:
                topology = Topology.from_file(args.topology)
            else:
                topology = Topology.from_preset("iot", master=0, nodes=[1], rng_seed=args.seed or 0)
            if args.seed is not None:
                topology.rng_seed = args.seed
            transport = SimTransport(topology)
            pair = topology.all_nodes[:2]
            records = migration_experiment(sizes, args.repeats, transport, src=pair[0], dst=pair[1])
        else:
            sink = FrameServer("127.0.0.1", 0, lambda frame: None)
            sink.start()
            try:
                transport = TcpTransport({1: (sink.host, sink.port)}, timeout_s=args.timeout)
                records = migration_experiment(sizes, args.repeats, transport, src=0, dst=1)
            finally:
                sink.stop()
    if not records:
        print("error: every benchmark sample failed", file=sys.stderr)
        return 2
    if args.output:
        with open(args.output, "w", newline="") as fp:
            write_cost_csv(records, fp)
    else:
        write_cost_csv(records, sys.stdout)
    return 0


def _add_run_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--mode", choices=("sim", "tcp"), default="sim")
    sub.add_argument("--topology", help="topology JSON file")
    sub.add_argument("--data-dir", help="directory of node_<id>.tsv ingestion files")
    sub.add_argument("--job", default="wordcount", help="wordcount, sum, or a name a --job-module registers")
    sub.add_argument("--job-id", type=int, default=1)
    sub.add_argument("--slave-count", type=int, default=None)
    sub.add_argument("--results-only", action="store_true", help="skip the final migration; ship only the result message")
    sub.add_argument("--process-master-heap", action="store_true", help="let the mapper fold the master node's own heap (sim mode)")
    sub.add_argument("--seed", type=int, default=None, help="sim rng seed; overrides the topology file")
    sub.add_argument("--mem-limit", type=int, default=1 << 30, help="per-node heap limit in bytes")
    sub.add_argument("--base-port", type=int, default=0, help="tcp mode: master port; 0 picks ephemeral ports")
    sub.add_argument("--timeout", type=float, default=60.0, help="tcp mode: overall job deadline in seconds")
    sub.add_argument("--job-module", default="", help="module imported before the run to register custom functions")
    sub.add_argument("--node-logs", default=None, help="tcp mode: directory for per-node stderr logs")
    sub.add_argument("--output", help="write the JSON document here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locomap", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="execute a job")
    _add_run_options(run)
    run.set_defaults(fn=_cmd_run)

    bench = subs.add_parser("bench", help="cost experiments")
    bench.add_argument("kind", choices=("duplication", "migration"))
    bench.add_argument("--sizes", default="1k,10k,100k,1m", help="comma separated agent sizes; binary k/m/g suffixes")
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--mode", choices=("sim", "tcp"), default="sim", help="sim models times; tcp measures them")
    bench.add_argument("--topology", help="sim migration: topology JSON (default: 2-node iot preset)")
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--timeout", type=float, default=5.0)
    bench.add_argument("--output", help="CSV file (default stdout)")
    bench.set_defaults(fn=_cmd_bench)

    cmp_ = subs.add_parser("compare", help="run a job and compare against the centralized baseline")
    _add_run_options(cmp_)
    cmp_.add_argument("--data-bytes", default=str(BaselineParams.data_bytes), help="baseline raw data bytes, or 'auto' for the run's ingested bytes")
    cmp_.add_argument("--bandwidth-bytes-per-s", type=float, default=BaselineParams.bandwidth_bytes_per_s)
    cmp_.add_argument("--replication", type=int, default=BaselineParams.replication)
    cmp_.add_argument("--compute-bytes-per-s", type=float, default=BaselineParams.compute_bytes_per_s)
    cmp_.add_argument("--node-count", type=int, default=BaselineParams.node_count)
    cmp_.set_defaults(fn=_cmd_compare)

    oracle = subs.add_parser("oracle", help="single-process reference result")
    oracle.add_argument("--data-dir", required=True)
    oracle.add_argument("--job", default="wordcount")
    oracle.add_argument("--job-id", type=int, default=1)
    oracle.add_argument("--slave-count", type=int, default=None)
    oracle.add_argument("--job-module", default="")
    oracle.add_argument("--output")
    oracle.set_defaults(fn=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("LOCOMAP_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except LocomapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
