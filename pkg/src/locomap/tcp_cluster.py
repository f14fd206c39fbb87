"""Master-side supervision for TCP mode.

The master (this process) launches one node process per sensor node,
waits for them to announce themselves, registers the job everywhere,
injects the slaves, and then collects whatever comes back: arriving
agents, remote result messages, failure notices and forwarding stats.
Byte accounting matches the simulator's: envelope bytes for every hop
plus result message bytes; control traffic is not data-plane and is
not counted.
"""

from __future__ import annotations

import logging
import os
import queue
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .agents import Agent, AgentIdAllocator, AgentRole, LifecycleCallbacks, duplicate
from .envelope import pack, unpack
from .errors import AllSlavesFailed, ConfigError, DecodeError, EnvelopeError, TransportFailure
from .orchestration import (
    JobResult,
    JobSpec,
    ResultMessage,
    RetryAction,
    SlaveReport,
    aggregate,
    decode_result,
    dispatch,
    retry_policy,
)
from .registry import DEFAULT_REGISTRY, FunctionRegistry, encode_partial
from .tcp_node import FrameServer, JobRegistration, classify_frame, decode_control, encode_control
from .transport import TcpTransport, Topology

logger = logging.getLogger("locomap.tcp_cluster")

_STAT_GRACE_S = 1.0


@dataclass
class _SlaveState:
    agent_id: int
    partition: tuple
    resolved: bool = False
    delivered: bool = False
    migrations: int = 0
    bytes_sent: int = 0
    fail_reason: str | None = None
    message: ResultMessage | None = None

    def report(self) -> SlaveReport:
        return SlaveReport(
            agent_id=self.agent_id,
            nodes=self.partition,
            delivered=self.delivered,
            migrations=self.migrations,
            bytes_sent=self.bytes_sent,
            fail_reason=self.fail_reason,
        )


def _send_with_retry(transport: TcpTransport, src: int, dst: int, payload: bytes) -> bool:
    attempt = 1
    while True:
        try:
            transport.send(src, dst, payload)
            return True
        except TransportFailure as exc:
            decision = retry_policy(exc, attempt)
            if decision.action is RetryAction.MARK_FAILED:
                logger.error("giving up on send %s -> %s: %s", src, dst, exc)
                return False
            time.sleep(decision.backoff_s)
            attempt += 1


def _await_ready(events: queue.Queue, expected: list[int], deadline: float):
    """Wait for every node's ready announcement; returns (addresses, raw_bytes)."""
    addresses: dict[int, tuple[str, int]] = {}
    raw_bytes = 0
    waiting = set(expected)
    while waiting:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise ConfigError(f"nodes {sorted(waiting)} never announced themselves")
        try:
            frame = events.get(timeout=min(remaining, 0.25))
        except queue.Empty:
            continue
        if classify_frame(frame) != "control":
            logger.warning("unexpected frame before the cluster was ready; dropping it")
            continue
        doc = decode_control(frame)
        if doc.get("type") != "node_ready":
            logger.warning("unexpected control %r before the cluster was ready", doc.get("type"))
            continue
        node = int(doc["node"])
        addresses[node] = (doc["host"], int(doc["port"]))
        raw_bytes += int(doc.get("heap_bytes", 0))
        waiting.discard(node)
        logger.info("node %s ready at %s:%s (%s heap bytes)", node, doc["host"], doc["port"], doc.get("heap_bytes"))
    return addresses, raw_bytes


def _collect(events: queue.Queue, states: dict[int, "_SlaveState"], callbacks, combine, deadline: float) -> None:
    """Consume events until every slave resolves or the deadline passes,
    then drain a short grace window for trailing forwarding stats."""

    def handle(frame: bytes) -> None:
        kind = classify_frame(frame)
        if kind == "envelope":
            try:
                agent = unpack(frame, callbacks)
            except EnvelopeError as exc:
                logger.error("rejected an arriving envelope: %s", exc)
                return
            state = states.get(agent.id)
            if state is None:
                logger.warning("arriving agent %s belongs to no known slave", agent.id)
                return
            partial = agent.payload if agent.payload else encode_partial(combine.identity())
            state.message = ResultMessage(from_agent=agent.id, partial=partial)
            # The slave is home; it hands its partial to the reducer locally.
            state.bytes_sent += state.message.size_bytes
            state.delivered = True
            state.resolved = True
        elif kind == "result":
            try:
                message = decode_result(frame)
            except DecodeError as exc:
                logger.error("discarding malformed result message: %s", exc)
                return
            state = states.get(message.from_agent)
            if state is None:
                logger.warning("result from unknown agent %s", message.from_agent)
                return
            state.message = message
            state.bytes_sent += len(frame)
            state.delivered = True
            state.resolved = True
        else:
            doc = decode_control(frame)
            kind = doc.get("type")
            state = states.get(int(doc.get("agent_id", -1)))
            if kind == "slave_failed":
                if state is not None and not state.resolved:
                    state.resolved = True
                    state.fail_reason = doc.get("reason", "remote failure")
            elif kind == "forwarded":
                if state is not None:
                    state.migrations += 1
                    state.bytes_sent += int(doc["bytes"])
            elif kind != "node_ready":
                logger.warning("ignoring control message %r", kind)

    while any(not s.resolved for s in states.values()):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            for state in states.values():
                if not state.resolved:
                    state.resolved = True
                    state.fail_reason = "timed out waiting for the slave"
            break
        try:
            frame = events.get(timeout=min(remaining, 0.25))
        except queue.Empty:
            continue
        handle(frame)

    quiet_until = time.monotonic() + _STAT_GRACE_S
    while time.monotonic() < quiet_until:
        try:
            handle(events.get(timeout=0.1))
        except queue.Empty:
            continue


def run_tcp_job(
    spec: JobSpec,
    topology: Topology,
    data_dir: str | Path | None,
    *,
    registry: FunctionRegistry | None = None,
    results_only: bool = False,
    host: str = "127.0.0.1",
    base_port: int = 0,
    timeout_s: float = 60.0,
    node_mem_limit: int = 1 << 30,
    job_module: str = "",
    log_dir: str | Path | None = None,
) -> JobResult:
    """Run one job over freshly spawned local node processes.

    With ``base_port`` 0 every listener picks a free ephemeral port and
    the master learns node ports from their ready announcements; a
    nonzero value puts the master at base_port and node i at
    base_port+1+i. Child stderr goes to ``log_dir`` (one file per node)
    when given. Data files are looked up as ``node_<id>.tsv`` under
    ``data_dir`` and loaded by the node processes themselves.
    """
    registry = registry or DEFAULT_REGISTRY
    registry.register_job(spec)
    combine = registry.resolve_combine(spec.combine)
    reduce_fn = registry.resolve_reduce(spec.task.reduce_fn_id)
    master = topology.master
    targets = spec.target_nodes if spec.target_nodes is not None else topology.nodes
    targets = tuple(sorted(targets))
    slave_count = spec.slave_count if spec.slave_count is not None else len(targets)
    if slave_count == 0:
        raise ConfigError("a TCP run needs at least one slave or one target node")

    events: queue.Queue = queue.Queue()
    server = FrameServer(host, base_port, events.put)
    server.start()
    procs: list[subprocess.Popen] = []
    log_files: list = []
    transport: TcpTransport | None = None
    started = time.monotonic()
    deadline = started + timeout_s

    try:
        pkg_root = str(Path(__file__).resolve().parent.parent)
        env = dict(os.environ)
        env["PYTHONPATH"] = pkg_root + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
        for index, node_id in enumerate(targets):
            port = 0 if base_port == 0 else base_port + 1 + index
            cmd = [
                sys.executable,
                "-m",
                "locomap.tcp_node",
                "--node-id",
                str(node_id),
                "--host",
                host,
                "--port",
                str(port),
                "--master",
                f"{server.host}:{server.port}",
                "--mem-limit",
                str(node_mem_limit),
            ]
            if data_dir is not None:
                data_file = Path(data_dir) / f"node_{node_id}.tsv"
                if data_file.exists():
                    cmd += ["--data-file", str(data_file)]
            if job_module:
                cmd += ["--job-module", job_module]
            stderr = subprocess.DEVNULL
            if log_dir is not None:
                Path(log_dir).mkdir(parents=True, exist_ok=True)
                stderr = open(Path(log_dir) / f"node_{node_id}.log", "w")
                log_files.append(stderr)
            procs.append(subprocess.Popen(cmd, stderr=stderr, env=env))

        addresses, raw_bytes = _await_ready(events, list(targets), deadline)
        transport = TcpTransport({**addresses, master: (server.host, server.port)})

        ids = AgentIdAllocator()
        mapper = Agent(id=ids.next(), role=AgentRole.MAPPER, job_id=spec.job_id, origin=master)
        reducer = Agent(id=ids.next(), role=AgentRole.REDUCER, job_id=spec.job_id, origin=master)
        slaves = duplicate(mapper, slave_count, ids)
        assignment = dispatch(slaves, targets)
        callbacks = LifecycleCallbacks()

        registration = JobRegistration(
            spec=spec,
            results_only=results_only,
            master=master,
            addresses=dict(transport.addresses),
            partitions={s.id: assignment[s.id] for s in slaves},
        )
        control = encode_control(registration.register_control())
        for node_id in targets:
            if not _send_with_retry(transport, master, node_id, control):
                raise ConfigError(f"could not register the job at node {node_id}")

        states: dict[int, _SlaveState] = {}
        for slave in slaves:
            state = _SlaveState(agent_id=slave.id, partition=assignment[slave.id])
            states[slave.id] = state
            if not state.partition:
                # Nothing to visit: identity partial, handed over in place.
                state.message = ResultMessage(from_agent=slave.id, partial=encode_partial(combine.identity()))
                state.bytes_sent += state.message.size_bytes
                state.delivered = True
                state.resolved = True
                continue
            envelope = pack(slave, callbacks)
            if _send_with_retry(transport, master, state.partition[0], envelope):
                state.migrations += 1
                state.bytes_sent += len(envelope)
            else:
                state.resolved = True
                state.fail_reason = f"could not dispatch to node {state.partition[0]}"

        _collect(events, states, callbacks, combine, deadline)
    finally:
        if transport is not None:
            shutdown = encode_control({"type": "shutdown"})
            for node_id in targets:
                try:
                    transport.send(master, node_id, shutdown)
                except TransportFailure:
                    pass
        for proc in procs:
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=5.0)
        server.stop()
        for fh in log_files:
            fh.close()

    ordered = [states[s.id] for s in slaves]
    decode_failures = 0

    def on_bad(message, exc):
        nonlocal decode_failures
        decode_failures += 1

    messages = [s.message for s in ordered if s.message is not None]
    folded = aggregate(reducer, messages, combine, on_decode_error=on_bad)
    final = reduce_fn(folded)
    partials_received = len(messages) - decode_failures

    result = JobResult(
        final=final,
        partials_received=partials_received,
        slaves_failed=slave_count - partials_received,
        slave_count=slave_count,
        bytes_transferred_total=sum(s.bytes_sent for s in ordered),
        wall_time_s=time.monotonic() - started,
        raw_data_bytes=raw_bytes,
        migrations_total=sum(s.migrations for s in ordered),
        slave_reports=tuple(s.report() for s in ordered),
    )
    if slave_count > 0 and partials_received == 0:
        raise AllSlavesFailed("no slave delivered a partial", result=result)
    return result
