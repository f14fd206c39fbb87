"""Sensor node runtime: the heap store, data ingestion, agent hosting.

Sensor networks here have no shared file system, so every node keeps its
sensed records in an in-memory heap store and agents come to the data.
Hosting an agent is strictly read-only over the heap: slaves compute and
carry results away, they never mutate what the node sensed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

from .agents import Agent, AgentRole, NodeId, record_visit
from .errors import ExecutionError, RoleError, UnknownFunction
from .registry import FunctionRegistry, decode_partial, encode_partial


@dataclass(frozen=True)
class Record:
    """One sensed datum. Keys are non-empty byte strings."""

    key: bytes
    value: bytes
    timestamp_ms: int = 0

    def __post_init__(self):
        if not self.key:
            raise ValueError("record key must be non-empty")

    @property
    def size(self) -> int:
        return len(self.key) + len(self.value)


class HeapStore:
    """Ordered in-memory key -> records map standing in for a file system.

    Iteration is deterministic: ascending key, insertion order within a
    key. ``total_bytes`` is maintained on every put and always equals the
    sum of stored key+value sizes.
    """

    def __init__(self):
        self._records: dict[bytes, list[Record]] = {}
        self.total_bytes = 0

    def put(self, record: Record) -> None:
        self._records.setdefault(record.key, []).append(record)
        self.total_bytes += record.size

    def __len__(self) -> int:
        return sum(len(bucket) for bucket in self._records.values())

    def records(self) -> Iterator[Record]:
        for key in sorted(self._records):
            yield from self._records[key]

    def records_matching(self, selector: bytes) -> Iterator[Record]:
        """Records whose key starts with ``selector`` (empty matches all)."""
        for key in sorted(self._records):
            if key.startswith(selector):
                yield from self._records[key]

    def has_match(self, selector: bytes) -> bool:
        return any(key.startswith(selector) for key in self._records)


@dataclass
class SensorNode:
    """One node: identity, heap, and its (modest) resource envelope.

    ``cpu_rank`` 0 marks a node as unavailable for deployment; the
    orchestrator skips it. Over-limit ingestion drops records and counts
    them rather than evicting, because constrained sensors simply fill up.
    """

    id: NodeId
    heap: HeapStore = field(default_factory=HeapStore)
    mem_bytes_limit: int = 1 << 30
    cpu_rank: int = 1
    dropped: int = 0

    def ingest(self, records: Iterable[Record]) -> int:
        """Append records until the memory limit; returns how many stuck."""
        stored = 0
        for record in records:
            if self.heap.total_bytes + record.size <= self.mem_bytes_limit:
                self.heap.put(record)
                stored += 1
            else:
                self.dropped += 1
        return stored

    def is_empty(self, selector: bytes = b"") -> bool:
        return not self.heap.has_match(selector)

    def host(self, agent: Agent, registry: FunctionRegistry) -> Agent:
        """Run the agent's map task over matching heap records, in place.

        Emitted key/value pairs are folded into the agent's payload with
        the job's combine operation. The heap is never modified. The node
        lands on the itinerary even when the map function blows up, so a
        tour can continue past a bad node (ExecutionError carries the
        visited agent).
        """
        if agent.role not in (AgentRole.SLAVE, AgentRole.MAPPER):
            raise RoleError(f"a {agent.role.name} agent cannot process node data")
        spec = registry.job(agent.job_id)
        map_fn = registry.resolve_map(spec.task.map_fn_id)
        combine = registry.resolve_combine(spec.combine)

        visited = record_visit(agent, self.id)
        if not self.heap.has_match(spec.task.input_selector):
            return visited
        partial = decode_partial(agent.payload) if agent.payload else combine.identity()

        def emissions():
            for record in self.heap.records_matching(spec.task.input_selector):
                yield from map_fn(record.key, record.value)

        try:
            folded = combine.fold(partial, emissions())
        except UnknownFunction:
            raise
        except Exception as exc:
            raise ExecutionError(f"map function failed on node {self.id}: {exc}", agent=visited) from exc
        return replace(visited, payload=encode_partial(folded))


def load_records_tsv(path: str | Path) -> list[Record]:
    """Read newline-delimited ``key<TAB>value`` records.

    Timestamps are assigned at load as the zero-based line number, which
    keeps repeated loads byte-for-byte reproducible. Blank lines are
    skipped; a line without a tab is a record with an empty value.
    """
    records = []
    data = Path(path).read_bytes()
    for lineno, line in enumerate(data.split(b"\n")):
        if not line:
            continue
        key, _, value = line.partition(b"\t")
        records.append(Record(key=key, value=value, timestamp_ms=lineno))
    return records
