"""Mobile agents: roles, lifecycle hooks, duplication and itinerary routing.

An agent is a small immutable value: identity, role, a reference to its job,
and the partial result it carries as an opaque byte payload. Computation
moves by shipping agents between nodes, never by shipping raw records.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable, Sequence

from .errors import DuplicateVisit, RoleError

# Plain ints, range-checked only at the wire boundary.
NodeId = int
AgentId = int


class AgentRole(IntEnum):
    """Agent roles. Values double as the wire encoding."""

    MAPPER = 0
    SLAVE = 1
    REDUCER = 2


def _noop(agent: "Agent") -> None:
    return None


@dataclass
class LifecycleCallbacks:
    """The two hooks a migration fires: one on departure, one on arrival.

    There are exactly two, invoked exactly once each per migration event.
    Invocation counters are kept here so cost experiments and tests can
    observe the "two callbacks per migration" contract directly.
    """

    on_depart: Callable[["Agent"], None] = _noop
    on_arrive: Callable[["Agent"], None] = _noop
    depart_count: int = 0
    arrive_count: int = 0

    def fire_depart(self, agent: "Agent") -> None:
        self.depart_count += 1
        self.on_depart(agent)

    def fire_arrive(self, agent: "Agent") -> None:
        self.arrive_count += 1
        self.on_arrive(agent)

    @property
    def total(self) -> int:
        return self.depart_count + self.arrive_count


@dataclass(frozen=True)
class TaskDescriptor:
    """What a job runs: map/reduce function ids plus a heap record filter.

    Function ids are resolved in a per-process registry; agents carry ids,
    never code. ``input_selector`` is a key prefix; empty selects everything.
    """

    map_fn_id: str
    reduce_fn_id: str
    input_selector: bytes = b""


@dataclass(frozen=True, eq=False)
class Agent:
    """One mobile unit of computation.

    ``payload_padding_bytes`` inflates the agent's serialized size for cost
    experiments; on the wire the padding is indistinguishable from trailing
    zero bytes of payload. ``origin`` is local bookkeeping and is not
    carried on the wire. Equality therefore compares the wire-carried
    state: id, role, job, itinerary and the *effective* (padded) payload.
    """

    id: AgentId
    role: AgentRole
    job_id: int
    payload: bytes = b""
    payload_padding_bytes: int = 0
    itinerary: tuple[NodeId, ...] = ()
    origin: NodeId = 0

    @property
    def effective_payload(self) -> bytes:
        if self.payload_padding_bytes == 0:
            return self.payload
        return self.payload + b"\x00" * self.payload_padding_bytes

    @property
    def effective_payload_len(self) -> int:
        return len(self.payload) + self.payload_padding_bytes

    @property
    def serialized_size(self) -> int:
        """Envelope size in bytes: fixed header/trailer plus itinerary plus payload."""
        return 32 + 4 * len(self.itinerary) + self.effective_payload_len

    def _key(self):
        return (self.id, self.role, self.job_id, self.itinerary, self.effective_payload)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Agent):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())


class AgentIdAllocator:
    """Issues fresh agent ids, never repeating within one job run."""

    def __init__(self, start: int = 1):
        self._counter = itertools.count(start)

    def next(self) -> AgentId:
        return next(self._counter)


_DEFAULT_ALLOCATOR = AgentIdAllocator(start=1_000_000)


def duplicate(mapper: Agent, n: int, ids: AgentIdAllocator | None = None) -> list[Agent]:
    """Copy a mapper into ``n`` slave agents with fresh distinct ids.

    Payload bytes (including padding) are copied exactly; itineraries start
    empty. Pass an allocator to get reproducible ids within a job run.
    """
    if mapper.role is not AgentRole.MAPPER:
        raise RoleError(f"only a mapper can duplicate, got {mapper.role.name}")
    if n < 0:
        raise ValueError("cannot make a negative number of copies")
    ids = ids or _DEFAULT_ALLOCATOR
    return [
        Agent(
            id=ids.next(),
            role=AgentRole.SLAVE,
            job_id=mapper.job_id,
            payload=mapper.payload,
            payload_padding_bytes=mapper.payload_padding_bytes,
            itinerary=(),
            origin=mapper.origin,
        )
        for _ in range(n)
    ]


def next_destination(
    agent: Agent,
    directory: Sequence[NodeId],
    node_has_data: Callable[[NodeId], bool],
    reducer_node: NodeId,
) -> NodeId:
    """Pick the slave's next hop, or the reducer when the tour is done.

    Candidates are scanned in ascending node id order; the first unvisited
    node that still holds matching data wins. The reducer is the total
    fallback, so this never fails.
    """
    if agent.role is not AgentRole.SLAVE:
        raise RoleError(f"only a slave routes via next_destination, got {agent.role.name}")
    visited = set(agent.itinerary)
    for node in sorted(directory):
        if node not in visited and node_has_data(node):
            return node
    return reducer_node


def record_visit(agent: Agent, node: NodeId) -> Agent:
    """Return the agent with ``node`` appended to its itinerary."""
    if node in agent.itinerary:
        raise DuplicateVisit(f"node {node} already visited")
    return replace(agent, itinerary=agent.itinerary + (node,))
