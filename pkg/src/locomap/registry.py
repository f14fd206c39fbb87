"""Per-process function registry and the partial-result algebra.

Agents carry function *ids*; the code those ids name lives here. Partials
travel as canonical JSON bytes so that equal values always serialize to
identical bytes, which is what makes whole-job runs reproducible.

A combine operation must be a commutative monoid over partials: slaves
arrive in no particular order, so aggregation is only correct when the
merge does not care. ``register_combine`` enforces that with a randomized
algebra check.
"""

from __future__ import annotations

import json
import random
from typing import Any, Callable, Iterable, Iterator

from .errors import ConfigError, DecodeError, UnknownFunction

Emission = tuple[str, Any]
MapFn = Callable[[bytes, bytes], Iterable[Emission]]
ReduceFn = Callable[[Any], Any]


def encode_partial(value: Any) -> bytes:
    """Canonical JSON bytes: sorted keys, no whitespace."""
    return json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_partial(data: bytes) -> Any:
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"malformed partial: {exc}") from exc


class CombineOp:
    """A named commutative monoid used to fold partial results.

    ``lift`` turns one map emission (key, value) into a mergeable partial;
    ``sample`` draws a random partial for the registration-time algebra
    check. ``fold`` has a generic implementation but may be overridden with
    something faster for hot workloads.
    """

    def __init__(
        self,
        name: str,
        identity: Callable[[], Any],
        merge: Callable[[Any, Any], Any],
        lift: Callable[[str, Any], Any],
        sample: Callable[[random.Random], Any],
        fold: Callable[[Any, Iterable[Emission]], Any] | None = None,
    ):
        self.name = name
        self.identity = identity
        self.merge = merge
        self.lift = lift
        self.sample = sample
        self._fold = fold

    def fold(self, partial: Any, emissions: Iterable[Emission]) -> Any:
        if self._fold is not None:
            return self._fold(partial, emissions)
        for key, value in emissions:
            partial = self.merge(partial, self.lift(key, value))
        return partial

    def __repr__(self) -> str:
        return f"CombineOp({self.name!r})"


def check_combine_algebra(op: CombineOp, trials: int = 40, seed: int = 0x5EED) -> None:
    """Reject merges that are not associative, not commutative, or ignore identity."""
    rng = random.Random(seed)
    for _ in range(trials):
        a, b, c = op.sample(rng), op.sample(rng), op.sample(rng)
        if op.merge(a, b) != op.merge(b, a):
            raise ConfigError(f"combine {op.name!r} is not commutative")
        if op.merge(op.merge(a, b), c) != op.merge(a, op.merge(b, c)):
            raise ConfigError(f"combine {op.name!r} is not associative")
        if op.merge(op.identity(), a) != a:
            raise ConfigError(f"combine {op.name!r} has a broken identity")


class FunctionRegistry:
    """Maps function ids to callables, and job ids to submitted job specs."""

    def __init__(self):
        self._maps: dict[str, MapFn] = {}
        self._reduces: dict[str, ReduceFn] = {}
        self._combines: dict[str, CombineOp] = {}
        self._jobs: dict[int, Any] = {}

    def register_map(self, fn_id: str, fn: MapFn) -> None:
        self._maps[fn_id] = fn

    def register_reduce(self, fn_id: str, fn: ReduceFn) -> None:
        self._reduces[fn_id] = fn

    def register_combine(self, op: CombineOp, check: bool = True) -> None:
        if check:
            check_combine_algebra(op)
        self._combines[op.name] = op

    def resolve_map(self, fn_id: str) -> MapFn:
        try:
            return self._maps[fn_id]
        except KeyError:
            raise UnknownFunction(f"no map function registered as {fn_id!r}") from None

    def resolve_reduce(self, fn_id: str) -> ReduceFn:
        try:
            return self._reduces[fn_id]
        except KeyError:
            raise UnknownFunction(f"no reduce function registered as {fn_id!r}") from None

    def resolve_combine(self, name: str) -> CombineOp:
        try:
            return self._combines[name]
        except KeyError:
            raise UnknownFunction(f"no combine operation registered as {name!r}") from None

    def register_job(self, spec) -> None:
        """Validate a job's function references and remember it by job id.

        Every id must resolve at submission time; a half-registered job
        never reaches a node.
        """
        self.resolve_map(spec.task.map_fn_id)
        self.resolve_reduce(spec.task.reduce_fn_id)
        self.resolve_combine(spec.combine)
        self._jobs[spec.job_id] = spec

    def job(self, job_id: int):
        try:
            return self._jobs[job_id]
        except KeyError:
            raise UnknownFunction(f"no job registered with id {job_id}") from None


# --- built-in workload: sum-by-key partials (dict[str, number]) ---------


def _sbk_identity() -> dict:
    return {}


def _sbk_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for key, value in b.items():
        out[key] = out.get(key, 0) + value
    return out


def _sbk_lift(key: str, value: Any) -> dict:
    return {key: value}


def _sbk_sample(rng: random.Random) -> dict:
    return {f"k{rng.randrange(6)}": rng.randrange(-50, 50) for _ in range(rng.randrange(5))}


def _sbk_fold(partial: dict, emissions: Iterable[Emission]) -> dict:
    # In-place fast path; equivalent to repeated merge(lift(...)).
    out = dict(partial)
    get = out.get
    for key, value in emissions:
        out[key] = get(key, 0) + value
    return out


SUM_BY_KEY = CombineOp(
    name="sum-by-key",
    identity=_sbk_identity,
    merge=_sbk_merge,
    lift=_sbk_lift,
    sample=_sbk_sample,
    fold=_sbk_fold,
)


def wordcount_map(key: bytes, value: bytes) -> Iterator[Emission]:
    for word in value.decode("utf-8", "replace").split():
        yield (word, 1)


def sum_map(key: bytes, value: bytes) -> Iterator[Emission]:
    yield ("sum", int(value))


def identity_reduce(partial: Any) -> Any:
    return partial


def build_default_registry() -> FunctionRegistry:
    reg = FunctionRegistry()
    reg.register_map("wordcount-map", wordcount_map)
    reg.register_map("sum-map", sum_map)
    reg.register_reduce("identity", identity_reduce)
    reg.register_combine(SUM_BY_KEY)
    return reg


DEFAULT_REGISTRY = build_default_registry()

# Built-in jobs the CLI and tests refer to by name.
BUILTIN_JOBS: dict[str, tuple[str, str, str]] = {
    # name -> (map_fn_id, reduce_fn_id, combine)
    "wordcount": ("wordcount-map", "identity", "sum-by-key"),
    "sum": ("sum-map", "identity", "sum-by-key"),
}
