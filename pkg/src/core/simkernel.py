"""Deterministic discrete-event kernel: logical clock, scheduler, faulty network, trace.

Time is kept in whole milliseconds on a simpy environment whose time unit is
1 ms. Public arguments are seconds. Everything runs on one logical thread; two
runs of the same scenario with the same seed produce the same trace.
"""

import itertools
import logging
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, FrozenSet, Generator, Iterator, List, Optional, Set

import simpy

from ..interfaces.sim_entity import ISimEntity
from ..utils.helpers import derive_seed, fnv1a_64, format_detail, to_ms
from .errors import ScenarioError

KERNEL_ACTOR = "kernel"
NETWORK_ACTOR = "net"


class TraceEvent(str, Enum):
    """Kinds of trace entries."""
    SEND = "send"
    DELIVER = "deliver"
    DROP = "drop"
    TIMEOUT_FIRE = "timeout-fire"
    LEASE_GRANT = "lease-grant"
    LEASE_RENEW = "lease-renew"
    LEASE_RELEASE = "lease-release"
    LEASE_EXPIRE = "lease-expire"
    FAULT = "fault"
    APPLY = "apply"
    ACK = "ack"
    SPLIT = "split"


class FaultKind(str, Enum):
    """Injectable faults."""
    CRASH_SERVER = "crash-server"
    RESTART_SERVER = "restart-server"
    DROP_LINK = "drop-link"
    HEAL_LINK = "heal-link"
    SPLIT_TABLET = "split-tablet"

    @classmethod
    def from_token(cls, token: str) -> "FaultKind":
        """Accept both the full kind and the scenario shorthand ('crash', 'drop', ...)."""
        for kind in cls:
            if token in (kind.value, kind.value.split("-")[0]):
                return kind
        raise ValueError(f"unknown fault kind: {token}")


@dataclass(frozen=True)
class FaultSpec:
    """A scheduled fault."""
    at: float
    kind: FaultKind
    target: str
    arg: Optional[str] = None

    def __post_init__(self):
        if self.at < 0:
            raise ValueError("fault time must be non-negative")

    def link_ends(self) -> FrozenSet[str]:
        """Endpoints of a link target written 'a:b'."""
        left, sep, right = self.target.partition(":")
        if not sep or not left or not right:
            raise ScenarioError(f"link target must look like a:b, got {self.target}")
        return frozenset((left, right))


@dataclass(frozen=True)
class TraceEntry:
    """One line of the trace."""
    at_ms: int
    seq: int
    actor: str
    event: TraceEvent
    detail: str

    @property
    def at(self) -> float:
        return self.at_ms / 1000

    def render(self) -> str:
        return f"{self.at_ms}\t{self.seq}\t{self.actor}\t{self.event.value}\t{self.detail}"


class Trace:
    """Append-only, totally ordered event log of a run."""

    def __init__(self, entries: Optional[List[TraceEntry]] = None):
        self._entries: List[TraceEntry] = list(entries or [])

    def append(self, entry: TraceEntry) -> None:
        self._entries.append(entry)

    @property
    def entries(self) -> List[TraceEntry]:
        return self._entries

    def of(self, event: TraceEvent) -> List[TraceEntry]:
        return [entry for entry in self._entries if entry.event is event]

    def render(self) -> str:
        return "".join(entry.render() + "\n" for entry in self._entries)

    def to_bytes(self) -> bytes:
        return self.render().encode("utf-8")

    def __iter__(self) -> Iterator[TraceEntry]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


def trace_hash(trace: Trace) -> int:
    """FNV-1a over the canonical text rendering of the trace."""
    return fnv1a_64(trace.to_bytes())


class SimKernel:
    """Logical clock, event scheduler and simulated network."""

    def __init__(self, seed: int = 0, latency: float = 0.01):
        latency_ms = to_ms(latency)
        if latency_ms < 1:
            raise ValueError("network latency must be at least 1 ms")
        self._env = simpy.Environment()
        self._seed = seed
        self._latency_ms = latency_ms
        self._trace = Trace()
        self._seq = itertools.count()
        self._event_ids = itertools.count(1)
        self._msg_ids = itertools.count(1)
        self._cancelled: Set[int] = set()
        self._entities: Dict[str, ISimEntity] = {}
        self._crashed: Set[str] = set()
        self._dropped_links: Set[FrozenSet[str]] = set()
        self._streams: Dict[str, random.Random] = {}
        self._target_validators: Dict[FaultKind, Callable[[str], bool]] = {}
        self._fault_listeners: List[Callable[[FaultSpec], None]] = []
        self._halted = False
        self.events_processed = 0
        self._logger = logging.getLogger(__name__)

    # -- clock and scheduler -------------------------------------------------

    @property
    def env(self) -> simpy.Environment:
        return self._env

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def now_ms(self) -> int:
        return int(self._env.now)

    @property
    def latency_ms(self) -> int:
        return self._latency_ms

    def now(self) -> float:
        """Current logical time in seconds."""
        return self.now_ms / 1000

    def schedule(self, delay: float, action: Callable[[], None]) -> int:
        """Run action after delay seconds; equal times fire in scheduling order."""
        if delay < 0:
            raise ValueError(f"negative delay: {delay}")
        return self.schedule_ms(to_ms(delay), action)

    def schedule_ms(self, delay_ms: int, action: Callable[[], None]) -> int:
        if delay_ms < 0:
            raise ValueError(f"negative delay: {delay_ms} ms")
        event_id = next(self._event_ids)
        timer = self._env.timeout(delay_ms)
        timer.callbacks.append(lambda _event: self._fire(event_id, action))
        return event_id

    def cancel(self, event_id: int) -> None:
        """Suppress a pending scheduled action."""
        self._cancelled.add(event_id)

    def _fire(self, event_id: int, action: Callable[[], None]) -> None:
        if event_id in self._cancelled:
            self._cancelled.discard(event_id)
            return
        action()

    def timeout_ms(self, delay_ms: int) -> simpy.Event:
        return self._env.timeout(delay_ms)

    def event(self) -> simpy.Event:
        return self._env.event()

    def process(self, generator: Generator) -> simpy.Process:
        return self._env.process(generator)

    def halt(self) -> None:
        """Stop the current run_until at the present instant."""
        self._halted = True

    def run_until(self, horizon: float) -> Trace:
        """Process every event with time <= horizon, then advance the clock to horizon."""
        horizon_ms = to_ms(horizon)
        if horizon_ms < self.now_ms:
            raise ValueError(f"horizon {horizon} is in the past (now {self.now()})")
        self._halted = False
        while not self._halted and self._env.peek() <= horizon_ms:
            self._env.step()
            self.events_processed += 1
        if not self._halted and self._env.now < horizon_ms:
            self._env.run(until=horizon_ms)
        return self._trace

    # -- randomness ------------------------------------------------------------

    def rng(self, stream: str) -> random.Random:
        """Named substream; adding a stream never perturbs another."""
        if stream not in self._streams:
            self._streams[stream] = random.Random(derive_seed(self._seed, stream))
        return self._streams[stream]

    # -- trace -----------------------------------------------------------------

    @property
    def trace(self) -> Trace:
        return self._trace

    def record(self, actor: str, event: TraceEvent, detail: str = "") -> TraceEntry:
        clean = detail.replace("\t", " ").replace("\n", " ")
        entry = TraceEntry(self.now_ms, next(self._seq), actor, event, clean)
        self._trace.append(entry)
        return entry

    # -- network ---------------------------------------------------------------

    def register(self, entity: ISimEntity) -> None:
        if entity.entity_id in self._entities:
            raise ScenarioError(f"duplicate entity id: {entity.entity_id}")
        self._entities[entity.entity_id] = entity

    def entity(self, entity_id: str) -> ISimEntity:
        try:
            return self._entities[entity_id]
        except KeyError:
            raise ScenarioError(f"unknown entity: {entity_id}") from None

    def knows(self, entity_id: str) -> bool:
        return entity_id in self._entities

    def is_alive(self, entity_id: str) -> bool:
        return entity_id in self._entities and entity_id not in self._crashed

    def send(self, src: str, dst: str, payload: bytes) -> int:
        """Send one message; it is delivered after one hop unless a fault intervenes."""
        msg_id = next(self._msg_ids)
        self.record(src, TraceEvent.SEND, format_detail(m=msg_id, to=dst, bytes=len(payload)))
        reason = self._blocked(src, dst)
        if reason:
            self.record(NETWORK_ACTOR, TraceEvent.DROP, format_detail(m=msg_id, to=dst, reason=reason))
            return msg_id
        self.schedule_ms(self._latency_ms, lambda: self._deliver(msg_id, src, dst, payload))
        return msg_id

    def _blocked(self, src: str, dst: str) -> Optional[str]:
        if dst not in self._entities:
            return "unknown-host"
        if dst in self._crashed:
            return "crashed"
        if frozenset((src, dst)) in self._dropped_links:
            return "link-down"
        return None

    def _deliver(self, msg_id: int, src: str, dst: str, payload: bytes) -> None:
        reason = self._blocked(src, dst)
        if reason:
            self.record(NETWORK_ACTOR, TraceEvent.DROP, format_detail(m=msg_id, to=dst, reason=reason))
            return
        self.record(dst, TraceEvent.DELIVER, format_detail(m=msg_id, src=src))
        self._entities[dst].on_message(src, payload)

    # -- faults ----------------------------------------------------------------

    def add_target_validator(self, kind: FaultKind, known: Callable[[str], bool]) -> None:
        """Teach the kernel which targets are valid for a fault kind it does not own."""
        self._target_validators[kind] = known

    def add_fault_listener(self, listener: Callable[[FaultSpec], None]) -> None:
        """Listener runs right after a fault is applied."""
        self._fault_listeners.append(listener)

    def inject_fault(self, spec: FaultSpec) -> None:
        """Schedule spec to be applied at spec.at."""
        self._validate_target(spec)
        delay_ms = to_ms(spec.at) - self.now_ms
        if delay_ms < 0:
            raise ValueError(f"fault at {spec.at} is in the past (now {self.now()})")
        self.schedule_ms(delay_ms, lambda: self._apply_fault(spec))

    def _validate_target(self, spec: FaultSpec) -> None:
        if spec.kind in (FaultKind.CRASH_SERVER, FaultKind.RESTART_SERVER):
            if spec.target not in self._entities:
                raise ScenarioError(f"unknown fault target: {spec.target}")
        elif spec.kind in (FaultKind.DROP_LINK, FaultKind.HEAL_LINK):
            for end in sorted(spec.link_ends()):
                if end not in self._entities:
                    raise ScenarioError(f"unknown link endpoint: {end}")
        else:
            known = self._target_validators.get(spec.kind)
            if known is None or not known(spec.target):
                raise ScenarioError(f"unknown fault target: {spec.target}")

    def _apply_fault(self, spec: FaultSpec) -> None:
        self.record(KERNEL_ACTOR, TraceEvent.FAULT,
                    format_detail(kind=spec.kind.value, target=spec.target, arg=spec.arg))
        self._logger.info(f"Fault {spec.kind.value} on {spec.target} at {self.now():.3f}s")

        if spec.kind is FaultKind.CRASH_SERVER:
            if spec.target in self._crashed:
                self._logger.warning(f"{spec.target} is already down")
                return
            self._crashed.add(spec.target)
            self._entities[spec.target].on_crash()
        elif spec.kind is FaultKind.RESTART_SERVER:
            if spec.target not in self._crashed:
                self._logger.warning(f"{spec.target} is not down, restart ignored")
                return
            self._crashed.discard(spec.target)
            self._entities[spec.target].on_restart()
        elif spec.kind is FaultKind.DROP_LINK:
            self._dropped_links.add(spec.link_ends())
        elif spec.kind is FaultKind.HEAL_LINK:
            self._dropped_links.discard(spec.link_ends())

        for listener in self._fault_listeners:
            listener(spec)
