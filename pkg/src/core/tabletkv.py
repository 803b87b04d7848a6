"""Sharded key-value store whose tablets are lease-named key ranges.

Ranges are half-open [start, end) under bytewise order; end None means +inf.
Every applied put is traced as an `apply` entry, which is the durable record
that recovery replays.
"""

import bisect
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from ..config.settings import LeaseConfig
from ..interfaces.lock_service import LeaseRecord
from ..interfaces.rpc import Request, Response
from ..interfaces.sim_entity import ISimEntity
from ..utils.helpers import format_detail, hex_to_bytes, parse_detail, to_ms
from .errors import BadSplit, LeaseHeldError, NotOwnerError
from .lockservice import LockService
from .rpc_core import HandlerRegistry, RpcServer
from .simkernel import FaultKind, FaultSpec, SimKernel, Trace, TraceEvent

TABLET_PREFIX = "tablets/"

METHOD_PUT = "kv.put"
METHOD_GET = "kv.get"
METHOD_SPLIT = "admin.split"

NOT_FOUND = "not-found"
WRONG_TABLET = "wrong-tablet"


def tablet_lease_name(tablet_id: str) -> str:
    return TABLET_PREFIX + tablet_id


def tablet_id_of(lease_name: str) -> Optional[str]:
    if not lease_name.startswith(TABLET_PREFIX):
        return None
    return lease_name[len(TABLET_PREFIX):]


@dataclass(frozen=True)
class TabletDescriptor:
    """One tablet: keys in [start_key, end_key)."""
    id: str
    start_key: bytes = b""
    end_key: Optional[bytes] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("tablet id must be non-empty")
        if self.end_key is not None and not self.start_key < self.end_key:
            raise ValueError(f"tablet {self.id}: start {self.start_key!r} must be below end {self.end_key!r}")

    @property
    def lease_name(self) -> str:
        return tablet_lease_name(self.id)

    def contains(self, key: bytes) -> bool:
        return self.start_key <= key and (self.end_key is None or key < self.end_key)

    def describe(self) -> str:
        end = "inf" if self.end_key is None else repr(self.end_key)
        return f"{self.id}[{self.start_key!r}, {end})"


@dataclass(frozen=True)
class TabletMap:
    """Ordered, disjoint tablets covering the whole keyspace."""
    tablets: Tuple[TabletDescriptor, ...]
    version: int = 0
    _starts: Tuple[bytes, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.tablets, key=lambda t: t.start_key))
        if not ordered:
            raise ValueError("a tablet map needs at least one tablet")
        if ordered[0].start_key != b"":
            raise ValueError("tablets must start at the empty key")
        for left, right in zip(ordered, ordered[1:]):
            if left.end_key != right.start_key:
                raise ValueError(f"tablets {left.id} and {right.id} leave a gap or overlap")
        if ordered[-1].end_key is not None:
            raise ValueError("the last tablet must extend to infinity")
        ids = [t.id for t in ordered]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate tablet id")
        object.__setattr__(self, "tablets", ordered)
        object.__setattr__(self, "_starts", tuple(t.start_key for t in ordered))

    @classmethod
    def single(cls, tablet_id: str = "T0") -> "TabletMap":
        return cls((TabletDescriptor(tablet_id),))

    def descriptor_for(self, key: bytes) -> TabletDescriptor:
        index = bisect.bisect_right(self._starts, key) - 1
        return self.tablets[index]

    def lease_name_for(self, key: bytes) -> Optional[str]:
        return self.descriptor_for(key).lease_name

    def get(self, tablet_id: str) -> Optional[TabletDescriptor]:
        for tablet in self.tablets:
            if tablet.id == tablet_id:
                return tablet
        return None

    def ids(self) -> List[str]:
        return [t.id for t in self.tablets]


def tablet_for_key(tablet_map: TabletMap, key: bytes) -> str:
    """Lease name of the unique tablet with start <= key < end."""
    return tablet_map.descriptor_for(key).lease_name


def split(tablet_map: TabletMap, tablet_id: str, split_key: bytes) -> TabletMap:
    """Replace tablet_id by children <id>a = [start, split_key) and <id>b = [split_key, end)."""
    parent = tablet_map.get(tablet_id)
    if parent is None:
        raise BadSplit(f"unknown tablet {tablet_id}")
    if split_key <= parent.start_key or (parent.end_key is not None and split_key >= parent.end_key):
        raise BadSplit(f"split key {split_key!r} is not strictly inside {parent.describe()}")
    left = TabletDescriptor(tablet_id + "a", parent.start_key, split_key)
    right = TabletDescriptor(tablet_id + "b", split_key, parent.end_key)
    if tablet_map.get(left.id) or tablet_map.get(right.id):
        raise BadSplit(f"child ids of {tablet_id} are already taken")
    others = tuple(t for t in tablet_map.tablets if t.id != tablet_id)
    return TabletMap(others + (left, right), tablet_map.version + 1)


def could_descend(tablet_id: str, known: Iterable[str]) -> bool:
    """A known tablet, or a descendant that later splits of one could create."""
    return any(tablet_id.startswith(k) and set(tablet_id[len(k):]) <= {"a", "b"} for k in known)


class TabletDirectory:
    """The live tablet map that clients and servers consult."""

    def __init__(self, initial: TabletMap):
        self._current = initial
        self._ever: List[str] = initial.ids()

    @property
    def current(self) -> TabletMap:
        return self._current

    def split(self, tablet_id: str, split_key: bytes) -> Tuple[TabletDescriptor, TabletDescriptor]:
        self._current = split(self._current, tablet_id, split_key)
        left, right = self._current.get(tablet_id + "a"), self._current.get(tablet_id + "b")
        self._ever.extend([left.id, right.id])
        return left, right

    def could_exist(self, tablet_id: str) -> bool:
        return could_descend(tablet_id, self._ever)


def replay_durable(trace: Trace, descriptor: TabletDescriptor) -> Dict[bytes, bytes]:
    """Rebuild a tablet from the traced applies of keys in its range, last write wins.

    At every instant exactly one tablet covers a key, so the applies of a key
    in trace order are its complete history.
    """
    data: Dict[bytes, bytes] = {}
    for entry in trace.of(TraceEvent.APPLY):
        fields = parse_detail(entry.detail)
        key = hex_to_bytes(fields.get("key", ""))
        if descriptor.contains(key):
            data[key] = hex_to_bytes(fields.get("value", ""))
    return data


class TabletServer(ISimEntity):
    """A tablet server: per-tablet tables, held leases, a renewal loop."""

    def __init__(
        self,
        entity_id: str,
        kernel: SimKernel,
        lockservice: LockService,
        directory: TabletDirectory,
        lease_config: LeaseConfig,
        placement: Optional[Callable[[str, "TabletServer"], "TabletServer"]] = None,
    ):
        self._entity_id = entity_id
        self._kernel = kernel
        self._lockservice = lockservice
        self._directory = directory
        self._ttl = lease_config.default_ttl
        self._renew_interval_ms = max(1, to_ms(lease_config.renew_interval))
        self._placement = placement
        self._tables: Dict[str, Dict[bytes, bytes]] = {}
        self._held: Dict[str, LeaseRecord] = {}
        self._incarnation = 0
        self._renewing = False
        self._logger = logging.getLogger(__name__)

        registry = HandlerRegistry()
        registry.register(METHOD_PUT, self._handle_put)
        registry.register(METHOD_GET, self._handle_get)
        registry.register(METHOD_SPLIT, self._handle_split)
        self._rpc = RpcServer(registry, self._holds, name=entity_id)

    @property
    def entity_id(self) -> str:
        return self._entity_id

    @property
    def rpc(self) -> RpcServer:
        return self._rpc

    def tablets(self) -> List[str]:
        return sorted(self._tables)

    def table(self, tablet_id: str) -> Dict[bytes, bytes]:
        return dict(self._tables.get(tablet_id, {}))

    def held_epoch(self, tablet_id: str) -> Optional[int]:
        record = self._held.get(tablet_lease_name(tablet_id))
        return record.epoch if record else None

    # -- sim entity ------------------------------------------------------------

    def on_message(self, src: str, payload: bytes) -> None:
        reply = self._rpc.dispatch(payload)
        if reply is not None:
            self._kernel.send(self._entity_id, src, reply)

    def on_crash(self) -> None:
        self._incarnation += 1
        self._renewing = False
        self._held.clear()
        self._tables.clear()
        self._logger.info(f"{self._entity_id} crashed, volatile state lost")

    def on_restart(self) -> None:
        self._logger.info(f"{self._entity_id} restarted with no tablets")

    # -- leases ----------------------------------------------------------------

    def _holds(self, lease_name: str, client_epoch: Optional[int]) -> bool:
        record = self._held.get(lease_name)
        if record is None:
            return False
        if not record.is_live(self._kernel.now_ms):
            self._drop(lease_name)
            return False
        return client_epoch is None or record.epoch >= client_epoch

    def _drop(self, lease_name: str) -> None:
        self._held.pop(lease_name, None)
        tablet_id = tablet_id_of(lease_name)
        if tablet_id is not None:
            self._tables.pop(tablet_id, None)

    def acquire_tablet(self, tablet_id: str, data: Optional[Dict[bytes, bytes]] = None,
                       recover: bool = False) -> bool:
        """Take the tablet's lease and install its state (given, or replayed from the trace)."""
        descriptor = self._directory.current.get(tablet_id)
        if descriptor is None:
            self._logger.warning(f"{self._entity_id} cannot serve unknown tablet {tablet_id}")
            return False
        try:
            record = self._lockservice.acquire(descriptor.lease_name, self._entity_id, self._ttl)
        except LeaseHeldError as e:
            self._logger.info(f"{self._entity_id} lost the race for {tablet_id}: {e}")
            return False
        self._held[descriptor.lease_name] = record
        if recover:
            data = replay_durable(self._kernel.trace, descriptor)
        self._tables[tablet_id] = dict(data or {})
        self._logger.info(f"{self._entity_id} serves {descriptor.describe()} at epoch {record.epoch}")
        self._ensure_renewal()
        return True

    def _ensure_renewal(self) -> None:
        if not self._renewing:
            self._renewing = True
            self._kernel.process(self._renewal_loop(self._incarnation))

    def _renewal_loop(self, incarnation: int):
        while self._incarnation == incarnation and self._held:
            yield self._kernel.timeout_ms(self._renew_interval_ms)
            if self._incarnation != incarnation:
                return
            for name in list(self._held):
                try:
                    self._held[name] = self._lockservice.renew(name, self._entity_id)
                except NotOwnerError:
                    self._logger.warning(f"{self._entity_id} lost lease {name}")
                    self._drop(name)
        if self._incarnation == incarnation:
            self._renewing = False

    # -- handlers --------------------------------------------------------------

    def _descriptor_for_request(self, request: Request) -> Optional[TabletDescriptor]:
        tablet_id = tablet_id_of(request.name)
        if tablet_id is None:
            return None
        descriptor = self._directory.current.get(tablet_id)
        if descriptor is None or not descriptor.contains(request.key):
            return None
        return descriptor

    def _handle_put(self, request: Request) -> Response:
        descriptor = self._descriptor_for_request(request)
        if descriptor is None:
            return Response.app_error(request, WRONG_TABLET)
        self._tables.setdefault(descriptor.id, {})[request.key] = request.value
        self._kernel.record(self._entity_id, TraceEvent.APPLY, format_detail(
            tablet=descriptor.id, key=request.key, value=request.value,
            epoch=self._held[descriptor.lease_name].epoch))
        return Response.ok(request)

    def _handle_get(self, request: Request) -> Response:
        descriptor = self._descriptor_for_request(request)
        if descriptor is None:
            return Response.app_error(request, WRONG_TABLET)
        table = self._tables.get(descriptor.id, {})
        if request.key not in table:
            return Response.app_error(request, NOT_FOUND)
        return Response.ok(request, table[request.key])

    def _handle_split(self, request: Request) -> Response:
        tablet_id = request.key.decode("utf-8", errors="replace")
        if request.name != tablet_lease_name(tablet_id):
            return Response.app_error(request, WRONG_TABLET)
        left, right = self.split_tablet(tablet_id, request.value)
        return Response.ok(request, f"{left.id},{right.id}".encode("utf-8"))

    def split_tablet(self, tablet_id: str, split_key: bytes) -> Tuple[TabletDescriptor, TabletDescriptor]:
        """Split a tablet this server holds; children are served before this returns."""
        parent_name = tablet_lease_name(tablet_id)
        left, right = self._directory.split(tablet_id, split_key)
        data = self._tables.pop(tablet_id, {})
        self._lockservice.release(parent_name, self._entity_id)
        self._held.pop(parent_name, None)
        self._kernel.record(self._entity_id, TraceEvent.SPLIT, format_detail(
            tablet=tablet_id, at=split_key, left=left.id, right=right.id))
        self._logger.info(f"{self._entity_id} split {tablet_id} at {split_key!r}")

        self.acquire_tablet(left.id, {k: v for k, v in data.items() if left.contains(k)})
        heir = self._placement(right.id, self) if self._placement else self
        heir.acquire_tablet(right.id, {k: v for k, v in data.items() if right.contains(k)})
        return left, right


class FailoverCoordinator:
    """Reassign a crashed server's tablets to standbys once its leases expire."""

    def __init__(self, kernel: SimKernel, lockservice: LockService,
                 directory: TabletDirectory, standbys: Sequence[TabletServer]):
        self._kernel = kernel
        self._lockservice = lockservice
        self._directory = directory
        self._standbys = list(standbys)
        self._logger = logging.getLogger(__name__)

    def on_fault(self, spec: FaultSpec) -> None:
        if spec.kind is FaultKind.CRASH_SERVER:
            self.reassign_on_crash(spec.target)

    def reassign_on_crash(self, server_id: str) -> None:
        """Every standby tries to take each lease right after it expires; one wins."""
        candidates = [s for s in self._standbys if s.entity_id != server_id]
        for record in self._lockservice.leases_owned_by(server_id):
            tablet_id = tablet_id_of(record.name)
            if tablet_id is None:
                continue
            if not candidates:
                self._logger.warning(f"No standby to take over {tablet_id} from {server_id}")
                continue
            delay_ms = record.expiry_ms - self._kernel.now_ms + self._kernel.latency_ms
            self._logger.info(f"{tablet_id} of {server_id} up for takeover in {delay_ms} ms")
            for standby in candidates:
                self._kernel.schedule_ms(delay_ms, self._takeover(standby, tablet_id))

    def _takeover(self, standby: TabletServer, tablet_id: str) -> Callable[[], None]:
        def attempt() -> None:
            if not self._kernel.is_alive(standby.entity_id):
                return
            if self._directory.current.get(tablet_id) is None:
                return
            standby.acquire_tablet(tablet_id, recover=True)
        return attempt


def build_split_request(tablet_id: str, split_key: bytes, epoch: Optional[int], request_id: int = 0) -> Request:
    """admin.split request: tablet id in key, split key in value."""
    return Request(id=request_id, method=METHOD_SPLIT, name=tablet_lease_name(tablet_id),
                   key=tablet_id.encode("utf-8"), value=split_key, epoch=epoch)

