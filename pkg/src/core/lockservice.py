"""Single-authority lease directory with fencing epochs.

Expiry is lazy: a dead record is pruned (and a lease-expire entry traced) the
first time it is touched after its expiry instant.
"""

import logging
from typing import Dict, List, Optional

from ..interfaces.lock_service import ILockService, LeaseLookup, LeaseRecord
from ..interfaces.rpc import Request, Response
from ..utils.helpers import format_detail, to_ms
from .errors import InvalidLeaseName, LeaseHeldError, LockServiceError, NoOwnerError, NotOwnerError
from .simkernel import SimKernel, TraceEvent

LOCKSERVICE_ACTOR = "lockservice"


def validate_lease_name(name: str) -> str:
    """A lease name is a non-empty '/'-separated path with no empty segment."""
    if not isinstance(name, str) or not name:
        raise InvalidLeaseName("lease name must be a non-empty string")
    if any(segment == "" for segment in name.split("/")):
        raise InvalidLeaseName(f"empty path segment in lease name: {name!r}")
    try:
        name.encode("utf-8")
    except UnicodeEncodeError as e:
        raise InvalidLeaseName(f"lease name is not valid UTF-8: {e}") from None
    return name


class LockService(ILockService):
    """In-process lease directory driven by the simulation clock."""

    def __init__(self, kernel: SimKernel, actor: str = LOCKSERVICE_ACTOR):
        self._kernel = kernel
        self._actor = actor
        self._records: Dict[str, LeaseRecord] = {}
        self._epochs: Dict[str, int] = {}
        self._logger = logging.getLogger(__name__)

    def _live(self, name: str) -> Optional[LeaseRecord]:
        record = self._records.get(name)
        if record is None:
            return None
        if record.is_live(self._kernel.now_ms):
            return record
        del self._records[name]
        self._kernel.record(self._actor, TraceEvent.LEASE_EXPIRE,
                            format_detail(name=name, owner=record.owner, epoch=record.epoch))
        self._logger.debug(f"Lease {name} of {record.owner} expired")
        return None

    def _trace(self, event: TraceEvent, record: LeaseRecord) -> None:
        self._kernel.record(self._actor, event, format_detail(
            name=record.name, owner=record.owner, epoch=record.epoch, expiry=record.expiry_ms))

    def acquire(self, name: str, owner: str, ttl: float) -> LeaseRecord:
        validate_lease_name(name)
        ttl_ms = to_ms(ttl)
        if ttl_ms <= 0:
            raise ValueError(f"lease ttl must be positive, got {ttl}")

        current = self._live(name)
        if current is not None and current.owner != owner:
            raise LeaseHeldError(f"{name} is held by {current.owner}")

        if current is not None:
            record = LeaseRecord(name, owner, self._kernel.now_ms, ttl_ms, current.epoch)
            self._records[name] = record
            self._trace(TraceEvent.LEASE_RENEW, record)
            return record

        epoch = self._epochs.get(name, 0) + 1
        self._epochs[name] = epoch
        record = LeaseRecord(name, owner, self._kernel.now_ms, ttl_ms, epoch)
        self._records[name] = record
        self._trace(TraceEvent.LEASE_GRANT, record)
        self._logger.debug(f"Granted {name} to {owner} (epoch {epoch})")
        return record

    def renew(self, name: str, owner: str) -> LeaseRecord:
        current = self._live(name)
        if current is None or current.owner != owner:
            raise NotOwnerError(f"{owner} does not hold {name}")
        record = LeaseRecord(name, owner, self._kernel.now_ms, current.ttl_ms, current.epoch)
        self._records[name] = record
        self._trace(TraceEvent.LEASE_RENEW, record)
        return record

    def release(self, name: str, owner: str) -> None:
        current = self._live(name)
        if current is None or current.owner != owner:
            raise NotOwnerError(f"{owner} does not hold {name}")
        del self._records[name]
        self._kernel.record(self._actor, TraceEvent.LEASE_RELEASE,
                            format_detail(name=name, owner=owner, epoch=current.epoch))
        self._logger.debug(f"{owner} released {name}")

    def lookup(self, name: str) -> LeaseLookup:
        current = self._live(name)
        if current is None:
            raise NoOwnerError(f"no owner for {name}")
        remaining_ms = current.expiry_ms - self._kernel.now_ms
        return LeaseLookup(current.owner, remaining_ms / 1000, current.epoch)

    def record_for(self, name: str) -> Optional[LeaseRecord]:
        """Live record of name, if any."""
        return self._live(name)

    def leases_owned_by(self, owner: str) -> List[LeaseRecord]:
        """Live records held by owner, in name order."""
        held = []
        for name in sorted(self._records):
            record = self._live(name)
            if record is not None and record.owner == owner:
                held.append(record)
        return held


def register_lease_methods(registry, lockservice: ILockService) -> None:
    """Expose the directory over the RPC wire as lease.acquire/renew/release/lookup.

    Fields: name carries the lease name, key the owner, value the ttl in
    seconds (acquire only). Refusals come back as app-errors carrying the
    error code.
    """

    def _guarded(operation):
        def handler(request: Request) -> Response:
            try:
                return operation(request)
            except (LockServiceError, ValueError) as e:
                code = getattr(e, "code", "bad-request")
                return Response.app_error(request, code)
        return handler

    def _owner(request: Request) -> str:
        return request.key.decode("utf-8")

    def _record_value(record: LeaseRecord) -> bytes:
        return f"{record.owner} {record.epoch} {record.expiry_ms}".encode("utf-8")

    def acquire(request: Request) -> Response:
        ttl = float(request.value.decode("utf-8"))
        return Response.ok(request, _record_value(lockservice.acquire(request.name, _owner(request), ttl)))

    def renew(request: Request) -> Response:
        return Response.ok(request, _record_value(lockservice.renew(request.name, _owner(request))))

    def release(request: Request) -> Response:
        lockservice.release(request.name, _owner(request))
        return Response.ok(request)

    def lookup(request: Request) -> Response:
        found = lockservice.lookup(request.name)
        return Response.ok(request, f"{found.owner} {found.remaining_ms} {found.epoch}".encode("utf-8"))

    registry.register("lease.acquire", _guarded(acquire), lease_scoped=False)
    registry.register("lease.renew", _guarded(renew), lease_scoped=False)
    registry.register("lease.release", _guarded(release), lease_scoped=False)
    registry.register("lease.lookup", _guarded(lookup), lease_scoped=False)
