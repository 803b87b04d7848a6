"""Safety checks over a finished trace.

Each check returns human-readable violations; an empty list means the run
was clean.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Set

from ..utils.helpers import parse_detail
from .simkernel import FaultKind, Trace, TraceEntry, TraceEvent
from .tabletkv import tablet_lease_name


@dataclass
class _Holder:
    owner: str
    expiry_ms: int


def check_clock(trace: Trace) -> List[str]:
    violations = []
    previous: Optional[TraceEntry] = None
    for entry in trace:
        if previous is not None:
            if entry.at_ms < previous.at_ms:
                violations.append(f"clock went back at seq {entry.seq}: {previous.at_ms} -> {entry.at_ms}")
            if entry.seq <= previous.seq:
                violations.append(f"sequence not increasing at seq {entry.seq}")
        previous = entry
    return violations


def check_causality(trace: Trace) -> List[str]:
    """Every deliver or drop follows the send of the same message; deliveries strictly later."""
    violations = []
    sent: Dict[str, TraceEntry] = {}
    for entry in trace:
        if entry.event not in (TraceEvent.SEND, TraceEvent.DELIVER, TraceEvent.DROP):
            continue
        msg = parse_detail(entry.detail).get("m", "")
        if entry.event is TraceEvent.SEND:
            sent[msg] = entry
            continue
        origin = sent.get(msg)
        if origin is None:
            violations.append(f"{entry.event.value} of message {msg} without a send (seq {entry.seq})")
        elif entry.event is TraceEvent.DELIVER and entry.at_ms <= origin.at_ms:
            violations.append(f"message {msg} delivered at {entry.at_ms} but sent at {origin.at_ms}")
    return violations


def check_faults(trace: Trace) -> List[str]:
    """Nothing is delivered to a crashed entity."""
    violations = []
    down: Set[str] = set()
    for entry in trace:
        if entry.event is TraceEvent.FAULT:
            fields = parse_detail(entry.detail)
            if fields.get("kind") == FaultKind.CRASH_SERVER.value:
                down.add(fields.get("target", ""))
            elif fields.get("kind") == FaultKind.RESTART_SERVER.value:
                down.discard(fields.get("target", ""))
        elif entry.event is TraceEvent.DELIVER and entry.actor in down:
            violations.append(f"delivery to crashed {entry.actor} at {entry.at_ms} (seq {entry.seq})")
    return violations


def check_leases(trace: Trace) -> List[str]:
    """No two unexpired leases on one name; every apply happens at the tablet's lease holder."""
    violations = []
    holders: Dict[str, _Holder] = {}
    for entry in trace:
        fields = parse_detail(entry.detail)
        if entry.event in (TraceEvent.LEASE_GRANT, TraceEvent.LEASE_RENEW):
            name, owner = fields.get("name", ""), fields.get("owner", "")
            current = holders.get(name)
            if current is not None and current.owner != owner and current.expiry_ms > entry.at_ms:
                violations.append(
                    f"{name} granted to {owner} at {entry.at_ms} while {current.owner} holds it until {current.expiry_ms}")
            holders[name] = _Holder(owner, int(fields.get("expiry", "0") or 0))
        elif entry.event in (TraceEvent.LEASE_RELEASE, TraceEvent.LEASE_EXPIRE):
            holders.pop(fields.get("name", ""), None)
        elif entry.event is TraceEvent.APPLY:
            name = tablet_lease_name(fields.get("tablet", ""))
            current = holders.get(name)
            if current is None or current.owner != entry.actor or current.expiry_ms <= entry.at_ms:
                holder = "nobody" if current is None else current.owner
                violations.append(f"{entry.actor} applied a put on {name} at {entry.at_ms} held by {holder}")
    return violations


def check_trace(trace: Trace) -> List[str]:
    """Run every check."""
    return check_clock(trace) + check_causality(trace) + check_faults(trace) + check_leases(trace)
