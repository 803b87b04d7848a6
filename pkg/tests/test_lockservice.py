import pytest

from src.core.codec import decode_frame, encode_frame
from src.core.errors import InvalidLeaseName, LeaseHeldError, NoOwnerError, NotOwnerError
from src.core.lockservice import register_lease_methods, validate_lease_name
from src.core.rpc_core import HandlerRegistry, RpcServer
from src.core.simkernel import TraceEvent
from src.interfaces.rpc import Request, ResponseStatus


def test_first_grant_has_epoch_one(kernel, lockservice):
    record = lockservice.acquire("t/1", "srv1", 10)
    assert record.epoch == 1
    assert record.expiry == 10.0
    assert [e.event for e in kernel.trace] == [TraceEvent.LEASE_GRANT]


def test_other_owner_is_refused_while_held(kernel, lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    kernel.run_until(5)
    with pytest.raises(LeaseHeldError) as excinfo:
        lockservice.acquire("t/1", "srv2", 10)
    assert excinfo.value.code == "held"


def test_acquire_after_expiry_bumps_epoch(kernel, lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    kernel.run_until(12)
    record = lockservice.acquire("t/1", "srv2", 10)
    assert (record.owner, record.epoch) == ("srv2", 2)
    events = [e.event for e in kernel.trace]
    assert events == [TraceEvent.LEASE_GRANT, TraceEvent.LEASE_EXPIRE, TraceEvent.LEASE_GRANT]


def test_reacquire_by_owner_acts_as_renew(kernel, lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    kernel.run_until(4)
    record = lockservice.acquire("t/1", "srv1", 10)
    assert record.epoch == 1
    assert record.expiry == 14.0


def test_non_positive_ttl_is_rejected(lockservice):
    with pytest.raises(ValueError):
        lockservice.acquire("t/1", "srv1", 0)


def test_renew_extends_expiry_keeps_epoch(kernel, lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    kernel.run_until(5)
    record = lockservice.renew("t/1", "srv1")
    assert record.expiry == 15.0
    assert record.epoch == 1


def test_renew_by_non_owner_or_after_expiry_fails(kernel, lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    with pytest.raises(NotOwnerError):
        lockservice.renew("t/1", "srv2")
    kernel.run_until(10)
    with pytest.raises(NotOwnerError):
        lockservice.renew("t/1", "srv1")
    assert lockservice.acquire("t/1", "srv1", 10).epoch == 2


def test_release_clears_owner(lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    lockservice.release("t/1", "srv1")
    with pytest.raises(NoOwnerError):
        lockservice.lookup("t/1")
    assert lockservice.acquire("t/1", "srv2", 10).epoch == 2


def test_release_by_non_owner_leaves_lease_intact(lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    with pytest.raises(NotOwnerError):
        lockservice.release("t/1", "srv2")
    assert lockservice.lookup("t/1").owner == "srv1"


def test_lookup_reports_remaining_time(kernel, lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    kernel.run_until(3)
    assert tuple(lockservice.lookup("t/1")) == ("srv1", 7.0, 1)


def test_lookup_at_expiry_instant_has_no_owner(kernel, lockservice):
    lockservice.acquire("t/1", "srv1", 10)
    kernel.run_until(10)
    with pytest.raises(NoOwnerError):
        lockservice.lookup("t/1")


def test_lookup_of_unknown_name(lockservice):
    with pytest.raises(NoOwnerError):
        lockservice.lookup("never/granted")


def test_random_timeline_keeps_exclusion(kernel, lockservice):
    rng = kernel.rng("timeline")
    last_epoch = 0
    for step in range(300):
        kernel.run_until(kernel.now() + rng.choice([0.5, 1.0, 2.5, 4.0]))
        owner = rng.choice(["a", "b", "c"])
        try:
            record = lockservice.acquire("t/x", owner, 3)
        except LeaseHeldError:
            holder = lockservice.lookup("t/x")
            assert holder.owner != owner
            assert holder.remaining > 0
            continue
        assert record.epoch >= last_epoch
        last_epoch = record.epoch
    assert last_epoch > 1


@pytest.mark.parametrize("name", ["", "/a", "a/", "a//b"])
def test_invalid_lease_names(name):
    with pytest.raises(InvalidLeaseName):
        validate_lease_name(name)


def test_leases_owned_by(lockservice):
    lockservice.acquire("tablets/T1", "srv1", 10)
    lockservice.acquire("tablets/T0", "srv1", 10)
    lockservice.acquire("tablets/T2", "srv2", 10)
    assert [r.name for r in lockservice.leases_owned_by("srv1")] == ["tablets/T0", "tablets/T1"]


def test_lease_methods_over_the_wire(kernel, lockservice):
    registry = HandlerRegistry()
    register_lease_methods(registry, lockservice)
    server = RpcServer(registry, name="lockservice")

    def call(method, name, owner=b"", value=b""):
        frame = encode_frame(Request(id=1, method=method, name=name, key=owner, value=value))
        return decode_frame(server.dispatch(frame))

    granted = call("lease.acquire", "t/1", b"srv1", b"10")
    assert granted.status is ResponseStatus.OK
    assert granted.value == b"srv1 1 10000"

    refused = call("lease.acquire", "t/1", b"srv2", b"10")
    assert (refused.status, refused.value) == (ResponseStatus.APP_ERROR, b"held")

    found = call("lease.lookup", "t/1")
    assert found.value == b"srv1 10000 1"

    assert call("lease.release", "t/1", b"srv1").status is ResponseStatus.OK
    assert call("lease.lookup", "t/1").value == b"no-owner"
