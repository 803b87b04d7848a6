import pytest

from src.config.settings import CallPolicy, LeaseConfig
from src.core.codec import decode_frame, encode_frame
from src.core.errors import CallExhausted, OwnerUnavailable, ResolutionFailed
from src.core.lockservice import LockService
from src.core.resolver import cached, chain, lease_resolver, static_resolver, tablet_stage
from src.core.rpc_core import HandlerRegistry, RpcClient, RpcServer, context_for, next_backoff
from src.core.simkernel import FaultKind, FaultSpec, SimKernel, TraceEvent
from src.core.tabletkv import FailoverCoordinator, TabletDirectory, TabletMap, TabletServer
from src.interfaces.rpc import Request, Response, ResponseStatus
from src.utils.helpers import parse_detail


def test_backoff_trajectory():
    trajectory, current = [], 1.0
    for _ in range(8):
        current = next_backoff(current)
        trajectory.append(current)
    assert trajectory == [2, 4, 8, 16, 32, 60, 60, 60]


@pytest.mark.parametrize("current,expected", [(1, 2), (40, 60), (60, 60)])
def test_backoff_points(current, expected):
    assert next_backoff(current) == expected


def test_backoff_rejects_non_positive():
    with pytest.raises(ValueError):
        next_backoff(0)


def test_context_prefers_explicit_name():
    assert context_for(Request(id=1, method="m", name="db", key=b"k")).key is None
    assert context_for(Request(id=1, method="m", key=b"k")).key == b"k"


class TestServerDispatch:
    def setup_method(self):
        self.epoch = 2
        self.applied = []
        registry = HandlerRegistry()
        registry.register("kv.put", self._put)
        registry.register("ping", lambda r: Response.ok(r, b"pong"), lease_scoped=False)
        self.server = RpcServer(registry, lambda name, epoch: name == "t/1" and (epoch is None or self.epoch >= epoch))

    def _put(self, request):
        self.applied.append(request.key)
        return Response.ok(request)

    def _send(self, **fields):
        return decode_frame(self.server.dispatch(encode_frame(Request(id=5, **fields))))

    def test_held_lease_runs_handler(self):
        response = self._send(method="kv.put", name="t/1", key=b"k", epoch=2)
        assert (response.id, response.status) == (5, ResponseStatus.OK)
        assert self.applied == [b"k"]

    def test_lost_lease_is_not_owner_without_side_effects(self):
        assert self._send(method="kv.put", name="t/2", key=b"k").status is ResponseStatus.NOT_OWNER
        assert self._send(method="kv.put", name="t/1", key=b"k", epoch=3).status is ResponseStatus.NOT_OWNER
        assert self.applied == []

    def test_unknown_method(self):
        response = self._send(method="nope")
        assert (response.status, response.value) == (ResponseStatus.APP_ERROR, b"no-such-method")

    def test_unscoped_method_skips_fencing(self):
        assert self._send(method="ping").value == b"pong"

    def test_malformed_frame_is_dropped(self):
        assert self.server.dispatch(b"\x00\x00\x00\x05abc") is None


class Cluster:
    """Lockservice, tablet servers and one client on a fresh kernel."""

    def __init__(self, servers=("srv1", "srv2"), standbys=("srv2",), policy=None):
        self.kernel = SimKernel(seed=1, latency=0.01)
        self.lockservice = LockService(self.kernel)
        self.directory = TabletDirectory(TabletMap.single("T0"))
        self.servers = {}
        for server_id in servers:
            server = TabletServer(server_id, self.kernel, self.lockservice, self.directory, LeaseConfig())
            self.kernel.register(server)
            self.servers[server_id] = server
        coordinator = FailoverCoordinator(self.kernel, self.lockservice, self.directory,
                                          [self.servers[s] for s in standbys])
        self.kernel.add_fault_listener(coordinator.on_fault)
        self.client = RpcClient("client", self.kernel, policy or CallPolicy())
        self.kernel.register(self.client)
        clock = lambda: self.kernel.now_ms
        self.resolver = cached(chain([tablet_stage(lambda: self.directory.current),
                                      lease_resolver(self.lockservice, clock),
                                      static_resolver({})]), clock)
        self.outcomes = []

    def call_at(self, at, request):
        def run():
            yield self.kernel.timeout_ms(int(at * 1000))
            try:
                response = yield from self.client.call(request, self.resolver)
                self.outcomes.append(response)
            except (CallExhausted, ResolutionFailed) as e:
                self.outcomes.append(e)
        self.kernel.process(run())


def test_healthy_owner_answers_in_one_attempt():
    cluster = Cluster()
    cluster.servers["srv1"].acquire_tablet("T0")
    cluster.call_at(0.5, Request(id=0, method="kv.put", key=b"k", value=b"v"))
    cluster.kernel.run_until(5)
    assert cluster.outcomes[0].status is ResponseStatus.OK
    assert cluster.client.attempts == 1


def test_app_error_is_returned_after_one_attempt():
    cluster = Cluster()
    cluster.servers["srv1"].acquire_tablet("T0")
    cluster.call_at(0.5, Request(id=0, method="kv.get", key=b"absent"))
    cluster.kernel.run_until(5)
    response = cluster.outcomes[0]
    assert (response.status, response.value) == (ResponseStatus.APP_ERROR, b"not-found")
    assert cluster.client.attempts == 1


def test_put_survives_owner_crash():
    cluster = Cluster()
    cluster.servers["srv1"].acquire_tablet("T0")
    cluster.kernel.inject_fault(FaultSpec(1.0, FaultKind.CRASH_SERVER, "srv1"))
    cluster.call_at(1.5, Request(id=0, method="kv.put", key=b"k", value=b"v"))
    cluster.kernel.run_until(30)

    assert cluster.outcomes[0].status is ResponseStatus.OK
    assert cluster.client.attempts >= 2
    applies = cluster.kernel.trace.of(TraceEvent.APPLY)
    assert [e.actor for e in applies] == ["srv2"]
    assert cluster.servers["srv2"].table("T0") == {b"k": b"v"}
    assert cluster.servers["srv2"].held_epoch("T0") == 2


def test_crash_without_standby_exhausts():
    cluster = Cluster(servers=("srv1",), standbys=(),
                      policy=CallPolicy(max_attempts=3, overall_deadline=60))
    cluster.servers["srv1"].acquire_tablet("T0")
    cluster.kernel.inject_fault(FaultSpec(1.0, FaultKind.CRASH_SERVER, "srv1"))
    cluster.call_at(1.5, Request(id=0, method="kv.put", key=b"k", value=b"v"))
    cluster.kernel.run_until(120)
    assert isinstance(cluster.outcomes[0], CallExhausted)


def test_call_after_lease_expiry_without_standby_exhausts():
    cluster = Cluster(servers=("srv1",), standbys=(),
                      policy=CallPolicy(max_attempts=3, overall_deadline=60))
    cluster.servers["srv1"].acquire_tablet("T0")
    cluster.kernel.inject_fault(FaultSpec(1.0, FaultKind.CRASH_SERVER, "srv1"))
    cluster.call_at(20.0, Request(id=0, method="kv.put", key=b"k", value=b"v"))
    cluster.kernel.run_until(120)
    outcome = cluster.outcomes[0]
    assert isinstance(outcome, CallExhausted)
    assert outcome.attempts == 3
    assert cluster.client.attempts == 0


def test_vacant_tablet_is_served_once_a_standby_takes_over():
    cluster = Cluster()
    cluster.servers["srv1"].acquire_tablet("T0")
    cluster.kernel.inject_fault(FaultSpec(1.0, FaultKind.CRASH_SERVER, "srv1"))
    # the lease lapses at 10 s and srv2 takes it one hop later
    cluster.call_at(10.005, Request(id=0, method="kv.put", key=b"k", value=b"v"))
    cluster.kernel.run_until(30)
    assert cluster.outcomes[0].status is ResponseStatus.OK
    assert cluster.servers["srv2"].table("T0") == {b"k": b"v"}


def test_unknown_explicit_name_fails_at_once():
    cluster = Cluster()
    cluster.call_at(0.5, Request(id=0, method="ping", name="nowhere"))
    cluster.kernel.run_until(5)
    outcome = cluster.outcomes[0]
    assert isinstance(outcome, ResolutionFailed)
    assert not isinstance(outcome, OwnerUnavailable)
    assert cluster.client.attempts == 0


def test_exhaustion_after_max_attempts_on_dead_link():
    cluster = Cluster(policy=CallPolicy(max_attempts=3, overall_deadline=100))
    cluster.servers["srv1"].acquire_tablet("T0")
    cluster.kernel.inject_fault(FaultSpec(0.0, FaultKind.DROP_LINK, "client:srv1"))
    cluster.call_at(0.5, Request(id=0, method="kv.put", key=b"k", value=b"v"))
    cluster.kernel.run_until(100)
    outcome = cluster.outcomes[0]
    assert isinstance(outcome, CallExhausted)
    assert outcome.attempts == 3
    timeouts = cluster.kernel.trace.of(TraceEvent.TIMEOUT_FIRE)
    assert len(timeouts) == 3
    assert {parse_detail(e.detail)["target"] for e in timeouts} == {"srv1"}


def test_late_reply_of_abandoned_attempt_is_ignored():
    kernel = SimKernel(seed=1, latency=0.01)
    client = RpcClient("client", kernel)
    kernel.register(client)
    client.abandon(42)
    client.on_message("srv1", encode_frame(Response(id=42, status=ResponseStatus.OK)))
