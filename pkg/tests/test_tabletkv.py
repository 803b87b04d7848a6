import random

import pytest

from src.config.settings import LeaseConfig
from src.core.codec import decode_frame, encode_frame
from src.core.errors import BadSplit
from src.core.lockservice import LockService
from src.core.simkernel import FaultKind, FaultSpec, SimKernel, TraceEvent
from src.core.tabletkv import (
    FailoverCoordinator,
    TabletDescriptor,
    TabletDirectory,
    TabletMap,
    TabletServer,
    build_split_request,
    could_descend,
    replay_durable,
    split,
    tablet_for_key,
)
from src.interfaces.rpc import Request, ResponseStatus

TWO_HALVES = TabletMap((TabletDescriptor("L", b"", b"m"), TabletDescriptor("R", b"m", None)))


def scan(tablet_map, key):
    """Linear-scan routing oracle."""
    hits = [t for t in tablet_map.tablets if t.start_key <= key and (t.end_key is None or key < t.end_key)]
    assert len(hits) == 1
    return hits[0].lease_name


def test_single_tablet_routes_everything():
    tablet_map = TabletMap.single("T0")
    for key in (b"", b"apple", b"\xff\xff"):
        assert tablet_for_key(tablet_map, key) == "tablets/T0"


def test_routing_matches_scan_and_start_is_inclusive():
    assert tablet_for_key(TWO_HALVES, b"apple") == "tablets/L" == scan(TWO_HALVES, b"apple")
    assert tablet_for_key(TWO_HALVES, b"m") == "tablets/R"
    assert tablet_for_key(TWO_HALVES, b"") == "tablets/L"


def test_split_replaces_parent_with_children():
    result = split(TabletMap.single("T0"), "T0", b"m")
    assert [(t.id, t.start_key, t.end_key) for t in result.tablets] == [("T0a", b"", b"m"), ("T0b", b"m", None)]
    assert result.version == 1


@pytest.mark.parametrize("split_key", [b"", b"m", b"zz"])
def test_split_at_or_outside_bounds(split_key):
    tablet_map = TabletMap((TabletDescriptor("L", b"", b"m"), TabletDescriptor("R", b"m", b"z"),
                            TabletDescriptor("Z", b"z", None)))
    with pytest.raises(BadSplit):
        split(tablet_map, "R", split_key)


def test_split_of_unknown_tablet():
    with pytest.raises(BadSplit):
        split(TabletMap.single("T0"), "T9", b"m")


def test_map_rejects_gaps_and_overlaps():
    with pytest.raises(ValueError):
        TabletMap((TabletDescriptor("L", b"", b"k"), TabletDescriptor("R", b"m", None)))
    with pytest.raises(ValueError):
        TabletMap((TabletDescriptor("L", b"a", None),))
    with pytest.raises(ValueError):
        TabletDescriptor("X", b"m", b"m")


def test_random_split_sequences_keep_coverage():
    rng = random.Random(99)
    for _ in range(200):
        tablet_map = TabletMap.single("T0")
        for _ in range(rng.randint(1, 12)):
            tablet = rng.choice(tablet_map.tablets)
            split_key = bytes(rng.randint(0x20, 0x7e) for _ in range(rng.randint(1, 3)))
            before = tablet_map.version
            try:
                tablet_map = split(tablet_map, tablet.id, split_key)
            except BadSplit:
                continue
            assert tablet_map.version == before + 1
        for _ in range(30):
            key = bytes(rng.randint(0, 255) for _ in range(rng.randint(0, 4)))
            assert tablet_for_key(tablet_map, key) == scan(tablet_map, key)


@pytest.mark.slow
def test_thousand_random_split_sequences():
    rng = random.Random(1000)
    for _ in range(1000):
        tablet_map = TabletMap.single("T0")
        for _ in range(rng.randint(1, 20)):
            tablet = rng.choice(tablet_map.tablets)
            try:
                tablet_map = split(tablet_map, tablet.id, bytes([rng.randint(1, 255)]))
            except BadSplit:
                pass
        for key in (bytes([b]) for b in range(256)):
            assert tablet_for_key(tablet_map, key) == scan(tablet_map, key)


def test_directory_knows_future_descendants():
    directory = TabletDirectory(TabletMap.single("T0"))
    assert directory.could_exist("T0b")
    assert directory.could_exist("T0ab")
    assert not directory.could_exist("T1")


def test_declared_ids_bound_split_targets():
    assert could_descend("Lab", ["L", "R"])
    assert could_descend("R", ["L", "R"])
    assert not could_descend("Lc", ["L", "R"])
    assert not could_descend("T0", [])


class Node:
    def __init__(self, *server_ids):
        self.kernel = SimKernel(seed=3, latency=0.01)
        self.lockservice = LockService(self.kernel)
        self.directory = TabletDirectory(TabletMap.single("T0"))
        self.servers = {}
        for server_id in server_ids:
            heir = (lambda tablet_id, origin: self.servers[server_ids[-1]]) if len(server_ids) > 1 else None
            server = TabletServer(server_id, self.kernel, self.lockservice, self.directory,
                                  LeaseConfig(), placement=heir)
            self.kernel.register(server)
            self.servers[server_id] = server

    def dispatch(self, server_id, **fields):
        frame = encode_frame(Request(id=1, **fields))
        return decode_frame(self.servers[server_id].rpc.dispatch(frame))


def test_put_then_get():
    node = Node("srv1")
    node.servers["srv1"].acquire_tablet("T0")
    put = node.dispatch("srv1", method="kv.put", name="tablets/T0", key=b"k", value=b"v")
    assert put.status is ResponseStatus.OK
    got = node.dispatch("srv1", method="kv.get", name="tablets/T0", key=b"k")
    assert (got.status, got.value) == (ResponseStatus.OK, b"v")
    missing = node.dispatch("srv1", method="kv.get", name="tablets/T0", key=b"absent")
    assert (missing.status, missing.value) == (ResponseStatus.APP_ERROR, b"not-found")


def test_put_without_lease_is_refused():
    node = Node("srv1", "srv2")
    node.servers["srv1"].acquire_tablet("T0")
    refused = node.dispatch("srv2", method="kv.put", name="tablets/T0", key=b"k", value=b"v")
    assert refused.status is ResponseStatus.NOT_OWNER
    assert node.servers["srv2"].table("T0") == {}


def test_split_hands_right_half_to_heir():
    node = Node("srv1", "srv2")
    srv1 = node.servers["srv1"]
    srv1.acquire_tablet("T0")
    for key in (b"apple", b"melon", b"zebra"):
        node.dispatch("srv1", method="kv.put", name="tablets/T0", key=key, value=key.upper())

    request = build_split_request("T0", b"m", srv1.held_epoch("T0"))
    response = decode_frame(srv1.rpc.dispatch(encode_frame(request)))
    assert (response.status, response.value) == (ResponseStatus.OK, b"T0a,T0b")

    assert srv1.tablets() == ["T0a"]
    assert srv1.table("T0a") == {b"apple": b"APPLE"}
    assert node.servers["srv2"].table("T0b") == {b"melon": b"MELON", b"zebra": b"ZEBRA"}
    assert node.lockservice.lookup("tablets/T0b").owner == "srv2"
    stale = node.dispatch("srv1", method="kv.put", name="tablets/T0", key=b"k", value=b"v")
    assert stale.status is ResponseStatus.NOT_OWNER


def test_bad_split_request_is_app_error():
    node = Node("srv1")
    srv1 = node.servers["srv1"]
    srv1.acquire_tablet("T0")
    response = decode_frame(srv1.rpc.dispatch(encode_frame(build_split_request("T0", b"", 1))))
    assert (response.status, response.value) == (ResponseStatus.APP_ERROR, b"bad-split")
    assert srv1.tablets() == ["T0"]


def test_renewal_keeps_lease_alive():
    node = Node("srv1")
    node.servers["srv1"].acquire_tablet("T0")
    node.kernel.run_until(35)
    assert node.lockservice.lookup("tablets/T0").owner == "srv1"
    assert node.kernel.trace.of(TraceEvent.LEASE_RENEW)


def test_crash_reassigns_to_one_standby_with_durable_state():
    node = Node("srv1", "srv2", "srv3")
    standbys = [node.servers["srv2"], node.servers["srv3"]]
    coordinator = FailoverCoordinator(node.kernel, node.lockservice, node.directory, standbys)
    node.kernel.add_fault_listener(coordinator.on_fault)
    node.servers["srv1"].acquire_tablet("T0")
    node.dispatch("srv1", method="kv.put", name="tablets/T0", key=b"k", value=b"v1")
    node.dispatch("srv1", method="kv.put", name="tablets/T0", key=b"k", value=b"v2")

    node.kernel.inject_fault(FaultSpec(5.0, FaultKind.CRASH_SERVER, "srv1"))
    node.kernel.run_until(20)

    grants = node.kernel.trace.of(TraceEvent.LEASE_GRANT)
    assert [g.actor for g in grants] == ["lockservice", "lockservice"]
    takeover = grants[-1]
    # last renewal at 3.333 s, ttl 10 s, plus one hop
    assert takeover.at_ms == 13333 + 10
    owners = [s for s in standbys if s.held_epoch("T0") is not None]
    assert len(owners) == 1
    assert owners[0].held_epoch("T0") == 2
    assert owners[0].table("T0") == {b"k": b"v2"}


def test_replay_keeps_only_keys_in_range():
    node = Node("srv1")
    node.servers["srv1"].acquire_tablet("T0")
    for key in (b"a", b"n", b"z"):
        node.dispatch("srv1", method="kv.put", name="tablets/T0", key=key, value=b"x" + key)
    right = TabletDescriptor("T0b", b"m", None)
    assert replay_durable(node.kernel.trace, right) == {b"n": b"xn", b"z": b"xz"}
