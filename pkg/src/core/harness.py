"""Scenario DSL, scenario runner and run metrics.

A scenario wires a lockservice, tablet servers, a tablet map and one
closed-loop client on a fresh kernel, injects its faults, drives the
workload and reports what happened to every acknowledged put.
"""

import logging
import shlex
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from ..config.settings import AppConfig, LeaseConfig
from ..interfaces.rpc import Request, Response, ResponseStatus
from ..utils.helpers import hex_to_bytes, parse_detail, parse_key_alphabet, to_ms
from .codec import decode_frame, encode_frame
from .errors import CallExhausted, MalformedFrame, NoOwnerError, ParseError, ResolutionFailed, ScenarioError
from .lockservice import LockService
from .resolver import CachedResolver, LeaseResolver, cached, chain, lease_resolver, static_resolver, tablet_stage
from .rpc_core import RpcClient
from .simkernel import FaultKind, FaultSpec, SimKernel, Trace, TraceEvent, trace_hash
from .tabletkv import (
    METHOD_GET,
    METHOD_PUT,
    FailoverCoordinator,
    TabletDescriptor,
    TabletDirectory,
    TabletMap,
    TabletServer,
    build_split_request,
    could_descend,
    tablet_for_key,
)

CLIENT_ID = "client"
NAIVE_RESPONSE_WAIT = 1.0
OPS = ("put", "get")

class ClientMode(str, Enum):
    """How the client finds a tablet's server."""
    NAIVE = "naive"
    LIBRARY = "library"


@dataclass
class Workload:
    """Closed-loop client workload."""
    ops: int = 0
    keys: List[bytes] = field(default_factory=lambda: [b"k"])
    mix: Dict[str, float] = field(default_factory=lambda: {"put": 1.0})
    think: float = 0.0


@dataclass
class Scenario:
    """Everything one run needs."""
    seed: int = 0
    servers: List[str] = field(default_factory=list)
    standbys: List[str] = field(default_factory=list)
    tablets: List[TabletDescriptor] = field(default_factory=list)
    lease_ttl: float = 10.0
    faults: List[FaultSpec] = field(default_factory=list)
    workload: Workload = field(default_factory=Workload)
    client_mode: ClientMode = ClientMode.LIBRARY
    latency: float = 0.01
    horizon: float = 600.0

    def tablet_map(self) -> TabletMap:
        return TabletMap(tuple(self.tablets))

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)

    def with_mode(self, mode: ClientMode) -> "Scenario":
        return replace(self, client_mode=mode)

    @property
    def entity_ids(self) -> List[str]:
        return self.servers + self.standbys + [CLIENT_ID]


# -- parsing -----------------------------------------------------------------


def _key_values(tokens: Sequence[str], line: int) -> Dict[str, str]:
    pairs = {}
    for token in tokens:
        name, sep, value = token.partition("=")
        if not sep or not name:
            raise ParseError(line, f"expected name=value, got {token!r}")
        pairs[name] = value
    return pairs


def _number(text: str, line: int, what: str, integer: bool = False):
    try:
        value = int(text) if integer else float(text)
    except ValueError:
        raise ParseError(line, f"{what} must be a number, got {text!r}") from None
    if value < 0:
        raise ParseError(line, f"{what} must be non-negative")
    return value


def _range_key(token: str) -> bytes:
    return b"" if token in ("-", "") else token.encode("utf-8")


def _parse_mix(text: str, line: int) -> Dict[str, float]:
    mix: Dict[str, float] = {}
    for part in text.split(","):
        op, sep, share = part.partition(":")
        if not sep or op not in OPS:
            raise ParseError(line, f"bad mix entry {part!r}")
        mix[op] = _number(share, line, f"mix share of {op}")
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ParseError(line, f"mix fractions sum to {sum(mix.values())}, not 1")
    return mix


def _parse_workload(args: Dict[str, str], line: int) -> Workload:
    workload = Workload()
    for name, value in args.items():
        if name == "ops":
            workload.ops = _number(value, line, "ops", integer=True)
        elif name == "keys":
            try:
                workload.keys = parse_key_alphabet(value)
            except ValueError as e:
                raise ParseError(line, str(e)) from None
        elif name == "mix":
            workload.mix = _parse_mix(value, line)
        elif name == "think":
            workload.think = _number(value, line, "think")
        else:
            raise ParseError(line, f"unknown workload option {name}")
    return workload


def parse_scenario(text: str, config: Optional[AppConfig] = None) -> Scenario:
    """Parse the line-oriented scenario DSL ('#' starts a comment)."""
    config = config or AppConfig.from_env()
    scenario = Scenario(lease_ttl=config.lease.default_ttl,
                        latency=config.simulation.latency_seconds,
                        horizon=config.simulation.horizon_seconds)
    fault_lines: List[Tuple[int, FaultSpec]] = []
    seen_ids = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as e:
            raise ParseError(line_no, str(e)) from None
        if not tokens:
            continue
        directive, args = tokens[0], tokens[1:]

        if directive == "seed":
            if len(args) != 1:
                raise ParseError(line_no, "usage: seed N")
            scenario.seed = _number(args[0], line_no, "seed", integer=True)
        elif directive in ("server", "standby"):
            if len(args) != 1:
                raise ParseError(line_no, f"usage: {directive} ID")
            entity_id = args[0]
            if entity_id in seen_ids or entity_id == CLIENT_ID:
                raise ParseError(line_no, f"duplicate server id {entity_id}")
            seen_ids.add(entity_id)
            (scenario.servers if directive == "server" else scenario.standbys).append(entity_id)
        elif directive == "tablet":
            if len(args) != 3:
                raise ParseError(line_no, "usage: tablet ID START END")
            tablet_id, start, end = args
            if any(t.id == tablet_id for t in scenario.tablets):
                raise ParseError(line_no, f"duplicate tablet id {tablet_id}")
            try:
                scenario.tablets.append(TabletDescriptor(
                    tablet_id, _range_key(start), None if end == "inf" else _range_key(end)))
            except ValueError as e:
                raise ParseError(line_no, str(e)) from None
        elif directive == "lease_ttl":
            if len(args) != 1:
                raise ParseError(line_no, "usage: lease_ttl SECONDS")
            scenario.lease_ttl = _number(args[0], line_no, "lease_ttl")
            if scenario.lease_ttl <= 0:
                raise ParseError(line_no, "lease_ttl must be positive")
        elif directive == "fault":
            if len(args) < 3:
                raise ParseError(line_no, "usage: fault KIND TARGET at=T [arg=V]")
            try:
                kind = FaultKind.from_token(args[0])
            except ValueError as e:
                raise ParseError(line_no, str(e)) from None
            options = _key_values(args[2:], line_no)
            unknown = set(options) - {"at", "arg"}
            if "at" not in options or unknown:
                raise ParseError(line_no, "fault needs at=T and accepts only arg=V besides")
            fault = FaultSpec(_number(options["at"], line_no, "at"), kind, args[1], options.get("arg"))
            if kind is FaultKind.SPLIT_TABLET and not fault.arg:
                raise ParseError(line_no, "split fault needs arg=SPLIT_KEY")
            fault_lines.append((line_no, fault))
        elif directive == "workload":
            scenario.workload = _parse_workload(_key_values(args, line_no), line_no)
        elif directive == "client":
            if len(args) != 1:
                raise ParseError(line_no, "usage: client naive|library")
            try:
                scenario.client_mode = ClientMode(args[0])
            except ValueError:
                raise ParseError(line_no, f"unknown client mode {args[0]}") from None
        elif directive in ("latency", "horizon"):
            if len(args) != 1:
                raise ParseError(line_no, f"usage: {directive} SECONDS")
            setattr(scenario, directive, _number(args[0], line_no, directive))
        else:
            raise ParseError(line_no, f"unknown directive {directive}")

    _check_references(scenario, fault_lines)
    scenario.faults = [fault for _, fault in fault_lines]
    return scenario


def _check_references(scenario: Scenario, fault_lines: List[Tuple[int, FaultSpec]]) -> None:
    if not scenario.servers:
        raise ParseError(0, "at least one server is required")
    if not scenario.tablets:
        raise ParseError(0, "at least one tablet is required")
    try:
        scenario.tablet_map()
    except ValueError as e:
        raise ParseError(0, f"tablets: {e}") from None

    servers = set(scenario.servers + scenario.standbys)
    for line_no, fault in fault_lines:
        if fault.kind in (FaultKind.CRASH_SERVER, FaultKind.RESTART_SERVER):
            if fault.target not in servers:
                raise ParseError(line_no, f"undeclared server {fault.target}")
        elif fault.kind in (FaultKind.DROP_LINK, FaultKind.HEAL_LINK):
            try:
                ends = fault.link_ends()
            except ScenarioError as e:
                raise ParseError(line_no, str(e)) from None
            missing = sorted(ends - set(scenario.entity_ids))
            if missing:
                raise ParseError(line_no, f"undeclared link endpoint {missing[0]}")
        elif not could_descend(fault.target, [t.id for t in scenario.tablets]):
            raise ParseError(line_no, f"undeclared tablet {fault.target}")


def load_scenario(path: str, config: Optional[AppConfig] = None) -> Scenario:
    with open(path, encoding="utf-8") as handle:
        return parse_scenario(handle.read(), config)


# -- metrics -----------------------------------------------------------------


@dataclass
class RunMetrics:
    """Counters of one trial."""
    seed: int = 0
    ops_issued: int = 0
    ops_acked: int = 0
    ops_lost: int = 0
    ops_failed: int = 0
    attempts_total: int = 0
    lockservice_lookups: int = 0
    cache_hits: int = 0
    wall_events: int = 0
    trace_hash: int = 0

    COUNTERS = ("ops_issued", "ops_acked", "ops_lost", "ops_failed", "attempts_total",
                "lockservice_lookups", "cache_hits", "wall_events")

    def to_line(self) -> str:
        counters = " ".join(f"{name}={getattr(self, name)}" for name in self.COUNTERS)
        return f"seed={self.seed} {counters} trace_hash={self.trace_hash:016x}"

    @classmethod
    def from_line(cls, line: str) -> "RunMetrics":
        values = dict(token.split("=", 1) for token in line.split())
        known = {f.name for f in fields(cls)}
        parsed = {name: int(value, 16) if name == "trace_hash" else int(value)
                  for name, value in values.items() if name in known}
        return cls(**parsed)


def summarize(trials: Sequence[RunMetrics]) -> str:
    """The TOTAL line: counters summed over trials."""
    totals = " ".join(f"{name}={sum(getattr(m, name) for m in trials)}" for name in RunMetrics.COUNTERS)
    lossy = sum(1 for m in trials if m.ops_lost > 0)
    return f"TOTAL trials={len(trials)} trials_with_loss={lossy} {totals}"


# -- runner ------------------------------------------------------------------


class ScenarioRunner:
    """Builds one simulated deployment for a scenario and drives its workload."""

    def __init__(self, scenario: Scenario, config: Optional[AppConfig] = None):
        self._scenario = scenario
        self._config = config or AppConfig.from_env()
        self._logger = logging.getLogger(__name__)
        self._metrics = RunMetrics(seed=scenario.seed)
        self._acked_puts: List[Tuple[bytes, bytes]] = []
        self._naive_lookups = 0

        self.kernel = SimKernel(seed=scenario.seed, latency=scenario.latency)
        self.lockservice = LockService(self.kernel)
        self.directory = TabletDirectory(scenario.tablet_map())
        self._order = scenario.servers + scenario.standbys

        lease_config = LeaseConfig(default_ttl=scenario.lease_ttl,
                                   renew_fraction=self._config.lease.renew_fraction)
        self.servers: Dict[str, TabletServer] = {}
        for server_id in self._order:
            server = TabletServer(server_id, self.kernel, self.lockservice, self.directory,
                                  lease_config, placement=self._heir)
            self.kernel.register(server)
            self.servers[server_id] = server

        self.client = RpcClient(CLIENT_ID, self.kernel, self._config.call_policy)
        self.kernel.register(self.client)

        self._lease_resolver: LeaseResolver = lease_resolver(
            self.lockservice, lambda: self.kernel.now_ms, self._config.resolver.timeout_floor)
        hosts = {server_id: server_id for server_id in self._order}
        self.resolver: CachedResolver = cached(chain([
            tablet_stage(lambda: self.directory.current),
            self._lease_resolver,
            static_resolver(hosts, self._config.resolver.default_timeout),
        ]), lambda: self.kernel.now_ms)

        coordinator = FailoverCoordinator(self.kernel, self.lockservice, self.directory,
                                          [self.servers[s] for s in scenario.standbys])
        self.kernel.add_fault_listener(coordinator.on_fault)
        self.kernel.add_target_validator(FaultKind.SPLIT_TABLET, self.directory.could_exist)
        self.kernel.add_fault_listener(self._on_split_fault)

    def _heir(self, tablet_id: str, origin: TabletServer) -> TabletServer:
        """Next live server after origin in declaration order."""
        start = self._order.index(origin.entity_id)
        for offset in range(1, len(self._order)):
            candidate = self._order[(start + offset) % len(self._order)]
            if self.kernel.is_alive(candidate):
                return self.servers[candidate]
        return origin

    def _on_split_fault(self, spec: FaultSpec) -> None:
        if spec.kind is not FaultKind.SPLIT_TABLET:
            return
        descriptor = self.directory.current.get(spec.target)
        record = self.lockservice.record_for(descriptor.lease_name) if descriptor else None
        if record is None or not self.kernel.is_alive(record.owner):
            self._logger.warning(f"Split of {spec.target} skipped: no live owner")
            return
        request = build_split_request(spec.target, (spec.arg or "").encode("utf-8"), record.epoch)
        reply = self.servers[record.owner].rpc.dispatch(encode_frame(request))
        try:
            response = decode_frame(reply) if reply else None
        except MalformedFrame:
            response = None
        if not isinstance(response, Response) or response.status is not ResponseStatus.OK:
            detail = response.value.decode("utf-8", errors="replace") if response else "no reply"
            self._logger.warning(f"Split of {spec.target} refused: {detail}")

    # -- workload --------------------------------------------------------------

    def _assign_initial_tablets(self) -> None:
        for index, tablet in enumerate(self.directory.current.tablets):
            owner = self.servers[self._scenario.servers[index % len(self._scenario.servers)]]
            owner.acquire_tablet(tablet.id)

    def _choose(self, rng, index: int) -> Tuple[str, bytes, bytes]:
        workload = self._scenario.workload
        ops = [op for op in OPS if workload.mix.get(op, 0) > 0]
        op = rng.choices(ops, weights=[workload.mix[o] for o in ops])[0]
        key = rng.choice(workload.keys)
        value = f"s{self._scenario.seed}-op{index}".encode("utf-8") if op == "put" else b""
        return op, key, value

    def _drive(self):
        rng = self.kernel.rng("workload")
        think_ms = to_ms(self._scenario.workload.think)
        run_op = self._naive_op if self._scenario.client_mode is ClientMode.NAIVE else self._library_op
        for index in range(self._scenario.workload.ops):
            op, key, value = self._choose(rng, index)
            self._metrics.ops_issued += 1
            yield from run_op(op, key, value)
            if think_ms:
                yield self.kernel.timeout_ms(think_ms)
        self._logger.info(f"Workload of {self._scenario.workload.ops} ops done at {self.kernel.now():.3f}s")
        self.kernel.halt()

    def _library_op(self, op: str, key: bytes, value: bytes):
        method = METHOD_PUT if op == "put" else METHOD_GET
        request = Request(id=0, method=method, key=key, value=value)
        try:
            response = yield from self.client.call(request, self.resolver)
        except (ResolutionFailed, CallExhausted) as e:
            self._metrics.ops_failed += 1
            self._logger.info(f"{method} {key!r} failed: {e}")
            return
        self._metrics.ops_acked += 1
        if op == "put" and response.status is ResponseStatus.OK:
            self._acked_puts.append((key, value))

    def _naive_op(self, op: str, key: bytes, value: bytes):
        """Look the owner up once, send once, never retry."""
        kernel = self.kernel
        name = tablet_for_key(self.directory.current, key)
        self._naive_lookups += 1
        try:
            owner, _remaining, _epoch = self.lockservice.lookup(name)
        except NoOwnerError:
            self._metrics.ops_failed += 1
            return
        request = Request(id=self.client.next_request_id(),
                          method=METHOD_PUT if op == "put" else METHOD_GET,
                          name=name, key=key, value=value)
        self._metrics.attempts_total += 1
        reply = self.client.send_request(owner, request)
        self._metrics.ops_acked += 1
        if op == "put":
            self._acked_puts.append((key, value))
        outcome = yield reply | kernel.timeout_ms(to_ms(NAIVE_RESPONSE_WAIT))
        if reply not in outcome:
            self.client.abandon(request.id)

    # -- accounting ------------------------------------------------------------

    def _final_table(self, key: bytes) -> Optional[Dict[bytes, bytes]]:
        descriptor = self.directory.current.descriptor_for(key)
        for server_id in self._order:
            server = self.servers[server_id]
            if self.kernel.is_alive(server_id) and server.held_epoch(descriptor.id) is not None:
                return server.table(descriptor.id)
        return None

    def _count_lost(self) -> int:
        applied = set()
        last_applied: Dict[bytes, bytes] = {}
        for entry in self.kernel.trace.of(TraceEvent.APPLY):
            fields_ = parse_detail(entry.detail)
            key, value = hex_to_bytes(fields_.get("key", "")), hex_to_bytes(fields_.get("value", ""))
            applied.add((key, value))
            last_applied[key] = value

        lost = 0
        for key, value in self._acked_puts:
            if (key, value) not in applied:
                lost += 1
                continue
            if last_applied.get(key) == value:
                table = self._final_table(key)
                if table is not None and table.get(key) != value:
                    lost += 1
        return lost

    def run(self) -> Tuple[RunMetrics, Trace]:
        self._assign_initial_tablets()
        for fault in self._scenario.faults:
            self.kernel.inject_fault(fault)
        self.kernel.process(self._drive())
        self.kernel.run_until(self._scenario.horizon)

        metrics = self._metrics
        metrics.ops_lost = self._count_lost()
        if self._scenario.client_mode is ClientMode.NAIVE:
            metrics.lockservice_lookups = self._naive_lookups
        else:
            metrics.attempts_total = self.client.attempts
            metrics.lockservice_lookups = self._lease_resolver.lookups
            metrics.cache_hits = self.resolver.hits
        metrics.wall_events = self.kernel.events_processed
        metrics.trace_hash = trace_hash(self.kernel.trace)
        self._logger.info(f"Trial seed={self._scenario.seed} done: {metrics.to_line()}")
        return metrics, self.kernel.trace


def run_scenario(scenario: Scenario, config: Optional[AppConfig] = None) -> Tuple[RunMetrics, Trace]:
    """Run one trial of scenario."""
    return ScenarioRunner(scenario, config).run()


def run_trials(scenario: Scenario, trials: int, config: Optional[AppConfig] = None) -> List[Tuple[RunMetrics, Trace]]:
    """Trials use seeds scenario.seed .. scenario.seed + trials - 1."""
    return [run_scenario(scenario.with_seed(scenario.seed + i), config) for i in range(trials)]


# -- split story -------------------------------------------------------------

_STORY_EVENTS = {TraceEvent.FAULT, TraceEvent.SPLIT, TraceEvent.LEASE_GRANT, TraceEvent.LEASE_RELEASE,
                 TraceEvent.APPLY, TraceEvent.ACK, TraceEvent.TIMEOUT_FIRE}


def split_story_scenario() -> Scenario:
    """Two servers, one tablet, and a put in flight when the tablet splits."""
    return Scenario(
        seed=0,
        servers=["srv1", "srv2"],
        tablets=[TabletDescriptor("T0")],
        faults=[FaultSpec(0.705, FaultKind.SPLIT_TABLET, "T0", "m")],
        workload=Workload(ops=12, keys=parse_key_alphabet("a..z"), think=0.05),
        client_mode=ClientMode.LIBRARY,
    )


def demo_split(config: Optional[AppConfig] = None) -> List[str]:
    """Run the split story and return its trace lines worth reading."""
    runner = ScenarioRunner(split_story_scenario(), config)
    metrics, trace = runner.run()
    lines = [entry.render() for entry in trace if entry.event in _STORY_EVENTS]
    for tablet in runner.directory.current.tablets:
        holder = next((s for s, server in runner.servers.items() if server.held_epoch(tablet.id) is not None), "nobody")
        lines.append(f"# {tablet.describe()} served by {holder}")
    lines.append(f"# {metrics.to_line()}")
    return lines
