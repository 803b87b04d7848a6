"""RPC server dispatch with lease fencing, and the resolving client call loop."""

import itertools
import logging
from dataclasses import replace
from typing import Callable, Dict, Generator, Optional, Tuple

import simpy

from ..config.settings import CallPolicy
from ..interfaces.resolver import IResolver, ResolveContext
from ..interfaces.rpc import Handler, Request, Response
from ..interfaces.sim_entity import ISimEntity
from ..utils.helpers import format_detail, to_ms
from .codec import decode_frame, encode_frame
from .errors import CallExhausted, LeasewireError, MalformedFrame, OwnerUnavailable, ResolutionFailed
from .resolver import resolve_or_fail
from .simkernel import SimKernel, TraceEvent

NO_SUCH_METHOD = "no-such-method"

# (lease name, client fencing token) -> does this server hold it?
LeaseGuard = Callable[[str, Optional[int]], bool]


def next_backoff(current: float, factor: float = 2.0, cap: float = 60.0) -> float:
    """Double the wait, capped: 1, 2, 4, 8, 16, 32, 60, 60, ..."""
    if current <= 0:
        raise ValueError(f"backoff must be positive, got {current}")
    return min(current * factor, cap)


class HandlerRegistry:
    """Method name -> handler, with a flag for lease-scoped methods."""

    def __init__(self):
        self._handlers: Dict[str, Tuple[Handler, bool]] = {}

    def register(self, method: str, handler: Handler, lease_scoped: bool = True) -> None:
        if not method:
            raise ValueError("method name must be non-empty")
        self._handlers[method] = (handler, lease_scoped)

    def get(self, method: str) -> Optional[Tuple[Handler, bool]]:
        return self._handlers.get(method)


class RpcServer:
    """Decode, fence, dispatch, encode. One frame at a time."""

    def __init__(self, registry: HandlerRegistry, lease_guard: Optional[LeaseGuard] = None, name: str = "server"):
        self._registry = registry
        self._lease_guard = lease_guard
        self._name = name
        self._logger = logging.getLogger(__name__)

    @property
    def registry(self) -> HandlerRegistry:
        return self._registry

    def handle(self, request: Request) -> Response:
        entry = self._registry.get(request.method)
        if entry is None:
            return Response.app_error(request, NO_SUCH_METHOD)
        handler, lease_scoped = entry

        if lease_scoped:
            if self._lease_guard is None or not request.name or not self._lease_guard(request.name, request.epoch):
                self._logger.debug(f"{self._name} rejects {request.method} on {request.name!r}: not owner")
                return Response.not_owner(request)

        try:
            return handler(request)
        except LeasewireError as e:
            self._logger.warning(f"{self._name} handler {request.method} failed: {e}")
            return Response.app_error(request, e.code)

    def dispatch(self, frame: bytes) -> Optional[bytes]:
        """Answer one request frame; malformed input is dropped (None)."""
        try:
            message = decode_frame(frame)
        except MalformedFrame as e:
            self._logger.warning(f"{self._name} dropped malformed frame: {e}")
            return None
        if not isinstance(message, Request):
            self._logger.warning(f"{self._name} dropped a response frame sent to it")
            return None
        return encode_frame(self.handle(message))


def serve(registry: HandlerRegistry, lease_guard: Optional[LeaseGuard] = None, name: str = "server") -> RpcServer:
    return RpcServer(registry, lease_guard, name)


def context_for(request: Request) -> ResolveContext:
    """An explicit name wins; otherwise the key drives content-based resolution."""
    if request.name:
        return ResolveContext(method=request.method, name=request.name)
    return ResolveContext(method=request.method, key=request.key)


class RpcClient(ISimEntity):
    """Client session on the simulated network.

    call() is a simpy process body: resolve, send with the resolution's
    timeout, and on timeout or not-owner invalidate, back off and resolve
    again. Success and application errors are returned at once.
    """

    def __init__(self, entity_id: str, kernel: SimKernel, policy: Optional[CallPolicy] = None):
        self._entity_id = entity_id
        self._kernel = kernel
        self._policy = policy or CallPolicy()
        self._pending: Dict[int, simpy.Event] = {}
        self._ids = itertools.count(1)
        self.attempts = 0
        self._logger = logging.getLogger(__name__)

    @property
    def entity_id(self) -> str:
        return self._entity_id

    def next_request_id(self) -> int:
        return next(self._ids)

    def on_message(self, src: str, payload: bytes) -> None:
        try:
            message = decode_frame(payload)
        except MalformedFrame as e:
            self._logger.warning(f"{self._entity_id} dropped malformed reply from {src}: {e}")
            return
        if not isinstance(message, Response):
            return
        waiter = self._pending.pop(message.id, None)
        if waiter is None:
            self._logger.debug(f"Late reply {message.id} from {src} ignored")
            return
        waiter.succeed(message)

    def send_request(self, target: str, request: Request) -> simpy.Event:
        """Send request to target; the returned event fires with its Response."""
        waiter = self._kernel.event()
        self._pending[request.id] = waiter
        self._kernel.send(self._entity_id, target, encode_frame(request))
        return waiter

    def abandon(self, request_id: int) -> None:
        self._pending.pop(request_id, None)

    def call(self, request: Request, resolver: IResolver,
             policy: Optional[CallPolicy] = None) -> Generator[simpy.Event, object, Response]:
        policy = policy or self._policy
        kernel = self._kernel
        deadline_ms = kernel.now_ms + to_ms(policy.overall_deadline)
        backoff = policy.initial_backoff
        invalidate = getattr(resolver, "invalidate", None)
        ctx = context_for(request)

        for attempt in range(1, policy.max_attempts + 1):
            try:
                resolution = resolve_or_fail(resolver, ctx)
            except ResolutionFailed as e:
                # A vacant tablet, or a name that resolved before, is between owners.
                if attempt == 1 and not isinstance(e, OwnerUnavailable):
                    raise
                resolution = None

            if resolution is not None:
                self.attempts += 1
                timeout_ms = resolution.timeout_ms if resolution.is_lease else to_ms(backoff)
                timeout_ms = max(1, min(timeout_ms, deadline_ms - kernel.now_ms))
                outgoing = replace(request, id=self.next_request_id(),
                                   name=resolution.resolved_name, epoch=resolution.epoch)

                reply = self.send_request(resolution.target, outgoing)
                outcome = yield reply | kernel.timeout_ms(timeout_ms)

                if reply in outcome:
                    response = outcome[reply]
                    if response.is_final:
                        kernel.record(self._entity_id, TraceEvent.ACK, format_detail(
                            req=outgoing.id, method=request.method, status=response.status.name.lower(),
                            attempts=attempt))
                        return response
                    reason = "not-owner"
                else:
                    self.abandon(outgoing.id)
                    kernel.record(self._entity_id, TraceEvent.TIMEOUT_FIRE, format_detail(
                        req=outgoing.id, target=resolution.target, name=resolution.resolved_name))
                    reason = "timeout"

                self._logger.debug(f"Attempt {attempt} of {request.method} to {resolution.target} failed: {reason}")
                if invalidate is not None:
                    invalidate(resolution.resolved_name)
            else:
                self._logger.debug(f"Attempt {attempt} of {request.method}: no owner yet")

            wait_ms = to_ms(backoff)
            if attempt == policy.max_attempts or kernel.now_ms + wait_ms >= deadline_ms:
                break
            yield kernel.timeout_ms(wait_ms)
            backoff = next_backoff(backoff, policy.backoff_factor, policy.backoff_cap)

        self._logger.info(f"{request.method} exhausted after {attempt} attempts")
        raise CallExhausted(f"{request.method} gave up after {attempt} attempts", attempts=attempt)
