"""Composable resolution: request context -> (target, timeout guess).

Leaf resolvers answer or report no-match (None). Stages may rewrite the
context and defer to the rest of the chain. A chain is a middleware stack
built in list order; the first Resolution produced wins.
"""

import logging
import threading
from dataclasses import replace
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

from ..interfaces.lock_service import ILockService
from ..interfaces.resolver import IResolver, IResolverStage, NextFn, ResolveContext, Resolution
from ..utils.helpers import to_ms
from .errors import NoOwnerError, OwnerUnavailable, ResolutionFailed

DEFAULT_TIMEOUT_FLOOR = 0.1
DEFAULT_STATIC_TIMEOUT = 1.0

AnyStage = Union[IResolver, IResolverStage]
Clock = Callable[[], int]


def resolve_or_fail(resolver: IResolver, ctx: ResolveContext) -> Resolution:
    """Run any resolver and turn no-match into resolution-failed."""
    found = resolver.resolve(ctx)
    if found is None:
        raise ResolutionFailed(f"no resolver matched {ctx.method} name={ctx.name} key={ctx.key!r}")
    return found


class LeaseResolver(IResolver):
    """Resolve ctx.name through the lease directory; the lease's remaining time is the timeout."""

    def __init__(self, lockservice: ILockService, clock: Clock, timeout_floor: float = DEFAULT_TIMEOUT_FLOOR):
        self._lockservice = lockservice
        self._clock = clock
        self._floor_ms = to_ms(timeout_floor)
        self.lookups = 0
        self._logger = logging.getLogger(__name__)

    def resolve(self, ctx: ResolveContext) -> Optional[Resolution]:
        if not ctx.name:
            return None
        self.lookups += 1
        try:
            owner, remaining, epoch = self._lockservice.lookup(ctx.name)
        except NoOwnerError:
            self._logger.debug(f"No lease owner for {ctx.name}")
            return None
        remaining_ms = to_ms(remaining)
        return Resolution(
            target=owner,
            timeout_ms=max(remaining_ms, self._floor_ms),
            resolved_name=ctx.name,
            epoch=epoch,
            expires_at_ms=self._clock() + remaining_ms,
        )


class StaticResolver(IResolver):
    """Exact-match host table, the stand-in for hostname resolution."""

    def __init__(self, table: Mapping[str, str], default_timeout: float = DEFAULT_STATIC_TIMEOUT):
        self._table = dict(table)
        self._timeout_ms = to_ms(default_timeout)

    def resolve(self, ctx: ResolveContext) -> Optional[Resolution]:
        if not ctx.name or ctx.name not in self._table:
            return None
        return Resolution(target=self._table[ctx.name], timeout_ms=self._timeout_ms, resolved_name=ctx.name)


class TabletMapLike(Protocol):
    """What TabletStage needs from a tablet map."""

    def lease_name_for(self, key: bytes) -> Optional[str]:
        ...


class TabletStage(IResolverStage):
    """Rewrite ctx.name to the lease name of the tablet covering ctx.key.

    The map is re-read on every call so a split between attempts is seen.
    A tablet whose lease nobody holds raises OwnerUnavailable instead of
    reporting no-match.
    """

    def __init__(self, current_map: Callable[[], TabletMapLike]):
        self._current_map = current_map

    def resolve(self, ctx: ResolveContext, next_fn: NextFn) -> Optional[Resolution]:
        if ctx.key is None:
            return next_fn(ctx)
        lease_name = self._current_map().lease_name_for(ctx.key)
        if lease_name is None:
            return None
        found = next_fn(replace(ctx, name=lease_name))
        if found is None:
            raise OwnerUnavailable(f"tablet {lease_name} for key {ctx.key!r} has no owner")
        return found


class _Terminal(IResolverStage):
    """Adapt a leaf resolver to a stage: answer, or defer on no-match."""

    def __init__(self, leaf: IResolver):
        self.leaf = leaf

    def resolve(self, ctx: ResolveContext, next_fn: NextFn) -> Optional[Resolution]:
        found = self.leaf.resolve(ctx)
        return found if found is not None else next_fn(ctx)


def _no_match(_ctx: ResolveContext) -> Optional[Resolution]:
    return None


class Chain(IResolver):
    """Middleware stack of stages in list order."""

    def __init__(self, stages: Sequence[AnyStage]):
        self._stages: List[IResolverStage] = [
            _Terminal(stage) if isinstance(stage, IResolver) else stage for stage in stages
        ]

    def _continuation(self, index: int) -> NextFn:
        if index >= len(self._stages):
            return _no_match
        stage = self._stages[index]
        rest = self._continuation(index + 1)
        return lambda ctx: stage.resolve(ctx, rest)

    def resolve(self, ctx: ResolveContext) -> Optional[Resolution]:
        return self._continuation(0)(ctx)

    def __call__(self, ctx: ResolveContext) -> Resolution:
        """Resolve or raise resolution-failed."""
        return resolve_or_fail(self, ctx)

    def split_rewriters(self) -> Tuple[List[IResolverStage], List[IResolverStage]]:
        """Leading rewriting stages, and the section from the first leaf onwards."""
        for index, stage in enumerate(self._stages):
            if isinstance(stage, _Terminal):
                return self._stages[:index], self._stages[index:]
        return list(self._stages), []


class CachedResolver(IResolver):
    """Cache resolutions by resolved name until their deadline or invalidation.

    When the inner resolver is a chain, its leading rewriting stages still run
    on every call (so a tablet split is seen at once) and the cache fronts the
    rest of the chain, keyed by the rewritten name. No-match is never cached.
    """

    def __init__(self, inner: IResolver, clock: Clock):
        self._clock = clock
        self._entries: Dict[str, Tuple[Resolution, int]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self._logger = logging.getLogger(__name__)

        if isinstance(inner, Chain):
            rewriters, tail = inner.split_rewriters()
            tail_chain = Chain(tail)
            self._inner: IResolver = tail_chain
            self._front = Chain(rewriters + [_CacheStage(self)])
        else:
            self._inner = inner
            self._front = Chain([_CacheStage(self)])

    def resolve(self, ctx: ResolveContext) -> Optional[Resolution]:
        return self._front.resolve(ctx)

    def __call__(self, ctx: ResolveContext) -> Resolution:
        return resolve_or_fail(self, ctx)

    def fetch(self, ctx: ResolveContext) -> Optional[Resolution]:
        """Serve ctx.name from the cache, or resolve through the inner section and store."""
        name = ctx.name
        now = self._clock()
        if name:
            with self._lock:
                entry = self._entries.get(name)
                if entry is not None:
                    resolution, deadline = entry
                    if now < deadline:
                        self.hits += 1
                        return resolution
                    del self._entries[name]

        self.misses += 1
        found = self._inner.resolve(ctx)
        if found is not None:
            deadline = now + found.timeout_ms
            if found.expires_at_ms is not None:
                deadline = min(deadline, found.expires_at_ms)
            with self._lock:
                self._entries[found.resolved_name] = (found, deadline)
        return found

    def invalidate(self, name: str) -> None:
        with self._lock:
            if self._entries.pop(name, None) is not None:
                self._logger.debug(f"Invalidated cached resolution of {name}")


class _CacheStage(IResolverStage):
    def __init__(self, cache: CachedResolver):
        self._cache = cache

    def resolve(self, ctx: ResolveContext, next_fn: NextFn) -> Optional[Resolution]:
        found = self._cache.fetch(ctx)
        return found if found is not None else next_fn(ctx)


def lease_resolver(lockservice: ILockService, clock: Clock,
                   timeout_floor: float = DEFAULT_TIMEOUT_FLOOR) -> LeaseResolver:
    return LeaseResolver(lockservice, clock, timeout_floor)


def static_resolver(table: Mapping[str, str], default_timeout: float = DEFAULT_STATIC_TIMEOUT) -> StaticResolver:
    return StaticResolver(table, default_timeout)


def tablet_stage(current_map: Callable[[], TabletMapLike]) -> TabletStage:
    return TabletStage(current_map)


def chain(stages: Sequence[AnyStage]) -> Chain:
    return Chain(stages)


def cached(inner: IResolver, clock: Clock) -> CachedResolver:
    return CachedResolver(inner, clock)

