"""Resolver interfaces following the Interface Segregation Principle."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional


@dataclass(frozen=True)
class ResolveContext:
    """What a resolver sees of a request."""
    method: str
    name: Optional[str] = None
    key: Optional[bytes] = None


@dataclass(frozen=True)
class Resolution:
    """A resolved target plus the per-attempt timeout it suggests."""
    target: str
    timeout_ms: int
    resolved_name: str
    epoch: Optional[int] = None
    expires_at_ms: Optional[int] = None

    @property
    def timeout_guess(self) -> float:
        """Suggested send timeout in seconds."""
        return self.timeout_ms / 1000

    @property
    def is_lease(self) -> bool:
        return self.epoch is not None


NextFn = Callable[[ResolveContext], Optional[Resolution]]


class IResolver(ABC):
    """A lookup function: context -> Resolution, or None for no-match."""

    @abstractmethod
    def resolve(self, ctx: ResolveContext) -> Optional[Resolution]:
        pass


class IResolverStage(ABC):
    """A chain stage that may rewrite the context and defer to the rest of the chain."""

    @abstractmethod
    def resolve(self, ctx: ResolveContext, next_fn: NextFn) -> Optional[Resolution]:
        pass
