"""Lock service interface following the Interface Segregation Principle."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import NamedTuple


@dataclass(frozen=True)
class LeaseRecord:
    """A granted lease: name -> owner, valid on [acquired_at, expiry)."""
    name: str
    owner: str
    acquired_at_ms: int
    ttl_ms: int
    epoch: int

    @property
    def expiry_ms(self) -> int:
        return self.acquired_at_ms + self.ttl_ms

    @property
    def expiry(self) -> float:
        return self.expiry_ms / 1000

    def is_live(self, now_ms: int) -> bool:
        """Expiry is exclusive: a lease is dead at its expiry instant."""
        return now_ms < self.expiry_ms


class LeaseLookup(NamedTuple):
    """Answer of a lookup: current owner, remaining seconds and fencing epoch."""
    owner: str
    remaining: float
    epoch: int

    @property
    def remaining_ms(self) -> int:
        return int(round(self.remaining * 1000))


class ILockService(ABC):
    """Interface for lease directories."""

    @abstractmethod
    def acquire(self, name: str, owner: str, ttl: float) -> LeaseRecord:
        """Grant (or renew, for the current owner) the lease on name."""
        pass

    @abstractmethod
    def renew(self, name: str, owner: str) -> LeaseRecord:
        """Restart the lease clock of a live lease held by owner."""
        pass

    @abstractmethod
    def release(self, name: str, owner: str) -> None:
        """Give up a live lease held by owner."""
        pass

    @abstractmethod
    def lookup(self, name: str) -> LeaseLookup:
        """Resolve name to its current owner."""
        pass
