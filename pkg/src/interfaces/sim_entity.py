"""Simulated entity interface following the Interface Segregation Principle."""

from abc import ABC, abstractmethod


class ISimEntity(ABC):
    """Anything that can receive messages on the simulated network."""

    @property
    @abstractmethod
    def entity_id(self) -> str:
        """Network address of the entity."""
        pass

    @abstractmethod
    def on_message(self, src: str, payload: bytes) -> None:
        """Handle a delivered message."""
        pass

    def on_crash(self) -> None:
        """Called when a crash-server fault hits the entity."""

    def on_restart(self) -> None:
        """Called when a restart-server fault revives the entity."""
