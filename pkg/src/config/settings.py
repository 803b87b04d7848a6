"""Application configuration following Single Responsibility Principle."""

import os
from dataclasses import dataclass, field
from typing import List


@dataclass
class SimulationConfig:
    """Simulated network and run-length configuration."""
    latency_seconds: float = 0.01
    horizon_seconds: float = 600.0


@dataclass
class LeaseConfig:
    """Lease directory configuration."""
    default_ttl: float = 10.0
    renew_fraction: float = 1 / 3

    @property
    def renew_interval(self) -> float:
        """Seconds between lease renewals of a live server."""
        return self.default_ttl * self.renew_fraction


@dataclass
class ResolverConfig:
    """Resolver timeout configuration."""
    timeout_floor: float = 0.1
    default_timeout: float = 1.0


@dataclass
class CallPolicy:
    """Retry bounds and backoff for one client call."""
    max_attempts: int = 16
    overall_deadline: float = 120.0
    initial_backoff: float = 1.0
    backoff_factor: float = 2.0
    backoff_cap: float = 60.0

    def validate(self) -> List[str]:
        """Validate the policy and return list of errors."""
        errors = []
        if self.max_attempts < 1:
            errors.append("max_attempts must be at least 1")
        if self.overall_deadline <= 0:
            errors.append("overall_deadline must be positive")
        if self.initial_backoff <= 0:
            errors.append("initial_backoff must be positive")
        if self.backoff_factor < 1:
            errors.append("backoff_factor must be at least 1")
        if self.backoff_cap < self.initial_backoff:
            errors.append("backoff_cap must not be below initial_backoff")
        return errors


@dataclass
class AppConfig:
    """Main application configuration."""
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    lease: LeaseConfig = field(default_factory=LeaseConfig)
    resolver: ResolverConfig = field(default_factory=ResolverConfig)
    call_policy: CallPolicy = field(default_factory=CallPolicy)
    debug: bool = False
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "AppConfig":
        """Create configuration from environment variables."""
        config = cls()

        # Simulation config
        config.simulation.latency_seconds = float(os.getenv("LEASEWIRE_LATENCY", "0.01"))
        config.simulation.horizon_seconds = float(os.getenv("LEASEWIRE_HORIZON", "600"))

        # Lease config
        config.lease.default_ttl = float(os.getenv("LEASEWIRE_DEFAULT_TTL", "10"))

        # Call policy
        config.call_policy.max_attempts = int(os.getenv("LEASEWIRE_MAX_ATTEMPTS", "16"))

        # App config
        config.debug = os.getenv("LEASEWIRE_DEBUG", "false").lower() == "true"
        config.log_level = os.getenv("LEASEWIRE_LOG_LEVEL", "DEBUG" if config.debug else "WARNING").upper()

        return config

    def validate(self) -> List[str]:
        """Validate configuration and return list of errors."""
        errors = []

        if self.simulation.latency_seconds < 0.001:
            errors.append("Network latency must be at least 1 ms")

        if self.simulation.horizon_seconds <= 0:
            errors.append("Horizon must be positive")

        if self.lease.default_ttl <= 0:
            errors.append("Default lease TTL must be positive")

        if not 0 < self.lease.renew_fraction < 1:
            errors.append("Lease renew fraction must be between 0 and 1")

        if self.resolver.timeout_floor <= 0:
            errors.append("Resolver timeout floor must be positive")

        if self.resolver.default_timeout < self.resolver.timeout_floor:
            errors.append("Default resolver timeout must not be below the floor")

        errors.extend(f"Call policy: {error}" for error in self.call_policy.validate())

        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            errors.append(f"Unknown log level {self.log_level}")

        return errors
