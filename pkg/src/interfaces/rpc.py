"""RPC message types shared by clients, servers and transports."""

from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional


class ResponseStatus(IntEnum):
    """Wire status codes."""
    OK = 0
    APP_ERROR = 1
    NOT_OWNER = 2


@dataclass(frozen=True)
class Request:
    """Data class representing an RPC request."""
    id: int
    method: str
    name: str = ""
    key: bytes = b""
    value: bytes = b""
    epoch: Optional[int] = None


@dataclass(frozen=True)
class Response:
    """Data class representing an RPC response."""
    id: int
    status: ResponseStatus
    value: bytes = b""

    @property
    def is_final(self) -> bool:
        """Success or application level error: never retried."""
        return self.status in (ResponseStatus.OK, ResponseStatus.APP_ERROR)

    @classmethod
    def ok(cls, request: Request, value: bytes = b"") -> "Response":
        return cls(id=request.id, status=ResponseStatus.OK, value=value)

    @classmethod
    def app_error(cls, request: Request, message: str) -> "Response":
        return cls(id=request.id, status=ResponseStatus.APP_ERROR, value=message.encode("utf-8"))

    @classmethod
    def not_owner(cls, request: Request) -> "Response":
        return cls(id=request.id, status=ResponseStatus.NOT_OWNER, value=b"not-owner")


Handler = Callable[[Request], Response]
