"""Real-socket binding of the frame codec over asyncio streams.

The simulator never touches sockets; this module serves an RpcServer on a
TCP port and offers a matching client, using the exact frames the simulated
network carries.
"""

import asyncio
import itertools
import logging
from typing import Optional

import backoff

from ..core.codec import FRAME_HEADER_LEN, decode_frame, encode_frame
from ..core.errors import MalformedFrame
from ..core.rpc_core import RpcServer
from ..interfaces.rpc import Request, Response

CONNECT_TRIES = 5


async def read_frame(reader: asyncio.StreamReader) -> Optional[bytes]:
    """Read one whole frame, or None at a clean end of stream."""
    try:
        header = await reader.readexactly(FRAME_HEADER_LEN)
    except asyncio.IncompleteReadError as e:
        if e.partial:
            raise MalformedFrame("connection closed inside a frame header") from None
        return None
    length = int.from_bytes(header, "big")
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise MalformedFrame("connection closed inside a frame") from None
    return header + payload


class LoopbackServer:
    """Serve one RpcServer on a local TCP port."""

    def __init__(self, rpc: RpcServer, host: str = "127.0.0.1", port: int = 0):
        self._rpc = rpc
        self._host = host
        self._port = port
        self._server: Optional[asyncio.AbstractServer] = None
        self._logger = logging.getLogger(__name__)

    @property
    def port(self) -> int:
        return self._port

    async def start(self) -> int:
        """Start listening; returns the bound port."""
        self._server = await asyncio.start_server(self._handle, self._host, self._port)
        self._port = self._server.sockets[0].getsockname()[1]
        self._logger.info(f"Serving frames on {self._host}:{self._port}")
        return self._port

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        try:
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    break
                reply = self._rpc.dispatch(frame)
                if reply is not None:
                    writer.write(reply)
                    await writer.drain()
        except (MalformedFrame, ConnectionError) as e:
            self._logger.warning(f"Dropping connection from {peer}: {e}")
        finally:
            writer.close()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None


class LoopbackClient:
    """One connection, one outstanding request at a time."""

    def __init__(self, host: str, port: int):
        self._host = host
        self._port = port
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._ids = itertools.count(1)
        self._logger = logging.getLogger(__name__)

    @backoff.on_exception(backoff.expo, OSError, max_tries=CONNECT_TRIES, max_value=2)
    async def connect(self) -> None:
        self._reader, self._writer = await asyncio.open_connection(self._host, self._port)
        self._logger.debug(f"Connected to {self._host}:{self._port}")

    async def call(self, request: Request, timeout: float = 5.0) -> Response:
        """Send request (with a fresh id) and wait for its response."""
        if self._writer is None:
            await self.connect()
        outgoing = Request(id=next(self._ids), method=request.method, name=request.name,
                           key=request.key, value=request.value, epoch=request.epoch)
        self._writer.write(encode_frame(outgoing))
        await self._writer.drain()
        frame = await asyncio.wait_for(read_frame(self._reader), timeout)
        if frame is None:
            raise ConnectionError("server closed the connection")
        message = decode_frame(frame)
        if not isinstance(message, Response) or message.id != outgoing.id:
            raise MalformedFrame("unexpected reply")
        return message

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            await self._writer.wait_closed()
            self._writer = None
            self._reader = None
