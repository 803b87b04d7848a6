"""Length-prefixed binary frame codec.

Frame: 4-byte big-endian payload length, then the payload.
Payload: 1-byte kind (0 request, 1 response), 8-byte big-endian id, then
  request:  method, name, key, value, fence as 2-byte-length-prefixed fields
            (fence is empty, or the 8-byte big-endian epoch)
  response: 1-byte status, then one length-prefixed value
"""

import struct
from typing import List, Tuple, Union

from ..interfaces.rpc import Request, Response, ResponseStatus
from .errors import MalformedFrame

KIND_REQUEST = 0
KIND_RESPONSE = 1
MAX_FIELD_LEN = 0xFFFF
FRAME_HEADER_LEN = 4

_FRAME_HEADER = struct.Struct(">I")
_PAYLOAD_HEADER = struct.Struct(">BQ")
_FIELD_LEN = struct.Struct(">H")
_STATUS = struct.Struct(">B")
_EPOCH = struct.Struct(">Q")

Message = Union[Request, Response]


def _pack_field(data: bytes) -> bytes:
    if len(data) > MAX_FIELD_LEN:
        raise ValueError(f"field of {len(data)} bytes exceeds {MAX_FIELD_LEN}")
    return _FIELD_LEN.pack(len(data)) + data


def _unpack_field(payload: bytes, offset: int) -> Tuple[bytes, int]:
    if offset + _FIELD_LEN.size > len(payload):
        raise MalformedFrame("truncated field length")
    (length,) = _FIELD_LEN.unpack_from(payload, offset)
    offset += _FIELD_LEN.size
    end = offset + length
    if end > len(payload):
        raise MalformedFrame("truncated field")
    return payload[offset:end], end


def _utf8(data: bytes, field: str) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedFrame(f"{field} is not valid UTF-8") from None


def encode_payload(message: Message) -> bytes:
    if isinstance(message, Request):
        if not message.method:
            raise ValueError("request method must be non-empty")
        fence = b"" if message.epoch is None else _EPOCH.pack(message.epoch)
        fields: List[bytes] = [
            message.method.encode("utf-8"),
            message.name.encode("utf-8"),
            message.key,
            message.value,
            fence,
        ]
        return _PAYLOAD_HEADER.pack(KIND_REQUEST, message.id) + b"".join(_pack_field(f) for f in fields)
    if isinstance(message, Response):
        return (_PAYLOAD_HEADER.pack(KIND_RESPONSE, message.id)
                + _STATUS.pack(int(message.status))
                + _pack_field(message.value))
    raise TypeError(f"cannot encode {type(message).__name__}")


def encode_frame(message: Message) -> bytes:
    """Serialize a request or response into one frame."""
    payload = encode_payload(message)
    return _FRAME_HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    if len(payload) < _PAYLOAD_HEADER.size:
        raise MalformedFrame("payload shorter than its header")
    kind, message_id = _PAYLOAD_HEADER.unpack_from(payload, 0)
    offset = _PAYLOAD_HEADER.size

    if kind == KIND_REQUEST:
        fields = []
        for _ in range(5):
            data, offset = _unpack_field(payload, offset)
            fields.append(data)
        if offset != len(payload):
            raise MalformedFrame("trailing bytes after request")
        method, name, key, value, fence = fields
        if not method:
            raise MalformedFrame("empty method")
        if fence and len(fence) != _EPOCH.size:
            raise MalformedFrame("fence must be empty or 8 bytes")
        epoch = _EPOCH.unpack(fence)[0] if fence else None
        return Request(id=message_id, method=_utf8(method, "method"), name=_utf8(name, "name"),
                       key=key, value=value, epoch=epoch)

    if kind == KIND_RESPONSE:
        if offset + _STATUS.size > len(payload):
            raise MalformedFrame("truncated status")
        (status,) = _STATUS.unpack_from(payload, offset)
        try:
            status = ResponseStatus(status)
        except ValueError:
            raise MalformedFrame(f"unknown status: {status}") from None
        value, offset = _unpack_field(payload, offset + _STATUS.size)
        if offset != len(payload):
            raise MalformedFrame("trailing bytes after response")
        return Response(id=message_id, status=status, value=value)

    raise MalformedFrame(f"unknown message kind: {kind}")


def decode_frame(frame: bytes) -> Message:
    """Parse exactly one frame; truncation, bad kind or trailing bytes are malformed."""
    if len(frame) < FRAME_HEADER_LEN:
        raise MalformedFrame("frame shorter than its length prefix")
    (length,) = _FRAME_HEADER.unpack_from(frame, 0)
    payload = frame[FRAME_HEADER_LEN:]
    if len(payload) != length:
        raise MalformedFrame(f"declared {length} payload bytes, got {len(payload)}")
    return decode_payload(payload)
