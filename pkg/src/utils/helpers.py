"""Utility functions and helpers."""

import hashlib
from typing import Dict, List, Union
from urllib.parse import quote, unquote

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK_64 = (1 << 64) - 1


def to_ms(seconds: float) -> int:
    """Convert seconds to whole simulated milliseconds."""
    return int(round(seconds * 1000))


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a digest."""
    digest = FNV_OFFSET_BASIS
    for byte in data:
        digest = ((digest ^ byte) * FNV_PRIME) & _MASK_64
    return digest


def derive_seed(seed: int, stream: str) -> int:
    """Derive an independent 64-bit seed for a named random stream."""
    material = f"{seed}:{stream}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big")


def _render_value(value: Union[str, bytes, int, float, None]) -> str:
    if value is None:
        return "-"
    if isinstance(value, bytes):
        return value.hex() or "-"
    text = str(value)
    if not text:
        return "-"
    return quote(text, safe="/:,.-_+")


def format_detail(**fields: Union[str, bytes, int, float, None]) -> str:
    """Render trace detail as space-separated key=value tokens.

    Bytes are hex encoded, anything else is percent-encoded so that a detail
    never contains whitespace. Empty values render as '-'.
    """
    return " ".join(f"{name}={_render_value(value)}" for name, value in fields.items())


def parse_detail(detail: str) -> Dict[str, str]:
    """Inverse of format_detail for text fields (bytes stay hex)."""
    fields: Dict[str, str] = {}
    for token in detail.split():
        name, sep, value = token.partition("=")
        if not sep:
            fields[name] = ""
            continue
        fields[name] = "" if value == "-" else unquote(value)
    return fields


def hex_to_bytes(text: str) -> bytes:
    """Decode a hex detail field ('' or '-' meaning empty)."""
    if text in ("", "-"):
        return b""
    return bytes.fromhex(text)


def parse_key_alphabet(spec: str) -> List[bytes]:
    """Parse a workload key alphabet: 'a..z' ranges and comma-separated lists."""
    keys: List[bytes] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            low, _, high = part.partition("..")
            if len(low) != 1 or len(high) != 1 or low > high:
                raise ValueError(f"bad key range: {part}")
            keys.extend(chr(c).encode("utf-8") for c in range(ord(low), ord(high) + 1))
        else:
            keys.append(part.encode("utf-8"))
    if not keys:
        raise ValueError("empty key alphabet")
    return keys
