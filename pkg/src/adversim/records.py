"""Line-oriented record codec shared by datasets, parameter files and reports.

A record is a single line of space-separated ``key=value`` tokens.  The first
token is always ``type=<record-type>`` and the last is ``crc=<crc32-hex>``
computed over everything before it.  Values are percent-encoded so they can
carry spaces, ``=``, ``%`` and arbitrary unicode while the line itself stays
splittable with ``str.split(" ")``.  Keys are bare ``[a-z0-9_]`` names.

The same grammar doubles as the live-session wire format, so nothing in this
module may depend on the rest of the package.
"""

from __future__ import annotations

import base64
import hashlib
import re
import zlib
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path

import numpy as np

from .errors import RecordIntegrityError

__all__ = [
    "encode_record",
    "decode_record",
    "write_records",
    "iter_records",
    "read_records",
    "fmt_float",
    "parse_float",
    "fmt_int",
    "parse_int",
    "fmt_bool",
    "parse_bool",
    "encode_bytes",
    "decode_bytes",
    "encode_array",
    "decode_array",
    "file_sha256",
]

_KEY_RE = re.compile(r"[a-z][a-z0-9_]*\Z")

# Characters left intact by percent-encoding: everything printable except
# space, '%' and '=' which are structural.
_SAFE = "!\"#$&'()*+,-./:;<>?@[\\]^`{|}~"

_HEX = "0123456789ABCDEF"
_UNRESERVED = frozenset(
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_.-~" + _SAFE
)


def _quote(value: str) -> str:
    out: list[str] = []
    for byte in value.encode("utf-8"):
        ch = chr(byte)
        if ch in _UNRESERVED:
            out.append(ch)
        else:
            out.append(f"%{_HEX[byte >> 4]}{_HEX[byte & 15]}")
    return "".join(out)


def _unquote(token: str) -> str:
    raw = bytearray()
    i = 0
    n = len(token)
    while i < n:
        ch = token[i]
        if ch == "%":
            esc = token[i + 1 : i + 3]
            if len(esc) != 2 or any(c not in "0123456789abcdefABCDEF" for c in esc):
                raise RecordIntegrityError(f"bad percent escape in {token!r}")
            raw.append(int(esc, 16))
            i += 3
        else:
            raw.append(ord(ch))
            i += 1
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise RecordIntegrityError(f"invalid utf-8 in token {token!r}") from exc


def encode_record(record_type: str, fields: Sequence[tuple[str, str]]) -> str:
    """Encode one record line, appending the integrity checksum."""
    parts = [f"type={_quote(record_type)}"]
    for key, value in fields:
        if not _KEY_RE.match(key) or key in ("type", "crc"):
            raise ValueError(f"invalid record key {key!r}")
        parts.append(f"{key}={_quote(str(value))}")
    body = " ".join(parts)
    crc = zlib.crc32(body.encode("utf-8")) & 0xFFFFFFFF
    return f"{body} crc={crc:08x}"


def decode_record(line: str, index: int | None = None) -> dict[str, str]:
    """Decode one record line, verifying checksum and grammar.

    Returns the fields as a dict including ``type``.  Raises
    RecordIntegrityError naming ``index`` on any corruption.
    """
    line = line.rstrip("\n")
    body, sep, crc_token = line.rpartition(" crc=")
    if not sep:
        raise RecordIntegrityError("missing crc token", index)
    if len(crc_token) != 8 or any(c not in "0123456789abcdef" for c in crc_token):
        raise RecordIntegrityError(f"malformed crc {crc_token!r}", index)
    stated = int(crc_token, 16)
    actual = zlib.crc32(body.encode("utf-8")) & 0xFFFFFFFF
    if stated != actual:
        raise RecordIntegrityError(
            f"checksum mismatch (stated {stated:08x}, computed {actual:08x})", index
        )
    fields: dict[str, str] = {}
    for token in body.split(" "):
        key, sep, value = token.partition("=")
        if not sep or not _KEY_RE.match(key):
            raise RecordIntegrityError(f"malformed token {token!r}", index)
        if key in fields:
            raise RecordIntegrityError(f"duplicate key {key!r}", index)
        try:
            fields[key] = _unquote(value)
        except RecordIntegrityError as exc:
            raise RecordIntegrityError(str(exc), index) from exc
    if "type" not in fields:
        raise RecordIntegrityError("missing type token", index)
    if list(fields)[0] != "type":
        raise RecordIntegrityError("type must be the first token", index)
    return fields


def write_records(path: str | Path, lines: Iterable[str]) -> int:
    """Write encoded record lines to ``path``; returns the line count."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
            count += 1
    return count


def iter_records(path: str | Path) -> Iterator[tuple[int, dict[str, str]]]:
    """Yield ``(index, fields)`` for every record in a file, verifying each."""
    with open(path, "r", encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            yield index, decode_record(line, index)


def read_records(path: str | Path) -> list[dict[str, str]]:
    return [fields for _, fields in iter_records(path)]


# --- scalar formatting ------------------------------------------------------
#
# Floats are written with repr(), the shortest string that round-trips the
# exact binary value, so files are byte-stable across runs and platforms.


def fmt_float(x: float) -> str:
    return repr(float(x))


def parse_float(s: str) -> float:
    return float(s)


def fmt_int(x: int) -> str:
    return str(int(x))


def parse_int(s: str) -> int:
    return int(s)


def fmt_bool(x: bool) -> str:
    return "1" if x else "0"


def parse_bool(s: str) -> bool:
    if s == "1":
        return True
    if s == "0":
        return False
    raise RecordIntegrityError(f"malformed bool {s!r}")


# --- binary payloads --------------------------------------------------------


def encode_bytes(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def decode_bytes(s: str) -> bytes:
    try:
        return base64.b64decode(s.encode("ascii"), validate=True)
    except Exception as exc:
        raise RecordIntegrityError("malformed base64 payload") from exc


_DTYPES = {"u1": np.uint8, "f8": np.float64}


def encode_array(arr: np.ndarray) -> tuple[str, str]:
    """Encode an array as ``(shape_token, payload_token)``.

    Supported dtypes: uint8 and float64, stored little-endian C-order.
    """
    if arr.dtype == np.uint8:
        code = "u1"
    elif arr.dtype == np.float64:
        code = "f8"
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    shape = ",".join(str(d) for d in arr.shape)
    payload = encode_bytes(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return f"{code}:{shape}", payload


def decode_array(shape_token: str, payload: str) -> np.ndarray:
    code, sep, shape_s = shape_token.partition(":")
    if not sep or code not in _DTYPES:
        raise RecordIntegrityError(f"malformed array shape token {shape_token!r}")
    try:
        shape = tuple(int(d) for d in shape_s.split(",") if d != "")
    except ValueError as exc:
        raise RecordIntegrityError(f"malformed array shape token {shape_token!r}") from exc
    raw = decode_bytes(payload)
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    arr = np.frombuffer(raw, dtype=dtype)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise RecordIntegrityError(
            f"array payload has {arr.size} elements, shape says {expected}"
        )
    return arr.reshape(shape).astype(_DTYPES[code])


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
