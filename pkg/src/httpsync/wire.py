"""HTTP/1.1 request head parsing with configurable parser personalities.

A :class:`ParserPersonality` decides which path, host and body framing a
hop *honors*. Different personalities deliberately disagree on ambiguous
requests so that proxy chains built from them reproduce real-world
processing discrepancies.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional, Sequence, Union

CRLF = b"\r\n"
HEAD_END = b"\r\n\r\n"

MAX_HEAD_SIZE = 64 * 1024
MAX_HEADER_LINE = 16 * 1024
MAX_CONTENT_LENGTH = 2**53

SYNC_HEADER = b"HTTP-Sync"
SYNC_HMAC_HEADER = b"HTTP-Sync-HMAC"

_TOKEN = re.compile(rb"^[!#$%&'*+\-.^_`|~0-9A-Za-z]+$")
_VERSION = re.compile(rb"^HTTP/[0-9]\.[0-9]$")
_ABSOLUTE = re.compile(rb"^([A-Za-z][A-Za-z0-9+.\-]*)://([^/?#]*)(.*)$", re.DOTALL)
_DIGITS = re.compile(rb"^[0-9]+$")
_PCT = re.compile(rb"%([0-9A-Fa-f]{2})")

# Segments treated as scripts by the framework-style router; anything after
# them is path info rather than part of the resource name.
SCRIPT_EXTENSIONS = (b".php", b".py", b".cgi", b".pl", b".jsp", b".asp", b".aspx")

BODYLESS_METHODS = (b"GET", b"HEAD")


class ParseError(Exception):
    """Base class for request head parse failures."""

    kind = "ParseError"


class MalformedRequestLine(ParseError):
    kind = "MalformedRequestLine"


class MalformedHeader(ParseError):
    kind = "MalformedHeader"


class HeaderTooLarge(MalformedHeader):
    kind = "HeaderTooLarge"


class RejectedByPolicy(ParseError):
    """A strict personality refused an ambiguous request."""

    kind = "RejectedByPolicy"

    def __init__(self, knob: str, detail: str = ""):
        super().__init__(f"rejected by {knob}" + (f": {detail}" if detail else ""))
        self.knob = knob


class TEHandling(str, enum.Enum):
    STRICT_REJECT_INVALID = "strict-reject-invalid"
    IGNORE_INVALID_VALUE = "ignore-invalid-value"
    SANITIZE_LEADING_SEMICOLON = "sanitize-leading-semicolon"


class CLTEPrecedence(str, enum.Enum):
    PREFER_TE = "prefer-te"
    PREFER_CL = "prefer-cl"
    REJECT_BOTH_PRESENT = "reject-both-present"


class DuplicateHost(str, enum.Enum):
    FIRST_WINS = "first-wins"
    LAST_WINS = "last-wins"
    REJECT = "reject"


class AbsoluteURIHost(str, enum.Enum):
    PREFER_URI_HOST = "prefer-uri-host"
    IGNORE_MALFORMED_URI = "ignore-malformed-uri-use-host-header"


class PathDecoding(str, enum.Enum):
    RAW_BYTES = "raw-bytes"
    DECODE_PERCENT_SPLIT_QUERY = "decode-percent-then-split-query"


class FatGetBody(str, enum.Enum):
    CONSUME_BODY = "consume-body"
    IGNORE_BODY = "ignore-body"


@dataclass(frozen=True)
class ParserPersonality:
    """Knob bundle controlling which request values a hop honors."""

    te_handling: TEHandling = TEHandling.STRICT_REJECT_INVALID
    cl_te_precedence: CLTEPrecedence = CLTEPrecedence.PREFER_TE
    duplicate_host: DuplicateHost = DuplicateHost.REJECT
    absolute_uri_host: AbsoluteURIHost = AbsoluteURIHost.PREFER_URI_HOST
    path_decoding: PathDecoding = PathDecoding.RAW_BYTES
    fat_get_body: FatGetBody = FatGetBody.CONSUME_BODY

    @classmethod
    def strict(cls) -> "ParserPersonality":
        """Every knob at its rejecting setting."""
        return cls(
            te_handling=TEHandling.STRICT_REJECT_INVALID,
            cl_te_precedence=CLTEPrecedence.REJECT_BOTH_PRESENT,
            duplicate_host=DuplicateHost.REJECT,
        )

    def with_overrides(self, **knobs: str) -> "ParserPersonality":
        """Return a copy with knobs replaced; values may be enum members or strings."""
        names = {f.name for f in fields(self)}
        coerced = {}
        for name, value in knobs.items():
            if name not in names:
                raise ValueError(f"unknown personality knob {name!r}")
            enum_cls = type(getattr(self, name))
            coerced[name] = enum_cls(value)
        return replace(self, **coerced)

    def to_dict(self) -> dict[str, str]:
        return {f.name: getattr(self, f.name).value for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> "ParserPersonality":
        return cls().with_overrides(**data)


@dataclass(frozen=True)
class NoBody:
    @property
    def length(self) -> int:
        return 0


@dataclass(frozen=True)
class ContentLength:
    length: int


@dataclass(frozen=True)
class Chunked:
    pass


FramingDecision = Union[NoBody, ContentLength, Chunked]


@dataclass(frozen=True)
class FieldSnapshot:
    """Honored values subject to synchronization."""

    path: bytes
    host: bytes


@dataclass(frozen=True)
class Request:
    method: bytes
    target: bytes
    version: bytes
    headers: tuple[tuple[bytes, bytes], ...]
    framing: FramingDecision
    honored_path: bytes
    honored_host: bytes
    # bytes of the head as received, including the terminating blank line
    raw_head: bytes = field(default=b"", compare=False, repr=False)

    @property
    def _by_name(self) -> dict[bytes, list[bytes]]:
        # built on first lookup; stored past the frozen __setattr__
        index = self.__dict__.get("_index")
        if index is None:
            index = {}
            for n, v in self.headers:
                index.setdefault(n.lower(), []).append(v)
            self.__dict__["_index"] = index
        return index

    def header_values(self, name: bytes) -> Sequence[bytes]:
        return self._by_name.get(name.lower(), ())

    def has_header(self, name: bytes) -> bool:
        return name.lower() in self._by_name

    def without_headers(self, *names: bytes) -> tuple[tuple[bytes, bytes], ...]:
        drop = {n.lower() for n in names}
        return tuple((n, v) for n, v in self.headers if n.lower() not in drop)


def split_head(data: bytes) -> tuple[bytes, bytes]:
    """Split ``data`` into (head including blank line, remainder)."""
    end = data.find(HEAD_END)
    if end < 0:
        if len(data) > MAX_HEAD_SIZE:
            raise HeaderTooLarge("header section exceeds 64 KiB")
        raise MalformedHeader("header section not terminated by an empty line")
    end += len(HEAD_END)
    if end > MAX_HEAD_SIZE:
        raise HeaderTooLarge("header section exceeds 64 KiB")
    return data[:end], data[end:]


def _parse_request_line(line: bytes) -> tuple[bytes, bytes, bytes]:
    parts = line.split(b" ")
    if len(parts) != 3:
        raise MalformedRequestLine(f"expected three space-separated parts: {line[:80]!r}")
    method, target, version = parts
    if not _TOKEN.match(method):
        raise MalformedRequestLine(f"bad method {method[:40]!r}")
    if not _VERSION.match(version):
        raise MalformedRequestLine(f"bad version {version[:40]!r}")
    if not target or any(b < 0x21 or b == 0x7F for b in target):
        raise MalformedRequestLine("bad request-target")
    if not (target.startswith(b"/") or target == b"*" or _ABSOLUTE.match(target)):
        raise MalformedRequestLine(f"unsupported request-target form {target[:40]!r}")
    return method, target, version


def _parse_header_line(line: bytes) -> tuple[bytes, bytes]:
    if len(line) > MAX_HEADER_LINE:
        raise HeaderTooLarge("single header exceeds 16 KiB")
    if line[:1] in (b" ", b"\t"):
        raise MalformedHeader("obsolete line folding is not supported")
    name, sep, value = line.partition(b":")
    if not sep or not _TOKEN.match(name):
        raise MalformedHeader(f"bad header line {line[:60]!r}")
    value = value.strip(b" \t")
    if b"\r" in value or b"\n" in value or b"\x00" in value:
        raise MalformedHeader(f"control byte in value of {name!r}")
    return name, value


def _te_is_valid(value: bytes) -> bool:
    codings = [c.strip(b" \t") for c in value.split(b",")]
    if not all(_TOKEN.match(c) for c in codings):
        return False
    return codings[-1].lower() == b"chunked"


def _decide_framing(
    method: bytes, headers: list[tuple[bytes, bytes]], p: ParserPersonality
) -> FramingDecision:
    cl_values = [v for n, v in headers if n.lower() == b"content-length"]
    te_values = [v for n, v in headers if n.lower() == b"transfer-encoding"]

    content_length: Optional[int] = None
    if cl_values:
        if not all(_DIGITS.match(v) for v in cl_values):
            raise MalformedHeader("Content-Length is not a decimal integer")
        distinct = {int(v) for v in cl_values}
        if len(distinct) > 1:
            raise MalformedHeader("conflicting Content-Length headers")
        content_length = distinct.pop()
        if content_length > MAX_CONTENT_LENGTH:
            raise MalformedHeader("Content-Length too large")

    if cl_values and te_values and p.cl_te_precedence is CLTEPrecedence.REJECT_BOTH_PRESENT:
        raise RejectedByPolicy("cl_te_precedence", "Content-Length and Transfer-Encoding")

    chunked = False
    if te_values:
        te = b", ".join(te_values)
        if _te_is_valid(te):
            chunked = True
        elif p.te_handling is TEHandling.STRICT_REJECT_INVALID:
            raise RejectedByPolicy("te_handling", f"invalid Transfer-Encoding {te[:40]!r}")
        elif p.te_handling is TEHandling.SANITIZE_LEADING_SEMICOLON:
            chunked = _te_is_valid(te.lstrip(b" \t;"))
        # IGNORE_INVALID_VALUE: header treated as absent

    if chunked and content_length is not None:
        framing: FramingDecision = (
            ContentLength(content_length)
            if p.cl_te_precedence is CLTEPrecedence.PREFER_CL
            else Chunked()
        )
    elif chunked:
        framing = Chunked()
    elif content_length is not None:
        framing = ContentLength(content_length)
    else:
        framing = NoBody()

    if method in BODYLESS_METHODS and p.fat_get_body is FatGetBody.IGNORE_BODY:
        return NoBody()
    return framing


def percent_decode(data: bytes) -> bytes:
    return _PCT.sub(lambda m: bytes([int(m.group(1), 16)]), data)


def _split_path_info(path: bytes) -> bytes:
    segments = path.split(b"/")
    for i, seg in enumerate(segments[:-1]):
        if seg.lower().endswith(SCRIPT_EXTENSIONS):
            return b"/".join(segments[: i + 1])
    return path


def _honored_path(path_part: bytes, p: ParserPersonality) -> bytes:
    if p.path_decoding is PathDecoding.RAW_BYTES or path_part == b"*":
        return path_part
    decoded = percent_decode(path_part).split(b"?", 1)[0]
    return _split_path_info(decoded)


def _derive_path_and_host(
    target: bytes, headers: list[tuple[bytes, bytes]], p: ParserPersonality
) -> tuple[bytes, bytes]:
    hosts = [v for n, v in headers if n.lower() == b"host"]
    if len(hosts) > 1:
        if p.duplicate_host is DuplicateHost.REJECT:
            raise RejectedByPolicy("duplicate_host", f"{len(hosts)} Host headers")
        header_host = hosts[0] if p.duplicate_host is DuplicateHost.FIRST_WINS else hosts[-1]
    else:
        header_host = hosts[0] if hosts else b""

    m = _ABSOLUTE.match(target)
    if m is None:
        return _honored_path(target, p), header_host

    authority, rest = m.group(2), m.group(3)
    if not rest.startswith(b"/"):
        rest = b"/" + rest
    uri_host = authority.rpartition(b"@")[2]
    if p.absolute_uri_host is AbsoluteURIHost.PREFER_URI_HOST and uri_host:
        host = uri_host
    else:
        host = header_host
    return _honored_path(rest, p), host


def parse_request(raw: bytes, p: ParserPersonality) -> Request:
    """Parse the request head at the start of ``raw`` under personality ``p``.

    Bytes after the blank line are ignored; the caller reads the body according
    to the returned framing decision.
    """
    head, _ = split_head(raw)
    lines = head[: -len(HEAD_END)].split(CRLF)
    method, target, version = _parse_request_line(lines[0])
    headers = [_parse_header_line(line) for line in lines[1:]]
    framing = _decide_framing(method, headers, p)
    path, host = _derive_path_and_host(target, headers, p)
    return Request(
        method=method,
        target=target,
        version=version,
        headers=tuple(headers),
        framing=framing,
        honored_path=path,
        honored_host=host,
        raw_head=head,
    )


def honored_fields(req: Request) -> FieldSnapshot:
    return FieldSnapshot(path=req.honored_path, host=req.honored_host)


def serialize_head(
    method: bytes, target: bytes, version: bytes, headers: Iterable[tuple[bytes, bytes]]
) -> bytes:
    out = [method, b" ", target, b" ", version, CRLF]
    for name, value in headers:
        out += [name, b": ", value, CRLF]
    out.append(CRLF)
    return b"".join(out)


def serialize_request(req: Request) -> bytes:
    """Emit the request head; the body travels separately."""
    return serialize_head(req.method, req.target, req.version, req.headers)
