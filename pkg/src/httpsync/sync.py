"""Processing history, its HTTP-Sync wire encoding, HMAC authentication and validation."""

from __future__ import annotations

import enum
import hashlib
import hmac
import json
import os
from dataclasses import dataclass, field
from json.encoder import encode_basestring_ascii as _json_string
from pathlib import Path
from typing import Optional, Sequence, Union

from httpsync.wire import FieldSnapshot

MAX_SYNC_SIZE = 8 * 1024
KEY_BYTES = 32


class LengthMode(str, enum.Enum):
    HEADER_DECLARED = "header-declared"
    STREAM_EMBEDDED = "stream-embedded"


@dataclass(frozen=True)
class HopLength:
    """Body length honored by one hop.

    ``value`` is ``None`` only in stream-embedded mode before the body has
    been counted, and for histories where the length travels in the body.
    """

    value: Optional[int]
    mode: LengthMode = LengthMode.HEADER_DECLARED

    @classmethod
    def declared(cls, value: int) -> "HopLength":
        return cls(value, LengthMode.HEADER_DECLARED)

    @classmethod
    def stream(cls, value: Optional[int] = None) -> "HopLength":
        return cls(value, LengthMode.STREAM_EMBEDDED)

    @property
    def is_stream(self) -> bool:
        return self.mode is LengthMode.STREAM_EMBEDDED


@dataclass(frozen=True)
class SyncHistory:
    path_values: tuple[bytes, ...]
    host_values: tuple[bytes, ...]
    last_length: HopLength

    def __post_init__(self):
        if len(self.path_values) != len(self.host_values):
            raise ValueError("path and host lists differ in length")
        if not self.path_values:
            raise ValueError("history must hold at least one hop")

    def __len__(self) -> int:
        return len(self.path_values)


@dataclass(frozen=True)
class SyncKey:
    secret: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.secret) != KEY_BYTES:
            raise ValueError(f"sync key must be {KEY_BYTES} bytes")

    @classmethod
    def from_hex(cls, text: str) -> "SyncKey":
        text = text.strip()
        if len(text) != 2 * KEY_BYTES:
            raise ValueError("key file must hold exactly 64 hex characters")
        return cls(bytes.fromhex(text))

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "SyncKey":
        return cls.from_hex(Path(path).read_text(encoding="ascii"))

    @classmethod
    def generate(cls) -> "SyncKey":
        return cls(os.urandom(KEY_BYTES))

    def to_hex(self) -> str:
        return self.secret.hex()


# -- wire encoding ------------------------------------------------------------


class EncodingError(Exception):
    pass


class DecodeError(Exception):
    kind = "DecodeError"


class NotCanonical(DecodeError):
    kind = "NotCanonical"


class SchemaViolation(DecodeError):
    kind = "SchemaViolation"


class ListLengthMismatch(DecodeError):
    kind = "ListLengthMismatch"


class Oversize(DecodeError):
    kind = "Oversize"


STREAM_MARKER = "stream"
_STREAM = HopLength.stream()


def _text(value: bytes) -> str:
    try:
        return value.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EncodingError(f"value is not valid UTF-8: {value[:40]!r}") from exc


_DECODER = json.JSONDecoder()
_KEYS = {"host", "length", "path"}


def _canonical(hosts: Sequence[str], length: Union[int, str], paths: Sequence[str]) -> bytes:
    # keys are fixed, so sorted order is host, length, path; strings go
    # through the same escaper json uses for ensure_ascii output
    return '{"host":[%s],"length":%s,"path":[%s]}'.encode("ascii") % (
        ",".join(map(_json_string, hosts)).encode("ascii"),
        _json_string(length).encode("ascii") if isinstance(length, str) else b"%d" % length,
        ",".join(map(_json_string, paths)).encode("ascii"),
    )


def encode_sync(h: SyncHistory) -> bytes:
    """Canonical JSON: sorted keys, no whitespace, non-ASCII escaped."""
    length: Union[int, str]
    if h.last_length.is_stream:
        length = STREAM_MARKER
    else:
        if h.last_length.value is None:
            raise EncodingError("header-declared length without a value")
        length = h.last_length.value
    return _canonical([_text(v) for v in h.host_values], length, [_text(v) for v in h.path_values])


def _string_list(obj: dict, key: str) -> list[str]:
    values = obj[key]
    if type(values) is not list or not values:
        raise SchemaViolation(f"{key!r} must be a non-empty list")
    for v in values:
        if type(v) is not str:
            raise SchemaViolation(f"{key!r} must hold strings")
    return values


def decode_sync(v: bytes) -> SyncHistory:
    if len(v) > MAX_SYNC_SIZE:
        raise Oversize(f"HTTP-Sync value is {len(v)} bytes")
    try:
        text = v.decode("ascii")
        obj, end = _DECODER.raw_decode(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise SchemaViolation(f"not JSON: {exc}") from exc
    if end != len(text):
        raise SchemaViolation("trailing bytes after the JSON object")
    if type(obj) is not dict:
        raise SchemaViolation("top level must be an object")
    if obj.keys() != _KEYS:
        raise SchemaViolation(f"unexpected keys {sorted(obj)}")
    hosts = _string_list(obj, "host")
    paths = _string_list(obj, "path")
    if len(hosts) != len(paths):
        raise ListLengthMismatch(f"{len(paths)} paths vs {len(hosts)} hosts")

    raw_length = obj["length"]
    if raw_length == STREAM_MARKER:
        length = _STREAM
    elif type(raw_length) is int and raw_length >= 0:
        length = HopLength.declared(raw_length)
    else:
        raise SchemaViolation(f"bad length {raw_length!r}")

    if _canonical(hosts, raw_length, paths) != v:
        raise NotCanonical("HTTP-Sync value is not in canonical form")
    try:
        path_values = tuple(map(str.encode, paths))
        host_values = tuple(map(str.encode, hosts))
    except UnicodeEncodeError as exc:
        # a lone surrogate escape has no UTF-8 form
        raise SchemaViolation("value is not valid Unicode") from exc
    return SyncHistory(path_values, host_values, length)


# -- authentication -----------------------------------------------------------


def compute_hmac(key: SyncKey, sync_value: bytes) -> bytes:
    return hmac.new(key.secret, sync_value, hashlib.sha256).hexdigest().encode("ascii")


def verify_hmac(key: SyncKey, sync_value: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(compute_hmac(key, sync_value), tag)


# -- history ------------------------------------------------------------------


def init_history(length: HopLength, fields: FieldSnapshot) -> SyncHistory:
    return SyncHistory((fields.path,), (fields.host,), length)


def append_history(history: SyncHistory, length: HopLength, fields: FieldSnapshot) -> SyncHistory:
    # only the most recent length is carried; earlier hops already checked theirs
    return SyncHistory(
        history.path_values + (fields.path,),
        history.host_values + (fields.host,),
        length,
    )


# -- validation ---------------------------------------------------------------


class Verdict(str, enum.Enum):
    VALID = "Valid"
    INVALID = "Invalid"


@dataclass(frozen=True)
class Reason:
    field: str  # "path", "host" or "length"
    expected: str
    observed: str
    hop: Optional[int] = None  # position in the history lists
    cause: str = ""

    def __post_init__(self):
        if not self.cause:
            object.__setattr__(self, "cause", f"{self.field}-mismatch")


@dataclass(frozen=True)
class ValidationOutcome:
    verdict: Verdict
    reason: Optional[Reason] = None

    @property
    def valid(self) -> bool:
        return self.verdict is Verdict.VALID

    @classmethod
    def ok(cls) -> "ValidationOutcome":
        return cls(Verdict.VALID)

    @classmethod
    def invalid(cls, field: str, expected, observed, hop: Optional[int] = None, cause: str = "") -> "ValidationOutcome":
        return cls(Verdict.INVALID, Reason(field, _show(expected), _show(observed), hop, cause))


VALID = ValidationOutcome.ok()


def _show(value) -> str:
    if isinstance(value, bytes):
        return value.decode("latin-1")
    return str(value)


@dataclass(frozen=True)
class TransitionRule:
    """Licenses one change of a field value at one position of the history.

    ``at_hop`` is the list position of the new value; ``from_`` of ``None``
    matches any previous value.
    """

    field: str
    at_hop: int
    to: bytes
    from_: Optional[bytes] = None

    def __post_init__(self):
        if self.field not in ("path", "host"):
            raise ValueError(f"rules apply to path or host, not {self.field!r}")
        if self.at_hop < 1:
            raise ValueError("at_hop must be >= 1")

    def licenses(self, field: str, position: int, before: bytes, after: bytes) -> bool:
        return (
            self.field == field
            and self.at_hop == position
            and (self.from_ is None or self.from_ == before)
            and self.to == after
        )

    @classmethod
    def from_dict(cls, data: dict) -> "TransitionRule":
        unknown = set(data) - {"field", "at_hop", "from", "to"}
        if unknown:
            raise ValueError(f"unknown rule keys {sorted(unknown)}")
        source = data.get("from")
        return cls(
            field=data["field"],
            at_hop=int(data["at_hop"]),
            to=data["to"].encode("utf-8"),
            from_=None if source is None else source.encode("utf-8"),
        )

    def to_dict(self) -> dict:
        return {
            "field": self.field,
            "at_hop": self.at_hop,
            "from": None if self.from_ is None else self.from_.decode("utf-8"),
            "to": self.to.decode("utf-8"),
        }


class PolicyMode(str, enum.Enum):
    STRICT = "strict"
    RULES = "rules"


@dataclass(frozen=True)
class ValidationPolicy:
    mode: PolicyMode = PolicyMode.STRICT
    rules: tuple[TransitionRule, ...] = ()

    def __post_init__(self):
        if self.mode is PolicyMode.STRICT and self.rules:
            raise ValueError("strict policy carries no rules")

    @classmethod
    def with_rules(cls, rules: Sequence[TransitionRule]) -> "ValidationPolicy":
        return cls(PolicyMode.RULES, tuple(rules))

    @classmethod
    def load(cls, path: Union[str, os.PathLike, None]) -> "ValidationPolicy":
        """Read a JSON list of transition rules; no file means strict equality."""
        if path is None:
            return cls()
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise ValueError("policy file must hold a JSON list of rules")
        return cls.with_rules([TransitionRule.from_dict(r) for r in data])


def _check_field_strict(name: str, observed: bytes, values: Sequence[bytes]) -> Optional[ValidationOutcome]:
    for i, value in enumerate(values):
        if value != observed:
            return ValidationOutcome.invalid(name, value, observed, hop=i)
    return None


def _check_field_rules(
    name: str, observed: bytes, values: Sequence[bytes], rules: Sequence[TransitionRule]
) -> Optional[ValidationOutcome]:
    sequence = list(values) + [observed]
    for pos in range(1, len(sequence)):
        before, after = sequence[pos - 1], sequence[pos]
        if before == after:
            continue
        if not any(r.licenses(name, pos, before, after) for r in rules):
            return ValidationOutcome.invalid(name, before, after, hop=pos)
    return None


def check_length(length: HopLength, recorded: HopLength) -> ValidationOutcome:
    """Compare this hop's length with the last recorded one.

    A body-embedded length upstream cannot be matched by a header-declared
    framing here. Unknown values defer the comparison to end of body.
    """
    if recorded.is_stream and not length.is_stream:
        return ValidationOutcome.invalid(
            "length", STREAM_MARKER, length.value, cause="framing-mismatch"
        )
    if length.value is not None and recorded.value is not None and length.value != recorded.value:
        return ValidationOutcome.invalid("length", recorded.value, length.value)
    return VALID


def validate_sync(
    length: HopLength,
    fields: FieldSnapshot,
    history: SyncHistory,
    policy: ValidationPolicy = ValidationPolicy(),
) -> ValidationOutcome:
    if policy.mode is PolicyMode.STRICT:
        bad = _check_field_strict("path", fields.path, history.path_values) or _check_field_strict(
            "host", fields.host, history.host_values
        )
    else:
        bad = _check_field_rules(
            "path", fields.path, history.path_values, policy.rules
        ) or _check_field_rules("host", fields.host, history.host_values, policy.rules)
    if bad is not None:
        return bad
    return check_length(length, history.last_length)
