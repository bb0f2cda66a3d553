"""A single hop of a proxy chain: parse, verify, validate, append and forward.

:class:`Exchange` holds the per-request state machine without any I/O so it
can be driven by the asyncio server in :class:`ProxyNode` or synchronously by
:func:`handle_request`. A hop in origin mode answers with a small echo
response instead of forwarding.
"""

from __future__ import annotations

import asyncio
import enum
import json
import re
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from httpsync.body import (
    DEFAULT_BUFFER_CAP,
    READ_WINDOW,
    TERMINAL,
    TERMINAL_CHUNK,
    ChunkedDecoder,
    FixedBody,
    FramingError,
    LengthChunkRecord,
    LengthStripper,
    MissingLengthChunk,
    StreamCounter,
    StripError,
    length_chunk,
    verify_stream_length,
)
from httpsync.sync import (
    MAX_SYNC_SIZE,
    DecodeError,
    EncodingError,
    FieldSnapshot,
    HopLength,
    SyncHistory,
    SyncKey,
    ValidationOutcome,
    ValidationPolicy,
    append_history,
    check_length,
    compute_hmac,
    decode_sync,
    encode_sync,
    init_history,
    validate_sync,
    verify_hmac,
)
from httpsync.wire import (
    HEAD_END,
    MAX_HEAD_SIZE,
    SYNC_HEADER,
    SYNC_HMAC_HEADER,
    Chunked,
    ContentLength,
    NoBody,
    ParseError,
    ParserPersonality,
    Request,
    honored_fields,
    parse_request,
    serialize_head,
    split_head,
)

Address = tuple[str, int]

_CL = b"Content-Length"
_TE = b"Transfer-Encoding"


class TransferMode(str, enum.Enum):
    STREAMING = "streaming"
    BUFFERING = "buffering"


class OnInvalid(str, enum.Enum):
    CLOSE = "close"
    RESPOND_400 = "400"


AppHook = Callable[[FieldSnapshot, Optional[SyncHistory]], Optional[ValidationOutcome]]


def _stdout_log(line: str) -> None:
    sys.stdout.write(line + "\n")
    sys.stdout.flush()


@dataclass
class NodeConfig:
    listen: Address = ("127.0.0.1", 0)
    upstream: Optional[Address] = None
    personality: ParserPersonality = field(default_factory=ParserPersonality)
    policy: ValidationPolicy = field(default_factory=ValidationPolicy)
    key: Optional[SyncKey] = None
    transfer_mode: TransferMode = TransferMode.STREAMING
    sync_enabled: bool = True
    on_invalid: OnInvalid = OnInvalid.CLOSE
    hop: int = 1
    read_timeout: float = 30.0
    buffer_cap: int = DEFAULT_BUFFER_CAP
    verbose: bool = False
    # origin only: sees the full history including this hop's entry
    app_hook: Optional[AppHook] = None
    emit: Callable[[str], None] = _stdout_log

    def __post_init__(self):
        self.transfer_mode = TransferMode(self.transfer_mode)
        self.on_invalid = OnInvalid(self.on_invalid)
        if self.sync_enabled and self.key is None:
            raise ValueError("a sync-aware hop needs a key")

    @property
    def is_origin(self) -> bool:
        return self.upstream is None


# -- structured log records ---------------------------------------------------

_PLAIN = re.compile(r"^[\x21-\x7e]+$")
_FIELD = re.compile(r'(\w+)=("(?:[^"\\]|\\.)*"|\S*)')


def _render(value) -> str:
    if isinstance(value, bytes):
        value = value.decode("latin-1")
    value = str(value)
    if _PLAIN.match(value) and '"' not in value:
        return value
    return json.dumps(value)


def format_record(tag: str, **fields) -> str:
    return " ".join([tag] + [f"{k}={_render(v)}" for k, v in fields.items()])


def parse_record(line: str) -> tuple[str, dict[str, str]]:
    tag, _, rest = line.strip().partition(" ")
    fields = {}
    for key, value in _FIELD.findall(rest):
        fields[key] = json.loads(value) if value.startswith('"') else value
    return tag, fields


# -- decisions ----------------------------------------------------------------


@dataclass(frozen=True)
class TerminationReason:
    cause: str
    field: str = "-"
    expected: str = "-"
    observed: str = "-"
    hop: int = 0

    def record(self) -> str:
        return format_record(
            "TERMINATE",
            hop=self.hop,
            cause=self.cause,
            field=self.field,
            expected=self.expected,
            observed=self.observed,
        )


class Terminated(Exception):
    def __init__(self, cause: str, field: str = "-", expected="-", observed="-"):
        super().__init__(cause)
        self.cause = cause
        self.field = field
        self.expected = _as_text(expected)
        self.observed = _as_text(observed)

    @classmethod
    def from_outcome(cls, outcome: ValidationOutcome) -> "Terminated":
        r = outcome.reason
        return cls(r.cause, r.field, r.expected, r.observed)

    def reason(self, hop: int) -> TerminationReason:
        return TerminationReason(self.cause, self.field, self.expected, self.observed, hop)


def _as_text(value) -> str:
    if isinstance(value, bytes):
        return value.decode("latin-1")
    return str(value)


@dataclass(frozen=True)
class Forward:
    data: bytes
    leftover: bytes = b""


@dataclass(frozen=True)
class Respond:
    status: int
    data: bytes


@dataclass(frozen=True)
class Terminate:
    reason: TerminationReason


HopDecision = Union[Forward, Respond, Terminate]


def echo_response(fields: FieldSnapshot, length: int, hops: int) -> bytes:
    body = b"path: %s\nhost: %s\nlength: %d\nhops: %d\n" % (fields.path, fields.host, length, hops)
    return (
        b"HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\nContent-Length: %d\r\n\r\n" % len(body)
        + body
    )


BAD_REQUEST = b"HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
BAD_GATEWAY = b"HTTP/1.1 502 Bad Gateway\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"


# -- per-request state machine ------------------------------------------------


class Exchange:
    """One request passing through one hop.

    Call :meth:`open` with the request head, :meth:`feed` body bytes until
    :attr:`done`, then :meth:`finish`. Each returns the bytes to send
    upstream at that point. Any discrepancy raises :class:`Terminated`.
    """

    def __init__(self, cfg: NodeConfig):
        self.cfg = cfg
        self.request: Optional[Request] = None
        self.fields: Optional[FieldSnapshot] = None
        self.history_in: Optional[SyncHistory] = None
        self.done = False
        self.unused = b""
        self.response: Optional[bytes] = None
        self.body_length = 0
        self._body: Union[None, FixedBody, ChunkedDecoder] = None
        self._stripper: Optional[LengthStripper] = None
        self._parts: Optional[list[bytes]] = None
        self._parts_size = 0
        self._expect_record = False
        self._declared_limit: Optional[int] = None
        self._fed = 0
        self._streaming = False

    # header phase

    def open(self, head: bytes) -> bytes:
        cfg = self.cfg
        try:
            req = parse_request(head, cfg.personality)
        except ParseError as exc:
            raise Terminated("parse-rejected", observed=exc.kind) from exc
        self.request = req
        self.fields = honored_fields(req)
        framing = req.framing
        if cfg.verbose:
            cfg.emit(
                format_record(
                    "HONORED",
                    hop=cfg.hop,
                    path=self.fields.path,
                    host=self.fields.host,
                    framing=_framing_name(framing),
                )
            )
            self._snapshot("in", req.header_values(SYNC_HEADER), req.header_values(SYNC_HMAC_HEADER))

        if cfg.sync_enabled:
            self.history_in = self._incoming_history(req)
            if self.history_in is not None:
                outcome = validate_sync(
                    self._header_time_length(), self.fields, self.history_in, cfg.policy
                )
                if not outcome.valid:
                    raise Terminated.from_outcome(outcome)
                recorded = self.history_in.last_length
                self._expect_record = recorded.is_stream
                if isinstance(framing, Chunked) and not recorded.is_stream:
                    self._declared_limit = recorded.value

        forwarding = not cfg.is_origin
        self._streaming = forwarding and (
            not cfg.sync_enabled or cfg.transfer_mode is TransferMode.STREAMING
        )
        if isinstance(framing, NoBody):
            self.done = True
        elif isinstance(framing, ContentLength):
            self._body = FixedBody(framing.length)
            self.done = self._body.done
        else:
            self._body = ChunkedDecoder()
            if self._streaming and self._expect_record:
                self._stripper = LengthStripper()
            if self._declared_limit == 0:
                self._framing_split()
        if not self._streaming:
            self._parts = []
            return b""
        if isinstance(framing, Chunked):
            return self._forward_head(HopLength.stream())
        return self._forward_head(HopLength.declared(framing.length))

    def _header_time_length(self) -> HopLength:
        framing = self.request.framing
        if isinstance(framing, Chunked):
            return HopLength.stream()
        return HopLength.declared(framing.length)

    def _incoming_history(self, req: Request) -> Optional[SyncHistory]:
        values = req.header_values(SYNC_HEADER)
        tags = req.header_values(SYNC_HMAC_HEADER)
        if not values and not tags:
            return None
        if len(values) != 1 or len(tags) != 1:
            raise Terminated(
                "forged-history",
                field="sync",
                expected="one HTTP-Sync and one HTTP-Sync-HMAC",
                observed=f"{len(values)} HTTP-Sync, {len(tags)} HTTP-Sync-HMAC",
            )
        value, tag = values[0], tags[0]
        if len(value) > MAX_SYNC_SIZE:
            raise Terminated("history-too-large", field="sync", expected=MAX_SYNC_SIZE, observed=len(value))
        if not verify_hmac(self.cfg.key, value, tag):
            raise Terminated("forged-history", field="sync", expected="valid HMAC", observed=tag)
        try:
            return decode_sync(value)
        except DecodeError as exc:
            raise Terminated("malformed-history", field="sync", observed=exc.kind) from exc

    def _forward_head(self, length: HopLength, content_length: Optional[int] = None) -> bytes:
        cfg = self.cfg
        req = self.request
        no_body = isinstance(req.framing, NoBody)
        if not cfg.sync_enabled:
            if no_body and (req.has_header(_CL) or req.has_header(_TE)):
                return serialize_head(req.method, req.target, req.version, req.without_headers(_CL, _TE))
            return req.raw_head
        drop = [SYNC_HEADER, SYNC_HMAC_HEADER]
        if no_body or content_length is not None:
            drop += [_CL, _TE]
        if self.history_in is None:
            history = init_history(length, self.fields)
        else:
            history = append_history(self.history_in, length, self.fields)
        try:
            value = encode_sync(history)
        except EncodingError as exc:
            raise Terminated("encoding-error", field="sync", observed=str(exc)) from exc
        if len(value) > MAX_SYNC_SIZE:
            raise Terminated("history-too-large", field="sync", expected=MAX_SYNC_SIZE, observed=len(value))
        tag = compute_hmac(cfg.key, value)
        if cfg.verbose:
            self._snapshot("out", [value], [tag])
        sync_lines = b"%s: %s\r\n%s: %s\r\n\r\n" % (SYNC_HEADER, value, SYNC_HMAC_HEADER, tag)
        if content_length is None and not any(map(req.has_header, drop)):
            # nothing to remove: keep the received head byte for byte
            return req.raw_head[:-2] + sync_lines
        headers = list(req.without_headers(*drop))
        if content_length is not None:
            headers.append((_CL, b"%d" % content_length))
        return serialize_head(req.method, req.target, req.version, headers)[:-2] + sync_lines

    def _snapshot(self, direction: str, values: list[bytes], tags: list[bytes]) -> None:
        self.cfg.emit(
            format_record(
                "SNAPSHOT",
                hop=self.cfg.hop,
                direction=direction,
                sync=b"|".join(values) if values else "-",
                hmac=b"|".join(tags) if tags else "-",
            )
        )

    def _framing_split(self) -> None:
        # the previous aware hop ended the body at this byte count; a chunked
        # body still open here disagrees with it about the message boundary
        raise Terminated(
            "framing-mismatch", field="length", expected=self._declared_limit, observed="chunked"
        )

    # body phase

    def feed(self, data: bytes) -> bytes:
        if self.done:
            self.unused += data
            return b""
        try:
            if isinstance(self._body, FixedBody):
                piece = self._body.feed(data)
                self.done = self._body.done
                self.unused = self._body.unused
                return self._route([piece]) if piece else b""
            return self._feed_chunked(data)
        except FramingError as exc:
            raise Terminated("framing-error", field="length", observed=exc.kind) from exc
        except StripError as exc:
            raise Terminated("strip-error", field="length", observed=exc.kind) from exc

    def _feed_chunked(self, data: bytes) -> bytes:
        decoder = self._body
        segments = decoder.feed(data)
        self._fed += len(data)
        if decoder.done:
            self.done = True
            self.unused = decoder.unused
            self._fed -= len(decoder.unused)
        elif self._declared_limit is not None and self._fed >= self._declared_limit:
            self._framing_split()
        if not segments:
            return b""
        if not self._streaming:
            return self._route([s.data for s in segments if s.data])
        if not self.cfg.sync_enabled:
            # oblivious: wire bytes pass through untouched, trailers included
            return b"".join([s.raw for s in segments])
        if self._stripper is not None:
            out = []
            for seg in segments:
                for released in self._stripper.push(seg):
                    self.body_length += len(released.data)
                    out.append(released.raw)
            return b"".join(out)
        if segments[-1].flag == TERMINAL:
            segments = segments[:-1]
        return b"".join([s.raw for s in segments])

    def _route(self, pieces: list[bytes]) -> bytes:
        if self._streaming:
            return b"".join(pieces)
        for piece in pieces:
            self._parts_size += len(piece)
            if self._parts_size > self.cfg.buffer_cap:
                raise Terminated("body-too-large", field="length", expected=self.cfg.buffer_cap, observed=self._parts_size)
            self._parts.append(piece)
        return b""

    def eof(self) -> None:
        """The client closed before the body was complete."""
        if self.done:
            return
        try:
            self._body.eof()
        except FramingError as exc:
            raise Terminated("framing-error", field="length", observed=exc.kind) from exc

    def finish(self) -> bytes:
        if not self.done:
            raise RuntimeError("finish() before the body is complete")
        cfg = self.cfg
        framing = self.request.framing
        body = b"".join(self._parts) if self._parts is not None else b""

        if isinstance(framing, Chunked):
            if self._stripper is not None:
                length = self.body_length
                record = self._stripper.record
            else:
                length = self._body.total
                record = None
                if self._expect_record:
                    record, body, length = self._split_record(body)
            self.body_length = length
            if cfg.sync_enabled and self.history_in is not None:
                if record is not None:
                    counter = StreamCounter()
                    counter.add(length)
                    outcome = verify_stream_length(record, counter)
                else:
                    outcome = check_length(HopLength.declared(length), self.history_in.last_length)
                if not outcome.valid:
                    raise Terminated.from_outcome(outcome)
        else:
            self.body_length = framing.length

        if cfg.is_origin:
            return self._respond()
        if self._streaming:
            if isinstance(framing, Chunked) and cfg.sync_enabled:
                return length_chunk(self.body_length) + TERMINAL_CHUNK
            return b""
        if isinstance(framing, Chunked):
            head = self._forward_head(HopLength.declared(self.body_length), content_length=self.body_length)
        else:
            head = self._forward_head(HopLength.declared(self.body_length))
        return head + body

    def _split_record(self, body: bytes) -> tuple[LengthChunkRecord, bytes, int]:
        size = self._body.last_chunk_size
        if size == 0:
            raise Terminated("strip-error", field="length", observed=MissingLengthChunk.kind)
        try:
            record = LengthChunkRecord.parse(body[-size:])
        except StripError as exc:
            raise Terminated("strip-error", field="length", observed=exc.kind) from exc
        body = body[:-size]
        return record, body, len(body)

    def _respond(self) -> bytes:
        cfg = self.cfg
        history = None
        if cfg.sync_enabled:
            own = HopLength.declared(self.body_length)
            if self.history_in is None:
                history = init_history(own, self.fields)
            else:
                history = append_history(self.history_in, own, self.fields)
        if cfg.app_hook is not None:
            verdict = cfg.app_hook(self.fields, history)
            if verdict is not None and not verdict.valid:
                r = verdict.reason
                raise Terminated("app-rejected", r.field, r.expected, r.observed)
        cfg.emit(
            format_record(
                "ORIGIN",
                hop=cfg.hop,
                method=self.request.method,
                path=self.fields.path,
                host=self.fields.host,
                length=self.body_length,
            )
        )
        self.response = echo_response(self.fields, self.body_length, len(history) if history else 0)
        return b""


def _framing_name(framing) -> str:
    if isinstance(framing, NoBody):
        return "none"
    if isinstance(framing, ContentLength):
        return f"content-length:{framing.length}"
    return "chunked"


def handle_request(raw: bytes, cfg: NodeConfig) -> HopDecision:
    """Run one complete request through a hop without any network I/O."""
    try:
        try:
            head, rest = split_head(raw)
        except ParseError as exc:
            raise Terminated("parse-rejected", observed=exc.kind) from exc
        ex = Exchange(cfg)
        out = [ex.open(head)]
        if not ex.done:
            out.append(ex.feed(rest))
            ex.eof()
            leftover = ex.unused
        else:
            leftover = rest
        out.append(ex.finish())
    except Terminated as t:
        reason = t.reason(cfg.hop)
        cfg.emit(reason.record())
        return Terminate(reason)
    if cfg.is_origin:
        return Respond(200, ex.response)
    return Forward(b"".join(out), leftover)


# -- asyncio server -----------------------------------------------------------


class UpstreamClosed(Exception):
    pass


async def _read(reader: asyncio.StreamReader, timeout: float) -> bytes:
    return await asyncio.wait_for(reader.read(READ_WINDOW), timeout)


async def _read_head(reader, buf: bytes, timeout: float) -> tuple[Optional[bytes], bytes]:
    """Return (head, rest); head is None on a clean close before any byte."""
    start = 0
    while True:
        end = buf.find(HEAD_END, start)
        if end >= 0:
            end += len(HEAD_END)
            return buf[:end], buf[end:]
        if len(buf) > MAX_HEAD_SIZE:
            return buf, b""  # let the parser report the oversize head
        start = max(0, len(buf) - 3)
        data = await _read(reader, timeout)
        if not data:
            if buf.strip():
                return buf, b""
            return None, b""
        buf += data


_STATUS = re.compile(rb"^HTTP/\d\.\d (\d{3})")


async def _relay_response(ureader, writer, ubuf: bytes, method: bytes, timeout: float) -> tuple[bool, bytes]:
    """Copy one response from upstream to the client; returns (keep_alive, leftover)."""
    head, rest = await _read_head(ureader, ubuf, timeout)
    if head is None or not head.endswith(HEAD_END):
        raise UpstreamClosed("upstream closed before a response")
    m = _STATUS.match(head)
    if m is None:
        raise UpstreamClosed("malformed upstream response")
    status = int(m.group(1))
    lines = head[:-4].split(b"\r\n")[1:]
    headers = [ln.partition(b":") for ln in lines]
    names = {n.strip().lower(): v.strip() for n, _, v in headers}
    keep_alive = names.get(b"connection", b"").lower() != b"close"
    writer.write(head)

    if method == b"HEAD" or status < 200 or status in (204, 304):
        return keep_alive, rest
    if b"chunked" in names.get(b"transfer-encoding", b"").lower():
        decoder = ChunkedDecoder()
        data = rest
        while True:
            if data:
                for seg in decoder.feed(data):
                    writer.write(seg.raw)
                await writer.drain()
            if decoder.done:
                return keep_alive, decoder.unused
            data = await _read(ureader, timeout)
            if not data:
                raise UpstreamClosed("upstream closed inside a response")
    if b"content-length" in names:
        body = FixedBody(int(names[b"content-length"]))
        data = rest
        while True:
            if data:
                writer.write(body.feed(data))
                await writer.drain()
            if body.done:
                return keep_alive, body.unused
            data = await _read(ureader, timeout)
            if not data:
                raise UpstreamClosed("upstream closed inside a response")
    # close-delimited
    if rest:
        writer.write(rest)
    while True:
        data = await _read(ureader, timeout)
        if not data:
            return False, b""
        writer.write(data)
        await writer.drain()


class ProxyNode:
    """asyncio TCP server running one hop."""

    def __init__(self, cfg: NodeConfig):
        self.cfg = cfg
        self._server: Optional[asyncio.base_events.Server] = None
        self.address: Optional[Address] = None

    async def start(self) -> Address:
        host, port = self.cfg.listen
        self._server = await asyncio.start_server(self._handle, host, port)
        sock = self._server.sockets[0]
        self.address = sock.getsockname()[:2]
        cfg = self.cfg
        cfg.emit(
            format_record(
                "LISTEN",
                hop=cfg.hop,
                addr=f"{self.address[0]}:{self.address[1]}",
                upstream=f"{cfg.upstream[0]}:{cfg.upstream[1]}" if cfg.upstream else "origin",
                sync="on" if cfg.sync_enabled else "oblivious",
                mode=cfg.transfer_mode.value,
                on_invalid=cfg.on_invalid.value,
                policy=cfg.policy.mode.value,
                personality=",".join(f"{k}={v}" for k, v in cfg.personality.to_dict().items()),
            )
        )
        return self.address

    async def serve_forever(self) -> None:
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        cfg = self.cfg
        upstream: Optional[tuple[asyncio.StreamReader, asyncio.StreamWriter]] = None
        buf = b""
        ubuf = b""
        try:
            while True:
                head, buf = await _read_head(reader, buf, cfg.read_timeout)
                if head is None:
                    return
                ex = Exchange(cfg)
                try:
                    if not head.endswith(HEAD_END):
                        try:
                            split_head(head)
                        except ParseError as exc:
                            raise Terminated("parse-rejected", observed=exc.kind) from exc
                    out = ex.open(head)
                    if not cfg.is_origin and upstream is None:
                        try:
                            upstream = await asyncio.open_connection(*cfg.upstream)
                        except OSError as exc:
                            cfg.emit(format_record("UPSTREAM_ERROR", hop=cfg.hop, error=str(exc)))
                            writer.write(BAD_GATEWAY)
                            return
                    data, buf = buf, b""
                    if ex.done:
                        ex.unused = data
                    elif data:
                        # head and already-buffered body bytes leave in one write
                        out += ex.feed(data)
                        data = b""
                    if out:
                        upstream[1].write(out)
                    while not ex.done:
                        if data:
                            out = ex.feed(data)
                            if out:
                                upstream[1].write(out)
                                await upstream[1].drain()
                            if ex.done:
                                break
                        try:
                            data = await _read(reader, cfg.read_timeout)
                        except asyncio.TimeoutError:
                            raise Terminated("timeout", field="length", observed="body incomplete")
                        if not data:
                            ex.eof()
                    buf = ex.unused
                    out = ex.finish()
                    if cfg.is_origin:
                        writer.write(ex.response)
                        await writer.drain()
                        continue
                    if out:
                        upstream[1].write(out)
                    await upstream[1].drain()
                    keep_alive, ubuf = await _relay_response(
                        upstream[0], writer, ubuf, ex.request.method, cfg.read_timeout
                    )
                    await writer.drain()
                    if not keep_alive:
                        return
                except Terminated as t:
                    if upstream is not None:
                        upstream[1].transport.abort()
                        upstream = None
                    cfg.emit(t.reason(cfg.hop).record())
                    if cfg.on_invalid is OnInvalid.RESPOND_400:
                        writer.write(BAD_REQUEST)
                    return
        except UpstreamClosed as exc:
            cfg.emit(format_record("UPSTREAM_CLOSED", hop=cfg.hop, detail=str(exc)))
        except asyncio.TimeoutError:
            cfg.emit(format_record("IDLE_TIMEOUT", hop=cfg.hop))
        except (ConnectionError, OSError) as exc:
            cfg.emit(format_record("CONNECTION_ERROR", hop=cfg.hop, detail=str(exc)))
        finally:
            if upstream is not None:
                upstream[1].close()
            try:
                await writer.drain()
            except (ConnectionError, OSError):
                pass
            writer.close()


def run_node(cfg: NodeConfig) -> None:
    """Serve until interrupted."""

    async def main() -> None:
        node = ProxyNode(cfg)
        await node.start()
        await node.serve_forever()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
