"""Streaming request bodies: decoding, counting and the embedded length chunk.

When a hop streams a chunked body it cannot know the total length at the
time it sends its headers. It therefore appends one extra chunk carrying
``Length: <n>`` right before the terminating chunk; the next aware hop
strips that chunk and checks it against its own count.

The decoder here is sans-IO: it is fed raw bytes and returns
:class:`Segment` records that carry both the raw wire bytes and the decoded
payload, so callers can forward chunk framing untouched while counting.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, NamedTuple, Optional, Union

from httpsync.sync import ValidationOutcome, VALID
from httpsync.wire import Chunked, ContentLength, FramingDecision, NoBody

READ_WINDOW = 64 * 1024
DEFAULT_BUFFER_CAP = 16 * 1024 * 1024
DEFAULT_MAX_CHUNK = 2**31
MAX_SIZE_LINE = 4096
MAX_TRAILER_SECTION = 16 * 1024

TERMINAL_CHUNK = b"0\r\n\r\n"
LENGTH_PREFIX = b"Length: "
# "Length: " plus at most 20 decimal digits
MAX_RECORD_PAYLOAD = len(LENGTH_PREFIX) + 20
_RECORD = re.compile(rb"^Length: (0|[1-9][0-9]*)$")
_HEXDIGITS = b"0123456789abcdefABCDEF"


@dataclass(frozen=True)
class Data:
    data: bytes


@dataclass(frozen=True)
class End:
    pass


END = End()
BodyEvent = Union[Data, End]


class FramingError(Exception):
    kind = "FramingError"


class TruncatedBody(FramingError):
    kind = "TruncatedBody"


class MalformedChunkSize(FramingError):
    kind = "MalformedChunkSize"


class MissingTerminalChunk(FramingError):
    kind = "MissingTerminalChunk"


class OversizeChunk(FramingError):
    kind = "OversizeChunk"


class StripError(Exception):
    kind = "StripError"


class MissingLengthChunk(StripError):
    kind = "MissingLengthChunk"


class MalformedLengthPayload(StripError):
    kind = "MalformedLengthPayload"


class BufferLimitExceeded(Exception):
    pass


class StreamCounter:
    """Running total of decoded body bytes."""

    __slots__ = ("running_total",)

    def __init__(self) -> None:
        self.running_total = 0

    def add(self, n: int) -> None:
        self.running_total += n

    def __repr__(self) -> str:
        return f"StreamCounter({self.running_total})"


@dataclass(frozen=True)
class LengthChunkRecord:
    declared_length: int

    def __post_init__(self):
        if self.declared_length < 0:
            raise ValueError("declared length must be non-negative")

    @property
    def payload(self) -> bytes:
        return LENGTH_PREFIX + str(self.declared_length).encode("ascii")

    @classmethod
    def parse(cls, payload: bytes) -> "LengthChunkRecord":
        m = _RECORD.match(payload)
        if m is None:
            raise MalformedLengthPayload(f"bad length record {payload[:40]!r}")
        return cls(int(m.group(1)))


def encode_chunk(data: bytes) -> bytes:
    if not data:
        raise ValueError("an empty chunk would terminate the body")
    return b"%x\r\n%s\r\n" % (len(data), data)


def length_chunk(total: int) -> bytes:
    return encode_chunk(LengthChunkRecord(total).payload)


# -- sans-IO decoding ---------------------------------------------------------

PARTIAL, CHUNK_END, TERMINAL = 0, 1, 2


class Segment(NamedTuple):
    """A run of consumed wire bytes.

    ``raw`` concatenated over all segments equals the consumed input.
    ``flag`` is PARTIAL (chunk continues), CHUNK_END, or TERMINAL (last-chunk
    line plus trailer section; ``data`` is empty).
    """

    raw: bytes
    data: bytes
    flag: int


_SIZE, _DATA, _DATA_CRLF, _TRAILER, _DONE = range(5)


class ChunkedDecoder:
    def __init__(self, max_chunk_size: int = DEFAULT_MAX_CHUNK):
        self.max_chunk_size = max_chunk_size
        self.done = False
        self.unused = b""
        self.raw_consumed = 0
        self.total = 0
        # decoded size of the most recent complete chunk, 0 before any
        self.last_chunk_size = 0
        self._state = _SIZE
        self._size = 0
        self._remaining = 0
        self._pending = b""

    def _parse_size(self, line: bytes) -> int:
        semi = line.find(b";")
        digits = line if semi < 0 else line[:semi]
        if not digits or digits.strip(_HEXDIGITS) or len(digits) > 16:
            raise MalformedChunkSize(f"bad chunk size line {line[:40]!r}")
        size = int(digits, 16)
        if size > self.max_chunk_size:
            raise OversizeChunk(f"chunk of {size} bytes exceeds {self.max_chunk_size}")
        return size

    def feed(self, data: bytes) -> list[Segment]:
        if self.done:
            self.unused += data
            return []
        buf = self._pending + data if self._pending else data
        self._pending = b""
        n = len(buf)
        pos = seg_start = 0
        piece_start = piece_end = 0
        out: list[Segment] = []
        state = self._state
        while True:
            if state == _SIZE:
                i = buf.find(b"\r\n", pos)
                if i < 0:
                    if n - pos > MAX_SIZE_LINE:
                        raise MalformedChunkSize("chunk size line too long")
                    break
                size = self._parse_size(buf[pos:i])
                pos = i + 2
                if size == 0:
                    state = _TRAILER
                else:
                    self._size = self._remaining = size
                    state = _DATA
                    piece_start = piece_end = pos
            elif state == _DATA:
                if pos >= n:
                    break
                take = min(self._remaining, n - pos)
                piece_start, pos = pos, pos + take
                piece_end = pos
                self._remaining -= take
                if self._remaining == 0:
                    state = _DATA_CRLF
            elif state == _DATA_CRLF:
                if n - pos < 2:
                    break
                if buf[pos:pos + 2] != b"\r\n":
                    raise MalformedChunkSize("chunk data not followed by CRLF")
                pos += 2
                payload = buf[piece_start:piece_end]
                self.total += len(payload)
                self.last_chunk_size = self._size
                out.append(Segment(buf[seg_start:pos], payload, CHUNK_END))
                seg_start = piece_start = piece_end = pos
                state = _SIZE
            elif state == _TRAILER:
                i = buf.find(b"\r\n", pos)
                if i < 0:
                    if n - seg_start > MAX_TRAILER_SECTION:
                        raise MalformedChunkSize("trailer section too large")
                    # re-read from the last-chunk line once more bytes arrive
                    pos = seg_start
                    state = _SIZE
                    break
                line = buf[pos:i]
                pos = i + 2
                if not line:
                    out.append(Segment(buf[seg_start:pos], b"", TERMINAL))
                    seg_start = pos
                    state = _DONE
                    self.done = True
                    self.unused = buf[pos:]
                    n = pos
                    break
            else:  # pragma: no cover - loop exits on _DONE
                break

        if seg_start < pos:
            payload = buf[piece_start:piece_end]
            self.total += len(payload)
            out.append(Segment(buf[seg_start:pos], payload, PARTIAL))
        self._pending = buf[pos:n]
        self._state = state
        for seg in out:
            self.raw_consumed += len(seg.raw)
        return out

    def eof(self) -> None:
        """Signal end of input; raises if the body is incomplete."""
        if self.done:
            return
        if self._state == _SIZE and not self._pending:
            raise MissingTerminalChunk("stream ended before the terminal chunk")
        raise TruncatedBody("stream ended inside a chunk")


class FixedBody:
    """Counterpart of :class:`ChunkedDecoder` for Content-Length framing."""

    def __init__(self, length: int):
        self.length = length
        self.remaining = length
        self.done = length == 0
        self.unused = b""
        self.total = 0

    def feed(self, data: bytes) -> bytes:
        if self.done:
            self.unused += data
            return b""
        take = data[: self.remaining]
        self.remaining -= len(take)
        self.total += len(take)
        if self.remaining == 0:
            self.done = True
            self.unused = data[len(take):]
        return take

    def eof(self) -> None:
        if not self.done:
            raise TruncatedBody(f"{self.remaining} of {self.length} body bytes missing")


class LengthStripper:
    """Withholds the latest small chunk until it is known not to be the record.

    Chunks larger than any valid record are released as soon as they exceed
    the record size, so streaming is preserved for real data.
    """

    def __init__(self) -> None:
        self.record: Optional[LengthChunkRecord] = None
        self._held: Optional[list[Segment]] = None
        self._current: list[Segment] = []
        self._current_len = 0
        self._current_small = True

    def push(self, seg: Segment) -> list[Segment]:
        """Return segments safe to release; the terminal segment is never returned."""
        if seg.flag == TERMINAL:
            if self._held is None:
                raise MissingLengthChunk("no length chunk before the terminal chunk")
            self.record = LengthChunkRecord.parse(b"".join(s.data for s in self._held))
            self._held = None
            return []
        out: list[Segment] = []
        if not self._current and self._held is not None:
            out.extend(self._held)
            self._held = None
        if self._current_small:
            self._current.append(seg)
            self._current_len += len(seg.data)
            if self._current_len > MAX_RECORD_PAYLOAD:
                out.extend(self._current)
                self._current = []
                self._current_small = False
        else:
            out.append(seg)
        if seg.flag == CHUNK_END:
            if self._current_small:
                self._held = self._current
            self._current = []
            self._current_len = 0
            self._current_small = True
        return out


# -- iterator-level operations ------------------------------------------------

Source = Union[bytes, bytearray, BinaryIO, Iterable[bytes]]


def _iter_source(source: Source, window: int = READ_WINDOW) -> Iterator[bytes]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
        for i in range(0, len(data), window):
            yield data[i:i + window]
        return
    read = getattr(source, "read", None)
    if read is not None:
        while True:
            piece = read(window)
            if not piece:
                return
            yield piece
    else:
        for piece in source:
            if piece:
                yield piece


def read_body(
    framing: FramingDecision, source: Source, counter: Optional[StreamCounter] = None
) -> Iterator[BodyEvent]:
    """Decode a body from ``source`` and yield its data followed by :data:`END`.

    ``counter`` accumulates decoded bytes only; chunk framing is not counted.
    Bytes past the end of the body are left unread in the source iterator.
    """
    counter = counter if counter is not None else StreamCounter()
    if isinstance(framing, NoBody):
        yield END
        return
    if isinstance(framing, ContentLength):
        body = FixedBody(framing.length)
        if not body.done:
            for piece in _iter_source(source):
                taken = body.feed(piece)
                if taken:
                    counter.add(len(taken))
                    yield Data(taken)
                if body.done:
                    break
        body.eof()
        yield END
        return
    if not isinstance(framing, Chunked):
        raise TypeError(f"unknown framing {framing!r}")
    decoder = ChunkedDecoder()
    for piece in _iter_source(source):
        for seg in decoder.feed(piece):
            if seg.data:
                counter.add(len(seg.data))
                yield Data(seg.data)
        if decoder.done:
            break
    decoder.eof()
    yield END


def inject_length_chunk(
    events: Iterable[BodyEvent], counter: Optional[StreamCounter] = None
) -> Iterator[bytes]:
    """Re-emit body data as chunks, adding the length chunk before the terminal one.

    Output is produced as each event arrives. When ``counter`` is given it must
    be the counter that is fed while ``events`` is consumed (as with
    :func:`read_body`); otherwise the data is counted here.
    """
    own = counter is None
    counter = StreamCounter() if own else counter
    for event in events:
        if isinstance(event, Data):
            if not event.data:
                continue
            if own:
                counter.add(len(event.data))
            yield encode_chunk(event.data)
        else:
            yield length_chunk(counter.running_total)
            yield TERMINAL_CHUNK
            return


class StrippedBody:
    """Iterable of body events with the embedded length record removed.

    :attr:`record` and :attr:`counter` are populated once iteration finishes.
    """

    def __init__(self, source: Source):
        self._source = source
        self.record: Optional[LengthChunkRecord] = None
        self.counter = StreamCounter()

    def __iter__(self) -> Iterator[BodyEvent]:
        decoder = ChunkedDecoder()
        stripper = LengthStripper()
        for piece in _iter_source(self._source):
            for seg in decoder.feed(piece):
                for released in stripper.push(seg):
                    if released.data:
                        self.counter.add(len(released.data))
                        yield Data(released.data)
            if decoder.done:
                break
        decoder.eof()
        self.record = stripper.record
        yield END


def strip_length_chunk(source: Source) -> StrippedBody:
    return StrippedBody(source)


def verify_stream_length(record: LengthChunkRecord, counter: StreamCounter) -> ValidationOutcome:
    if record.declared_length == counter.running_total:
        return VALID
    return ValidationOutcome.invalid("length", record.declared_length, counter.running_total)


def buffer_body(events: Iterable[BodyEvent], cap: int = DEFAULT_BUFFER_CAP) -> bytes:
    out = io.BytesIO()
    size = 0
    for event in events:
        if isinstance(event, Data):
            size += len(event.data)
            if size > cap:
                raise BufferLimitExceeded(f"body exceeds {cap} bytes")
            out.write(event.data)
    return out.getvalue()
