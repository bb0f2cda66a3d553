"""Brute-force check of chain verdicts against honored-tuple comparison.

For every ordered pair of personalities and every corpus payload the oracle
works out, without running any node code, which (path, host, framing,
length) tuple each hop of a two-hop chain would honor. Equal tuples predict
that the chain passes; anything else, including a parse failure at either
hop, predicts a block. The prediction is then compared with what a real
two-hop chain does on loopback.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from httpsync.harness.chain import HopSpec, InProcessChain, send_payload
from httpsync.presets import PRESETS
from httpsync.sync import SyncKey
from httpsync.wire import (
    Chunked,
    NoBody,
    ParseError,
    ParserPersonality,
    parse_request,
    serialize_head,
    split_head,
)

_CHUNK_LINE = re.compile(rb"([0-9A-Fa-f]{1,16})(;[^\r\n]*)?\r\n")


def dechunk_length(body: bytes) -> Optional[int]:
    """Decoded length of a complete chunked body, or None if malformed or incomplete."""
    pos = 0
    total = 0
    while True:
        m = _CHUNK_LINE.match(body, pos)
        if m is None:
            return None
        size = int(m.group(1), 16)
        pos = m.end()
        if size == 0:
            break
        if body[pos + size:pos + size + 2] != b"\r\n":
            return None
        total += size
        pos += size + 2
    # trailer section up to the empty line
    while True:
        end = body.find(b"\r\n", pos)
        if end < 0:
            return None
        if end == pos:
            return total
        pos = end + 2


@dataclass(frozen=True)
class Honored:
    path: bytes
    host: bytes
    framing: str  # "fixed" or "chunked"
    length: Optional[int]


@dataclass(frozen=True)
class Prediction:
    passes: bool
    first: Optional[Honored]
    second: Optional[Honored]
    note: str = ""


def predict(raw: bytes, p1: ParserPersonality, p2: ParserPersonality) -> Prediction:
    try:
        head, rest = split_head(raw)
        r1 = parse_request(head, p1)
    except ParseError as exc:
        return Prediction(False, None, None, f"hop 1 rejects: {exc.kind}")

    framing = r1.framing
    if isinstance(framing, Chunked):
        n = dechunk_length(rest)
        if n is None:
            return Prediction(False, None, None, "hop 1 cannot frame the chunked body")
        first = Honored(r1.honored_path, r1.honored_host, "chunked", n)
    else:
        n = framing.length
        if len(rest) < n:
            return Prediction(False, None, None, "body shorter than Content-Length")
        first = Honored(r1.honored_path, r1.honored_host, "fixed", n)

    # hop 1 forwards the headers it received, minus framing headers when it saw no body
    headers = r1.headers
    if isinstance(framing, NoBody):
        headers = r1.without_headers(b"Content-Length", b"Transfer-Encoding")
    forwarded = serialize_head(r1.method, r1.target, r1.version, headers)
    try:
        r2 = parse_request(forwarded, p2)
    except ParseError as exc:
        return Prediction(False, first, None, f"hop 2 rejects: {exc.kind}")
    if isinstance(r2.framing, Chunked):
        # the same chunk stream reaches hop 2 only if hop 1 also framed it as chunked
        second = Honored(r2.honored_path, r2.honored_host, "chunked", first.length if first.framing == "chunked" else None)
    else:
        second = Honored(r2.honored_path, r2.honored_host, "fixed", r2.framing.length)
    return Prediction(first == second, first, second)


@dataclass
class OracleCase:
    first: str
    second: str
    payload: str
    predicted_pass: bool
    observed_pass: bool
    observed: str
    note: str = ""

    @property
    def agrees(self) -> bool:
        return self.predicted_pass == self.observed_pass


@dataclass
class OracleReport:
    cases: list[OracleCase] = field(default_factory=list)

    @property
    def mismatches(self) -> list[OracleCase]:
        return [c for c in self.cases if not c.agrees]

    @property
    def agreement(self) -> float:
        return 1.0 - len(self.mismatches) / len(self.cases) if self.cases else 1.0

    def to_dict(self) -> dict:
        return {
            "cases": len(self.cases),
            "mismatches": [c.__dict__ for c in self.mismatches],
            "predicted_blocks": sum(not c.predicted_pass for c in self.cases),
            "agreement": self.agreement,
        }


class OracleMismatch(AssertionError):
    pass


def run_discrepancy_oracle(
    personalities: Optional[dict[str, ParserPersonality]] = None,
    corpus: Optional[dict[str, bytes]] = None,
    timeout: float = 3.0,
) -> OracleReport:
    """Run every ordered pair of named presets over the corpus."""
    from httpsync.harness.corpus import load_corpus

    names = sorted(personalities or PRESETS)
    lookup = personalities or PRESETS
    corpus = corpus if corpus is not None else load_corpus()
    key = SyncKey.generate()
    report = OracleReport()
    for a in names:
        for b in names:
            hops = [HopSpec(name=a, personality=a), HopSpec(name=b, personality=b)]
            if personalities is not None:
                hops = [_spec_for(a, lookup[a]), _spec_for(b, lookup[b])]
            with InProcessChain(hops, key, verbose=False, read_timeout=timeout) as chain:
                for payload_name, raw in corpus.items():
                    prediction = predict(raw, lookup[a], lookup[b])
                    mark = chain.log.mark()
                    result = send_payload(chain.entry, raw, timeout=timeout + 2)
                    observed_pass = result.status == 200
                    if observed_pass:
                        observed = "200"
                    else:
                        terms = [ln for ln in chain.log.since(mark) if ln.tag == "TERMINATE"]
                        observed = terms[0].text if terms else f"no response (timed out={result.timed_out})"
                    report.cases.append(
                        OracleCase(a, b, payload_name, prediction.passes, observed_pass, observed, prediction.note)
                    )
    return report


def _spec_for(name: str, p: ParserPersonality) -> HopSpec:
    # personalities outside the preset table are expressed as overrides of the base
    return HopSpec(name=name, personality="raw-path-cache", overrides=p.to_dict())
