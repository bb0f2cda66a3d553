"""Declarative scenarios: a chain, payloads and the outcome expected for each.

A scenario file is a JSON object::

    {
      "name": "case-study-1",
      "chain": [{"personality": "raw-path-cache"}, {"personality": "decoding-framework-origin"}],
      "payloads": [{"name": "wcd", "fixture": "wcd-path-info"}],
      "expectations": {"wcd": {"blocked_at_hop": "origin", "cause": "path-mismatch"}},
      "baseline_expectations": {"wcd": {"status": 200, "echo": {"path": "/account.php"}}}
    }

Payloads come from a corpus ``fixture``, inline ``raw_b64`` bytes, or a
``generator`` (``{"size_bytes": N, "chunking": "none" | {"chunks": K}}``).
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from httpsync.harness.chain import (
    Chain,
    HarnessError,
    HopSpec,
    InProcessChain,
    LogLine,
    ProcessChain,
    send_payload,
)
from httpsync.harness.corpus import load_fixture
from httpsync.sync import DecodeError, SyncKey, decode_sync


class ScenarioError(HarnessError):
    """A scenario document does not match the schema; ``location`` points at the bad part."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


def make_body(size: int, chunks: Optional[int]) -> tuple[bytes, bytes]:
    """Return (framing header line, body bytes) for a generated body."""
    data = (b"abcdefghijklmnopqrstuvwxyz" * (size // 26 + 1))[:size]
    if chunks is None:
        return b"Content-Length: %d\r\n" % size, data
    if size == 0:
        return b"Transfer-Encoding: chunked\r\n", b"0\r\n\r\n"
    chunks = max(1, min(chunks, size))
    step, extra = divmod(size, chunks)
    out = []
    pos = 0
    for i in range(chunks):
        n = step + (1 if i < extra else 0)
        out.append(b"%x\r\n%s\r\n" % (n, data[pos:pos + n]))
        pos += n
    out.append(b"0\r\n\r\n")
    return b"Transfer-Encoding: chunked\r\n", b"".join(out)


def generate_request(size: int, chunks: Optional[int], method: str = "POST", path: str = "/upload", host: str = "www.example.com") -> bytes:
    framing, body = make_body(size, chunks)
    head = b"%s %s HTTP/1.1\r\nHost: %s\r\n%s\r\n" % (
        method.encode(), path.encode(), host.encode(), framing
    )
    return head + body


def _payload_bytes(entry: dict, where: str) -> bytes:
    sources = [k for k in ("fixture", "raw_b64", "generator") if k in entry]
    if len(sources) != 1:
        raise ScenarioError(where, "exactly one of fixture, raw_b64, generator is required")
    kind = sources[0]
    if kind == "fixture":
        try:
            return load_fixture(entry["fixture"])
        except KeyError as exc:
            raise ScenarioError(f"{where}.fixture", str(exc)) from None
    if kind == "raw_b64":
        try:
            return base64.b64decode(entry["raw_b64"], validate=True)
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"{where}.raw_b64", f"invalid base64: {exc}") from None
    gen = entry["generator"]
    if not isinstance(gen, dict) or not isinstance(gen.get("size_bytes"), int) or gen["size_bytes"] < 0:
        raise ScenarioError(f"{where}.generator", "size_bytes must be a non-negative integer")
    chunking = gen.get("chunking", "none")
    if chunking == "none":
        chunks = None
    elif isinstance(chunking, dict) and isinstance(chunking.get("chunks"), int) and chunking["chunks"] > 0:
        chunks = chunking["chunks"]
    else:
        raise ScenarioError(f"{where}.generator.chunking", 'must be "none" or {"chunks": K}')
    return generate_request(
        gen["size_bytes"], chunks, gen.get("method", "POST"), gen.get("path", "/upload"), gen.get("host", "www.example.com")
    )


_EXPECT_KEYS = {"status", "echo", "origin_requests", "honored", "blocked_at_hop", "cause", "expected", "observed"}


def _check_expectation(exp: Any, where: str, chain_len: int) -> dict:
    if not isinstance(exp, dict):
        raise ScenarioError(where, "expectation must be an object")
    unknown = set(exp) - _EXPECT_KEYS
    if unknown:
        raise ScenarioError(where, f"unknown keys {sorted(unknown)}")
    blocked = "blocked_at_hop" in exp
    if blocked == ("status" in exp):
        raise ScenarioError(where, "give exactly one of status or blocked_at_hop")
    if blocked:
        hop = exp["blocked_at_hop"]
        if hop == "origin":
            hop = chain_len
        if not isinstance(hop, int) or not 1 <= hop <= chain_len:
            raise ScenarioError(f"{where}.blocked_at_hop", f"must be 1..{chain_len} or \"origin\"")
        exp = dict(exp, blocked_at_hop=hop)
    return exp


@dataclass
class Payload:
    name: str
    data: bytes


@dataclass
class ScenarioConfig:
    name: str
    chain: list[HopSpec]
    payloads: list[Payload]
    expectations: dict[str, dict]
    baseline_expectations: dict[str, dict] = field(default_factory=dict)
    description: str = ""

    @classmethod
    def from_dict(cls, doc: Any) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ScenarioError("$", "scenario must be a JSON object")
        for key in ("chain", "payloads", "expectations"):
            if key not in doc:
                raise ScenarioError("$", f"missing key {key!r}")
        unknown = set(doc) - {"name", "description", "chain", "payloads", "expectations", "baseline_expectations"}
        if unknown:
            raise ScenarioError("$", f"unknown keys {sorted(unknown)}")
        if not isinstance(doc["chain"], list) or len(doc["chain"]) < 2:
            raise ScenarioError("$.chain", "must list at least two hops")
        chain = []
        for i, hop in enumerate(doc["chain"]):
            if not isinstance(hop, dict):
                raise ScenarioError(f"$.chain[{i}]", "hop must be an object")
            try:
                chain.append(HopSpec.from_dict(hop))
            except (ValueError, KeyError, TypeError) as exc:
                raise ScenarioError(f"$.chain[{i}]", str(exc)) from None
        if not isinstance(doc["payloads"], list) or not doc["payloads"]:
            raise ScenarioError("$.payloads", "must be a non-empty list")
        payloads = []
        for i, entry in enumerate(doc["payloads"]):
            where = f"$.payloads[{i}]"
            if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
                raise ScenarioError(where, "payload needs a string name")
            payloads.append(Payload(entry["name"], _payload_bytes(entry, where)))
        names = [p.name for p in payloads]
        if len(set(names)) != len(names):
            raise ScenarioError("$.payloads", "payload names must be unique")
        exps = doc["expectations"]
        if not isinstance(exps, dict) or set(exps) != set(names):
            raise ScenarioError("$.expectations", "every payload needs exactly one expectation")
        expectations = {n: _check_expectation(exps[n], f"$.expectations.{n}", len(chain)) for n in names}
        base = doc.get("baseline_expectations", {})
        if not isinstance(base, dict) or set(base) - set(names):
            raise ScenarioError("$.baseline_expectations", "keys must name payloads")
        baseline = {n: _check_expectation(e, f"$.baseline_expectations.{n}", len(chain)) for n, e in base.items()}
        return cls(
            name=doc.get("name", "scenario"),
            chain=chain,
            payloads=payloads,
            expectations=expectations,
            baseline_expectations=baseline,
            description=doc.get("description", ""),
        )

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "ScenarioConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"$ (line {exc.lineno}, column {exc.colno})", exc.msg) from None
        return cls.from_dict(doc)

    def undefended(self) -> "ScenarioConfig":
        """Same topology with every hop oblivious."""
        chain = [HopSpec(**{**h.to_dict(), "sync": False}) for h in self.chain]
        return ScenarioConfig(self.name + "-baseline", chain, self.payloads, self.baseline_expectations, {}, self.description)


# -- observation --------------------------------------------------------------


def observe(lines: list[LogLine], result) -> dict:
    """Summarize one payload run from the client result and hop logs."""
    outcome: dict[str, Any] = {
        "status": result.status,
        "echo": result.echo() if result.responded else None,
        "terminate": None,
        "origin_requests": [],
        "honored": {},
        "snapshots": [],
    }
    for line in lines:
        tag = line.tag
        if tag not in ("TERMINATE", "ORIGIN", "HONORED", "SNAPSHOT"):
            continue
        f = line.fields()
        if tag == "TERMINATE" and outcome["terminate"] is None:
            outcome["terminate"] = {k: f.get(k) for k in ("cause", "field", "expected", "observed")}
            outcome["terminate"]["hop"] = int(f["hop"])
        elif tag == "ORIGIN":
            outcome["origin_requests"].append({k: f.get(k) for k in ("method", "path", "host", "length")})
        elif tag == "HONORED":
            outcome["honored"].setdefault(f["hop"], {k: f.get(k) for k in ("path", "host", "framing")})
        elif tag == "SNAPSHOT":
            snap: dict[str, Any] = {"hop": int(f["hop"]), "direction": f["direction"], "sync": f["sync"], "hmac": f["hmac"]}
            if f["sync"] != "-":
                try:
                    h = decode_sync(f["sync"].encode("latin-1"))
                    snap["decoded"] = {
                        "path": [v.decode("utf-8") for v in h.path_values],
                        "host": [v.decode("utf-8") for v in h.host_values],
                        "length": "stream" if h.last_length.is_stream else h.last_length.value,
                    }
                except DecodeError as exc:
                    snap["decode_error"] = exc.kind
            outcome["snapshots"].append(snap)
    if result.responded:
        outcome["result"] = "passed" if result.status == 200 else "responded"
    elif result.timed_out:
        outcome["result"] = "timeout"
    else:
        outcome["result"] = "blocked"
    return outcome


def compare(expectation: dict, outcome: dict) -> list[str]:
    """Return human-readable mismatches; empty means the expectation holds."""
    problems = []
    if "status" in expectation:
        if outcome["status"] != expectation["status"]:
            problems.append(f"status {outcome['status']} != {expectation['status']}")
        for key, want in expectation.get("echo", {}).items():
            got = (outcome["echo"] or {}).get(key)
            if got != str(want):
                problems.append(f"echo {key} {got!r} != {want!r}")
    else:
        term = outcome["terminate"]
        if outcome["status"] is not None:
            problems.append(f"expected a block but got status {outcome['status']}")
        if term is None:
            problems.append("no hop terminated")
        else:
            if term["hop"] != expectation["blocked_at_hop"]:
                problems.append(f"blocked at hop {term['hop']} != {expectation['blocked_at_hop']}")
            for key in ("cause", "expected", "observed"):
                if key in expectation and term[key] != str(expectation[key]):
                    problems.append(f"{key} {term[key]!r} != {expectation[key]!r}")
    if "origin_requests" in expectation:
        got = [r["path"] for r in outcome["origin_requests"]]
        if got != expectation["origin_requests"]:
            problems.append(f"origin saw {got} != {expectation['origin_requests']}")
    for hop, want in expectation.get("honored", {}).items():
        got = outcome["honored"].get(str(hop), {})
        for key, value in want.items():
            if got.get(key) != value:
                problems.append(f"hop {hop} honored {key} {got.get(key)!r} != {value!r}")
    return problems


@dataclass
class PayloadReport:
    name: str
    expectation: dict
    outcome: dict
    problems: list[str]

    @property
    def passed(self) -> bool:
        return not self.problems

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "expectation": self.expectation,
            "outcome": self.outcome,
            "problems": self.problems,
        }


@dataclass
class ScenarioReport:
    name: str
    payloads: list[PayloadReport]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.payloads)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "payloads": [p.to_dict() for p in self.payloads]}

    def summary(self) -> str:
        rows = [f"scenario {self.name}: {'PASS' if self.passed else 'FAIL'}"]
        for p in self.payloads:
            o = p.outcome
            if o["terminate"]:
                t = o["terminate"]
                seen = f"blocked hop={t['hop']} cause={t['cause']} expected={t['expected']} observed={t['observed']}"
            else:
                seen = f"{o['result']} status={o['status']}"
            rows.append(f"  {'ok  ' if p.passed else 'FAIL'} {p.name:<28} {seen}")
            rows.extend(f"       - {problem}" for problem in p.problems)
        return "\n".join(rows)


def _run(cfg: ScenarioConfig, expectations: dict[str, dict], launcher: str, key_file: Optional[str], timeout: float) -> ScenarioReport:
    with tempfile.TemporaryDirectory(prefix="httpsync-scenario-") as tmp:
        if key_file is None:
            key = SyncKey.generate()
            key_file = os.path.join(tmp, "sync.key")
            with open(os.open(key_file, os.O_WRONLY | os.O_CREAT, 0o600), "w") as fh:
                fh.write(key.to_hex())
        else:
            key = SyncKey.load(key_file)
        chain: Chain
        if launcher == "process":
            chain = ProcessChain(cfg.chain, key_file, read_timeout=timeout)
        elif launcher == "inprocess":
            chain = InProcessChain(cfg.chain, key, read_timeout=timeout)
        else:
            raise ValueError(f"unknown launcher {launcher!r}")
        reports = []
        with chain:
            for payload in cfg.payloads:
                mark = chain.log.mark()
                result = send_payload(chain.entry, payload.data, timeout=timeout + 2)
                chain.settle()
                outcome = observe(chain.log.since(mark), result)
                exp = expectations.get(payload.name)
                problems = compare(exp, outcome) if exp is not None else []
                reports.append(PayloadReport(payload.name, exp or {}, outcome, problems))
        return ScenarioReport(cfg.name, reports)


def run_scenario(cfg: ScenarioConfig, launcher: str = "process", key_file: Optional[str] = None, timeout: float = 5.0) -> ScenarioReport:
    return _run(cfg, cfg.expectations, launcher, key_file, timeout)


def run_attack_baseline(cfg: ScenarioConfig, launcher: str = "process", timeout: float = 5.0) -> ScenarioReport:
    """Run the same payloads with every hop oblivious, checked against the baseline expectations."""
    base = cfg.undefended()
    return _run(base, cfg.baseline_expectations, launcher, None, timeout)
