"""Launching chains of hops and talking to them as a client.

:class:`ProcessChain` runs every hop as its own ``python -m httpsync``
process on loopback. :class:`InProcessChain` runs the same servers on an
event loop in a background thread; it is used where hundreds of short-lived
chains are needed.
"""

from __future__ import annotations

import asyncio
import json
import os
import queue
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from httpsync.node import NodeConfig, OnInvalid, ProxyNode, TransferMode, parse_record
from httpsync.presets import build_personality
from httpsync.sync import SyncKey, TransitionRule, ValidationPolicy

STARTUP_TIMEOUT = 20.0


class HarnessError(Exception):
    pass


class NodeStartupFailed(HarnessError):
    pass


class PortConflict(HarnessError):
    pass


class Timeout(HarnessError):
    pass


@dataclass
class HopSpec:
    """Declarative description of one hop."""

    name: str = ""
    personality: str = "raw-path-cache"
    overrides: dict[str, str] = field(default_factory=dict)
    sync: bool = True
    mode: str = "streaming"
    on_invalid: str = "close"
    policy: Optional[list[dict]] = None

    @classmethod
    def from_dict(cls, data: dict) -> "HopSpec":
        known = {"name", "personality", "overrides", "sync", "mode", "on_invalid", "policy"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)}")
        spec = cls(**data)
        build_personality(spec.personality, spec.overrides)
        TransferMode(spec.mode)
        OnInvalid(spec.on_invalid)
        if spec.policy is not None:
            [TransitionRule.from_dict(r) for r in spec.policy]
        return spec

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "personality": self.personality,
            "overrides": dict(self.overrides),
            "sync": self.sync,
            "mode": self.mode,
            "on_invalid": self.on_invalid,
            "policy": self.policy,
        }

    def validation_policy(self) -> ValidationPolicy:
        if self.policy is None:
            return ValidationPolicy()
        return ValidationPolicy.with_rules([TransitionRule.from_dict(r) for r in self.policy])


@dataclass
class LogLine:
    at: float
    hop: int
    text: str

    @property
    def tag(self) -> str:
        return self.text.split(" ", 1)[0]

    def fields(self) -> dict[str, str]:
        return parse_record(self.text)[1]


class _LogBook:
    def __init__(self) -> None:
        self._lines: list[LogLine] = []
        self._lock = threading.Lock()
        self.last_at = 0.0

    def add(self, hop: int, text: str) -> None:
        now = time.monotonic()
        with self._lock:
            self._lines.append(LogLine(now, hop, text))
            self.last_at = now

    def mark(self) -> int:
        with self._lock:
            return len(self._lines)

    def since(self, mark: int) -> list[LogLine]:
        with self._lock:
            return list(self._lines[mark:])


class Chain:
    """Common interface of both launchers."""

    entry: tuple[str, int]
    log: _LogBook

    def settle(self, quiet: float = 0.0, limit: float = 0.0) -> None:
        pass

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _addr(a: tuple[str, int]) -> str:
    return f"{a[0]}:{a[1]}"


class ProcessChain(Chain):
    """One OS process per hop; the origin is started first."""

    def __init__(
        self,
        hops: list[HopSpec],
        key_file: Union[str, os.PathLike],
        verbose: bool = True,
        read_timeout: float = 10.0,
        python: str = sys.executable,
    ):
        if len(hops) < 2:
            raise ValueError("a chain needs at least two hops")
        self.log = _LogBook()
        self._procs: list[subprocess.Popen] = []
        self._tmp = tempfile.TemporaryDirectory(prefix="httpsync-chain-")
        self.addresses: list[tuple[str, int]] = [None] * len(hops)  # type: ignore[list-item]
        try:
            upstream: Optional[tuple[str, int]] = None
            for index in range(len(hops) - 1, -1, -1):
                hop = hops[index]
                cmd = [python, "-m", "httpsync", "run-origin" if upstream is None else "run-node"]
                cmd += ["--listen", "127.0.0.1:0", "--hop", str(index + 1)]
                cmd += ["--personality", hop.personality]
                if upstream is not None:
                    cmd += ["--mode", hop.mode]
                cmd += ["--on-invalid", hop.on_invalid, "--read-timeout", str(read_timeout)]
                for knob, value in hop.overrides.items():
                    cmd += ["--set", f"{knob}={value}"]
                if upstream is not None:
                    cmd += ["--upstream", _addr(upstream)]
                if hop.sync:
                    cmd += ["--key-file", str(key_file)]
                else:
                    cmd += ["--oblivious"]
                if hop.policy is not None:
                    policy_file = Path(self._tmp.name) / f"policy-{index + 1}.json"
                    policy_file.write_text(json.dumps(hop.policy))
                    cmd += ["--policy-file", str(policy_file)]
                if verbose:
                    cmd += ["--verbose"]
                upstream = self._spawn(cmd, index + 1)
                self.addresses[index] = upstream
        except BaseException:
            self.close()
            raise
        self.entry = self.addresses[0]

    def _spawn(self, cmd: list[str], hop: int) -> tuple[str, int]:
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        proc = subprocess.Popen(
            cmd,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            env=env,
            text=True,
            bufsize=1,
        )
        self._procs.append(proc)
        ready: "queue.Queue[str]" = queue.Queue()
        errors: list[str] = []

        def pump_out() -> None:
            for line in proc.stdout:
                line = line.rstrip("\n")
                if line.startswith("LISTEN "):
                    ready.put(line)
                self.log.add(hop, line)

        def pump_err() -> None:
            for line in proc.stderr:
                errors.append(line)

        threading.Thread(target=pump_out, daemon=True).start()
        threading.Thread(target=pump_err, daemon=True).start()
        try:
            line = ready.get(timeout=STARTUP_TIMEOUT)
        except queue.Empty:
            proc.kill()
            proc.wait()
            detail = "".join(errors[-20:])
            if "Address already in use" in detail:
                raise PortConflict(detail)
            raise NodeStartupFailed(f"hop {hop} did not start: {detail.strip() or 'no output'}")
        host, _, port = parse_record(line)[1]["addr"].rpartition(":")
        return host, int(port)

    def settle(self, quiet: float = 0.15, limit: float = 3.0) -> None:
        """Wait until no hop has logged anything for ``quiet`` seconds."""
        start = time.monotonic()
        while time.monotonic() - start < limit:
            if time.monotonic() - max(self.log.last_at, start) >= quiet:
                return
            time.sleep(quiet / 3)

    def close(self) -> None:
        for proc in self._procs:
            if proc.poll() is None:
                proc.terminate()
        for proc in self._procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self._procs = []
        self._tmp.cleanup()


class InProcessChain(Chain):
    """All hops on one background event loop in this process."""

    def __init__(self, hops: list[HopSpec], key: SyncKey, verbose: bool = True, read_timeout: float = 5.0, app_hook=None):
        if len(hops) < 2:
            raise ValueError("a chain needs at least two hops")
        self.log = _LogBook()
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)
        self._thread.start()
        self._nodes: list[ProxyNode] = []
        self.addresses: list[tuple[str, int]] = [None] * len(hops)  # type: ignore[list-item]
        try:
            upstream = None
            for index in range(len(hops) - 1, -1, -1):
                hop = hops[index]
                number = index + 1
                cfg = NodeConfig(
                    upstream=upstream,
                    personality=build_personality(hop.personality, hop.overrides),
                    policy=hop.validation_policy(),
                    key=key if hop.sync else None,
                    transfer_mode=TransferMode(hop.mode),
                    sync_enabled=hop.sync,
                    on_invalid=OnInvalid(hop.on_invalid),
                    hop=number,
                    read_timeout=read_timeout,
                    verbose=verbose,
                    app_hook=app_hook if upstream is None else None,
                    emit=lambda line, n=number: self.log.add(n, line),
                )
                node = ProxyNode(cfg)
                upstream = asyncio.run_coroutine_threadsafe(node.start(), self._loop).result(STARTUP_TIMEOUT)
                self._nodes.append(node)
                self.addresses[index] = upstream
        except BaseException:
            self.close()
            raise
        self.entry = self.addresses[0]

    def close(self) -> None:
        for node in self._nodes:
            asyncio.run_coroutine_threadsafe(node.close(), self._loop).result(STARTUP_TIMEOUT)
        self._nodes = []
        if self._loop.is_running():
            asyncio.run_coroutine_threadsafe(_cancel_connections(), self._loop).result(STARTUP_TIMEOUT)
        if self._loop.is_running():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=5)
        if not self._loop.is_running():
            self._loop.close()


async def _cancel_connections() -> None:
    tasks = [t for t in asyncio.all_tasks() if t is not asyncio.current_task()]
    for task in tasks:
        task.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)


# -- client -------------------------------------------------------------------


@dataclass
class ClientResult:
    status: Optional[int]
    headers: list[tuple[str, str]]
    body: bytes
    raw: bytes
    timed_out: bool = False

    @property
    def responded(self) -> bool:
        return self.status is not None

    def echo(self) -> dict[str, str]:
        """Parse the origin's ``label: value`` echo body."""
        out = {}
        for line in self.body.decode("latin-1").splitlines():
            key, sep, value = line.partition(": ")
            if sep:
                out[key] = value
        return out


def parse_response(raw: bytes) -> tuple[Optional[int], list[tuple[str, str]], bytes]:
    end = raw.find(b"\r\n\r\n")
    if not raw.startswith(b"HTTP/") or end < 0:
        return None, [], b""
    lines = raw[:end].decode("latin-1").split("\r\n")
    status = int(lines[0].split(" ")[1])
    headers = []
    for line in lines[1:]:
        name, _, value = line.partition(":")
        headers.append((name.strip(), value.strip()))
    body = raw[end + 4:]
    for name, value in headers:
        if name.lower() == "content-length":
            body = body[: int(value)]
    return status, headers, body


def send_payload(address: tuple[str, int], payload: bytes, timeout: float = 10.0) -> ClientResult:
    """Send ``payload`` on a fresh connection, half-close, read until EOF."""
    chunks = []
    timed_out = False
    with socket.create_connection(address, timeout=timeout) as sock:
        try:
            sock.sendall(payload)
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        try:
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                chunks.append(data)
        except socket.timeout:
            timed_out = True
        except OSError:
            pass
    raw = b"".join(chunks)
    status, headers, body = parse_response(raw)
    return ClientResult(status, headers, body, raw, timed_out)


class KeepAliveClient:
    """A persistent connection that sends one request and reads one response at a time."""

    def __init__(self, address: tuple[str, int], timeout: float = 30.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = b""

    def request(self, payload: bytes) -> bytes:
        self.sock.sendall(payload)
        return self._read_response()

    def _read_response(self) -> bytes:
        buf = self._buf
        while True:
            end = buf.find(b"\r\n\r\n")
            if end >= 0:
                break
            buf += self._recv()
        head = buf[: end + 4]
        length = 0
        for line in head.split(b"\r\n")[1:]:
            name, _, value = line.partition(b":")
            if name.strip().lower() == b"content-length":
                length = int(value)
        total = end + 4 + length
        while len(buf) < total:
            buf += self._recv()
        self._buf = buf[total:]
        return buf[:total]

    def _recv(self) -> bytes:
        data = self.sock.recv(1 << 20)
        if not data:
            raise HarnessError("connection closed while waiting for a response")
        return data

    def close(self) -> None:
        self.sock.close()
