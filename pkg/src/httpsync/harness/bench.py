"""Round-trip latency of a proxy plus origin, with and without synchronization.

Both variants run side by side as separate processes. Each iteration sends
the same request over a warm keep-alive connection to each variant, with the
order alternating between iterations so drift affects both equally.
"""

from __future__ import annotations

import gc
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Union

from httpsync.harness.chain import HopSpec, KeepAliveClient, ProcessChain
from httpsync.harness.scenario import generate_request
from httpsync.sync import SyncKey

SYNC_ENABLED = "sync-enabled"
SYNC_DISABLED = "sync-disabled"


@dataclass(frozen=True)
class BenchCell:
    framing: str  # "NA" (no body headers), "CL" or "TE"
    size: int
    chunks: Optional[int] = None

    def __post_init__(self):
        if self.framing not in ("NA", "CL", "TE"):
            raise ValueError(f"framing must be NA, CL or TE, not {self.framing!r}")
        if (self.framing == "TE") != (self.chunks is not None):
            raise ValueError("chunks is required for TE cells and not allowed otherwise")
        if self.framing == "NA" and self.size:
            raise ValueError("NA cells carry no body")
        if self.chunks is not None and not 1 <= self.chunks <= max(self.size, 1):
            raise ValueError("chunk count must be between 1 and the body size")

    @property
    def label(self) -> str:
        if self.chunks is None:
            return f"{self.framing} {self.size}B"
        return f"TE {self.size}B/{self.chunks}"

    def request(self) -> bytes:
        if self.framing == "NA":
            return b"POST /upload HTTP/1.1\r\nHost: www.example.com\r\n\r\n"
        return generate_request(self.size, self.chunks)


@dataclass
class BenchResult:
    framing: str
    chunks: Optional[int]
    size: int
    variant: str
    mean_ms: float
    iterations: int
    overhead_pct: Optional[float] = None


@dataclass
class BenchGrid:
    cells: list[BenchCell]
    iterations: int = 1000
    warmup: int = 50

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchGrid":
        cells = [BenchCell(c["framing"], int(c["size"]), c.get("chunks")) for c in doc["cells"]]
        return cls(cells, int(doc.get("iterations", 1000)), int(doc.get("warmup", 50)))

    @classmethod
    def load(cls, path: Union[str, os.PathLike, None] = None) -> "BenchGrid":
        if path is None:
            text = (resources.files("httpsync.harness") / "grids" / "overhead.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))


def _chain(sync: bool) -> list[HopSpec]:
    return [HopSpec(name="proxy", sync=sync), HopSpec(name="origin", sync=sync)]


def _expect_ok(response: bytes) -> None:
    if not response.startswith(b"HTTP/1.1 200"):
        raise RuntimeError(f"unexpected response {response[:60]!r}")


def run_bench(
    grid: BenchGrid,
    progress: Optional[Callable[[str], None]] = None,
) -> list[BenchResult]:
    """Measure every cell against both variants; returns two results per cell."""
    results: list[BenchResult] = []
    with tempfile.TemporaryDirectory(prefix="httpsync-bench-") as tmp:
        key_file = os.path.join(tmp, "sync.key")
        with open(os.open(key_file, os.O_WRONLY | os.O_CREAT, 0o600), "w") as fh:
            fh.write(SyncKey.generate().to_hex())
        with ProcessChain(_chain(True), key_file, verbose=False, read_timeout=60) as on, ProcessChain(
            _chain(False), key_file, verbose=False, read_timeout=60
        ) as off:
            clients = {SYNC_ENABLED: KeepAliveClient(on.entry), SYNC_DISABLED: KeepAliveClient(off.entry)}
            try:
                for cell in grid.cells:
                    payload = cell.request()
                    for _ in range(grid.warmup):
                        for client in clients.values():
                            _expect_ok(client.request(payload))
                    totals = {SYNC_ENABLED: 0, SYNC_DISABLED: 0}
                    order = [SYNC_ENABLED, SYNC_DISABLED]
                    gc_was_enabled = gc.isenabled()
                    gc.disable()
                    try:
                        for i in range(grid.iterations):
                            for variant in order if i % 2 == 0 else order[::-1]:
                                client = clients[variant]
                                start = time.perf_counter_ns()
                                response = client.request(payload)
                                totals[variant] += time.perf_counter_ns() - start
                                _expect_ok(response)
                    finally:
                        if gc_was_enabled:
                            gc.enable()
                    base = totals[SYNC_DISABLED] / grid.iterations / 1e6
                    synced = totals[SYNC_ENABLED] / grid.iterations / 1e6
                    overhead = (synced - base) / base * 100.0
                    results.append(BenchResult(cell.framing, cell.chunks, cell.size, SYNC_DISABLED, base, grid.iterations))
                    results.append(
                        BenchResult(cell.framing, cell.chunks, cell.size, SYNC_ENABLED, synced, grid.iterations, overhead)
                    )
                    if progress is not None:
                        progress(f"{cell.label:<22} disabled {base:9.3f} ms  enabled {synced:9.3f} ms  {overhead:+7.2f}%")
            finally:
                for client in clients.values():
                    client.close()
    return results


def overhead_by_cell(results: list[BenchResult]) -> dict[tuple[str, int, Optional[int]], float]:
    return {(r.framing, r.size, r.chunks): r.overhead_pct for r in results if r.variant == SYNC_ENABLED}


def format_table(results: list[BenchResult]) -> str:
    rows = [f"{'framing':<8}{'size':>12}{'chunks':>8}{'disabled ms':>14}{'enabled ms':>14}{'overhead':>10}"]
    by_cell: dict[tuple, dict[str, BenchResult]] = {}
    for r in results:
        by_cell.setdefault((r.framing, r.size, r.chunks), {})[r.variant] = r
    for (framing, size, chunks), pair in by_cell.items():
        off, on = pair[SYNC_DISABLED], pair[SYNC_ENABLED]
        rows.append(
            f"{framing:<8}{size:>12}{chunks if chunks is not None else '-':>8}"
            f"{off.mean_ms:>14.3f}{on.mean_ms:>14.3f}{on.overhead_pct:>9.2f}%"
        )
    return "\n".join(rows)


def results_to_json(results: list[BenchResult]) -> list[dict]:
    return [asdict(r) for r in results]
