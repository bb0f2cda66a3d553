"""The frozen payload corpus shipped with the harness."""

from __future__ import annotations

from importlib import resources


def corpus_names() -> list[str]:
    root = resources.files("httpsync.harness") / "corpus"
    return sorted(p.name[: -len(".http")] for p in root.iterdir() if p.name.endswith(".http"))


def load_fixture(name: str) -> bytes:
    path = resources.files("httpsync.harness") / "corpus" / f"{name}.http"
    if not path.is_file():
        raise KeyError(f"no corpus fixture named {name!r}")
    return path.read_bytes()


def load_corpus() -> dict[str, bytes]:
    return {name: load_fixture(name) for name in corpus_names()}


def scenario_path(name: str):
    """Path of a bundled scenario file, e.g. ``case-study-1``."""
    return resources.files("httpsync.harness") / "scenarios" / f"{name}.json"
