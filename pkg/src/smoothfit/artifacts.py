"""Deterministic JSON artifacts with provenance.

Artifacts embed the sha256 of the canonical run config and the tool version.
Serialization is canonical (sorted keys, repr floats) so identical runs give
byte-identical files regardless of thread count.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__

__all__ = ["canonical_json", "config_hash", "provenance", "write_artifact", "read_artifact"]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def provenance(config: dict, seed: int | None = None) -> dict:
    out = {"config_sha256": config_hash(config), "tool_version": __version__}
    if seed is not None:
        out["seed"] = int(seed)
    return out


def write_artifact(path: Path, payload: dict, config: dict, seed: int | None = None) -> None:
    body = {"provenance": provenance(config, seed)}
    body.update(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(body) + "\n")


def read_artifact(path: Path) -> dict:
    return json.loads(Path(path).read_text())
