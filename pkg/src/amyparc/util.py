"""Shared helpers: seed mixing, canonical JSON, config hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, is_dataclass

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(*parts: int) -> int:
    """Fold integers into a single 64-bit seed (splitmix64 finalizer per part).

    Used to derive independent sub-seeds, e.g. per subject or per epoch,
    from one run seed without correlated streams.
    """
    acc = 0
    for p in parts:
        acc = (acc + (int(p) & _MASK64) + _GAMMA) & _MASK64
        z = acc
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc = z ^ (z >> 31)
    return acc


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace. Dataclasses allowed."""
    if is_dataclass(obj) and not isinstance(obj, type):
        obj = asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Short stable content hash of a config object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def dump_json(path, obj) -> None:
    """Write JSON with sorted keys so reruns are byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
