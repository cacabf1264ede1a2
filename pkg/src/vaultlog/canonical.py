"""Canonical text form used by share, policy, plan, config and event files.

JSON with lexicographically sorted keys, no insignificant whitespace, and a
single trailing newline. Integers that may exceed 64 bits are written as
decimal strings by the callers.
"""

import hashlib
import json
from typing import Any


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True) + "\n"


def dump_bytes(obj: Any) -> bytes:
    return dumps(obj).encode("ascii")


def loads(text: str | bytes) -> Any:
    return json.loads(text)


def digest(obj: Any) -> str:
    """Hex SHA-256 over the canonical serialization of ``obj``."""
    return hashlib.sha256(dump_bytes(obj)).hexdigest()


def with_digest(obj: dict) -> dict:
    body = {k: v for k, v in obj.items() if k != "digest"}
    return {**body, "digest": digest(body)}


def check_digest(obj: dict) -> bool:
    if "digest" not in obj:
        return False
    body = {k: v for k, v in obj.items() if k != "digest"}
    return digest(body) == obj["digest"]
