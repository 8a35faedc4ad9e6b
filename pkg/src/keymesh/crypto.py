"""Deterministic primitives for key generation.

Everything here is a pure function of its inputs. SHA-256 is the only hash,
so keys are 32 octets. Integer encodings are big-endian: key indices and tag
ids take 4 octets, PRNG seeds take 8.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

KEY_BYTES = 32


class InvalidTagId(ValueError):
    """Tag ids (group numbers) start at 1."""


_sha256 = hashlib.sha256


def digest(data: bytes) -> bytes:
    return _sha256(data).digest()


def _u32(value: int) -> bytes:
    return value.to_bytes(4, "big")


def _u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


@dataclass(frozen=True)
class ChainCheckpoints:
    """Precomputed points of the root-key hash chain.

    ``entries[j]`` holds ``h^j(root)`` for every stored multiple ``j`` of
    ``stride``.
    """

    stride: int
    entries: Mapping[int, bytes] = field(default_factory=dict)

    def start_for(self, j: int) -> tuple[int, bytes | None]:
        """Largest stored position <= j and its key, or (0, None)."""
        base = (j // self.stride) * self.stride
        while base > 0:
            key = self.entries.get(base)
            if key is not None:
                return base, key
            base -= self.stride
        return 0, None


def build_checkpoints(root: bytes, max_tag: int, stride: int = 50) -> ChainCheckpoints:
    if stride < 1:
        raise ValueError("stride must be positive")
    entries = {}
    key = root
    for j in range(1, max_tag + 1):
        key = digest(key)
        if j % stride == 0:
            entries[j] = key
    return ChainCheckpoints(stride=stride, entries=entries)


def chain_steps(j: int, checkpoints: ChainCheckpoints | None = None) -> int:
    """Number of hash applications :func:`group_key` performs for tag ``j``."""
    if j < 1:
        raise InvalidTagId(f"tag id must be >= 1, got {j}")
    if checkpoints is None:
        return j
    base, _ = checkpoints.start_for(j)
    return j - base


def group_key(j: int, root: bytes, checkpoints: ChainCheckpoints | None = None) -> bytes:
    """Group key of tag ``j``: the root key hashed ``j`` times."""
    if j < 1:
        raise InvalidTagId(f"tag id must be >= 1, got {j}")
    base, key = (0, None) if checkpoints is None else checkpoints.start_for(j)
    if key is None:
        base, key = 0, root
    for _ in range(j - base):
        key = digest(key)
    return key


_DRAWS: dict[tuple[int, int], list[int]] = {}
_DRAWS_MAX = 1 << 17


def key_indices(seed: int, k: int, m: int) -> tuple[int, ...]:
    """``k`` pool positions in ``[1, m]`` drawn from ``seed`` (with replacement).

    index_i = 1 + (SHA-256(seed_u64 || i_u32) mod m), i = 1..k, with the
    digest read as a big-endian unsigned integer. Draw i depends only on
    (seed, i, m), so the longest prefix seen per seed is kept and extended.
    """
    if k < 1 or m < 1:
        raise ValueError("k and m must be >= 1")
    draws = _DRAWS.get((seed, m))
    if draws is None:
        if len(_DRAWS) >= _DRAWS_MAX:
            _DRAWS.clear()
        draws = _DRAWS[(seed, m)] = []
    if len(draws) < k:
        prefix = _u64(seed)
        draws.extend(
            1 + int.from_bytes(_sha256(prefix + i.to_bytes(4, "big")).digest(), "big") % m
            for i in range(len(draws) + 1, k + 1)
        )
    return tuple(draws[:k])


@lru_cache(maxsize=1 << 18)
def index_set(seed: int, k: int, m: int) -> frozenset[int]:
    return frozenset(key_indices(seed, k, m))


def derive_key(gk: bytes, idx: int) -> bytes:
    """Pool element ``idx`` of the pool keyed by group key ``gk``."""
    return _sha256(gk + idx.to_bytes(4, "big")).digest()


def mac_tag(key: bytes, message: bytes) -> bytes:
    return digest(key + message)


def verify_tag(key: bytes, message: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac_tag(key, message), tag)


def xor_keys(keys: Iterable[bytes]) -> bytes:
    keys = list(keys)
    if len(keys) == 1:
        return keys[0]
    acc = 0
    for key in keys:
        acc ^= int.from_bytes(key, "big")
    return acc.to_bytes(KEY_BYTES, "big")


# Test-vector files: one case per line, ``op<TAB>input_hex<TAB>output_hex``.
# Inputs use the same octet layout the primitive hashes:
#   hash         input
#   group_key    j_u32 || root
#   key_indices  seed_u64 || k_u32 || m_u32   -> indices as concatenated u32
#   derive_key   gk || idx_u32
#   mac_tag      key || message

def evaluate_vector(op: str, data: bytes) -> bytes:
    if op == "hash":
        return digest(data)
    if op == "group_key":
        return group_key(int.from_bytes(data[:4], "big"), data[4:])
    if op == "key_indices":
        seed = int.from_bytes(data[:8], "big")
        k = int.from_bytes(data[8:12], "big")
        m = int.from_bytes(data[12:16], "big")
        return b"".join(_u32(i) for i in key_indices(seed, k, m))
    if op == "derive_key":
        return derive_key(data[:KEY_BYTES], int.from_bytes(data[KEY_BYTES:], "big"))
    if op == "mac_tag":
        return mac_tag(data[:KEY_BYTES], data[KEY_BYTES:])
    raise ValueError(f"unknown vector op {op!r}")


def read_vectors(path: str | Path) -> list[tuple[str, bytes, bytes]]:
    cases = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        op, inp, out = line.split("\t")
        cases.append((op, bytes.fromhex(inp), bytes.fromhex(out)))
    return cases


def write_vectors(path: str | Path, cases: Iterable[tuple[str, bytes]]) -> None:
    lines = [f"{op}\t{data.hex()}\t{evaluate_vector(op, data).hex()}" for op, data in cases]
    Path(path).write_text("\n".join(lines) + "\n")
