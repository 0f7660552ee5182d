"""Two-phase hashed action index and the refcounted virtual-action store.

Actions are serialized to a canonical byte layout, hashed segment by
segment (phase 1, order independent), and the segment hashes are folded
into a single 64-bit id (phase 2).  Both phases use the polynomial fold
``h = (h * B + x) mod M``; the concrete B and M are implementation-defined.
"""
from __future__ import annotations

import struct
import threading
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import DOF, ActionStep
from .errors import CollisionError, UnknownId

MERSENNE_61 = (1 << 61) - 1
_MASK64 = (1 << 64) - 1
_HOLD_BITS = _MASK64
_STEP_FORMAT = struct.Struct(f"<q{DOF}dQB")


@dataclass(frozen=True)
class HashConfig:
    segment_size: int = 4096
    base: int = 257
    modulus: int = MERSENNE_61

    def __post_init__(self) -> None:
        if self.segment_size < 1:
            raise ValueError("segment_size must be >= 1")
        if not 1 < self.base < self.modulus:
            raise ValueError("base must lie in (1, modulus)")


DEFAULT_HASH = HashConfig()


def segment_hash(segment: bytes, base: int, modulus: int) -> int:
    h = 0
    for byte in segment:
        h = (h * base + byte) % modulus
    return h


def segments(data: bytes, size: int) -> list[bytes]:
    return [data[i:i + size] for i in range(0, len(data), size)]


def fold_hashes(hashes: Sequence[int], base: int, modulus: int) -> int:
    acc = 0
    for h in hashes:
        acc = (acc * base + h) % modulus
    return acc


def hash_action(data: bytes, cfg: HashConfig = DEFAULT_HASH, executor: Optional[Executor] = None) -> int:
    """Return the 64-bit action index of ``data``.

    Segment hashes are independent, so ``executor`` (if given) computes them
    concurrently; the result does not depend on completion order.
    """
    parts = segments(bytes(data), cfg.segment_size)
    if executor is not None and len(parts) > 1:
        futures = [executor.submit(segment_hash, p, cfg.base, cfg.modulus) for p in parts]
        seg_hashes = [f.result() for f in futures]
    else:
        seg_hashes = [segment_hash(p, cfg.base, cfg.modulus) for p in parts]
    return fold_hashes(seg_hashes, cfg.base, cfg.modulus) & _MASK64


def serialize_step(step: ActionStep) -> bytes:
    """Canonical little-endian layout: int64 step_index, DOF float64 deltas,
    uint64 gripper field (float64 bits of the gap, all-ones for hold),
    one byte complete_flag."""
    if step.gripper_cmd is None:
        grip = _HOLD_BITS
    else:
        grip = struct.unpack("<Q", struct.pack("<d", step.gripper_cmd))[0]
    return _STEP_FORMAT.pack(step.step_index, *step.joint_deltas, grip, int(step.complete_flag))


def deserialize_step(data: bytes) -> ActionStep:
    fields = _STEP_FORMAT.unpack(data)
    index, deltas, grip, flag = fields[0], fields[1:1 + DOF], fields[1 + DOF], fields[2 + DOF]
    gripper = None if grip == _HOLD_BITS else struct.unpack("<d", struct.pack("<Q", grip))[0]
    return ActionStep(index, tuple(deltas), gripper, bool(flag))


class VirtualActionStore:
    """Deduplicated action bytes with per-id reference counts.

    All mutations take the store lock, so intern/release/resolve are
    linearizable across threads.
    """

    def __init__(self, cfg: HashConfig = DEFAULT_HASH) -> None:
        self.cfg = cfg
        self._entries: dict[int, list] = {}  # id -> [bytes, refcount]
        self._lock = threading.Lock()
        self.total_bytes = 0
        self.dedup_hits = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, vid: int) -> bool:
        return vid in self._entries

    def intern(self, data: bytes) -> int:
        data = bytes(data)
        vid = hash_action(data, self.cfg)
        with self._lock:
            entry = self._entries.get(vid)
            if entry is None:
                self._entries[vid] = [data, 1]
                self.total_bytes += len(data)
            elif entry[0] != data:
                raise CollisionError(f"virtual action id {vid:#x} already holds different bytes")
            else:
                entry[1] += 1
                self.dedup_hits += 1
        return vid

    def release(self, vid: int) -> int:
        with self._lock:
            entry = self._entries.get(vid)
            if entry is None:
                raise UnknownId(vid)
            entry[1] -= 1
            if entry[1] == 0:
                del self._entries[vid]
                self.total_bytes -= len(entry[0])
            return entry[1]

    def resolve(self, vid: int) -> bytes:
        entry = self._entries.get(vid)
        if entry is None:
            raise UnknownId(vid)
        return entry[0]

    def refcount(self, vid: int) -> int:
        entry = self._entries.get(vid)
        return 0 if entry is None else entry[1]

    def items(self) -> list[tuple[int, bytes, int]]:
        with self._lock:
            return [(vid, e[0], e[1]) for vid, e in sorted(self._entries.items())]

    def load(self, vid: int, data: bytes, refcount: int) -> None:
        if refcount < 1:
            raise ValueError("refcount must be >= 1")
        with self._lock:
            if vid in self._entries:
                raise CollisionError(f"virtual action id {vid:#x} already present")
            self._entries[vid] = [bytes(data), refcount]
            self.total_bytes += len(data)


def intern(store: VirtualActionStore, data: bytes) -> int:
    return store.intern(data)


def release(store: VirtualActionStore, vid: int) -> int:
    return store.release(vid)


def resolve(store: VirtualActionStore, vid: int) -> bytes:
    return store.resolve(vid)
