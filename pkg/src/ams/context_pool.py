"""Action context pool: tiered blob storage with class/LRU eviction.

The fast tier emulates accelerator memory under a byte budget; the slow
tier emulates host memory.  Eviction victimizes blobs by ascending priority
``w_class * class_rank + w_lru * recency_rank``.  Vision KV caches are
dropped (cheap to recompute), everything else is demoted.
"""
from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

from .action_index import HashConfig, VirtualActionStore, serialize_step
from .core import ActionSlice, ObservationSignature, signature_similarity
from .errors import CapacityError, UnknownBlob, UnknownId

FAST = "fast"
SLOW = "slow"
DROPPED = "dropped"
DEMOTE = "demote-to-slow"
DROP = "drop-recomputable"


class BlobKind(str, Enum):
    VISION_KV = "VisionKV"
    LLM_KV = "LlmKV"
    DIFFUSION_LATENT = "DiffusionLatent"
    OUTPUT_EMBEDDING = "OutputEmbedding"


USE_CLASS = {
    BlobKind.VISION_KV: "low",
    BlobKind.LLM_KV: "medium",
    BlobKind.DIFFUSION_LATENT: "high",
    BlobKind.OUTPUT_EMBEDDING: "high",
}
CLASS_RANK = {
    BlobKind.VISION_KV: 0,
    BlobKind.LLM_KV: 1,
    BlobKind.DIFFUSION_LATENT: 2,
    BlobKind.OUTPUT_EMBEDDING: 2,
}
# Per-step pi0 footprint (63 MB / 165 MB / 165 MB / 14 B) scaled by 1/1024;
# the output embedding is already tiny and kept as is.
BLOB_SIZES = {
    BlobKind.VISION_KV: 63 * 1024,
    BlobKind.LLM_KV: 165 * 1024,
    BlobKind.DIFFUSION_LATENT: 165 * 1024,
    BlobKind.OUTPUT_EMBEDDING: 14,
}
RECOMPUTABLE = frozenset({BlobKind.VISION_KV})


def make_payload(seed: int, size: int, header: bytes = b"") -> bytes:
    if len(header) > size:
        raise ValueError("header larger than blob")
    filler = hashlib.shake_128(seed.to_bytes(8, "little", signed=False)).digest(size - len(header))
    return header + filler


@dataclass(frozen=True)
class CacheableBlob:
    blob_id: int
    kind: BlobKind
    size_bytes: int
    seed: int
    header: bytes = b""
    recompute_cost: float = 1.0

    def __post_init__(self) -> None:
        if self.size_bytes <= 0:
            raise ValueError("blob size must be positive")

    @property
    def use_class(self) -> str:
        return USE_CLASS[self.kind]

    @property
    def payload(self) -> bytes:
        return make_payload(self.seed, self.size_bytes, self.header)


def new_blob(kind: BlobKind, seed: int, header: bytes = b"") -> CacheableBlob:
    """Blob with the default simulated size; ``blob_id`` is assigned on admit."""
    size = max(BLOB_SIZES[kind], len(header))
    cost = 0.10 if kind in RECOMPUTABLE else 1.0
    return CacheableBlob(-1, kind, size, seed & ((1 << 64) - 1), header, cost)


@dataclass
class ActionContext:
    instruction: str
    observation_sig: ObservationSignature
    virtual_action_ids: list[int]
    blob_ids: list[int] = field(default_factory=list)
    success: bool = False
    episode_id: int = 0
    ctx_id: int = -1
    meta: dict = field(default_factory=dict)


@dataclass
class BlobRecord:
    blob: CacheableBlob
    tier: str
    access_count: int = 0
    last_access: int = 0
    refs: int = 0


@dataclass(frozen=True)
class LookupHit:
    ctx_id: int
    score: float


@dataclass(frozen=True)
class FetchResult:
    payload: bytes
    charge_ms: float
    source: str


@dataclass(frozen=True)
class PoolConfig:
    fast_budget_bytes: int = 8 * 1024 * 1024
    slow_budget_bytes: float = math.inf
    w_class: int = 1000
    w_lru: int = 1
    pcie_bytes_per_ms: float = 12e6
    base_infer_ms: float = 200.0
    recompute_fraction: float = 0.10
    lookup_threshold: float = 0.5
    # share of one full inference that each cached item saves when reused
    vision_share: float = 0.08
    llm_share: float = 0.12

    def share(self, kind: BlobKind) -> float:
        if kind is BlobKind.VISION_KV:
            return self.vision_share
        if kind is BlobKind.LLM_KV:
            return self.llm_share
        return 0.0


class ContextPool:
    def __init__(self, cfg: PoolConfig = PoolConfig(), hash_cfg: HashConfig = HashConfig()) -> None:
        self.cfg = cfg
        self.store = VirtualActionStore(hash_cfg)
        self.contexts: dict[int, ActionContext] = {}
        self._blobs: dict[int, BlobRecord] = {}
        self._lock = threading.RLock()
        self.clock = 0
        self.fast_bytes = 0
        self.slow_bytes = 0
        self._next_ctx = 0
        self._next_blob = 0
        self.evictions = {DEMOTE: 0, DROP: 0}
        self.eviction_log: list[tuple[int, str]] = []

    # ------------------------------------------------------------------ blobs
    def blob(self, blob_id: int) -> CacheableBlob:
        return self._record(blob_id).blob

    def record(self, blob_id: int) -> BlobRecord:
        return self._record(blob_id)

    def _record(self, blob_id: int) -> BlobRecord:
        try:
            return self._blobs[blob_id]
        except KeyError:
            raise UnknownBlob(blob_id) from None

    def tier(self, blob_id: int) -> str:
        return self._record(blob_id).tier

    @property
    def blob_ids(self) -> list[int]:
        return sorted(self._blobs)

    def fast_resident(self) -> list[int]:
        return sorted(b for b, r in self._blobs.items() if r.tier == FAST)

    def intern_slice(self, sl: ActionSlice) -> list[int]:
        return [self.store.intern(serialize_step(s)) for s in sl.steps]

    # ---------------------------------------------------------------- admit
    def admit(self, ctx: ActionContext, new_blobs: Sequence[CacheableBlob] = ()) -> int:
        """Register ``ctx`` and place its freshly produced blobs.

        ``ctx.blob_ids`` may already name existing (reused) blobs; those gain
        a reference.  New blobs get ids here and are appended.
        """
        with self._lock:
            for vid in ctx.virtual_action_ids:
                if vid not in self.store:
                    raise UnknownId(vid)
            for b in new_blobs:
                if b.size_bytes > self.cfg.fast_budget_bytes + self.cfg.slow_budget_bytes:
                    raise CapacityError(f"blob of {b.size_bytes} B exceeds both tiers")
            for bid in ctx.blob_ids:
                self._record(bid).refs += 1
            for b in new_blobs:
                bid = self._next_blob
                self._next_blob += 1
                # unplaced until _promote puts it in fast (or slow if oversized)
                self._blobs[bid] = BlobRecord(replace(b, blob_id=bid), tier=DROPPED, refs=1)
                self._promote(bid)
                ctx.blob_ids.append(bid)
            ctx.ctx_id = self._next_ctx
            self._next_ctx += 1
            self.contexts[ctx.ctx_id] = ctx
            return ctx.ctx_id

    def _promote(self, bid: int) -> None:
        """Move ``bid`` into the fast tier, evicting others if needed."""
        rec = self._blobs[bid]
        if rec.tier == FAST:
            return
        size = rec.blob.size_bytes
        if size > self.cfg.fast_budget_bytes:
            if rec.tier == DROPPED:
                self._to_slow(rec)
            return
        need = self.fast_bytes + size - self.cfg.fast_budget_bytes
        if need > 0:
            self.evict_until(need, pinned=(bid,))
        if rec.tier == SLOW:
            self.slow_bytes -= size
        rec.tier = FAST
        self.fast_bytes += size

    def _to_slow(self, rec: BlobRecord) -> None:
        size = rec.blob.size_bytes
        if self.slow_bytes + size > self.cfg.slow_budget_bytes:
            raise CapacityError("slow tier full")
        rec.tier = SLOW
        self.slow_bytes += size

    # ------------------------------------------------------------- eviction
    def eviction_order(self, pinned: Iterable[int] = ()) -> list[int]:
        """Fast-resident blobs in victim order.

        ``recency_rank`` counts within a blob's class so the class term
        always dominates however many blobs are resident.
        """
        pinned = set(pinned)
        cands = [b for b, r in self._blobs.items() if r.tier == FAST and b not in pinned]
        by_class: dict[int, list[int]] = {}
        for b in cands:
            by_class.setdefault(CLASS_RANK[self._blobs[b].blob.kind], []).append(b)
        prio = {}
        for crank, members in by_class.items():
            members.sort(key=lambda b: (self._blobs[b].last_access, b))
            for rank, b in enumerate(members):
                prio[b] = self.cfg.w_class * crank + self.cfg.w_lru * rank
        return sorted(cands, key=lambda b: (prio[b], self._blobs[b].last_access, b))

    def evict_until(self, needed_bytes: int, pinned: Iterable[int] = ()) -> list[tuple[int, str]]:
        if needed_bytes <= 0:
            raise ValueError("needed_bytes must be positive")
        with self._lock:
            order = self.eviction_order(pinned)
            if sum(self._blobs[b].blob.size_bytes for b in order) < needed_bytes:
                raise CapacityError(f"cannot free {needed_bytes} B from the fast tier")
            freed = 0
            victims = []
            for b in order:
                if freed >= needed_bytes:
                    break
                rec = self._blobs[b]
                size = rec.blob.size_bytes
                self.fast_bytes -= size
                if rec.blob.kind in RECOMPUTABLE:
                    rec.tier = DROPPED
                    action = DROP
                else:
                    self._to_slow(rec)
                    action = DEMOTE
                freed += size
                victims.append((b, action))
                self.evictions[action] += 1
            self.eviction_log.extend(victims)
            return victims

    # --------------------------------------------------------- touch/fetch
    def touch(self, blob_id: int) -> tuple[int, int]:
        with self._lock:
            rec = self._record(blob_id)
            rec.access_count += 1
            rec.last_access = self.clock
            self.clock += 1
            return rec.access_count, rec.last_access

    def fetch(self, blob_id: int) -> FetchResult:
        with self._lock:
            rec = self._record(blob_id)
            source = rec.tier
            blob = rec.blob
            if source == FAST:
                charge = 0.0
            elif source == SLOW:
                charge = blob.size_bytes / self.cfg.pcie_bytes_per_ms
            else:
                charge = self.cfg.recompute_fraction * self.cfg.base_infer_ms * self.cfg.share(blob.kind)
            self.touch(blob_id)
            self._promote(blob_id)
            return FetchResult(blob.payload, charge, source)

    # --------------------------------------------------------------- lookup
    def ranked(
        self,
        instruction: str,
        sig: ObservationSignature,
        *,
        success_only: bool = False,
        scene_match: bool = False,
        threshold: Optional[float] = None,
    ) -> list[LookupHit]:
        """Matching contexts, best first; ties go to the most recent
        episode, then the most recently admitted context."""
        thr = self.cfg.lookup_threshold if threshold is None else threshold
        scored = []
        with self._lock:
            for ctx in self.contexts.values():
                if ctx.instruction != instruction or (success_only and not ctx.success):
                    continue
                if scene_match and ctx.observation_sig.scene_components() != sig.scene_components():
                    continue
                score = signature_similarity(sig, ctx.observation_sig)
                if score >= thr:
                    scored.append((score, ctx.episode_id, ctx.ctx_id))
        scored.sort(reverse=True)
        return [LookupHit(cid, s) for s, _, cid in scored]

    def lookup(self, instruction: str, sig: ObservationSignature, **kw) -> Optional[LookupHit]:
        hits = self.ranked(instruction, sig, **kw)
        return hits[0] if hits else None

    def blob_of_kind(self, ctx_id: int, kind: BlobKind) -> Optional[int]:
        for bid in self.contexts[ctx_id].blob_ids:
            if self._blobs[bid].blob.kind is kind:
                return bid
        return None

    # ------------------------------------------------------------- teardown
    def remove(self, ctx_id: int) -> None:
        with self._lock:
            ctx = self.contexts.pop(ctx_id)
            for vid in ctx.virtual_action_ids:
                self.store.release(vid)
            for bid in ctx.blob_ids:
                rec = self._blobs[bid]
                rec.refs -= 1
                if rec.refs == 0:
                    if rec.tier == FAST:
                        self.fast_bytes -= rec.blob.size_bytes
                    elif rec.tier == SLOW:
                        self.slow_bytes -= rec.blob.size_bytes
                    del self._blobs[bid]

    def teardown(self) -> None:
        for cid in sorted(self.contexts):
            self.remove(cid)

    # --------------------------------------------------------------- checks
    def check_invariants(self) -> None:
        fast = sum(r.blob.size_bytes for r in self._blobs.values() if r.tier == FAST)
        slow = sum(r.blob.size_bytes for r in self._blobs.values() if r.tier == SLOW)
        assert fast == self.fast_bytes, (fast, self.fast_bytes)
        assert slow == self.slow_bytes, (slow, self.slow_bytes)
        assert self.fast_bytes <= self.cfg.fast_budget_bytes
        assert self.slow_bytes <= self.cfg.slow_budget_bytes

    def stats(self) -> dict:
        tiers = {FAST: 0, SLOW: 0, DROPPED: 0}
        for r in self._blobs.values():
            tiers[r.tier] += 1
        return {
            "contexts": len(self.contexts),
            "success_contexts": sum(1 for c in self.contexts.values() if c.success),
            "blobs_fast": tiers[FAST],
            "blobs_slow": tiers[SLOW],
            "blobs_dropped": tiers[DROPPED],
            "fast_bytes": self.fast_bytes,
            "slow_bytes": self.slow_bytes,
            "demotions": self.evictions[DEMOTE],
            "drops": self.evictions[DROP],
            "virtual_actions": len(self.store),
            "action_bytes": self.store.total_bytes,
            "dedup_hits": self.store.dedup_hits,
        }

    # ------------------------------------------------------------- snapshot
    def export_snapshot(self) -> dict:
        """JSON-ready metadata.  Blob payloads are not serialized; they are
        regenerated from their seeds."""
        with self._lock:
            return {
                "version": 1,
                "clock": self.clock,
                "next_ctx": self._next_ctx,
                "next_blob": self._next_blob,
                "contexts": [
                    {
                        "ctx_id": c.ctx_id,
                        "instruction": c.instruction,
                        "sig": {
                            "instruction": c.observation_sig.instruction,
                            "objects": [list(o) for o in c.observation_sig.objects],
                            "robot": c.observation_sig.robot,
                        },
                        "virtual_action_ids": [str(v) for v in c.virtual_action_ids],
                        "blob_ids": c.blob_ids,
                        "success": c.success,
                        "episode_id": c.episode_id,
                        "meta": c.meta,
                    }
                    for c in sorted(self.contexts.values(), key=lambda c: c.ctx_id)
                ],
                "blobs": [
                    {
                        "blob_id": bid,
                        "kind": r.blob.kind.value,
                        "size_bytes": r.blob.size_bytes,
                        "seed": r.blob.seed,
                        "header": r.blob.header.hex(),
                        "recompute_cost": r.blob.recompute_cost,
                        "tier": r.tier,
                        "access_count": r.access_count,
                        "last_access": r.last_access,
                        "refs": r.refs,
                    }
                    for bid, r in sorted(self._blobs.items())
                ],
                "virtual_actions": [
                    {"id": str(vid), "bytes": data.hex(), "refcount": rc} for vid, data, rc in self.store.items()
                ],
            }

    @classmethod
    def import_snapshot(cls, snap: dict, cfg: PoolConfig = PoolConfig(), hash_cfg: HashConfig = HashConfig()) -> "ContextPool":
        pool = cls(cfg, hash_cfg)
        for va in snap["virtual_actions"]:
            pool.store.load(int(va["id"]), bytes.fromhex(va["bytes"]), va["refcount"])
        for b in snap["blobs"]:
            blob = CacheableBlob(
                b["blob_id"], BlobKind(b["kind"]), b["size_bytes"], b["seed"],
                bytes.fromhex(b["header"]), b["recompute_cost"],
            )
            rec = BlobRecord(blob, b["tier"], b["access_count"], b["last_access"], b["refs"])
            pool._blobs[blob.blob_id] = rec
            if rec.tier == FAST:
                pool.fast_bytes += blob.size_bytes
            elif rec.tier == SLOW:
                pool.slow_bytes += blob.size_bytes
        for c in snap["contexts"]:
            sig = ObservationSignature(
                c["sig"]["instruction"], tuple(tuple(o) for o in c["sig"]["objects"]), c["sig"]["robot"]
            )
            ctx = ActionContext(
                c["instruction"], sig, [int(v) for v in c["virtual_action_ids"]], list(c["blob_ids"]),
                c["success"], c["episode_id"], c["ctx_id"], dict(c["meta"]),
            )
            pool.contexts[ctx.ctx_id] = ctx
        pool.clock = snap["clock"]
        pool._next_ctx = snap["next_ctx"]
        pool._next_blob = snap["next_blob"]
        pool.check_invariants()
        return pool


# Functional aliases mirroring the operation names.
def admit(pool: ContextPool, ctx: ActionContext, new_blobs: Sequence[CacheableBlob] = ()) -> int:
    return pool.admit(ctx, new_blobs)


def lookup(pool: ContextPool, instruction: str, sig: ObservationSignature) -> Optional[LookupHit]:
    return pool.lookup(instruction, sig)


def touch(pool: ContextPool, blob_id: int) -> tuple[int, int]:
    return pool.touch(blob_id)


def evict_until(pool: ContextPool, needed_bytes: int) -> list[tuple[int, str]]:
    return pool.evict_until(needed_bytes)


def fetch(pool: ContextPool, blob_id: int) -> FetchResult:
    return pool.fetch(blob_id)
