"""Independent reference implementations shared by unit and acceptance tests."""
from ams.action_index import MERSENNE_61
from ams.context_pool import CLASS_RANK, FAST, BlobKind, ContextPool, PoolConfig


def poly_hash(data: bytes, s: int = 4096, B: int = 257, M: int = MERSENNE_61) -> int:
    """Closed-form polynomial evaluation with big ints, reduced once."""
    chunks = [data[i:i + s] for i in range(0, len(data), s)]
    hs = [sum(b * B ** (len(c) - 1 - i) for i, b in enumerate(c)) % M for c in chunks]
    return (sum(h * B ** (len(hs) - 1 - i) for i, h in enumerate(hs)) % M) & ((1 << 64) - 1)


def brute_force_order(pool: ContextPool, cfg: PoolConfig) -> list[int]:
    """Victim order recomputed from the documented rule: class weight plus
    the blob's recency rank among resident blobs of its class."""
    resident = [b for b in pool.blob_ids if pool.tier(b) == FAST]
    def key(b):
        rec = pool.record(b)
        cls = CLASS_RANK[rec.blob.kind]
        same = [o for o in resident if CLASS_RANK[pool.record(o).blob.kind] == cls]
        rank = sum(1 for o in same if (pool.record(o).last_access, o) < (rec.last_access, b))
        return (cfg.w_class * cls + cfg.w_lru * rank, rec.last_access, b)
    return sorted(resident, key=key)


class CheckedPool(ContextPool):
    """Flags any eviction that takes a latent while an unpinned vision KV
    stays resident or is taken later in the same decision."""

    violations = 0

    def evict_until(self, needed_bytes, pinned=()):
        victims = super().evict_until(needed_bytes, pinned)
        kinds = [self.blob(b).kind for b, _ in victims]
        if BlobKind.DIFFUSION_LATENT in kinds:
            later = kinds[kinds.index(BlobKind.DIFFUSION_LATENT):]
            left = [b for b in self.fast_resident() if b not in set(pinned) and self.blob(b).kind is BlobKind.VISION_KV]
            if BlobKind.VISION_KV in later or left:
                self.violations += 1
        return victims
