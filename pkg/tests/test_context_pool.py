import random

import pytest
from hypothesis import given, settings, strategies as st

from ams.action_index import serialize_step
from ams.context_pool import (
    BLOB_SIZES,
    DEMOTE,
    DROP,
    DROPPED,
    FAST,
    SLOW,
    ActionContext,
    BlobKind,
    ContextPool,
    PoolConfig,
    admit,
    evict_until,
    fetch,
    lookup,
    new_blob,
    touch,
)
from ams.core import ActionStep, ObjectState, observation_signature
from ams.errors import CapacityError, UnknownBlob

from oracles import CheckedPool, brute_force_order

HOME = (0.0, 1.3, -1.7, -1.2, 0.0, 0.0)
K = BlobKind


def sig(shift=0.0, instruction="t", q=HOME):
    objs = [ObjectState("bowl", "bowl", (0.2, -0.3, 0.0)), ObjectState("c0", "cube", (0.35 + shift, 0.05, 0.015))]
    return observation_signature(instruction, objs, q)


def ctx(pool, s=None, instruction="t", steps=(), **kw):
    vids = [pool.store.intern(serialize_step(st)) for st in steps]
    return ActionContext(instruction, s or sig(), vids, **kw)


def all_kinds(seed):
    return [new_blob(k, seed * 10 + i) for i, k in enumerate(BlobKind)]


def test_sizes_are_scaled_table_values():
    assert BLOB_SIZES[K.VISION_KV] == 63 * 1024
    assert BLOB_SIZES[K.LLM_KV] == BLOB_SIZES[K.DIFFUSION_LATENT] == 165 * 1024
    assert BLOB_SIZES[K.OUTPUT_EMBEDDING] == 14
    assert new_blob(K.VISION_KV, 1).use_class == "low"
    assert new_blob(K.LLM_KV, 1).use_class == "medium"
    assert new_blob(K.DIFFUSION_LATENT, 1).use_class == new_blob(K.OUTPUT_EMBEDDING, 1).use_class == "high"


def test_first_admit_is_fast_resident():
    pool = ContextPool()
    cid = admit(pool, ctx(pool), all_kinds(1))
    assert all(pool.tier(b) == FAST for b in pool.contexts[cid].blob_ids)
    pool.check_invariants()


def test_admit_over_budget_evicts():
    pool = ContextPool(PoolConfig(fast_budget_bytes=500 * 1024))
    admit(pool, ctx(pool), all_kinds(1))
    admit(pool, ctx(pool), all_kinds(2))
    pool.check_invariants()
    assert pool.fast_bytes <= 500 * 1024
    assert pool.evictions[DROP] + pool.evictions[DEMOTE] > 0


def test_shared_actions_stored_once():
    pool = ContextPool()
    pick = [ActionStep(i, (0.01 * i, 0, 0, 0, 0, 0)) for i in range(5)]
    admit(pool, ctx(pool, steps=pick))
    admit(pool, ctx(pool, steps=pick + [ActionStep(5, (0.0,) * 6, 0.0)]))
    assert pool.store.total_bytes == 6 * 65
    pool.teardown()
    assert pool.store.total_bytes == 0 and len(pool.store) == 0


def test_capacity_error_for_giant_blob():
    pool = ContextPool(PoolConfig(fast_budget_bytes=1000, slow_budget_bytes=1000))
    with pytest.raises(CapacityError):
        admit(pool, ctx(pool), [new_blob(K.LLM_KV, 1)])


def test_lookup_examples():
    pool = ContextPool()
    assert lookup(pool, "t", sig()) is None
    cid = admit(pool, ctx(pool), ())
    hit = lookup(pool, "t", sig())
    assert hit.ctx_id == cid and hit.score == 1.0
    # three components (bowl, c0, robot); displacing c0 leaves 2 of 3
    moved = lookup(pool, "t", sig(0.05))
    assert moved.score == pytest.approx(2 / 3)
    assert lookup(pool, "other", sig()) is None


def test_lookup_threshold_and_recency_tiebreak():
    pool = ContextPool()
    a = admit(pool, ctx(pool, episode_id=0), ())
    b = admit(pool, ctx(pool, episode_id=1), ())
    assert lookup(pool, "t", sig()).ctx_id == b
    far = sig(0.05, q=(0.5,) * 6)  # only the bowl matches: 1/3
    assert lookup(pool, "t", far) is None
    assert [h.ctx_id for h in pool.ranked("t", far, threshold=0.0)] == [b, a]


def test_touch_counts_and_survives_demotion():
    pool = ContextPool(PoolConfig(fast_budget_bytes=200 * 1024))
    cid = admit(pool, ctx(pool), [new_blob(K.LLM_KV, 1)])
    bid = pool.contexts[cid].blob_ids[0]
    assert touch(pool, bid)[0] == 1
    c, t1 = touch(pool, bid)
    assert c == 2
    admit(pool, ctx(pool), [new_blob(K.DIFFUSION_LATENT, 2)])
    assert pool.tier(bid) == SLOW
    c, t2 = touch(pool, bid)
    assert c == 3 and t2 > t1
    with pytest.raises(UnknownBlob):
        touch(pool, 999)


def test_vision_evicted_before_latent():
    pool = ContextPool(PoolConfig(fast_budget_bytes=300 * 1024))
    cid = admit(pool, ctx(pool), [new_blob(K.DIFFUSION_LATENT, 1), new_blob(K.VISION_KV, 2)])
    lat, vis = pool.contexts[cid].blob_ids
    touch(pool, vis)  # vision is the more recent one and still goes first
    victims = evict_until(pool, 1)
    assert victims == [(vis, DROP)] and pool.tier(lat) == FAST and pool.tier(vis) == DROPPED


def test_evict_needs_positive_bytes():
    with pytest.raises(ValueError):
        evict_until(ContextPool(), 0)


def test_lru_among_llm_blobs():
    pool = ContextPool()
    cid = admit(pool, ctx(pool), [new_blob(K.LLM_KV, i) for i in range(3)])
    ids = pool.contexts[cid].blob_ids
    for b in (ids[2], ids[0], ids[1]):
        touch(pool, b)
    assert evict_until(pool, 1) == [(ids[2], DEMOTE)]


def test_eviction_raises_when_impossible():
    pool = ContextPool()
    admit(pool, ctx(pool), [new_blob(K.OUTPUT_EMBEDDING, 1)])
    with pytest.raises(CapacityError):
        evict_until(pool, 10**9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list(BlobKind)), min_size=1, max_size=32), st.randoms(use_true_random=False))
def test_eviction_order_matches_brute_force(kinds, rnd):
    cfg = PoolConfig(fast_budget_bytes=64 * 1024 * 1024)
    pool = ContextPool(cfg)
    admit(pool, ctx(pool), [new_blob(k, i) for i, k in enumerate(kinds)])
    for _ in range(len(kinds)):
        touch(pool, rnd.choice(pool.blob_ids))
    expected = brute_force_order(pool, cfg)
    assert pool.eviction_order() == expected
    need = sum(pool.blob(b).size_bytes for b in expected[: max(1, len(expected) // 2)])
    victims = [b for b, _ in evict_until(pool, need)]
    assert victims == expected[: len(victims)]


def test_fetch_charges():
    cfg = PoolConfig(fast_budget_bytes=200 * 1024)
    pool = ContextPool(cfg)
    cid = admit(pool, ctx(pool), [new_blob(K.VISION_KV, 1)])
    vis = pool.contexts[cid].blob_ids[0]
    original = pool.blob(vis).payload
    assert fetch(pool, vis).charge_ms == 0.0
    cid2 = admit(pool, ctx(pool), [new_blob(K.LLM_KV, 2)])
    llm = pool.contexts[cid2].blob_ids[0]
    assert pool.tier(vis) == DROPPED
    res = fetch(pool, vis)
    assert res.payload == original and res.source == DROPPED
    assert res.charge_ms <= 0.10 * cfg.base_infer_ms
    assert res.charge_ms == pytest.approx(0.10 * cfg.base_infer_ms * cfg.vision_share)
    assert pool.tier(llm) == SLOW
    res = fetch(pool, llm)
    assert res.charge_ms == pytest.approx(165 * 1024 / cfg.pcie_bytes_per_ms)
    assert pool.tier(llm) == FAST
    with pytest.raises(UnknownBlob):
        fetch(pool, 99)


def test_budget_fuzz_10k_operations():
    rng = random.Random(11)
    cfg = PoolConfig(fast_budget_bytes=1024 * 1024)
    pool = CheckedPool(cfg)
    for i in range(10_000):
        op = rng.random()
        if op < 0.3 or not pool.contexts:
            reuse = []
            if pool.contexts and rng.random() < 0.5:
                other = pool.contexts[rng.choice(sorted(pool.contexts))]
                reuse = other.blob_ids[: rng.randint(0, len(other.blob_ids))]
            kinds = rng.sample(list(BlobKind), rng.randint(1, 4))
            admit(pool, ctx(pool, blob_ids=list(reuse)), [new_blob(k, i) for k in kinds])
        elif op < 0.6:
            touch(pool, rng.choice(pool.blob_ids))
        elif op < 0.85:
            fetch(pool, rng.choice(pool.blob_ids))
        else:
            pool.remove(rng.choice(sorted(pool.contexts)))
        assert pool.fast_bytes <= cfg.fast_budget_bytes
        if i % 500 == 0:
            pool.check_invariants()
    pool.check_invariants()
    assert pool.evictions[DROP] > 0 and pool.evictions[DEMOTE] > 0
    assert pool.violations == 0
    pool.teardown()
    assert pool.store.total_bytes == 0 and pool.fast_bytes == 0 and pool.slow_bytes == 0


def test_snapshot_round_trip():
    pool = ContextPool(PoolConfig(fast_budget_bytes=300 * 1024))
    for i in range(3):
        admit(pool, ctx(pool, steps=[ActionStep(0, (0.01 * i,) + (0.0,) * 5)]), all_kinds(i))
    snap = pool.export_snapshot()
    import json
    clone = ContextPool.import_snapshot(json.loads(json.dumps(snap)), pool.cfg)
    assert clone.export_snapshot() == snap
    for b in pool.blob_ids:
        assert clone.blob(b).payload == pool.blob(b).payload
    assert clone.lookup("t", sig()) == pool.lookup("t", sig())
