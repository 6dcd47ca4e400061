import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import two_loop_attention
from pagedkv.attention import (
    AttentionQuery,
    CowViolation,
    DanglingBlock,
    KvStorage,
    PagedKvCache,
    attention_weights,
    contiguous_attention,
    execute_copy,
    paged_attention,
    paged_attention_batch,
    paged_attention_weights,
    read_kv,
    write_kv,
)
from pagedkv.block_manager import BlockManager, SwapDirection, SwapDirective


def scatter(rng, K, V, B, num_blocks=None, layer=0, head=0, H=1, L=1):
    """Place K/V of one head into randomly chosen, non-contiguous blocks."""
    n, d = K.shape
    nb = -(-n // B)
    num_blocks = num_blocks or 3 * nb + 2
    st_ = KvStorage(num_blocks, L, H, d, B)
    ids = rng.permutation(num_blocks)[:nb].tolist()
    for p in range(n):
        b, s = ids[p // B], p % B
        st_.data[b, layer, head, s, 0] = K[p]
        st_.data[b, layer, head, s, 1] = V[p]
    return st_, ids


def test_contiguous_single_token_returns_value():
    v = np.array([1.5, -2.0, 3.0])
    assert np.array_equal(contiguous_attention(np.ones(3), np.ones((1, 3)), v[None]), v)


def test_contiguous_uniform_scores_give_mean():
    rng = np.random.default_rng(1)
    V = rng.normal(size=(6, 4))
    K = np.zeros((6, 4))
    K[:, 1] = 1.0
    q = np.array([1.0, 0.0, 0.0, 0.0])
    assert np.allclose(contiguous_attention(q, K, V), V.mean(axis=0), atol=1e-15)


def test_contiguous_matches_two_loop_oracle():
    rng = np.random.default_rng(37)
    q, K, V = rng.normal(size=8), rng.normal(size=(37, 8)), rng.normal(size=(37, 8))
    ref = np.array(two_loop_attention(q.tolist(), K.tolist(), V.tolist()))
    assert np.abs(contiguous_attention(q, K, V) - ref).max() <= 1e-12


def test_contiguous_rejects_empty():
    with pytest.raises(ValueError):
        contiguous_attention(np.ones(2), np.zeros((0, 2)), np.zeros((0, 2)))


def test_paged_three_noncontiguous_blocks():
    rng = np.random.default_rng(5)
    K, V, q = rng.normal(size=(11, 8)), rng.normal(size=(11, 8)), rng.normal(size=8)
    storage, ids = scatter(rng, K, V, 4)
    assert len(ids) == 3 and ids != sorted(ids)
    out = paged_attention(AttentionQuery(q, 11, ids), storage)
    assert np.abs(out - contiguous_attention(q, K, V)).max() <= 1e-9


def test_paged_single_block_degenerates():
    rng = np.random.default_rng(6)
    K, V, q = rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng.normal(size=4)
    storage, ids = scatter(rng, K, V, 8)
    out = paged_attention(AttentionQuery(q, 5, ids), storage)
    assert np.abs(out - contiguous_attention(q, K, V)).max() <= 1e-12


def test_block_size_invariance_sweep():
    rng = np.random.default_rng(7)
    K, V, q = rng.normal(size=(29, 8)), rng.normal(size=(29, 8)), rng.normal(size=8)
    outs = []
    for B in (1, 2, 4, 8, 16):
        storage, ids = scatter(rng, K, V, B)
        outs.append(paged_attention(AttentionQuery(q, 29, ids), storage))
    for o in outs[1:]:
        assert np.abs(o - outs[0]).max() <= 1e-9


@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 128),
    d=st.integers(1, 16),
    B=st.sampled_from([1, 2, 4, 8, 16, 32]),
)
def test_paged_equals_contiguous_property(seed, n, d, B):
    rng = np.random.default_rng(seed)
    K, V, q = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=d)
    storage, ids = scatter(rng, K, V, B)
    out = paged_attention(AttentionQuery(q, n, ids), storage)
    assert np.abs(out - contiguous_attention(q, K, V)).max() <= 1e-9


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 64), B=st.sampled_from([1, 3, 4, 16]))
def test_blockwise_weights_sum_to_one(seed, n, B):
    rng = np.random.default_rng(seed)
    K, V, q = rng.normal(size=(n, 4)), rng.normal(size=(n, 4)), rng.normal(size=4)
    storage, ids = scatter(rng, K, V, B)
    rows = paged_attention_weights(AttentionQuery(q, n, ids), storage)
    assert abs(sum(r.sum() for r in rows) - 1.0) <= 1e-12
    assert np.allclose(np.concatenate(rows), attention_weights(q, K), atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_permuting_block_placement_changes_nothing(seed, n):
    rng = np.random.default_rng(seed)
    K, V, q = rng.normal(size=(n, 4)), rng.normal(size=(n, 4)), rng.normal(size=4)
    storage, ids = scatter(rng, K, V, 4, num_blocks=40)
    perm = rng.permutation(40)
    moved = KvStorage(40, 1, 1, 4, 4)
    moved.data[perm] = storage.data
    a = paged_attention(AttentionQuery(q, n, ids), storage)
    b = paged_attention(AttentionQuery(q, n, [int(perm[i]) for i in ids]), moved)
    assert np.abs(a - b).max() <= 1e-12


def test_extreme_scores_stay_finite():
    K = np.array([[700.0], [-700.0], [350.0]])
    V = np.array([[1.0], [2.0], [3.0]])
    storage, ids = scatter(np.random.default_rng(0), K, V, 2)
    for q in (np.array([1.0]), np.array([-1.0])):
        assert np.isfinite(paged_attention(AttentionQuery(q, 3, ids), storage)).all()
        assert np.isfinite(contiguous_attention(q, K, V)).all()


def test_paged_rejects_dangling_block():
    bm = BlockManager(4, 2)
    storage = KvStorage(4, 1, 1, 2, 2, bm.gpu.ref_counts)
    t = bm.allocate(3)
    ids = list(t.block_ids)
    bm.free(t)
    with pytest.raises(DanglingBlock):
        paged_attention(AttentionQuery(np.ones(2), 3, ids), storage)


def test_batch_kernel_matches_reference():
    rng = np.random.default_rng(9)
    storage = KvStorage(30, 2, 3, 4, 4)
    storage.data[:] = rng.normal(size=storage.data.shape)
    ids = np.array([[4, 9, 2, 2], [17, 3, 8, 21], [5, 5, 5, 5]])
    lens = np.array([9, 16, 1])
    q = rng.normal(size=(3, 3, 4))
    out = paged_attention_batch(q, ids, lens, storage, layer=1)
    for i in range(3):
        for h in range(3):
            ref = paged_attention(AttentionQuery(q[i, h], int(lens[i]), ids[i].tolist()), storage, 1, h)
            assert np.abs(out[i, h] - ref).max() <= 1e-12


def test_write_then_read_and_isolation():
    bm = BlockManager(2, 4)
    storage = KvStorage(2, 1, 1, 3, 4, bm.gpu.ref_counts)
    t = bm.allocate(4)
    b = t.block_ids[0]
    storage.data[b] = 7.0
    before = storage.data[b].copy()
    k, v = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
    write_kv(storage, b, 3, 0, 0, k, v)
    rk, rv = read_kv(storage, b, 3, 0, 0)
    assert np.array_equal(rk, k) and np.array_equal(rv, v)
    assert np.array_equal(storage.data[b, 0, 0, :3], before[0, 0, :3])


def test_write_to_shared_block_is_fatal():
    bm = BlockManager(4, 4)
    storage = KvStorage(4, 1, 1, 2, 4, bm.gpu.ref_counts)
    t = bm.allocate(3)
    bm.fork(t)
    with pytest.raises(CowViolation):
        write_kv(storage, t.block_ids[0], 3, 0, 0, np.zeros(2), np.zeros(2))
    cache = PagedKvCache(storage)
    with pytest.raises(CowViolation):
        cache.write_range(0, t, 2, np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))


def test_cow_copy_duplicates_block():
    bm = BlockManager(6, 4)
    storage = KvStorage(6, 2, 2, 3, 4, bm.gpu.ref_counts)
    a = bm.allocate(3)
    storage.data[a.block_ids[0]] = np.random.default_rng(2).normal(size=storage.data.shape[1:])
    b = bm.fork(a)
    r = bm.append_slot(b)
    execute_copy(r.cow, storage)
    src, dst = r.cow.src_block, r.cow.dst_block
    assert np.array_equal(storage.data[dst, :, :, :3], storage.data[src, :, :, :3])


def test_empty_swap_directive_is_noop():
    storage = KvStorage(2, 1, 1, 2, 2)
    storage.data[:] = 1.0
    execute_copy(SwapDirective(SwapDirection.OUT, ()), storage)
    assert (storage.data == 1.0).all()
