import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from helpers import paged, small_model
from oracles import buddy_block
from pagedkv.baselines import (
    ArenaFull,
    BuddyAllocator,
    ContiguousMemory,
    ReservationPolicy,
    next_pow2,
    reservation_size,
)
from pagedkv.core import DecodingConfig
from pagedkv.decoding import new_group, run_group

MODEL = small_model()


def test_next_pow2():
    assert [next_pow2(n) for n in (1, 2, 3, 25, 32, 33)] == [1, 2, 4, 32, 32, 64]
    with pytest.raises(ValueError):
        next_pow2(0)


def test_pow2_reserves_32_for_25_outputs():
    assert reservation_size(10, 25, "pow2", 2048) - 10 == 32


def test_reservation_policies():
    assert reservation_size(10, 25, "oracle", 2048) == 35
    assert reservation_size(10, 25, "max", 2048) == 2048
    # pow2 never reserves beyond the model maximum
    assert reservation_size(1500, 520, "pow2", 2048) == 2048
    assert reservation_size(100, 100, ReservationPolicy.MAX, 128) == 200


def test_buddy_split_and_merge():
    b = BuddyAllocator(16)
    a = b.alloc(3)
    assert a == 0 and b.block_size_at(a) == 4
    c = b.alloc(4)
    assert c == 4
    d = b.alloc(8)
    assert d == 8
    assert not b.can_alloc(1)
    with pytest.raises(ArenaFull):
        b.alloc(1)
    for off in (a, c, d):
        b.free(off)
    assert b.largest_free == 16 and b.free_slots == 16


def test_buddy_non_pow2_arena_is_chunked():
    b = BuddyAllocator(24)  # 16 + 8
    assert b.largest_free == 16
    assert b.alloc(16) == 0 and b.alloc(8) == 16
    b.free(16)
    b.free(0)
    b.check_invariants()
    assert not b.can_alloc(17)


def test_buddy_double_free():
    b = BuddyAllocator(8)
    off = b.alloc(2)
    b.free(off)
    with pytest.raises(ValueError):
        b.free(off)


class BuddyMachine(RuleBasedStateMachine):
    """Compare against a bitmap: extents must be aligned, disjoint and power-of-two sized."""

    def __init__(self):
        super().__init__()
        self.size = 48
        self.b = BuddyAllocator(self.size)
        self.used = np.zeros(self.size, dtype=bool)
        self.live = {}

    @rule(n=st.integers(1, 20))
    def alloc(self, n):
        if not self.b.can_alloc(n):
            with pytest.raises(ArenaFull):
                self.b.alloc(n)
            return
        off = self.b.alloc(n)
        sz = self.b.block_size_at(off)
        assert sz == buddy_block(n) and off % sz == 0
        assert not self.used[off : off + sz].any()
        self.used[off : off + sz] = True
        self.live[off] = sz

    @precondition(lambda self: self.live)
    @rule(data=st.data())
    def free(self, data):
        off = data.draw(st.sampled_from(sorted(self.live)))
        sz = self.live.pop(off)
        self.b.free(off)
        self.used[off : off + sz] = False

    @invariant()
    def conserved(self):
        self.b.check_invariants()
        assert self.b.free_slots == self.size - int(self.used.sum())

    def teardown(self):
        for off in list(self.live):
            self.b.free(off)
        assert self.b.largest_free == 32 and self.b.free_slots == self.size


TestBuddy = BuddyMachine.TestCase
TestBuddy.settings = settings(max_examples=60, stateful_step_count=40, deadline=None)


def _group(prompt_len, dec, gid=0):
    return new_group(gid, 0.0, list(range(1, prompt_len + 1)), dec, 0, gid)


def test_waste_classification_oracle_and_pow2():
    for policy, res in (("oracle", 35), ("pow2", 42)):
        mem = ContiguousMemory(MODEL.config, 256, policy)
        g = _group(10, DecodingConfig.greedy(25))
        mem.admit(g)
        w = mem.waste()
        assert w.token_states == 10
        assert w.reserved == 25
        assert w.internal_frag == res - 35
        assert w.external_frag == 64 - res
        assert w.total == 256


def test_waste_classification_max():
    mem = ContiguousMemory(MODEL.config, 512, "max")  # max_seq_len 256
    mem.admit(_group(10, DecodingConfig.greedy(25)))
    w = mem.waste()
    assert (w.token_states, w.reserved, w.internal_frag, w.external_frag) == (10, 25, 221, 0)


def test_group_reserves_every_extent_up_front():
    mem = ContiguousMemory(MODEL.config, 256, "oracle")
    g = _group(6, DecodingConfig.sample(3, 1.0, 10))
    assert mem.can_admit(g)
    mem.admit(g)
    assert mem.buddy.free_slots == 256 - 3 * 16
    big = _group(6, DecodingConfig.sample(16, 1.0, 10), gid=1)
    assert not mem.can_admit(big)
    assert not mem.fits_ever(_group(6, DecodingConfig.sample(17, 1.0, 10), gid=2))


@pytest.mark.parametrize("policy", ["oracle", "pow2", "max"])
@pytest.mark.parametrize(
    "dec", [DecodingConfig.greedy(12), DecodingConfig.sample(3, 0.8, 12), DecodingConfig.beam(3, 12)]
)
def test_contiguous_outputs_equal_paged(policy, dec):
    prompt = 9
    ref = run_group(MODEL, paged(MODEL), _group(prompt, dec)).outputs()
    mem = ContiguousMemory(MODEL.config, 1024, policy)
    assert run_group(MODEL, mem, _group(prompt, dec)).outputs() == ref
    assert mem.buddy.free_slots == 1024
    mem.check_invariants()


def test_beam_fork_copies_are_charged():
    mem = ContiguousMemory(MODEL.config, 1024, "oracle")
    run_group(MODEL, mem, _group(5, DecodingConfig.beam(3, 6)))
    assert mem.copy_stats.copy_slots >= 2 * 5


def test_contiguous_never_preempts():
    mem = ContiguousMemory(MODEL.config, 64, "oracle")
    assert mem.preemptible is False
    assert not mem.can_swap_in(None) and not mem.can_restore(None)
    with pytest.raises(NotImplementedError):
        mem.swap_out(None)


@settings(max_examples=30)
@given(p=st.integers(1, 100), o=st.integers(1, 100), policy=st.sampled_from(["oracle", "pow2", "max"]))
def test_waste_partitions_the_arena(p, o, policy):
    mem = ContiguousMemory(MODEL.config, 1000, policy)
    g = _group(p, DecodingConfig.greedy(o))
    if not mem.can_admit(g):
        return
    mem.admit(g)
    w = mem.waste()
    assert w.total == 1000 and min(w.as_dict().values()) >= 0
    assert w.token_states + w.reserved == p + o
