import pytest
from hypothesis import given, strategies as st

from pagedkv.core import (
    ALLOWED_TRANSITIONS,
    DecodingConfig,
    DecodingKind,
    InvalidTransition,
    Sequence,
    SequenceGroup,
    SequenceStatus,
    num_logical_blocks,
    sequence_total_len,
)

S = SequenceStatus


def test_total_len_examples():
    assert sequence_total_len(Sequence(0, list(range(7)))) == 7
    assert sequence_total_len(Sequence(0, [1, 2, 3], [4, 5, 6, 7, 8])) == 8


@pytest.mark.parametrize("n,B,want", [(7, 4, 2), (8, 4, 2), (9, 4, 3), (0, 4, 0), (1, 16, 1)])
def test_num_logical_blocks_examples(n, B, want):
    assert num_logical_blocks(n, B) == want


def test_num_logical_blocks_rejects_zero_block_size():
    with pytest.raises(ValueError):
        num_logical_blocks(5, 0)


@given(st.integers(1, 10_000), st.integers(1, 512))
def test_num_logical_blocks_padding_bound(n, B):
    assert 0 <= num_logical_blocks(n, B) * B - n <= B - 1


@given(st.integers(0, 5000), st.integers(0, 5000), st.integers(1, 300))
def test_num_logical_blocks_monotone(a, b, B):
    lo, hi = sorted((a, b))
    assert num_logical_blocks(lo, B) <= num_logical_blocks(hi, B)


def test_status_dag_allows_exactly_the_lifecycle():
    allowed = {(a, b) for a, bs in ALLOWED_TRANSITIONS.items() for b in bs}
    assert allowed == {
        (S.WAITING, S.RUNNING),
        (S.RUNNING, S.SWAPPED_OUT),
        (S.RUNNING, S.PREEMPTED_FOR_RECOMPUTE),
        (S.RUNNING, S.FINISHED),
        (S.SWAPPED_OUT, S.RUNNING),
        (S.PREEMPTED_FOR_RECOMPUTE, S.WAITING),
    }


@pytest.mark.parametrize("a", list(S))
@pytest.mark.parametrize("b", list(S))
def test_set_status_enforces_dag(a, b):
    seq = Sequence(0, [1], status=a)
    if b in ALLOWED_TRANSITIONS[a]:
        seq.set_status(b)
        assert seq.status is b and seq.status_log == [a, b]
    else:
        with pytest.raises(InvalidTransition):
            seq.set_status(b)


def test_decoding_config_validation():
    with pytest.raises(ValueError):
        DecodingConfig.sample(n=0)
    with pytest.raises(ValueError):
        DecodingConfig.beam(k=0)
    with pytest.raises(ValueError):
        DecodingConfig.greedy(max_new_tokens=0)
    with pytest.raises(ValueError):
        DecodingConfig.sample(2, temperature=0.0)


@pytest.mark.parametrize(
    "cfg",
    [DecodingConfig.greedy(5), DecodingConfig.sample(3, 0.7, 9), DecodingConfig.beam(4, 12)],
)
def test_decoding_config_roundtrip(cfg):
    assert DecodingConfig.from_dict(cfg.to_dict()) == cfg


def test_decoding_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        DecodingConfig.from_dict({"kind": "greedy", "max_new_tokens": 3, "top_p": 0.9})


def test_num_seqs():
    assert DecodingConfig.greedy().num_seqs == 1
    assert DecodingConfig.sample(5).num_seqs == 5
    assert DecodingConfig.beam(3).num_seqs == 3


def test_num_cached_excludes_pending_token():
    s = Sequence(0, [1, 2, 3])
    assert s.num_cached == 3
    s.generated.append(9)
    assert s.num_cached == 3 and len(s) == 4


def test_group_outputs_ranked_for_beam():
    g = SequenceGroup(0, 0.0, [1], DecodingConfig.beam(2, 1))
    a = Sequence(1, [1], [5], cumulative_logprob=-2.0)
    b = Sequence(2, [1], [6], cumulative_logprob=-1.0)
    g.finished = [a, b]
    assert g.outputs() == [[6], [5]]
    assert g.decoding.kind is DecodingKind.BEAM
