import itertools
import json

import pytest

from ract.core import (
    CandidateList,
    DuplicateIndex,
    LengthMismatch,
    MissingIndex,
    OutOfRange,
    Passage,
    Query,
    Ranking,
    apply_ranking,
    candidates_to_record,
    read_candidates,
    validate_ranking,
)

from .conftest import make_candidates


def test_validate_examples():
    assert validate_ranking([4, 2, 3, 1], 4) == Ranking((4, 2, 3, 1))
    assert validate_ranking([1], 1).order == (1,)
    with pytest.raises(DuplicateIndex) as e:
        validate_ranking([4, 2, 2, 1], 4)
    assert e.value.index == 2


def test_validate_error_kinds():
    with pytest.raises(OutOfRange) as e:
        validate_ranking([1, 5, 2, 3], 4)
    assert e.value.index == 5
    with pytest.raises(OutOfRange):
        validate_ranking([0, 1], 2)
    with pytest.raises(MissingIndex) as e:
        validate_ranking([3, 1], 4)
    assert e.value.index == 2
    with pytest.raises(ValueError):
        validate_ranking([], 0)


@pytest.mark.parametrize("n", range(1, 6))
def test_validate_accepts_exactly_permutations(n):
    # every tuple over 0..n+1 of length n-1..n+1 that is a permutation must pass, all else fail
    perms = set(itertools.permutations(range(1, n + 1)))
    accepted = 0
    for length in (n - 1, n, n + 1):
        for cand in itertools.product(range(0, n + 2), repeat=length):
            try:
                validate_ranking(cand, n)
                accepted += 1
                assert cand in perms
            except (DuplicateIndex, MissingIndex, OutOfRange):
                assert cand not in perms
    assert accepted == len(perms)


def test_apply_ranking(candidates3):
    assert apply_ranking(candidates3, Ranking((3, 1, 2))).docids == ["C", "A", "B"]
    single = make_candidates(1)
    assert apply_ranking(single, Ranking((1,))).docids == single.docids
    two = CandidateList(Query("q", "x"), (Passage("A", "a"), Passage("B", "b")))
    swap = Ranking((2, 1))
    assert apply_ranking(apply_ranking(two, swap), swap).docids == ["A", "B"]
    with pytest.raises(LengthMismatch):
        apply_ranking(candidates3, Ranking((1, 2)))


@pytest.mark.parametrize("perm", list(itertools.permutations(range(1, 5))))
def test_apply_preserves_docids(perm):
    c = make_candidates(4)
    out = apply_ranking(c, Ranking(perm))
    assert sorted(out.docids) == sorted(c.docids)
    assert out.qid == c.qid


def test_candidate_invariants():
    with pytest.raises(ValueError):
        CandidateList(Query("q", "x"), ())
    with pytest.raises(ValueError):
        CandidateList(Query("q", "x"), (Passage("A", "a"), Passage("A", "b")))
    with pytest.raises(LengthMismatch):
        CandidateList(Query("q", "x"), (Passage("A", "a"),), (1.0, 2.0))
    with pytest.raises(ValueError):
        Query("has space", "x")
    with pytest.raises(ValueError):
        Query("q", "")


def test_candidate_file_roundtrip(tmp_path):
    c = CandidateList(Query("q7", "café?"), (Passage("A", "é"), Passage("B", "b")), (2.0, 1.5))
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(candidates_to_record(c), ensure_ascii=False) + "\n", encoding="utf-8")
    (back,) = read_candidates(path)
    assert back == c


def test_candidate_file_reports_line(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"qid": "q1", "query": "x", "passages": []}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_candidates(path)
