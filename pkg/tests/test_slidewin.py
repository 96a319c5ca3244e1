import random

import pytest

from ract.core import Ranking, apply_ranking
from ract.cotparse import RepairPolicy, extract_final_ranking
from ract.promptgen import PromptFormat
from ract.slidewin import (
    TABLE4_CONFIGS,
    InvalidConfig,
    WindowConfig,
    WindowRerankerFailure,
    WindowSpec,
    plan_windows,
    rerank_many,
    rerank_sliding,
)

from .conftest import make_candidates, random_truth


def oracle(truth):
    """Window reranker that sorts by known relevance."""

    def rerank(sub):
        order = sorted(range(1, len(sub) + 1), key=lambda i: -truth[sub.passages[i - 1].docid])
        return Ranking(tuple(order))

    return rerank


def identity(sub):
    return Ranking.identity(len(sub))


def test_plan_examples():
    plan = plan_windows(100, WindowConfig(20, 10))
    assert [(w.start, w.end) for w in plan] == [(80 - 10 * i, 100 - 10 * i) for i in range(9)]
    assert plan_windows(15, WindowConfig()) == [WindowSpec(0, 15)]
    assert plan_windows(25, WindowConfig()) == [WindowSpec(5, 25), WindowSpec(0, 15)]


@pytest.mark.parametrize("cfg", TABLE4_CONFIGS + (WindowConfig(7, 7), WindowConfig(5, 3)))
def test_plan_invariants(cfg):
    for n in range(1, 120):
        plan = plan_windows(n, cfg)
        assert plan[0].end == n and plan[-1].start == 0
        assert all(0 <= w.start < w.end <= n and len(w) <= cfg.window_size for w in plan)
        assert sum(1 for w in plan if w.start == 0) == 1
        covered = set()
        for w in plan:
            covered.update(range(w.start, w.end))
        assert covered == set(range(n))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        WindowConfig(10, 11)
    with pytest.raises(InvalidConfig):
        WindowConfig(10, 0)
    with pytest.raises(InvalidConfig):
        plan_windows(0, WindowConfig())


def test_perfect_oracle_recovers_top10():
    rng = random.Random(11)
    c = make_candidates(100)
    truth = random_truth(rng, c.docids)
    ranking, _ = rerank_sliding(c, oracle(truth), WindowConfig(20, 10))
    got = apply_ranking(c, ranking).docids[:10]
    brute = sorted(c.docids, key=lambda d: -truth[d])[:10]
    assert got == brute


def test_identity_is_fixed_point():
    c = make_candidates(57)
    ranking, scores = rerank_sliding(c, identity, WindowConfig(20, 10))
    assert ranking == Ranking.identity(57)
    assert [scores[d] for d in c.docids] == [57.0 - p for p in range(57)]


def test_single_window_degeneracy():
    rng = random.Random(2)
    c = make_candidates(12)
    truth = random_truth(rng, c.docids)
    ranking, _ = rerank_sliding(c, oracle(truth), WindowConfig(20, 10))
    assert ranking == oracle(truth)(c)


@pytest.mark.parametrize("cfg", TABLE4_CONFIGS)
def test_best_passage_bubbles_to_top(cfg):
    rng = random.Random(cfg.window_size)
    for n in range(1, 201):
        c = make_candidates(n)
        truth = random_truth(rng, c.docids)
        ranking, _ = rerank_sliding(c, oracle(truth), cfg)
        assert c.passages[ranking.order[0] - 1].docid == max(truth, key=truth.get)


def test_scores_are_last_window_rank_surrogate():
    rng = random.Random(5)
    c = make_candidates(73)
    truth = random_truth(rng, c.docids)
    ranking, scores = rerank_sliding(c, oracle(truth), WindowConfig(10, 5))
    final = apply_ranking(c, ranking).docids
    assert [scores[d] for d in final] == [float(73 - p) for p in range(73)]


def test_fuzzed_outputs_through_repair_stay_permutations():
    rng = random.Random(9)
    pieces = ["[", "]", ",", " ", ">", "Final Answer:", "Step 1:", "\n"] + [str(i) for i in range(0, 25)]

    def fuzz(sub):
        text = "".join(rng.choice(pieces) for _ in range(rng.randint(0, 40)))
        r, _ = extract_final_ranking(text, len(sub), PromptFormat.COT_EXPLICIT, RepairPolicy.REPAIR)
        return r

    for _ in range(300):
        n = rng.randint(1, 200)
        cfg = rng.choice(TABLE4_CONFIGS)
        c = make_candidates(n)
        ranking, scores = rerank_sliding(c, fuzz, cfg)
        assert sorted(ranking.order) == list(range(1, n + 1))
        assert set(scores) == set(c.docids)


def test_bad_window_output_is_wrapped():
    def broken(sub):
        return Ranking((1,) * len(sub))

    with pytest.raises(WindowRerankerFailure) as e:
        rerank_sliding(make_candidates(30), broken, WindowConfig(20, 10))
    assert e.value.window == WindowSpec(10, 30)

    def raises(sub):
        raise ValueError("model said no")

    with pytest.raises(WindowRerankerFailure):
        rerank_sliding(make_candidates(3), raises)


def test_rerank_many_is_deterministic_and_ordered():
    rng = random.Random(4)
    lists = [make_candidates(rng.randint(1, 90), qid=f"q{i}") for i in range(12)]
    truths = {c.qid: random_truth(rng, c.docids) for c in lists}
    seq = rerank_many(lists, lambda c: oracle(truths[c.qid]), WindowConfig(20, 10), parallelism=1)
    par = rerank_many(lists, lambda c: oracle(truths[c.qid]), WindowConfig(20, 10), parallelism=4)
    assert seq == par
    assert [len(r) for r, _ in par] == [len(c) for c in lists]
