from __future__ import annotations

import random
import sys

import pytest

from ract.core import CandidateList, Passage, Query


def make_candidates(n: int, qid: str = "q1", prefix: str = "d") -> CandidateList:
    return CandidateList(
        Query(qid, f"query {qid}"),
        tuple(Passage(f"{prefix}{i:03d}", f"passage text {i}") for i in range(n)),
    )


def random_truth(rng: random.Random, docids) -> dict[str, float]:
    """Distinct true scores, so the brute-force sort has no ties."""
    values = rng.sample(range(10 * len(docids) + 10), len(docids))
    return {d: float(v) for d, v in zip(docids, values)}


@pytest.fixture
def candidates3() -> CandidateList:
    return CandidateList(
        Query("q1", "q"),
        (Passage("A", "alpha"), Passage("B", "beta"), Passage("C", "gamma")),
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
