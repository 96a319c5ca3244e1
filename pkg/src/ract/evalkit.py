"""TREC run/qrels handling, nDCG@k and paired significance testing."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from scipy import stats

from .core import atomic_write

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.05


class EvalError(ValueError):
    pass


class ParseError(EvalError):
    def __init__(self, line: int, reason: str, path: str | Path | None = None):
        where = f"{path}:{line}" if path is not None else f"line {line}"
        super().__init__(f"{where}: {reason}")
        self.line = line
        self.reason = reason


class NonContiguousRanks(EvalError):
    def __init__(self, qid: str):
        super().__init__(f"ranks for qid {qid} are not 1..m")
        self.qid = qid


class QidMissingFromQrels(EvalError):
    def __init__(self, qid: str):
        super().__init__(f"qid {qid} has no relevance judgments")
        self.qid = qid


class EmptyInput(EvalError):
    pass


class MismatchedQids(EvalError):
    pass


class DegenerateVariance(EvalError):
    pass


@dataclass(frozen=True)
class RunEntry:
    qid: str
    docid: str
    rank: int
    score: float
    tag: str

    def format(self) -> str:
        return f"{self.qid} Q0 {self.docid} {self.rank} {self.score:.6f} {self.tag}\n"


class QrelsTable:
    """Graded judgments keyed by ``(qid, docid)``."""

    def __init__(self, judgments: Mapping[tuple[str, str], int] | None = None):
        self.judgments: dict[tuple[str, str], int] = {}
        self._by_qid: dict[str, dict[str, int]] = defaultdict(dict)
        for (qid, docid), grade in (judgments or {}).items():
            self.add(qid, docid, grade)

    def add(self, qid: str, docid: str, grade: int) -> None:
        if grade < 0:
            raise ValueError(f"negative grade for ({qid}, {docid})")
        if (qid, docid) in self.judgments:
            raise ValueError(f"duplicate judgment for ({qid}, {docid})")
        self.judgments[(qid, docid)] = int(grade)
        self._by_qid[qid][docid] = int(grade)

    def __contains__(self, qid: str) -> bool:
        return qid in self._by_qid

    def for_qid(self, qid: str) -> dict[str, int]:
        return dict(self._by_qid.get(qid, {}))

    @property
    def qids(self) -> list[str]:
        return list(self._by_qid)

    @classmethod
    def from_nested(cls, nested: Mapping[str, Mapping[str, int]]) -> QrelsTable:
        return cls({(q, d): g for q, docs in nested.items() for d, g in docs.items()})


# --- metrics ---


def _gain(grade: int, gain: str) -> float:
    if gain == "linear":
        return float(grade)
    if gain == "exponential":
        return 2.0**grade - 1.0
    raise ValueError(f"unknown gain {gain!r}")


def group_run(run: Iterable[RunEntry]) -> dict[str, list[RunEntry]]:
    """Entries per qid, sorted by rank; qids in first-seen order."""
    grouped: dict[str, list[RunEntry]] = {}
    for e in run:
        grouped.setdefault(e.qid, []).append(e)
    for entries in grouped.values():
        entries.sort(key=lambda e: e.rank)
    return grouped


def missing_qids(run: Iterable[RunEntry], qrels: QrelsTable) -> list[str]:
    return [q for q in group_run(run) if q not in qrels]


def ndcg_at_k(
    run: Iterable[RunEntry],
    qrels: QrelsTable,
    k: int = 10,
    gain: str = "linear",
    strict: bool = False,
) -> dict[str, float]:
    """Per-query nDCG@k with a log2(rank + 1) discount.

    Unjudged documents count as grade 0, and a query whose ideal DCG is 0
    scores 0.0. Queries absent from the qrels are skipped with a warning,
    or raise :class:`QidMissingFromQrels` when ``strict`` is set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    out = {}
    for qid, entries in group_run(run).items():
        if qid not in qrels:
            if strict:
                raise QidMissingFromQrels(qid)
            logger.warning("qid %s missing from qrels, skipped", qid)
            continue
        grades = qrels.for_qid(qid)
        dcg = math.fsum(
            _gain(grades.get(e.docid, 0), gain) / math.log2(i + 1) for i, e in enumerate(entries[:k], 1)
        )
        ideal = sorted(grades.values(), reverse=True)[:k]
        idcg = math.fsum(_gain(g, gain) / math.log2(i + 1) for i, g in enumerate(ideal, 1))
        out[qid] = dcg / idcg if idcg > 0 else 0.0
    return out


def mean_metric(per_query: Mapping[str, float]) -> float:
    if not per_query:
        raise EmptyInput("no per-query values to average")
    return math.fsum(per_query[q] for q in sorted(per_query)) / len(per_query)


def as_percent(value: float) -> str:
    """Fraction shown the way result tables print it: ``0.6 -> '60.0'``."""
    return f"{value * 100:.1f}"


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE_LEVEL


def paired_t_test(a: Mapping[str, float], b: Mapping[str, float]) -> TTestResult:
    """Two-sided paired t-test on per-query differences ``a - b``."""
    if set(a) != set(b):
        only = sorted(set(a) ^ set(b))
        raise MismatchedQids(f"qid sets differ, e.g. {only[:5]}")
    qids = sorted(a)
    n = len(qids)
    if n < 2:
        raise EmptyInput("paired t-test needs at least 2 queries")
    diffs = [a[q] - b[q] for q in qids]
    mean = math.fsum(diffs) / n
    var = math.fsum((d - mean) ** 2 for d in diffs) / (n - 1)
    sd = math.sqrt(var)
    # float noise in a - b can leave a tiny spread where the inputs meant none
    if sd <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateVariance("all per-query differences are equal")
    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    p = 2.0 * stats.t.sf(abs(t), dof)
    return TTestResult(t, float(p), dof)


# --- file formats ---


def format_run(entries: Iterable[RunEntry]) -> str:
    return "".join(e.format() for e in entries)


def write_run(path: str | Path, entries: Iterable[RunEntry]) -> None:
    atomic_write(path, format_run(entries))


def parse_run(lines: Iterable[str], path: str | Path | None = None) -> list[RunEntry]:
    entries = []
    seen: dict[str, set[str]] = defaultdict(set)
    line_of: dict[tuple[str, str], int] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(lineno, "field count", path)
        qid, q0, docid, rank_s, score_s, tag = fields
        try:
            rank = int(rank_s)
        except ValueError:
            raise ParseError(lineno, f"rank {rank_s!r} is not an integer", path) from None
        try:
            score = float(score_s)
        except ValueError:
            raise ParseError(lineno, f"score {score_s!r} is not a number", path) from None
        if not math.isfinite(score):
            raise ParseError(lineno, "score is not finite", path)
        if docid in seen[qid]:
            raise ParseError(lineno, f"docid {docid} repeated for qid {qid}", path)
        seen[qid].add(docid)
        line_of[(qid, docid)] = lineno
        entries.append(RunEntry(qid, docid, rank, score, tag))
    for qid, group in group_run(entries).items():
        if [e.rank for e in group] != list(range(1, len(group) + 1)):
            raise NonContiguousRanks(qid)
        for prev, cur in zip(group, group[1:]):
            if cur.score > prev.score:
                raise ParseError(line_of[(qid, cur.docid)], f"score increases at rank {cur.rank} for qid {qid}", path)
    return entries


def read_run(path: str | Path) -> list[RunEntry]:
    with open(path, encoding="utf-8") as f:
        return parse_run(f, path)


def parse_qrels(lines: Iterable[str], path: str | Path | None = None) -> QrelsTable:
    table = QrelsTable()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(lineno, "field count", path)
        qid, _, docid, grade_s = fields
        try:
            grade = int(grade_s)
        except ValueError:
            raise ParseError(lineno, f"grade {grade_s!r} is not an integer", path) from None
        try:
            table.add(qid, docid, grade)
        except ValueError as e:
            raise ParseError(lineno, str(e), path) from None
    return table


def read_qrels(path: str | Path) -> QrelsTable:
    with open(path, encoding="utf-8") as f:
        return parse_qrels(f, path)


def format_qrels(qrels: QrelsTable) -> str:
    return "".join(f"{q} 0 {d} {g}\n" for (q, d), g in qrels.judgments.items())


def write_qrels(path: str | Path, qrels: QrelsTable) -> None:
    atomic_write(path, format_qrels(qrels))


def run_from_ranking(qid: str, docids: Sequence[str], scores: Mapping[str, float], tag: str) -> list[RunEntry]:
    """Run rows for one query, ``docids`` already in final rank order."""
    return [RunEntry(qid, d, r, scores[d], tag) for r, d in enumerate(docids, 1)]


def metric_report(per_query: Mapping[str, float], k: int) -> list[dict]:
    """Per-query records followed by one summary record."""
    recs: list[dict] = [{"qid": q, f"ndcg@{k}": v} for q, v in per_query.items()]
    recs.append({"mean": mean_metric(per_query), "n_queries": len(per_query)})
    return recs
