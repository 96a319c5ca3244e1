"""Domain types and permutation helpers shared across the toolkit.

Candidate indices are 1-based wherever a user or a model can see them.
Docids, not indices, identify passages across windows.
"""

from __future__ import annotations

import contextlib
import json
import numbers
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence


class RankingError(ValueError):
    """Base class for permutation contract violations."""


class DuplicateIndex(RankingError):
    def __init__(self, index: int):
        super().__init__(f"duplicate index {index}")
        self.index = index


class MissingIndex(RankingError):
    def __init__(self, index: int):
        super().__init__(f"missing index {index}")
        self.index = index


class OutOfRange(RankingError):
    def __init__(self, index: int, n: int):
        super().__init__(f"index {index} outside 1..{n}")
        self.index = index
        self.n = n


class LengthMismatch(ValueError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"length mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


@dataclass(frozen=True)
class Query:
    qid: str
    text: str

    def __post_init__(self) -> None:
        if not self.qid or any(c.isspace() for c in self.qid):
            raise ValueError(f"invalid qid {self.qid!r}")
        if not self.text:
            raise ValueError(f"empty query text for qid {self.qid}")


@dataclass(frozen=True)
class Passage:
    docid: str
    text: str

    def __post_init__(self) -> None:
        if not self.docid:
            raise ValueError("empty docid")


@dataclass(frozen=True)
class CandidateList:
    """One query and its first-stage candidates, in retrieval order."""

    query: Query
    passages: tuple[Passage, ...]
    source_scores: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "passages", tuple(self.passages))
        if not self.passages:
            raise ValueError(f"empty candidate list for qid {self.query.qid}")
        seen: set[str] = set()
        for p in self.passages:
            if p.docid in seen:
                raise ValueError(f"duplicate docid {p.docid!r} for qid {self.query.qid}")
            seen.add(p.docid)
        if self.source_scores is not None:
            object.__setattr__(self, "source_scores", tuple(float(s) for s in self.source_scores))
            if len(self.source_scores) != len(self.passages):
                raise LengthMismatch(len(self.passages), len(self.source_scores))

    def __len__(self) -> int:
        return len(self.passages)

    @property
    def qid(self) -> str:
        return self.query.qid

    @property
    def docids(self) -> list[str]:
        return [p.docid for p in self.passages]

    def subset(self, positions: Sequence[int]) -> CandidateList:
        """Candidate list made of the passages at the given 0-based positions."""
        scores = None
        if self.source_scores is not None:
            scores = tuple(self.source_scores[i] for i in positions)
        return CandidateList(self.query, tuple(self.passages[i] for i in positions), scores)


@dataclass(frozen=True)
class Ranking:
    """A permutation of 1-based candidate indices, best first."""

    order: tuple[int, ...] = field()

    def __post_init__(self) -> None:
        object.__setattr__(self, "order", tuple(self.order))

    def __len__(self) -> int:
        return len(self.order)

    @classmethod
    def identity(cls, n: int) -> Ranking:
        return cls(tuple(range(1, n + 1)))


def validate_ranking(order: Iterable[int], n: int) -> Ranking:
    """Return a Ranking if ``order`` is exactly a permutation of 1..n.

    Elements are scanned left to right, so the error names the first
    offending index. A short list with no bad element raises
    MissingIndex for the smallest absent index.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    order = tuple(order)
    seen: set[int] = set()
    for i in order:
        if isinstance(i, bool) or not isinstance(i, numbers.Integral) or not 1 <= i <= n:
            raise OutOfRange(i, n)
        if i in seen:
            raise DuplicateIndex(i)
        seen.add(i)
    if len(seen) < n:
        raise MissingIndex(min(set(range(1, n + 1)) - seen))
    return Ranking(tuple(int(i) for i in order))


def apply_ranking(candidates: CandidateList, r: Ranking) -> CandidateList:
    """Reorder passages so position i holds original candidate ``r.order[i]``."""
    if len(r) != len(candidates):
        raise LengthMismatch(len(candidates), len(r))
    return candidates.subset([i - 1 for i in r.order])


# --- candidate ingestion file (one JSON record per line) ---


def candidates_from_record(rec: dict) -> CandidateList:
    passages = tuple(Passage(str(p["docid"]), p["text"]) for p in rec["passages"])
    return CandidateList(Query(str(rec["qid"]), rec["query"]), passages, rec.get("scores"))


def candidates_to_record(c: CandidateList) -> dict:
    rec = {
        "qid": c.qid,
        "query": c.query.text,
        "passages": [{"docid": p.docid, "text": p.text} for p in c.passages],
    }
    if c.source_scores is not None:
        rec["scores"] = list(c.source_scores)
    return rec


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line number, record) pairs, skipping blank lines."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                yield lineno, json.loads(line)


def read_candidates(path: str | Path) -> list[CandidateList]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(candidates_from_record(rec))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: bad candidate record: {e}") from e
    return out


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def atomic_write(path: str | Path, text: str) -> None:
    """Write ``text`` to ``path`` via a sibling temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
