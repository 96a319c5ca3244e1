"""Sliding-window orchestration over candidate lists longer than one prompt."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .core import CandidateList, LengthMismatch, Ranking, validate_ranking

logger = logging.getLogger(__name__)

WindowReranker = Callable[[CandidateList], Ranking]


class InvalidConfig(ValueError):
    pass


class WindowRerankerFailure(RuntimeError):
    def __init__(self, window: "WindowSpec", cause: BaseException):
        super().__init__(f"window [{window.start}, {window.end}) failed: {cause}")
        self.window = window
        self.cause = cause


@dataclass(frozen=True)
class WindowSpec:
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 20
    stride: int = 10

    def __post_init__(self) -> None:
        if not 1 <= self.stride <= self.window_size:
            raise InvalidConfig(f"need 1 <= stride <= window_size, got {self.stride}/{self.window_size}")


# window/stride settings swept in the robustness experiments
TABLE4_CONFIGS = (WindowConfig(2, 1), WindowConfig(10, 5), WindowConfig(20, 10))


def plan_windows(n: int, cfg: WindowConfig) -> list[WindowSpec]:
    """Windows in processing order, starting from the tail of the list.

    Window ends step back by ``stride`` from ``n``; the first window that
    reaches offset 0 is the last one and may be shorter than the others.
    """
    if n < 1:
        raise InvalidConfig(f"n must be >= 1, got {n}")
    if not isinstance(cfg, WindowConfig):
        raise InvalidConfig("cfg must be a WindowConfig")
    windows = []
    end = n
    while True:
        start = max(0, end - cfg.window_size)
        windows.append(WindowSpec(start, end))
        if start == 0:
            return windows
        end -= cfg.stride


def rerank_sliding(
    candidates: CandidateList,
    window_reranker: WindowReranker,
    cfg: WindowConfig = WindowConfig(),
) -> tuple[Ranking, dict[str, float]]:
    """One tail-first pass of window reranking over ``candidates``.

    After each window the working list is rewritten in that window's range,
    so strong passages bubble toward the head. Every passage a window ranks
    gets the score ``n - p`` for its absolute position ``p``; later windows
    overwrite earlier scores, which leaves each passage with its last
    window's score.

    Returns:
        The final order as a Ranking over the original candidate indices,
        and the per-docid score table.
    """
    n = len(candidates)
    working = list(range(n))
    scores: dict[str, float] = {}
    for w in plan_windows(n, cfg):
        positions = working[w.start:w.end]
        sub = candidates.subset(positions)
        try:
            r = window_reranker(sub)
            if len(r) != len(sub):
                raise LengthMismatch(len(sub), len(r))
            r = validate_ranking(r.order, len(sub))
        except Exception as e:
            raise WindowRerankerFailure(w, e) from e
        working[w.start:w.end] = [positions[i - 1] for i in r.order]
        for p in range(w.start, w.end):
            scores[candidates.passages[working[p]].docid] = float(n - p)
    return Ranking(tuple(i + 1 for i in working)), scores


def rerank_many(
    lists: Sequence[CandidateList],
    make_reranker: Callable[[CandidateList], WindowReranker],
    cfg: WindowConfig = WindowConfig(),
    parallelism: int = 4,
) -> list[tuple[Ranking, dict[str, float]]]:
    """Rerank several queries concurrently; results keep input order.

    ``make_reranker`` builds a fresh window reranker per query so that no
    mutable state is shared between queries.
    """
    if parallelism < 1:
        raise InvalidConfig("parallelism must be >= 1")

    def one(c: CandidateList) -> tuple[Ranking, dict[str, float]]:
        return rerank_sliding(c, make_reranker(c), cfg)

    if parallelism == 1 or len(lists) <= 1:
        return [one(c) for c in lists]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, lists))
