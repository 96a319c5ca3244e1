"""Glue between prompts, a text generator, the parser and sliding windows."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .core import CandidateList, Ranking
from .cotparse import RepairPolicy, RepairReport, extract_final_ranking
from .evalkit import RunEntry, run_from_ranking
from .llmgate import MockOracleConfig, mock_complete
from .promptgen import PromptFormat, RenderedPrompt, build_prompt
from .slidewin import WindowConfig, WindowReranker, rerank_many

# (prompt, docids of the passages in prompt order) -> completion text
Generate = Callable[[RenderedPrompt, Sequence[str]], str]


@dataclass
class RepairLog:
    """Thread-safe sink for per-window repair reports."""

    records: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, qid: str, window: int, report: RepairReport) -> None:
        with self._lock:
            self.records.append(report.to_record(qid, window))

    def sorted_records(self) -> list[dict]:
        with self._lock:
            return sorted(self.records, key=lambda r: (r["qid"], r["window"]))

    @property
    def repaired_qids(self) -> set[str]:
        return {r["qid"] for r in self.records}


def llm_window_reranker(
    generate: Generate,
    format: PromptFormat,
    policy: RepairPolicy = RepairPolicy.REPAIR,
    max_window: int = 20,
    log: RepairLog | None = None,
    system: str | None = None,
) -> WindowReranker:
    """Window reranker that prompts ``generate`` and parses its answer.

    Windows are numbered from 0 in the order they are called; a report is
    logged only when a repair rule fired.
    """
    count = 0

    def rerank(sub: CandidateList) -> Ranking:
        nonlocal count
        window = count
        count += 1
        prompt = build_prompt(sub, format, max_window=max_window, system=system)
        text = generate(prompt, sub.docids)
        ranking, report = extract_final_ranking(text, len(sub), format, policy)
        if report.rules and log is not None:
            log.add(sub.qid, window, report)
        return ranking

    return rerank


def mock_generator(cfg: MockOracleConfig) -> Generate:
    return lambda prompt, docids: mock_complete(cfg, prompt, docids)


def rerank_to_run(
    lists: Sequence[CandidateList],
    generator_for: Callable[[CandidateList], Generate],
    cfg: WindowConfig = WindowConfig(),
    format: PromptFormat = PromptFormat.COT_EXPLICIT,
    policy: RepairPolicy = RepairPolicy.REPAIR,
    parallelism: int = 4,
    tag: str = "ract",
    log: RepairLog | None = None,
) -> list[RunEntry]:
    """Sliding-window rerank every query and emit TREC run rows."""

    def make(c: CandidateList) -> WindowReranker:
        return llm_window_reranker(generator_for(c), format, policy, cfg.window_size, log)

    results = rerank_many(lists, make, cfg, parallelism)
    run: list[RunEntry] = []
    for c, (ranking, scores) in zip(lists, results):
        docids = [c.passages[i - 1].docid for i in ranking.order]
        run.extend(run_from_ranking(c.qid, docids, scores, tag))
    return run


def mock_configs(
    truth: Mapping[str, Mapping[str, float]],
    noise_stddev: float,
    malform_rate: float,
    format: PromptFormat,
    seed: int,
) -> Callable[[CandidateList], Generate]:
    """Per-query mock generators drawing true scores from ``truth[qid]``."""

    def for_query(c: CandidateList) -> Generate:
        if c.qid not in truth:
            raise KeyError(f"no mock scores for qid {c.qid}")
        return mock_generator(MockOracleConfig(truth[c.qid], noise_stddev, malform_rate, format, seed))

    return for_query
