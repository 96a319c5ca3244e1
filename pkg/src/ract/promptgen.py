"""Prompt rendering for the three listwise formats and their supervision targets."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import CandidateList, Ranking

DEFAULT_MAX_WINDOW = 20


class PromptFormat(str, enum.Enum):
    DIRECT_LIST = "DirectList"
    COT_EXPLICIT = "CoTExplicit"
    COT_IMPLICIT_FINAL = "CoTImplicitFinal"

    def __str__(self) -> str:
        return self.value


class TooManyPassages(ValueError):
    def __init__(self, n: int, max_n: int):
        super().__init__(f"{n} passages exceeds the window maximum of {max_n}")
        self.n = n
        self.max_n = max_n


class EmptyCandidateList(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    num_passages: int
    format: PromptFormat
    system: str | None = None


_HEADER = (
    "I will provide you with {num} passages, each indicated by a numerical identifier []. "
    "Rank the passages based on their relevance to the search query: {query}."
)

_COT_SELECTION = (
    "Rank the {num} passages by selecting the most relevant passage at each step from the "
    "remaining passages. After choosing the most relevant passage, remove it from the pool "
    "and continue ranking until all passages are ordered."
)

_COT_EXPLICIT_TAIL = """Instructions:
Start with the most relevant passage and select it from the full list.
For each following step, pick the most relevant passage from the remaining passages only.
List the selected passages by their identifiers at each step, one after the other, until all passages are ranked.
Example Output:
Step 1: [4]
Step 2: [4, 2]
Step 3: [4, 2, 3]
...
step {num}: [4,2,3,15,...,14]
Final Answer: [4, 2, 3,..., 14]
Only respond with each step and the final answer, ensuring each passage is included once and ranked in descending relevance."""

_COT_FINAL_TAIL = """Instructions:
Start with the most relevant passage and select it from the full list.
For each following step, pick the most relevant passage from the remaining passages only.
Carry out the steps without writing them down, then give only the complete ordering.
Example Output:
Final Answer: [4, 2, 3,..., 14]
Only respond with the final answer, ensuring each passage is included once and ranked in descending relevance."""

_DIRECT_HEADER = (
    "I will provide you with {num} passages, each indicated by number identifier []. \n"
    "Rank the passages based on their relevance to query: {query}."
)

_DIRECT_TAIL = (
    "Rank the {num} passages above based on their relevance to the search query. "
    "The passages should be listed in descending order using identifiers. "
    "The most relevant passages should be listed first. "
    "The output format should be [] > [], e.g., [1] > [2]. "
    "Only respond with the ranking results, do not say any word or explain."
)


def build_prompt(
    candidates: CandidateList,
    format: PromptFormat,
    max_window: int = DEFAULT_MAX_WINDOW,
    system: str | None = None,
) -> RenderedPrompt:
    """Render a single-message ranking prompt for ``candidates``.

    Args:
        candidates: Passages in the order the model should see them; the
            bracketed identifiers follow this order starting at 1.
        format: Which output style the instructions ask for.
        max_window: Largest number of passages a single prompt may carry.
        system: Optional system prompt, passed through untouched.
    """
    format = PromptFormat(format)
    n = len(candidates.passages)
    if n == 0:
        raise EmptyCandidateList(candidates.qid)
    if n > max_window:
        raise TooManyPassages(n, max_window)
    query = candidates.query.text
    listing = "\n".join(f"[{i}] {p.text}" for i, p in enumerate(candidates.passages, 1))
    if format is PromptFormat.DIRECT_LIST:
        parts = [
            _DIRECT_HEADER.format(num=n, query=query),
            listing,
            f"Search Query: {query}.",
            _DIRECT_TAIL.format(num=n),
        ]
    else:
        tail = _COT_EXPLICIT_TAIL if format is PromptFormat.COT_EXPLICIT else _COT_FINAL_TAIL
        parts = [
            _HEADER.format(num=n, query=query),
            listing,
            f"Search Query: {query}.",
            _COT_SELECTION.format(num=n),
            tail.format(num=n),
        ]
    return RenderedPrompt("\n".join(parts), n, format, system)


def format_index_list(order: Sequence[int]) -> str:
    return "[" + ", ".join(str(i) for i in order) + "]"


def render_order(order: Sequence[int], format: PromptFormat) -> str:
    """Serialize an index list without validating it.

    ``render_target`` is the checked entry point; this one exists so a
    mock model can emit deliberately malformed lists.
    """
    format = PromptFormat(format)
    if format is PromptFormat.DIRECT_LIST:
        return " > ".join(f"[{i}]" for i in order)
    final = "Final Answer: " + format_index_list(order)
    if format is PromptFormat.COT_IMPLICIT_FINAL:
        return final
    steps = [f"Step {k}: {format_index_list(order[:k])}" for k in range(1, len(order) + 1)]
    return "\n".join(steps + [final])


def render_target(teacher: Ranking, format: PromptFormat) -> str:
    if not isinstance(teacher, Ranking):
        raise TypeError("teacher must be a Ranking")
    return render_order(teacher.order, format)


EQUAL_MIX: dict[PromptFormat, float] = {
    PromptFormat.DIRECT_LIST: 1 / 3,
    PromptFormat.COT_EXPLICIT: 1 / 3,
    PromptFormat.COT_IMPLICIT_FINAL: 1 / 3,
}


def _normalize_mix(mix: Mapping[PromptFormat | str, float]) -> list[tuple[PromptFormat, float]]:
    items = [(PromptFormat(f), float(w)) for f, w in mix.items()]
    if not items or any(w < 0 for _, w in items):
        raise ValueError("format mix needs non-negative weights")
    if abs(sum(w for _, w in items) - 1.0) > 1e-9:
        raise ValueError(f"format proportions must sum to 1, got {sum(w for _, w in items)}")
    # fixed order so the draw sequence does not depend on dict insertion order
    order = list(PromptFormat)
    return sorted(items, key=lambda fw: order.index(fw[0]))


def emit_sft_dataset(
    examples: Sequence[tuple],
    mix: Mapping[PromptFormat | str, float] | None = None,
    split_fraction: float = 0.9,
    seed: int = 0,
    max_window: int = DEFAULT_MAX_WINDOW,
) -> tuple[list[dict], list[dict]]:
    """Split teacher-labeled examples into SFT records and RPO prompt records.

    Each example is ``(candidates, teacher_ranking)`` or
    ``(candidates, teacher_ranking, teacher_label)``; the optional label is
    copied into the record as ``"teacher"``. The split is a seeded shuffle
    followed by a cut at ``round(split_fraction * len(examples))``, and every
    record gets a format drawn from ``mix`` with the same generator.

    Returns:
        ``(sft_records, rpo_prompt_records)``. RPO records carry no target.
    """
    if not examples:
        raise EmptyInput("no examples to emit")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    weighted = _normalize_mix(EQUAL_MIX if mix is None else mix)
    formats = [f for f, _ in weighted]
    weights = [w for _, w in weighted]

    rng = random.Random(seed)
    idx = list(range(len(examples)))
    rng.shuffle(idx)
    n_sft = round(split_fraction * len(examples))

    sft, rpo = [], []
    for pos, i in enumerate(idx):
        candidates, teacher, *label = examples[i]
        if len(teacher) != len(candidates):
            raise ValueError(f"teacher ranking length differs from candidates for qid {candidates.qid}")
        fmt = rng.choices(formats, weights)[0]
        prompt = build_prompt(candidates, fmt, max_window=max_window)
        rec = {"qid": candidates.qid, "format": fmt.value, "prompt": prompt.text}
        if pos < n_sft:
            rec["target"] = render_target(teacher, fmt)
        rec["teacher_order"] = list(teacher.order)
        if label and label[0] is not None:
            rec["teacher"] = str(label[0])
        (sft if pos < n_sft else rpo).append(rec)
    return sft, rpo
