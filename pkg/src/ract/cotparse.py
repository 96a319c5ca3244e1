"""Parsing and repair of ranking generations.

Strict parsing returns a fully validated trace or raises. Repair mode
always produces a permutation, recording which rules it had to apply:

    R1  drop duplicate indices, keeping the first occurrence
    R2  drop indices outside 1..n (and non-integer tokens)
    R3  append missing indices in first-stage order
    R4  no list found anywhere: fall back to the identity ranking
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field

from .core import Ranking
from .promptgen import PromptFormat

logger = logging.getLogger(__name__)


class ParseFailure(ValueError):
    """Base class for strict-mode parse errors."""


class NoFinalAnswer(ParseFailure):
    pass


class PrefixViolation(ParseFailure):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"step {step} does not extend the previous step" + (f": {detail}" if detail else ""))
        self.step = step


class NotAPermutation(ParseFailure):
    def __init__(self, detail: str):
        super().__init__(f"final list is not a permutation: {detail}")
        self.detail = detail


class StepCountMismatch(ParseFailure):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected {expected} steps, got {got}")
        self.expected = expected
        self.got = got


class RepairPolicy(str, enum.Enum):
    STRICT = "Strict"
    REPAIR = "Repair"


@dataclass(frozen=True)
class CoTTrace:
    steps: tuple[tuple[int, ...], ...]
    final: tuple[int, ...]


@dataclass
class RepairReport:
    rules: list[str] = field(default_factory=list)
    # set when the final list was usable but the step lines were not
    trace_warning: str | None = None

    def to_record(self, qid: str, window: int) -> dict:
        return {"qid": qid, "window": window, "rules": list(self.rules)}


_LIST = re.compile(r"\[([^\[\]]*)\]")
_STEP = re.compile(r"^[^\w\n]*step[^\S\n]*(\d+)[^\S\n]*:(.*)$", re.IGNORECASE | re.MULTILINE)
_FINAL = re.compile(r"final[^\S\n]*answer[^\S\n]*:(.*)$", re.IGNORECASE | re.MULTILINE)
_CHAIN = re.compile(r"\[[^\[\]>]*\](?:\s*>\s*\[[^\[\]>]*\])+")
_TOKEN_SPLIT = re.compile(r"[,\s]+")


def _tokens(inner: str) -> list[int | None]:
    """Integers inside one bracket; ``None`` marks a token that is not one."""
    out: list[int | None] = []
    for tok in _TOKEN_SPLIT.split(inner.strip()):
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            out.append(None)
    return out


def _parse_list(s: str) -> list[int | None] | None:
    """First index list in ``s``: a ``[a] > [b]`` chain or a ``[a, b]`` list."""
    chain = _CHAIN.search(s)
    plain = _LIST.search(s)
    if chain and (plain is None or chain.start() <= plain.start()):
        return [t for inner in _LIST.findall(chain.group(0)) for t in _tokens(inner)]
    if plain:
        return _tokens(plain.group(1))
    return None


def _last_chain(text: str) -> list[int | None] | None:
    """Longest ``[a] > [b] > ...`` run in ``text``; later wins ties."""
    best = None
    for m in _CHAIN.finditer(text):
        if best is None or len(m.group(0)) >= len(best):
            best = m.group(0)
    if best is None:
        return None
    return [t for inner in _LIST.findall(best) for t in _tokens(inner)]


def _find_final(text: str) -> list[int | None] | None:
    found = None
    for m in _FINAL.finditer(text):
        lst = _parse_list(m.group(1))
        if lst is not None:
            found = lst
    return found


def _find_steps(text: str) -> list[tuple[int, list[int | None] | None]]:
    return [(int(m.group(1)), _parse_list(m.group(2))) for m in _STEP.finditer(text)]


def _check_permutation(order: list[int | None], n: int) -> tuple[int, ...]:
    seen: set[int] = set()
    for i in order:
        if i is None:
            raise NotAPermutation("non-integer token")
        if not 1 <= i <= n:
            raise NotAPermutation(f"index {i} outside 1..{n}")
        if i in seen:
            raise NotAPermutation(f"duplicate index {i}")
        seen.add(i)
    if len(seen) != n:
        missing = min(set(range(1, n + 1)) - seen)
        raise NotAPermutation(f"missing index {missing}")
    return tuple(order)  # type: ignore[arg-type]


def _check_prefixes(steps: list[tuple[int, list[int | None] | None]], n: int) -> tuple[tuple[int, ...], ...]:
    prev: tuple[int, ...] = ()
    out = []
    for k, (label, lst) in enumerate(steps, 1):
        if label != k or lst is None or any(i is None for i in lst):
            raise PrefixViolation(k, "malformed step line")
        cur = tuple(lst)  # type: ignore[arg-type]
        if len(cur) != k or cur[:-1] != prev or cur[-1] in prev or not 1 <= cur[-1] <= n:
            raise PrefixViolation(k)
        out.append(cur)
        prev = cur
    return tuple(out)


def parse_cot_output(text: str, n: int, format: PromptFormat) -> CoTTrace:
    """Strictly parse a generation into a trace over ``n`` candidates.

    Prose around the recognized lines is ignored; keywords match without
    case and spacing inside brackets is free. The last ``Final Answer``
    line wins when several appear. For formats without step lines the
    trace's steps are the prefixes of the final list.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    format = PromptFormat(format)
    if format is PromptFormat.DIRECT_LIST:
        raw = _last_chain(text)
        if raw is None and n == 1:
            raw = _parse_list(text)
        if raw is None:
            raise NoFinalAnswer("no '[a] > [b]' ranking line found")
        final = _check_permutation(raw, n)
        return CoTTrace(tuple(final[:k] for k in range(1, n + 1)), final)

    raw = _find_final(text)
    if raw is None:
        raise NoFinalAnswer("no 'Final Answer:' line found")
    if format is PromptFormat.COT_IMPLICIT_FINAL:
        final = _check_permutation(raw, n)
        return CoTTrace(tuple(final[:k] for k in range(1, n + 1)), final)

    # step-level problems are reported before the final line is judged
    steps = _check_prefixes(_find_steps(text), n)
    final = _check_permutation(raw, n)
    if len(steps) != n:
        raise StepCountMismatch(n, len(steps))
    if steps[-1] != final:
        raise PrefixViolation(n + 1, "final answer differs from the last step")
    return CoTTrace(steps, final)


def _salvage(text: str, format: PromptFormat) -> list[int | None] | None:
    """Best-effort list extraction, most specific source first."""
    if format is PromptFormat.DIRECT_LIST:
        candidates = [_last_chain(text), _find_final(text)]
    else:
        candidates = [_find_final(text), _last_chain(text)]
        steps = [lst for _, lst in _find_steps(text) if lst is not None]
        candidates.append(steps[-1] if steps else None)
    for lst in candidates:
        if lst is not None:
            return lst
    lists = _LIST.findall(text)
    return _tokens(lists[-1]) if lists else None


def repair_order(raw: list[int | None], n: int) -> tuple[Ranking, list[str]]:
    """Apply R1-R3 to a raw index list."""
    rules = []
    kept: list[int] = []
    seen: set[int] = set()
    for i in raw:
        if i is not None and i in seen:
            if "R1" not in rules:
                rules.append("R1")
            continue
        if i is None or not 1 <= i <= n:
            if "R2" not in rules:
                rules.append("R2")
            continue
        kept.append(i)
        seen.add(i)
    if len(kept) < n:
        rules.append("R3")
        kept.extend(i for i in range(1, n + 1) if i not in seen)
    rules.sort()
    return Ranking(tuple(kept)), rules


def extract_final_ranking(
    text: str,
    n: int,
    format: PromptFormat,
    policy: RepairPolicy = RepairPolicy.REPAIR,
) -> tuple[Ranking, RepairReport]:
    """Turn a generation into a Ranking under the given policy.

    In Strict mode any parse error propagates. In Repair mode only the
    final list decides the ranking; a broken step trace next to a clean
    final line is reported through ``trace_warning`` instead of a rule.
    """
    format = PromptFormat(format)
    policy = RepairPolicy(policy)
    if policy is RepairPolicy.STRICT:
        trace = parse_cot_output(text, n, format)
        return Ranking(trace.final), RepairReport()

    try:
        trace = parse_cot_output(text, n, format)
        return Ranking(trace.final), RepairReport()
    except ParseFailure as e:
        failure = e

    raw = _salvage(text, format)
    if raw is None:
        logger.debug("no index list in generation, using identity for n=%d", n)
        return Ranking.identity(n), RepairReport(["R4"])
    ranking, rules = repair_order(raw, n)
    report = RepairReport(rules)
    if not rules:
        report.trace_warning = str(failure)
    return ranking, report
