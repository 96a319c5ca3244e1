"""Ranking preference optimization on an exact Plackett-Luce policy.

A predicted ranking is split against the teacher ranking into the shared
prefix, the teacher's continuation (chosen) and the model's continuation
(rejected). The preference loss is the DPO objective over those
continuations, conditioned on the shared prefix.

The policy here is a toy: one real score per candidate, and each step
picks the next candidate with softmax probability over those not yet
picked. That keeps log-probabilities and gradients exact, so the pair
construction and the loss can be checked without a language model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .core import LengthMismatch, Ranking, validate_ranking
from .cotparse import RepairPolicy, extract_final_ranking
from .promptgen import PromptFormat

logger = logging.getLogger(__name__)

DEFAULT_BETA = 0.1


class IndexCollision(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class PreferenceExample:
    prompt_id: str
    s_o: tuple[int, ...]
    s_w: tuple[int, ...]
    s_l: tuple[int, ...]
    n: int

    def __post_init__(self) -> None:
        for name in ("s_o", "s_w", "s_l"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        if not self.s_w or not self.s_l:
            raise ValueError("chosen and rejected completions must be non-empty")
        validate_ranking(self.s_o + self.s_w, self.n)
        validate_ranking(self.s_o + self.s_l, self.n)
        if self.s_w[0] == self.s_l[0]:
            raise ValueError("chosen and rejected completions must diverge at their first step")

    def to_record(self) -> dict:
        return {"prompt_id": self.prompt_id, "n": self.n, "s_o": list(self.s_o), "s_w": list(self.s_w), "s_l": list(self.s_l)}

    @classmethod
    def from_record(cls, rec: Mapping) -> PreferenceExample:
        return cls(str(rec["prompt_id"]), rec["s_o"], rec["s_w"], rec["s_l"], int(rec["n"]))


@dataclass(frozen=True)
class PolicyParams:
    """Per-candidate scores, keyed by 1-based candidate index."""

    theta: Mapping[int, float]

    def __post_init__(self) -> None:
        theta = {int(k): float(v) for k, v in self.theta.items()}
        if not all(math.isfinite(v) for v in theta.values()):
            raise ValueError("policy scores must be finite")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def uniform(cls, n: int, value: float = 0.0) -> PolicyParams:
        return cls({i: value for i in range(1, n + 1)})

    def shifted(self, c: float) -> PolicyParams:
        return PolicyParams({k: v + c for k, v in self.theta.items()})

    def argmax_ranking(self) -> Ranking:
        """Most probable permutation: indices by descending score, ties by index."""
        return Ranking(tuple(sorted(self.theta, key=lambda i: (-self.theta[i], i))))


@dataclass(frozen=True)
class RpoConfig:
    beta: float = DEFAULT_BETA
    pair_mode: str = "TruthVsModel"
    completion_scope: str = "FullSuffix"

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.pair_mode != "TruthVsModel" or self.completion_scope != "FullSuffix":
            raise ValueError("only TruthVsModel pairs over full suffixes are supported")


# --- pair construction ---


def overlap_prefix(pred: Ranking, truth: Ranking) -> int:
    """Length of the longest common leading run of two rankings."""
    if len(pred) != len(truth):
        raise LengthMismatch(len(truth), len(pred))
    L = 0
    for a, b in zip(pred.order, truth.order):
        if a != b:
            break
        L += 1
    return L


def build_preference_tuple(prompt_id: str, pred: Ranking, truth: Ranking) -> PreferenceExample | None:
    """Split ``pred`` against ``truth``; None when they agree completely."""
    L = overlap_prefix(pred, truth)
    n = len(truth)
    if L == n:
        return None
    return PreferenceExample(prompt_id, truth.order[:L], truth.order[L:], pred.order[L:], n)


@dataclass(frozen=True)
class RpoPrompt:
    """A held-out prompt with its teacher ranking."""

    prompt_id: str
    n: int
    truth: Ranking
    format: PromptFormat = PromptFormat.COT_EXPLICIT
    prompt: str = ""


@dataclass
class RpoBuildStats:
    prompts: int = 0
    candidates: int = 0
    duplicates_dropped: int = 0
    overlaps: list[int] = field(default_factory=list)

    @property
    def mean_overlap(self) -> float:
        return sum(self.overlaps) / len(self.overlaps) if self.overlaps else 0.0


def build_rpo_dataset(
    prompts: Iterable[RpoPrompt],
    sampler: Callable[[RpoPrompt], Sequence[str]],
    policy: RepairPolicy = RepairPolicy.REPAIR,
) -> tuple[list[PreferenceExample], RpoBuildStats]:
    """Preference tuples from sampled completions, one per divergent candidate.

    Each completion is parsed under ``policy``; identical tuples within a
    prompt are kept once. ``stats.overlaps`` holds the shared-prefix length
    of every parsed candidate, including ones that matched the teacher.
    """
    out: list[PreferenceExample] = []
    stats = RpoBuildStats()
    for p in prompts:
        stats.prompts += 1
        seen: set[tuple] = set()
        for text in sampler(p):
            stats.candidates += 1
            pred, _ = extract_final_ranking(text, p.n, p.format, policy)
            stats.overlaps.append(overlap_prefix(pred, p.truth))
            ex = build_preference_tuple(p.prompt_id, pred, p.truth)
            if ex is None:
                continue
            key = (ex.s_o, ex.s_w, ex.s_l)
            if key in seen:
                stats.duplicates_dropped += 1
                continue
            seen.add(key)
            out.append(ex)
    return out, stats


# --- exact Plackett-Luce policy ---


def _logsumexp(values: Sequence[float]) -> float:
    m = max(values)
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def _remaining(theta: PolicyParams, s_o: Sequence[int], completion: Sequence[int]) -> list[int]:
    taken = set(s_o)
    if len(taken) != len(s_o):
        raise IndexCollision("repeated index in prefix")
    comp = set(completion)
    if len(comp) != len(completion):
        raise IndexCollision("repeated index in completion")
    if taken & comp:
        raise IndexCollision(f"indices {sorted(taken & comp)} appear in both prefix and completion")
    unknown = comp - theta.theta.keys()
    if unknown:
        raise IndexCollision(f"completion indices {sorted(unknown)} have no score")
    return sorted(set(theta.theta) - taken)


def seq_logprob(theta: PolicyParams, s_o: Sequence[int], completion: Sequence[int]) -> float:
    """log pi(completion | prefix s_o) under the Plackett-Luce step policy."""
    pool = _remaining(theta, s_o, completion)
    scores = theta.theta
    pool_set = set(pool)
    total = 0.0
    for d in completion:
        total += scores[d] - _logsumexp([scores[j] for j in sorted(pool_set)])
        pool_set.discard(d)
    return total


def seq_logprob_grad(theta: PolicyParams, s_o: Sequence[int], completion: Sequence[int]) -> dict[int, float]:
    """Gradient of :func:`seq_logprob` with respect to every score."""
    pool_set = set(_remaining(theta, s_o, completion))
    scores = theta.theta
    grad = {k: 0.0 for k in scores}
    for d in completion:
        pool = sorted(pool_set)
        lse = _logsumexp([scores[j] for j in pool])
        for j in pool:
            grad[j] -= math.exp(scores[j] - lse)
        grad[d] += 1.0
        pool_set.discard(d)
    return grad


def _log_sigmoid(x: float) -> float:
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _margin(theta: PolicyParams, theta_ref: PolicyParams, ex: PreferenceExample) -> float:
    chosen = seq_logprob(theta, ex.s_o, ex.s_w) - seq_logprob(theta_ref, ex.s_o, ex.s_w)
    rejected = seq_logprob(theta, ex.s_o, ex.s_l) - seq_logprob(theta_ref, ex.s_o, ex.s_l)
    return chosen - rejected


def _check(batch: Sequence[PreferenceExample], beta: float) -> None:
    if not batch:
        raise EmptyBatch("preference batch is empty")
    if not beta > 0:
        raise ValueError("beta must be > 0")


def rpo_loss(
    theta: PolicyParams,
    theta_ref: PolicyParams,
    batch: Sequence[PreferenceExample],
    beta: float = DEFAULT_BETA,
) -> float:
    """Mean of -log sigmoid(beta * margin) over the batch.

    The margin is the policy-minus-reference log-ratio of the chosen
    continuation minus the same for the rejected one, both conditioned on
    the shared prefix.
    """
    _check(batch, beta)
    terms = [-_log_sigmoid(beta * _margin(theta, theta_ref, ex)) for ex in batch]
    return math.fsum(terms) / len(terms)


def rpo_loss_grad(
    theta: PolicyParams,
    theta_ref: PolicyParams,
    batch: Sequence[PreferenceExample],
    beta: float = DEFAULT_BETA,
) -> dict[int, float]:
    _check(batch, beta)
    parts: dict[int, list[float]] = {k: [] for k in theta.theta}
    for ex in batch:
        weight = -_sigmoid(-beta * _margin(theta, theta_ref, ex)) * beta
        gw = seq_logprob_grad(theta, ex.s_o, ex.s_w)
        gl = seq_logprob_grad(theta, ex.s_o, ex.s_l)
        for k in parts:
            parts[k].append(weight * (gw[k] - gl[k]))
    return {k: math.fsum(v) / len(batch) for k, v in parts.items()}


@dataclass
class FitResult:
    params: PolicyParams
    losses: list[float]

    def trace_records(self) -> list[dict]:
        return [{"iter": i, "loss": loss} for i, loss in enumerate(self.losses)]


def rpo_fit(
    examples: Sequence[PreferenceExample],
    init: PolicyParams,
    theta_ref: PolicyParams,
    beta: float = DEFAULT_BETA,
    rate: float = 0.1,
    iters: int = 200,
) -> FitResult:
    """Plain gradient descent on the preference loss.

    ``losses[i]`` is the loss before update ``i``; the final entry is the
    loss at the returned parameters, so the trace has ``iters + 1`` values.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    theta = init
    losses = [rpo_loss(theta, theta_ref, examples, beta)]
    for _ in range(iters):
        g = rpo_loss_grad(theta, theta_ref, examples, beta)
        theta = PolicyParams({k: v - rate * g[k] for k, v in theta.theta.items()})
        losses.append(rpo_loss(theta, theta_ref, examples, beta))
    return FitResult(theta, losses)


# --- finite-difference verification ---

FD_STEP = 1e-5
GRAD_RTOL = 1e-6
# denominators below this are treated as absolute error
GRAD_FLOOR = 1e-3


@dataclass
class GradTrial:
    trial: int
    n: int
    beta: float
    example: PreferenceExample
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRAD_RTOL


def finite_difference_grad(
    theta: PolicyParams,
    theta_ref: PolicyParams,
    batch: Sequence[PreferenceExample],
    beta: float,
    step: float = FD_STEP,
) -> dict[int, float]:
    """Central differences of :func:`rpo_loss`, one coordinate at a time."""
    out = {}
    for k in theta.theta:
        up = dict(theta.theta)
        down = dict(theta.theta)
        up[k] += step
        down[k] -= step
        out[k] = (rpo_loss(PolicyParams(up), theta_ref, batch, beta) - rpo_loss(PolicyParams(down), theta_ref, batch, beta)) / (2 * step)
    return out


def relative_error(a: float, b: float, floor: float = GRAD_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_trial(rng, n: int) -> tuple[PolicyParams, PolicyParams, PreferenceExample, float]:
    """Random scores, reference, divergent (truth, pred) pair and beta."""
    theta = PolicyParams({i: rng.gauss(0.0, 1.0) for i in range(1, n + 1)})
    ref = PolicyParams({i: rng.gauss(0.0, 1.0) for i in range(1, n + 1)})
    truth = list(range(1, n + 1))
    rng.shuffle(truth)
    pred = truth[:]
    while pred == truth:
        rng.shuffle(pred)
    ex = build_preference_tuple("trial", Ranking(tuple(pred)), Ranking(tuple(truth)))
    beta = rng.uniform(0.05, 2.0)
    return theta, ref, ex, beta


def gradient_check(seed: int = 0, trials: int = 100, n_range: tuple[int, int] = (3, 8)) -> list[GradTrial]:
    """Compare analytic and finite-difference gradients on random draws."""
    import random

    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = random.Random(seed)
    results = []
    for t in range(trials):
        n = rng.randint(*n_range)
        theta, ref, ex, beta = random_trial(rng, n)
        analytic = rpo_loss_grad(theta, ref, [ex], beta)
        numeric = finite_difference_grad(theta, ref, [ex], beta)
        err = max(relative_error(analytic[k], numeric[k]) for k in analytic)
        results.append(GradTrial(t, n, beta, ex, err))
    return results
