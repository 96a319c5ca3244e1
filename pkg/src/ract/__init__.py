"""Listwise LLM reranking with stepwise ranking prompts and ranking preference optimization."""

__version__ = "0.1.0"

from .core import CandidateList, Passage, Query, Ranking, apply_ranking, validate_ranking
from .cotparse import CoTTrace, RepairPolicy, extract_final_ranking, parse_cot_output
from .promptgen import PromptFormat, RenderedPrompt, build_prompt, emit_sft_dataset, render_target
from .rpo import (
    PolicyParams,
    PreferenceExample,
    build_preference_tuple,
    overlap_prefix,
    rpo_fit,
    rpo_loss,
    rpo_loss_grad,
    seq_logprob,
)
from .slidewin import WindowConfig, plan_windows, rerank_sliding

__all__ = [
    "CandidateList",
    "CoTTrace",
    "Passage",
    "PolicyParams",
    "PreferenceExample",
    "PromptFormat",
    "Query",
    "Ranking",
    "RenderedPrompt",
    "RepairPolicy",
    "WindowConfig",
    "apply_ranking",
    "build_preference_tuple",
    "build_prompt",
    "emit_sft_dataset",
    "extract_final_ranking",
    "overlap_prefix",
    "parse_cot_output",
    "plan_windows",
    "render_target",
    "rerank_sliding",
    "rpo_fit",
    "rpo_loss",
    "rpo_loss_grad",
    "seq_logprob",
    "validate_ranking",
]
