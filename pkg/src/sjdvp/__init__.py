"""Speculative Jacobi decoding with a growth-trajectory drafter, on toy Markov models."""

from __future__ import annotations

__version__ = "0.1.0"

from .drafter import HistoryBuffer, SJDDrafter, VPConfig, VPDrafter
from .engine import DecodeResult, TraceRecorder, run_greedy_jacobi, run_speculative_jacobi
from .markov import MarkovModel, Prompt, build_markov_model, make_prompts
from .prob import SeededRng
from .stats import RunStats

__all__ = [
    "__version__",
    "HistoryBuffer",
    "SJDDrafter",
    "VPConfig",
    "VPDrafter",
    "DecodeResult",
    "TraceRecorder",
    "run_greedy_jacobi",
    "run_speculative_jacobi",
    "MarkovModel",
    "Prompt",
    "build_markov_model",
    "make_prompts",
    "SeededRng",
    "RunStats",
]
