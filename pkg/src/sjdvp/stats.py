"""Per-run accounting shared by the decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class RunStats:
    """Counters for one decode run.

    ``nfe`` counts parallel model evaluations. ``drafted`` counts tokens that
    reached the verifier, so ``acceptance_rate`` is accepted / verified.
    """

    nfe: int = 0
    generated: int = 0
    iterations: int = 0
    accepted_runs: list[int] = field(default_factory=list)
    drafted: int = 0
    accepted: int = 0
    corrections: int = 0
    provenance: list[str] = field(default_factory=list)
    fallback_windows: int = 0
    mask_fires: int = 0
    negative_score_fires: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.drafted if self.drafted else 0.0

    @property
    def mean_accepted_run(self) -> float:
        runs = self.accepted_runs
        return sum(runs) / len(runs) if runs else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["acceptance_rate"] = self.acceptance_rate
        out["mean_accepted_run"] = self.mean_accepted_run
        return out
