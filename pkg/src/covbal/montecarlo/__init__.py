"""Seeded Monte Carlo studies of normalised imbalances."""
from .engine import (
    Metric,
    ProcedureSpec,
    allocate_batch,
    normalized_imbalances,
    run_batch,
    run_replicate,
    scope_id,
)
from .streams import replicate_streams
from .study import (
    GammaEstimate,
    StudyConfig,
    StudySummary,
    SummaryRow,
    estimate_gamma,
    run_study,
    simulate,
    summarize,
    theory_reference,
    write_summary_csv,
    write_summary_json,
)

__all__ = [
    "GammaEstimate",
    "Metric",
    "ProcedureSpec",
    "StudyConfig",
    "StudySummary",
    "SummaryRow",
    "allocate_batch",
    "estimate_gamma",
    "normalized_imbalances",
    "replicate_streams",
    "run_batch",
    "run_replicate",
    "run_study",
    "scope_id",
    "simulate",
    "summarize",
    "theory_reference",
    "write_summary_csv",
    "write_summary_json",
]
