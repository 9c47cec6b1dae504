"""Evaluation: metrics, phase singularities, horizons and recording comparison."""

from .metrics import MetricReport, masked_metrics, reports_to_csv, summarize
from .phase import PhaseSingularityTrack, detect_ps, dominant_frequency, hilbert_phase, ps_tpr

__all__ = ["MetricReport", "masked_metrics", "summarize", "reports_to_csv",
           "PhaseSingularityTrack", "detect_ps", "hilbert_phase", "ps_tpr", "dominant_frequency"]
