"""
Imbalanced Supervised Contrastive Learning

Supervised contrastive losses, representation metrics and collapse
diagnostics for imbalanced binary data.
"""

from imbalanced_supcon.config import RunConfig, load_config
from imbalanced_supcon.losses import compute_loss
from imbalanced_supcon.metrics import MetricReport, full_report
from imbalanced_supcon.sweep import correlate, sweep
from imbalanced_supcon.theory import detect_collapse, verify_bound
from imbalanced_supcon.trainer import RunRecord, train
from imbalanced_supcon.utils import ResultsIO

__version__ = "0.1.0"

__all__ = [
    "MetricReport",
    "ResultsIO",
    "RunConfig",
    "RunRecord",
    "compute_loss",
    "correlate",
    "detect_collapse",
    "full_report",
    "load_config",
    "sweep",
    "train",
    "verify_bound",
]
