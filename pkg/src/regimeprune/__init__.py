"""Train-prune-retrain pipeline with loss-landscape diagnostics and regime-driven tuning."""

__version__ = "0.1.0"
