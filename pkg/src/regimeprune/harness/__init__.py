from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .config import ConfigError, SweepConfig
from .emit import emit_csv, emit_heatmap, read_csv
from .sweep import CellResult, PhaseDiagram, SeedResult, normalize_columns, run_sweep

__all__ = [
    "CellResult", "CheckpointError", "ConfigError", "PhaseDiagram", "SeedResult",
    "SweepConfig", "emit_csv", "emit_heatmap", "load_checkpoint", "normalize_columns",
    "read_csv", "read_header", "run_sweep", "save_checkpoint",
]
