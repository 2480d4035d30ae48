"""Structured N:M pruning with training-free low-rank gap corrections."""

__version__ = "0.1.0"

from .errors import (ConvergenceError, DimensionError, FormatError, GlueError, NumericError, PatternError,
                     StorageError, TopologyError, ValidationError)
from .gluecore import Correction, CorrectionSet, load_corrections, prime_correction, prime_model, save_corrections
from .numerics import SvdResult, randomized_svd, svd_full, svd_truncated
from .pruner import CalibStats, PruneSpec, collect_calibration_stats, prune_checkpoint, select_nm_mask
from .runtime import Model, apply_corrections, corrected_forward, cost_report, model_forward
from .spectra import SpectrumReport, compare_spectra, export_spectra, spectrum
from .weightstore import (Checkpoint, LayerRecord, NMSparseMatrix, decode_nm, encode_nm, read_checkpoint,
                          storage_bytes, write_checkpoint)
