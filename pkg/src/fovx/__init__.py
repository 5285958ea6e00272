"""Field-of-view extension toolkit for diffusion MRI.

Synthesizes phantoms with known tensor fields, detects and repairs
truncated superior/inferior FOVs with a conditional variational U-Net,
and evaluates the repair with angular correlation, PSNR, tracking Dice
and Bland-Altman agreement.
"""

__version__ = "0.1.0"

from .core import B0_THRESHOLD, DwiVolume, GradientTable, Grid3, Mask, Volume3, from_stack
from .dti import TensorField, eig_sym3, fit_dti, orientation_map
from .errors import FovxError
from .nifti import read_gradients, read_nifti, write_gradients, write_nifti
from .phantom import BundleSpec, PhantomSpec, default_scheme, generate, preset_spec
from .preprocess import (
    FovCut,
    detect_fov_cutoff,
    normalize_intensity,
    splice_imputation,
    truncate_fov,
)
from .shmetrics import acc, fit_sh, psnr, split_wm_mask
from .tract import bland_altman, bundle_stats, dice, track
from .training import ScanRecord, TrainConfig, copy_baseline, impute_scan, make_samples, train

__all__ = [
    "B0_THRESHOLD",
    "BundleSpec",
    "DwiVolume",
    "FovCut",
    "FovxError",
    "GradientTable",
    "Grid3",
    "Mask",
    "PhantomSpec",
    "ScanRecord",
    "TensorField",
    "TrainConfig",
    "Volume3",
    "__version__",
    "acc",
    "bland_altman",
    "bundle_stats",
    "copy_baseline",
    "default_scheme",
    "detect_fov_cutoff",
    "dice",
    "eig_sym3",
    "fit_dti",
    "fit_sh",
    "from_stack",
    "generate",
    "impute_scan",
    "make_samples",
    "normalize_intensity",
    "orientation_map",
    "preset_spec",
    "psnr",
    "read_gradients",
    "read_nifti",
    "splice_imputation",
    "split_wm_mask",
    "track",
    "train",
    "truncate_fov",
    "write_gradients",
    "write_nifti",
]
