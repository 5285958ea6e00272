"""Deterministic tensor-line tractography and downstream agreement metrics.

Streamlines are Euler-integrated along the principal eigenvector field with
antipodal sign alignment, bidirectionally from every seed voxel. Agreement
between two tracked bundles is summarized by occupancy Dice, mean bundle
length, and Bland-Altman limits.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import Grid3, Mask
from .dti import TensorField
from .errors import GridError, PairingError

FA_STOP = 0.2
ANGLE_STOP_DEG = 45.0
STEP_MM = 1.0


@dataclass(frozen=True)
class Streamline:
    points: np.ndarray  # (n,3) world mm, ordered

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def length_mm(self) -> float:
        if self.n_points < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass(frozen=True)
class BundleStats:
    count: int
    mean_length_mm: float
    occupancy: Mask
    empty: bool = False


def track(tf: TensorField, seeds: Mask, step_mm: float = STEP_MM,
          fa_stop: float = FA_STOP, angle_stop_deg: float = ANGLE_STOP_DEG) -> list:
    """Bidirectional deterministic tracking from every seed voxel center.

    Stops on FA below fa_stop, turning sharper than angle_stop_deg, or grid
    exit; streamlines shorter than 3 points are discarded. Seed order (and
    so output order) is fixed by the linear voxel index.
    """
    if tf.grid != seeds.grid:
        raise GridError("tensor field and seed grids differ")
    grid = tf.grid
    fa = np.ascontiguousarray(tf.fa.data, dtype=np.float64)
    v1 = np.ascontiguousarray(tf.v1, dtype=np.float64)
    cos_stop = math.cos(math.radians(angle_stop_deg))
    diag = math.sqrt(sum((n * s) ** 2 for n, s in zip(grid.dims, grid.spacing)))
    max_steps = int(2.0 * diag / step_mm) + 10

    flat = np.nonzero(seeds.bits.ravel(order="F"))[0]
    ii, jj, kk = np.unravel_index(flat, grid.dims, order="F")
    out = []
    for i, j, k in zip(ii, jj, kk):
        d0 = v1[i, j, k]
        if np.linalg.norm(d0) < 1e-12:
            continue
        seed = np.asarray(grid.world(int(i), int(j), int(k)), dtype=np.float64)
        fwd = kernels.march(fa, v1, grid.spacing, grid.origin, seed, d0,
                            step_mm, fa_stop, cos_stop, max_steps)
        bwd = kernels.march(fa, v1, grid.spacing, grid.origin, seed, -d0,
                            step_mm, fa_stop, cos_stop, max_steps)
        pts = np.concatenate([bwd[:0:-1], fwd], axis=0)
        if pts.shape[0] >= 3:
            out.append(Streamline(pts))
    return out


def dice(a: Mask, b: Mask) -> float:
    """2|a AND b| / (|a| + |b|); two empty masks agree perfectly (1.0)."""
    if a.grid != b.grid:
        raise GridError("mask grids differ")
    total = a.count + b.count
    if total == 0:
        return 1.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * inter / total


def bundle_stats(streamlines, grid: Grid3) -> BundleStats:
    """Occupancy mask (nearest voxel of every point) and mean length."""
    bits = np.zeros(grid.dims, dtype=bool, order="F")
    if not streamlines:
        return BundleStats(0, 0.0, Mask(grid, bits), empty=True)
    origin = np.asarray(grid.origin)
    spacing = np.asarray(grid.spacing)
    dims = np.asarray(grid.dims)
    for s in streamlines:
        idx = np.floor((s.points - origin) / spacing + 0.5).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < dims), axis=1)
        idx = idx[ok]
        bits[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    mean_len = float(np.mean([s.length_mm for s in streamlines]))
    return BundleStats(len(streamlines), mean_len, Mask(grid, bits))


def bland_altman(ref_vals, test_vals) -> dict:
    """Limits of agreement for paired measurements: d = test - ref,
    limits = mean(d) +/- 1.96 * sample SD(d)."""
    ref = np.asarray(ref_vals, dtype=np.float64)
    test = np.asarray(test_vals, dtype=np.float64)
    if ref.shape != test.shape or ref.ndim != 1:
        raise PairingError(f"paired value lists differ: {ref.shape} vs {test.shape}")
    if ref.size < 2:
        raise PairingError("need at least 2 pairs")
    d = test - ref
    mean_diff = float(d.mean())
    sd_diff = float(d.std(ddof=1))
    return {
        "mean_diff": mean_diff,
        "sd_diff": sd_diff,
        "loa_low": mean_diff - 1.96 * sd_diff,
        "loa_high": mean_diff + 1.96 * sd_diff,
    }


def streamlines_to_json(streamlines) -> list:
    """JSON-ready list of point lists (mm)."""
    return [s.points.tolist() for s in streamlines]


def streamlines_from_json(obj) -> list:
    return [Streamline(np.asarray(p, dtype=np.float64)) for p in obj]
