"""Intensity normalization, resampling, FOV truncation/detection/splicing,
and 2.5D sagittal patch extraction.

Truncation is represented as explicit zero slabs along axis k plus a FovCut
descriptor; acquired voxels are never altered by splicing. Sagittal stacks
use reflection padding so edge predictions never see fabricated zeros.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DwiVolume, Grid3, Mask, Volume3
from .errors import DegenerateInputError, GridError, InvalidCutError, ValidationError

TOP = "top"
BOTTOM = "bottom"

NEIGHBOR_RADIUS = 5


@dataclass(frozen=True)
class NormalizationRecord:
    scale: float


@dataclass(frozen=True)
class FovCut:
    """Missing slab along axis k. Empty cut: cut_mm 0 and an empty index
    range (first_missing_k > last_missing_k)."""

    side: str
    cut_mm: float
    first_missing_k: int
    last_missing_k: int

    def __post_init__(self):
        if self.side not in (TOP, BOTTOM):
            raise ValidationError(f"side must be '{TOP}' or '{BOTTOM}', got {self.side!r}")
        if self.cut_mm < 0:
            raise ValidationError(f"cut_mm must be >= 0, got {self.cut_mm}")

    @property
    def n_slices(self) -> int:
        return max(0, self.last_missing_k - self.first_missing_k + 1)

    def slab(self) -> range:
        return range(self.first_missing_k, self.last_missing_k + 1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "side": self.side,
                "cut_mm": self.cut_mm,
                "first_missing_k": self.first_missing_k,
                "last_missing_k": self.last_missing_k,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "FovCut":
        d = json.loads(text)
        return FovCut(d["side"], float(d["cut_mm"]), int(d["first_missing_k"]), int(d["last_missing_k"]))


def _pooled(image):
    if isinstance(image, DwiVolume):
        return image.stack()
    return image.data


def normalize_intensity(image):
    """Scale to [0,1] by the scan's 99.9th percentile.

    Negatives are floored to 0 first; values above the percentile clamp to 1.
    For a DwiVolume the percentile pools every volume so one scale preserves
    inter-volume attenuation ratios. Returns (scaled image, record).
    """
    data = np.maximum(_pooled(image), 0.0)
    if not np.any(data > 0):
        raise DegenerateInputError("cannot normalize an all-zero scan")
    scale = float(np.percentile(data, 99.9))
    if scale <= 0:
        # fewer than 0.1% positive voxels: fall back to the max so the
        # output still lands in [0,1]
        scale = float(data.max())
    out = np.clip(data / scale, 0.0, 1.0).astype(np.float32)
    rec = NormalizationRecord(scale)
    if isinstance(image, DwiVolume):
        return image.with_stack(out), rec
    return Volume3(image.grid, out), rec


def denormalize(image, rec: NormalizationRecord):
    """Inverse of normalize_intensity's scaling (clamping is not invertible)."""
    data = _pooled(image) * np.float32(rec.scale)
    if isinstance(image, DwiVolume):
        return image.with_stack(data)
    return Volume3(image.grid, data)


def resample_isotropic(v: Volume3, target_spacing: float, target_dims) -> Volume3:
    """Trilinear resample onto an isotropic grid centered on the source
    volume's world center. Samples outside the source support become 0."""
    if not target_spacing > 0:
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    tdims = tuple(int(d) for d in target_dims)
    cx, cy, cz = v.grid.center()
    ts = float(target_spacing)
    origin = (
        cx - ts * (tdims[0] - 1) / 2.0,
        cy - ts * (tdims[1] - 1) / 2.0,
        cz - ts * (tdims[2] - 1) / 2.0,
    )
    tgrid = Grid3(tdims, (ts, ts, ts), origin)
    if tgrid == v.grid:
        return v

    ii, jj, kk = np.meshgrid(np.arange(tdims[0]), np.arange(tdims[1]), np.arange(tdims[2]), indexing="ij")
    pts = np.stack(
        [
            (origin[0] + ii.ravel(order="F") * ts - v.grid.origin[0]) / v.grid.spacing[0],
            (origin[1] + jj.ravel(order="F") * ts - v.grid.origin[1]) / v.grid.spacing[1],
            (origin[2] + kk.ravel(order="F") * ts - v.grid.origin[2]) / v.grid.spacing[2],
        ],
        axis=1,
    )
    nx, ny, nz = v.grid.dims
    inside = (
        (pts[:, 0] >= 0) & (pts[:, 0] <= nx - 1)
        & (pts[:, 1] >= 0) & (pts[:, 1] <= ny - 1)
        & (pts[:, 2] >= 0) & (pts[:, 2] <= nz - 1)
    )
    if v.data.ndim == 3:
        vals = kernels.trilinear(v.data, pts)
        vals[~inside] = 0.0
        out = vals.reshape(tdims, order="F")
    else:
        vals = kernels.trilinear(v.data, pts)
        vals[~inside] = 0.0
        out = vals.reshape(tdims + (v.channels,), order="F")
    return Volume3(tgrid, out.astype(np.float32))


def _nonzero_k_extent(stack):
    nonzero = np.nonzero(np.any(stack != 0, axis=(0, 1, 3)))[0]
    if nonzero.size == 0:
        return None
    return int(nonzero[0]), int(nonzero[-1])


def _slab_indices(side, n, nz):
    if side == TOP:
        return nz - n, nz - 1
    return 0, n - 1


def truncate_fov(d: DwiVolume, side: str, cut_mm: float):
    """Zero a slab of round(cut_mm/sz) slices at one end of axis k in every
    volume. Returns (truncated scan, FovCut). The cut must leave at least one
    nonzero brain slice."""
    if side not in (TOP, BOTTOM):
        raise ValidationError(f"side must be '{TOP}' or '{BOTTOM}', got {side!r}")
    if cut_mm < 0:
        raise InvalidCutError(f"cut_mm must be >= 0, got {cut_mm}")
    sz = d.grid.spacing[2]
    nz = d.grid.dims[2]
    n = int(np.floor(cut_mm / sz + 0.5))  # round half up
    if n == 0:
        empty_first, empty_last = _slab_indices(side, 0, nz)
        return d, FovCut(side, 0.0, empty_first, empty_last)
    if n >= nz:
        raise InvalidCutError(f"cut of {n} slices covers the whole {nz}-slice volume")
    first, last = _slab_indices(side, n, nz)
    extent = _nonzero_k_extent(d.stack())
    if extent is not None:
        k0, k1 = extent
        if first <= k0 and k1 <= last:
            raise InvalidCutError(
                f"cut slab [{first},{last}] removes the entire brain extent [{k0},{k1}]"
            )
    data = d.stack().copy(order="F")
    data[:, :, first : last + 1, :] = 0.0
    return d.with_stack(data), FovCut(side, float(cut_mm), first, last)


def detect_fov_cutoff(d: DwiVolume, brain_mask: Mask):
    """Find the contiguous run of all-zero k-slices (zero in every volume) at
    either end of axis k that intersects the brain mask's k-extent. Returns a
    FovCut with cut_mm = slice count * sz, or None when no such run exists.
    If both ends qualify, the run overlapping more brain slices wins, top on
    a tie."""
    if d.grid != brain_mask.grid:
        raise GridError("scan and mask grids differ")
    zero_slice = ~np.any(d.stack() != 0, axis=(0, 1, 3))
    nz = d.grid.dims[2]
    m0, m1 = brain_mask.k_extent()
    sz = d.grid.spacing[2]

    candidates = []
    n_bottom = 0
    while n_bottom < nz and zero_slice[n_bottom]:
        n_bottom += 1
    if n_bottom > 0:
        overlap = max(0, min(n_bottom - 1, m1) - max(0, m0) + 1)
        if overlap > 0:
            candidates.append((overlap, 1, FovCut(BOTTOM, n_bottom * sz, 0, n_bottom - 1)))
    n_top = 0
    while n_top < nz and zero_slice[nz - 1 - n_top]:
        n_top += 1
    if 0 < n_top < nz:
        first = nz - n_top
        overlap = max(0, min(nz - 1, m1) - max(first, m0) + 1)
        if overlap > 0:
            candidates.append((overlap, 2, FovCut(TOP, n_top * sz, first, nz - 1)))
    if not candidates:
        return None
    candidates.sort(key=lambda c: (-c[0], -c[1]))
    return candidates[0][2]


def splice_imputation(acquired: DwiVolume, imputed: DwiVolume, cut: FovCut) -> DwiVolume:
    """Replace the FovCut slab of `acquired` with values from `imputed`.
    Acquired voxels pass through untouched, bit for bit."""
    if acquired.grid != imputed.grid:
        raise GridError("acquired and imputed grids differ")
    if len(acquired) != len(imputed):
        raise GridError(f"volume counts differ: {len(acquired)} vs {len(imputed)}")
    if cut.n_slices == 0:
        return acquired
    nz = acquired.grid.dims[2]
    if cut.first_missing_k < 0 or cut.last_missing_k >= nz:
        raise ValidationError(f"cut slab [{cut.first_missing_k},{cut.last_missing_k}] outside [0,{nz})")
    data = acquired.stack().copy(order="F")
    sl = slice(cut.first_missing_k, cut.last_missing_k + 1)
    data[:, :, sl, :] = imputed.stack()[:, :, sl, :]
    return acquired.with_stack(data)


def reflect_index(t: int, n: int) -> int:
    """Fold index t into [0, n) by reflection without edge repetition
    (period 2n-2): ... 2,1,0,1,2 ... n-2,n-1,n-2 ..."""
    if n == 1:
        return 0
    period = 2 * n - 2
    t = t % period
    return period - t if t >= n else t


@dataclass(frozen=True)
class PatchStack25D:
    """One sagittal slice plus its 2r neighbors: slices (H, W, 2r+1), where
    slice j is the plane at reflect(center + j - r). offsets names each
    channel's signed slice offset."""

    center_k_index: int
    slices: np.ndarray
    offsets: tuple

    @property
    def center_slice(self) -> np.ndarray:
        return self.slices[:, :, len(self.offsets) // 2]


def extract_patches(vol: Volume3, r: int = NEIGHBOR_RADIUS):
    """One PatchStack25D per sagittal index i in [0, nx)."""
    if vol.channels != 1:
        raise ValidationError("extract_patches expects a single-channel volume")
    nx = vol.grid.dims[0]
    offsets = tuple(range(-r, r + 1))
    out = []
    for i in range(nx):
        planes = [vol.data[reflect_index(i + off, nx), :, :] for off in offsets]
        out.append(PatchStack25D(i, np.stack(planes, axis=2), offsets))
    return out


def extract_patch(vol3d: np.ndarray, i: int, r: int = NEIGHBOR_RADIUS) -> np.ndarray:
    """Single (H, W, 2r+1) sagittal stack at index i from a raw 3D array."""
    nx = vol3d.shape[0]
    planes = [vol3d[reflect_index(i + off, nx), :, :] for off in range(-r, r + 1)]
    return np.stack(planes, axis=2)


CONDITION_LAYOUT = (("dwi", 11), ("structural", 1), ("orientation", 3), ("bvec", 2))


@dataclass(frozen=True)
class ConditionStack:
    """Channel-concatenated H x W network input: 11 DWI slices, then the
    condition modalities that are present. names[c] labels channel c."""

    data: np.ndarray  # (H, W, C) float32
    names: tuple

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def assemble_condition_stack(x_plus: PatchStack25D, structural, dti_orient, bvec_map, sagittal_i: int) -> ConditionStack:
    """Concatenate the 2.5D DWI stack with per-modality condition slices at
    sagittal index sagittal_i. Passing None for a modality omits its
    channels (ablation mode). Full stack: 11 + 1 + 3 + 2 = 17 channels."""
    h, w = x_plus.slices.shape[:2]
    planes = [x_plus.slices]
    names = [f"dwi{off:+d}" for off in x_plus.offsets]

    def add(vol, label, want_channels):
        if vol is None:
            return
        if vol.grid.dims[1] != h or vol.grid.dims[2] != w:
            raise GridError(f"{label} in-plane dims {vol.grid.dims[1:]} do not match ({h},{w})")
        if vol.channels != want_channels:
            raise ValidationError(f"{label} must have {want_channels} channels, got {vol.channels}")
        sl = vol.data[sagittal_i]
        if sl.ndim == 2:
            sl = sl[:, :, None]
        planes.append(sl)
        if want_channels == 1:
            names.append(label)
        else:
            names.extend(f"{label}{c}" for c in range(want_channels))

    add(structural, "structural", 1)
    add(dti_orient, "orientation", 3)
    add(bvec_map, "bvec", 2)
    stacked = np.concatenate(planes, axis=2).astype(np.float32)
    return ConditionStack(stacked, tuple(names))
