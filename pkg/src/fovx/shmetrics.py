"""Real even-order spherical harmonics and the angular evaluation metrics.

The basis is the real symmetric convention common in diffusion MRI: for even
l, m < 0 maps to sqrt(2) times the imaginary part of Y_l^|m|, m = 0 to Y_l^0,
m > 0 to sqrt(2) times the real part, with Condon-Shortley-free associated
Legendre functions. The per-voxel signal fitted is the attenuation
S / mean(S_b0) clamped to [0,1], so coefficients are b0-scale-free.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import DwiVolume, Grid3, Mask, Volume3
from .errors import (
    BasisError,
    DegenerateInputError,
    GridError,
    NumericalError,
    UnsupportedError,
    ValidationError,
)

LAMBDA_LB = 0.006


def _legendre_all(l_max: int, x: np.ndarray) -> dict:
    """Condon-Shortley-free associated Legendre P_l^m(x) for all 0<=m<=l<=l_max.
    Returns {(l, m): values}."""
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    p = {(0, 0): np.ones_like(x)}
    for m in range(1, l_max + 1):
        p[(m, m)] = p[(m - 1, m - 1)] * (2 * m - 1) * s
    for m in range(0, l_max):
        p[(m + 1, m)] = x * (2 * m + 1) * p[(m, m)]
    for m in range(0, l_max + 1):
        for l in range(m + 2, l_max + 1):
            p[(l, m)] = ((2 * l - 1) * x * p[(l - 1, m)] - (l + m - 1) * p[(l - 2, m)]) / (l - m)
    return p


def _norm_lm(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4.0 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


@dataclass(frozen=True)
class ShBasis:
    """Even-order real basis up to l_max; R = (l_max+1)(l_max+2)/2 terms."""

    l_max: int

    def __post_init__(self):
        if self.l_max < 2 or self.l_max % 2 != 0:
            raise ValidationError(f"l_max must be an even integer >= 2, got {self.l_max}")

    @property
    def index_map(self) -> tuple:
        return tuple((l, m) for l in range(0, self.l_max + 1, 2) for m in range(-l, l + 1))

    @property
    def n_coeffs(self) -> int:
        return (self.l_max + 1) * (self.l_max + 2) // 2

    def design(self, directions: np.ndarray) -> np.ndarray:
        """(P, R) matrix of basis values at unit direction rows."""
        d = np.asarray(directions, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValidationError(f"directions must be (P,3), got {d.shape}")
        x = np.clip(d[:, 2], -1.0, 1.0)
        phi = np.arctan2(d[:, 1], d[:, 0])
        p = _legendre_all(self.l_max, x)
        cols = []
        for l, m in self.index_map:
            am = abs(m)
            base = _norm_lm(l, am) * p[(l, am)]
            if m < 0:
                cols.append(math.sqrt(2.0) * base * np.sin(am * phi))
            elif m == 0:
                cols.append(base)
            else:
                cols.append(math.sqrt(2.0) * base * np.cos(am * phi))
        return np.stack(cols, axis=1)

    def lb_penalty(self) -> np.ndarray:
        """Diagonal of the Laplace-Beltrami penalty, l^2 (l+1)^2 per term."""
        return np.array([float(l * l * (l + 1) * (l + 1)) for l, _ in self.index_map])

    def l_degrees(self) -> np.ndarray:
        return np.array([l for l, _ in self.index_map])


def sh_eval(l: int, m: int, direction) -> float:
    """Single real basis value at a unit direction."""
    if l % 2 != 0:
        raise UnsupportedError(f"odd degree l={l}: dMRI signals are antipodally symmetric")
    if l < 0 or abs(m) > l:
        raise ValidationError(f"invalid order m={m} for degree l={l}")
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValidationError("direction must be a unit vector")
    lm = max(l, 2)
    basis = ShBasis(lm)
    col = basis.index_map.index((l, m))
    return float(basis.design(d[None, :])[0, col])


@dataclass(frozen=True)
class ShField:
    """Per-voxel coefficient vectors; valid marks voxels where the fit was
    defined (inside the mask, positive mean b0)."""

    grid: Grid3
    l_max: int
    coeffs: np.ndarray  # (nx,ny,nz,R) float64
    valid: np.ndarray  # (nx,ny,nz) bool


def fit_sh(d: DwiVolume, mask: Mask, l_max: int = 4, lambda_lb: float = LAMBDA_LB) -> ShField:
    """Laplace-Beltrami-regularized least-squares SH fit of the attenuation
    signal at every masked voxel. Voxels with mean b0 <= 0 are excluded."""
    if d.gradients is None:
        raise ValidationError("scan has no gradient table attached")
    if d.grid != mask.grid:
        raise GridError("scan and mask grids differ")
    basis = ShBasis(l_max)
    gtab = d.gradients
    weighted = ~gtab.is_b0
    if weighted.sum() < 1:
        raise ValidationError("no diffusion-weighted volumes to fit")
    b = basis.design(gtab.bvecs[weighted])
    m = b.T @ b + lambda_lb * np.diag(basis.lb_penalty())
    try:
        m_inv_bt = np.linalg.solve(m, b.T)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"regularized Gram matrix is singular: {e}") from e

    flat_mask = mask.bits.ravel(order="F")
    stack = d.stack().reshape(-1, len(d), order="F")[flat_mask].astype(np.float64)  # (M, N)
    b0_mean = stack[:, gtab.is_b0].mean(axis=1)
    ok = b0_mean > 0
    sig = np.zeros((stack.shape[0], int(weighted.sum())))
    sig[ok] = np.clip(stack[ok][:, weighted] / b0_mean[ok, None], 0.0, 1.0)
    coeffs_flat = sig @ m_inv_bt.T  # (M, R)
    coeffs_flat[~ok] = 0.0

    dims = d.grid.dims
    coeffs = np.zeros((dims[0] * dims[1] * dims[2], basis.n_coeffs))
    coeffs[flat_mask] = coeffs_flat
    valid = np.zeros(dims[0] * dims[1] * dims[2], dtype=bool)
    valid[flat_mask] = ok
    return ShField(
        grid=d.grid,
        l_max=l_max,
        coeffs=coeffs.reshape(dims + (basis.n_coeffs,), order="F"),
        valid=valid.reshape(dims, order="F"),
    )


@dataclass(frozen=True)
class AccResult:
    map: Volume3  # per-voxel ACC, 0 at excluded voxels
    mean: float
    included: int


ACC_NORM_FLOOR = 1e-12


def acc(a: ShField, b: ShField, mask: Mask) -> AccResult:
    """Angular correlation coefficient: cosine of the two coefficient vectors
    with the isotropic l=0 term removed. Voxels where either l>=2 norm is
    below 1e-12 (or either fit is invalid) are excluded from the mean."""
    if a.l_max != b.l_max:
        raise BasisError(f"basis order mismatch: {a.l_max} vs {b.l_max}")
    if a.grid != b.grid or a.grid != mask.grid:
        raise GridError("field and mask grids differ")
    hi = ShBasis(a.l_max).l_degrees() >= 2
    ca = a.coeffs[..., hi]
    cb = b.coeffs[..., hi]
    dots = (ca * cb).sum(axis=-1)
    na = np.sqrt((ca * ca).sum(axis=-1))
    nb = np.sqrt((cb * cb).sum(axis=-1))
    included = mask.bits & a.valid & b.valid & (na >= ACC_NORM_FLOOR) & (nb >= ACC_NORM_FLOOR)
    amap = np.zeros(a.grid.dims)
    amap[included] = dots[included] / (na[included] * nb[included])
    n_inc = int(included.sum())
    mean = float(amap[included].mean()) if n_inc else float("nan")
    return AccResult(Volume3(a.grid, amap.astype(np.float32)), mean, n_inc)


def psnr(ref: DwiVolume, test: DwiVolume, mask: Mask) -> float:
    """10 log10(MAX^2 / MSE) over masked voxels of all volumes; MAX is the
    reference maximum within the mask. Zero MSE returns +inf."""
    if ref.grid != test.grid or ref.grid != mask.grid:
        raise GridError("grids differ")
    if len(ref) != len(test):
        raise ValidationError(f"volume counts differ: {len(ref)} vs {len(test)}")
    if mask.count == 0:
        raise DegenerateInputError("mask is empty")
    rv = ref.stack()[mask.bits].astype(np.float64)
    tv = test.stack()[mask.bits].astype(np.float64)
    mse = float(((rv - tv) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    peak = float(rv.max())
    if peak <= 0.0:
        return float("-inf")
    return float(10.0 * np.log10(peak * peak / mse))


def split_wm_mask(tf, fa_threshold: float = 0.3):
    """Partition the fit mask into (FA >= threshold, rest)."""
    brain = tf.mask.bits
    wm = brain & (tf.fa.data >= fa_threshold)
    return Mask(tf.grid, wm), Mask(tf.grid, brain & ~wm)
