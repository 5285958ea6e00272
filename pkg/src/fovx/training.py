"""Training, model selection, and whole-scan imputation.

Two models are trained side by side, one per shell (b0 and diffusion
weighted). Each epoch draws a fresh truncation per scan, refits the DTI
conditions on the acquired region only, and alternates discriminator and
generator steps per minibatch. Everything is keyed off the config seed, so
a rerun with the same corpus and config reproduces checkpoints bit for bit.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import nnet
from .core import B0_THRESHOLD, DwiVolume, Mask, Volume3, from_stack
from .dti import bvec_map, fit_dti, orientation_map
from .errors import ConfigError, InvalidCutError, NumericalError, SelectionError, ValidationError
from .preprocess import (
    BOTTOM,
    TOP,
    FovCut,
    NEIGHBOR_RADIUS,
    PatchStack25D,
    assemble_condition_stack,
    denormalize,
    extract_patch,
    normalize_intensity,
    splice_imputation,
    truncate_fov,
)
from .shmetrics import acc, fit_sh


def shell_of(bval: float) -> str:
    return nnet.SHELL_B0 if bval <= B0_THRESHOLD else nnet.SHELL_WEIGHTED


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    cut_min_mm: float = 20.0
    cut_max_mm: float = 50.0
    validation_cuts_mm: tuple = (30.0, 50.0)
    test_cut_mm: float = 50.0
    lr: float = 2e-4
    optimizer: str = "adam"
    lambda_rec: float = 100.0
    lambda_kl: float = 1.0
    lambda_gan: float = 1.0
    z_dim: int = 32
    base_channels: int = 32
    batches_per_epoch: int = 0  # per shell; 0 = no cap
    checkpoint_every: int = 0  # 0 = final epoch only
    val_stride: int = 1  # sagittal subsampling of the validation ACC mask
    sh_lmax: int = 4
    max_cut_retries: int = 20
    use_structural: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not (0 < self.cut_min_mm <= self.cut_max_mm):
            raise ValidationError(f"bad cut range [{self.cut_min_mm}, {self.cut_max_mm}]")
        if self.val_stride < 1 or self.max_cut_retries < 1:
            raise ValidationError("val_stride and max_cut_retries must be >= 1")

    def hyper(self) -> nnet.Hyper:
        cond = 6 if self.use_structural else 5
        return nnet.Hyper(
            z_dim=self.z_dim,
            base_channels=self.base_channels,
            cond_channels=cond,
            lambda_rec=self.lambda_rec,
            lambda_kl=self.lambda_kl,
            lambda_gan=self.lambda_gan,
        )

    def to_json(self) -> str:
        d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        d = json.loads(text)
        if "validation_cuts_mm" in d:
            d["validation_cuts_mm"] = tuple(float(c) for c in d["validation_cuts_mm"])
        return TrainConfig(**d)


@dataclass(frozen=True)
class ScanRecord:
    """One corpus entry: a complete-FOV scan with its conditions."""

    scan_id: str
    dwi: DwiVolume
    structural: Volume3
    brain: Mask


@dataclass(frozen=True)
class TrainSample:
    stack: np.ndarray  # (H, W, 11 + cond) float32, DWI channels first
    truth: np.ndarray  # (H, W) float32, normalized ground-truth slice
    missing: np.ndarray  # (H, W) bool, rows of the cut slab
    shell: str
    scan_id: str
    volume_index: int
    sagittal_index: int
    cut: FovCut


class EpochSamples:
    """Lazy per-epoch sample stream for one scan and one truncation draw.

    Holds the shared prepared arrays once; individual (H, W, C) stacks are
    assembled on demand so a shuffled epoch does not hold every slice
    in memory."""

    def __init__(self, scan: ScanRecord, cfg: TrainConfig, rng):
        self.scan_id = scan.scan_id
        grid = scan.dwi.grid
        trunc = cut = None
        for _ in range(cfg.max_cut_retries):
            cut_mm = float(rng.uniform(cfg.cut_min_mm, cfg.cut_max_mm))
            side = TOP if rng.random() < 0.5 else BOTTOM
            try:
                trunc, cut = truncate_fov(scan.dwi, side, cut_mm)
                break
            except InvalidCutError:
                continue
        if trunc is None:
            raise InvalidCutError(
                f"{scan.scan_id}: no valid cut in [{cfg.cut_min_mm}, {cfg.cut_max_mm}] mm "
                f"after {cfg.max_cut_retries} draws"
            )
        self.cut = cut
        self.grid = grid

        acq = scan.brain.bits.copy()
        acq[:, :, cut.first_missing_k : cut.last_missing_k + 1] = False
        tf = fit_dti(trunc, Mask(grid, acq))
        self.orient = orientation_map(tf)

        norm_trunc, self.rec = normalize_intensity(trunc)
        self.stack_norm = norm_trunc.stack()
        self.truth_norm = np.clip(scan.dwi.stack() / np.float32(self.rec.scale), 0.0, 1.0).astype(np.float32)
        self.structural = normalize_intensity(scan.structural)[0] if cfg.use_structural else None
        self.gradients = scan.dwi.gradients
        self.shells = tuple(shell_of(b) for b in self.gradients.bvals)

        ny, nz = grid.dims[1], grid.dims[2]
        self.missing2d = np.zeros((ny, nz), dtype=bool)
        self.missing2d[:, cut.first_missing_k : cut.last_missing_k + 1] = True

        slab = scan.brain.bits[:, :, cut.first_missing_k : cut.last_missing_k + 1]
        emit_i = np.nonzero(slab.any(axis=(1, 2)))[0]
        self.descs = [(int(n), int(i)) for n in range(len(scan.dwi)) for i in emit_i]

    def __len__(self):
        return len(self.descs)

    def assemble(self, j: int) -> TrainSample:
        n, i = self.descs[j]
        offsets = tuple(range(-NEIGHBOR_RADIUS, NEIGHBOR_RADIUS + 1))
        patch = PatchStack25D(i, extract_patch(self.stack_norm[..., n], i), offsets)
        stack = assemble_condition_stack(
            patch, self.structural, self.orient, bvec_map(self.gradients.bvecs[n], self.grid), i
        )
        return TrainSample(
            stack=stack.data,
            truth=self.truth_norm[i, :, :, n],
            missing=self.missing2d,
            shell=self.shells[n],
            scan_id=self.scan_id,
            volume_index=n,
            sagittal_index=i,
            cut=self.cut,
        )

    def __iter__(self):
        return (self.assemble(j) for j in range(len(self.descs)))


def make_samples(scan: ScanRecord, cfg: TrainConfig, rng) -> EpochSamples:
    """One epoch pass for one scan: a fresh Uniform[cut range] x {top,bottom}
    truncation, conditions refit on the acquired region, and one sample per
    (volume, sagittal slice) whose slice meets the missing slab inside the
    brain."""
    return EpochSamples(scan, cfg, rng)


def _sample_eps(cfg, shell_idx, epoch, batch_idx, sample_idx, z_dim):
    seq = np.random.SeedSequence((cfg.seed, shell_idx, epoch, batch_idx, sample_idx))
    return np.random.Generator(np.random.Philox(seq)).standard_normal(z_dim).astype(np.float32)


def _batch_arrays(samples):
    stack = np.stack([s.stack for s in samples]).transpose(0, 3, 1, 2)
    x = stack[:, :11]
    cond = stack[:, 11:]
    truth = np.stack([s.truth for s in samples])[:, None]
    missing = np.stack([s.missing for s in samples])[:, None].astype(np.float32)
    return np.ascontiguousarray(x), np.ascontiguousarray(cond), truth, missing


@dataclass
class TrainResult:
    model_b0: nnet.ImputationModel
    model_dwi: nnet.ImputationModel
    log_rows: list
    log_path: str
    out_dir: str
    selected_epochs: dict


def _train_batch(model, g_opt, d_opt, samples, eps_rows, label):
    x, cond, truth, missing = _batch_arrays(samples)
    eps = np.stack(eps_rows)
    pred, code = model.generate(x, cond, eps)
    rec = nnet.reconstruction_loss(pred, truth, missing)
    kl = nnet.kl_divergence(code)
    d_real = model.discriminate(truth, cond)
    d_fake_det = model.discriminate(pred.detach(), cond)
    loss_d, _ = nnet.gan_losses(d_real, d_fake_det)
    if not np.isfinite(loss_d.data):
        raise NumericalError(f"non-finite discriminator loss at {label}")
    loss_d.backward()
    d_opt.step()
    d_fake = model.discriminate(pred, cond)
    loss_g = nnet.generator_gan_loss(d_fake)
    total = nnet.total_loss(rec, kl, loss_g, model.hyper)
    if not np.isfinite(total.data):
        raise NumericalError(f"non-finite generator loss at {label}")
    total.backward()
    g_opt.step()
    return float(rec.data), float(kl.data), float(loss_g.data), float(loss_d.data)


def validation_score(models: dict, val_scans, cfg: TrainConfig, cut_mm: float) -> float:
    """Mean ACC over the imputed slab (brain-restricted) after a top cut of
    cut_mm on each validation scan. val_stride > 1 subsamples the sagittal
    planes, imputing and scoring only every stride-th one."""
    scores = []
    for scan in val_scans:
        trunc, cut = truncate_fov(scan.dwi, TOP, cut_mm)
        bits = scan.brain.bits.copy()
        if cfg.val_stride > 1:
            keep = np.zeros_like(bits)
            keep[:: cfg.val_stride] = True
            bits &= keep
        strided = Mask(scan.dwi.grid, bits)
        imputed = impute_scan(trunc, cut, models, scan.structural, mask=strided,
                              batch_size=cfg.batch_size, use_structural=cfg.use_structural)
        slab = np.zeros_like(bits)
        slab[:, :, cut.first_missing_k : cut.last_missing_k + 1] = True
        m = Mask(scan.dwi.grid, bits & slab)
        if m.count == 0:
            continue
        ref = fit_sh(scan.dwi, m, l_max=cfg.sh_lmax)
        test = fit_sh(imputed, m, l_max=cfg.sh_lmax)
        r = acc(ref, test, m)
        if np.isfinite(r.mean):
            scores.append(r.mean)
    return float(np.mean(scores)) if scores else float("nan")


def train(train_scans, val_scans, cfg: TrainConfig, out_dir: str) -> TrainResult:
    """Run the full two-model loop and return the selected checkpoints."""
    if not train_scans:
        raise ValidationError("empty training corpus")
    train_ids = {s.scan_id for s in train_scans}
    if train_ids & {s.scan_id for s in val_scans}:
        raise ValidationError("train/validation scans overlap")
    os.makedirs(out_dir, exist_ok=True)
    hyper = cfg.hyper()
    shells = (nnet.SHELL_B0, nnet.SHELL_WEIGHTED)
    models = {s: nnet.ImputationModel(s, hyper, seed=cfg.seed * 1000 + si + 1) for si, s in enumerate(shells)}
    g_opts = {s: nnet.make_optimizer(cfg.optimizer, models[s].generator_parameters(), cfg.lr) for s in shells}
    d_opts = {s: nnet.make_optimizer(cfg.optimizer, models[s].discriminator_parameters(), cfg.lr) for s in shells}

    ckpts = {s: [] for s in shells}
    rows = []
    log_path = os.path.join(out_dir, "train_log.csv")

    def save_ckpt(epoch):
        for s in shells:
            path = os.path.join(out_dir, f"{s}_ep{epoch:03d}.ckpt")
            nnet.save_model(path, models[s], extra={"epoch": epoch})
            ckpts[s].append((epoch, path))

    for epoch in range(1, cfg.epochs + 1):
        epoch_sets = [
            make_samples(scan, cfg, np.random.default_rng(np.random.SeedSequence((cfg.seed, 101, epoch, si))))
            for si, scan in enumerate(train_scans)
        ]
        index = [
            (si, j, es.shells[es.descs[j][0]])
            for si, es in enumerate(epoch_sets)
            for j in range(len(es))
        ]
        np.random.default_rng(np.random.SeedSequence((cfg.seed, 202, epoch))).shuffle(index)
        sums = np.zeros(4)
        batches = 0
        for shell_idx, shell in enumerate(shells):
            mine = [(si, j) for si, j, sh in index if sh == shell]
            limit = len(mine)
            if cfg.batches_per_epoch:
                limit = min(limit, cfg.batches_per_epoch * cfg.batch_size)
            for bi, start in enumerate(range(0, limit, cfg.batch_size)):
                chunk = mine[start : start + cfg.batch_size]
                samples = [epoch_sets[si].assemble(j) for si, j in chunk]
                eps_rows = [
                    _sample_eps(cfg, shell_idx, epoch, bi, k, hyper.z_dim) for k in range(len(samples))
                ]
                label = f"epoch {epoch} shell {shell} batch {bi}"
                try:
                    parts = _train_batch(models[shell], g_opts[shell], d_opts[shell], samples, eps_rows, label)
                except NumericalError:
                    save_ckpt(epoch * 1000 + bi)  # last finite parameter state
                    _write_log(log_path, rows)
                    raise
                sums += np.asarray(parts)
                batches += 1
        mean = sums / max(batches, 1)
        vals = {}
        for cut_mm in cfg.validation_cuts_mm:
            vals[cut_mm] = validation_score(models, val_scans, cfg, cut_mm) if val_scans else float("nan")
        rows.append(
            {
                "epoch": epoch,
                "loss_rec": float(mean[0]),
                "loss_kl": float(mean[1]),
                "loss_g": float(mean[2]),
                "loss_d": float(mean[3]),
                "val_acc_30": vals.get(30.0, float("nan")),
                "val_acc_50": vals.get(50.0, float("nan")),
            }
        )
        if (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0) or epoch == cfg.epochs:
            save_ckpt(epoch)
    _write_log(log_path, rows)

    selected = {}
    if val_scans and len(ckpts[nnet.SHELL_B0]) > 1:
        b0_model, selected[nnet.SHELL_B0] = select_model(
            ckpts[nnet.SHELL_B0], val_scans, cfg, companions={nnet.SHELL_WEIGHTED: models[nnet.SHELL_WEIGHTED]}
        )
        dwi_model, selected[nnet.SHELL_WEIGHTED] = select_model(
            ckpts[nnet.SHELL_WEIGHTED], val_scans, cfg, companions={nnet.SHELL_B0: b0_model}
        )
    else:
        b0_model, dwi_model = models[nnet.SHELL_B0], models[nnet.SHELL_WEIGHTED]
        selected = {s: cfg.epochs for s in shells}
    nnet.save_model(os.path.join(out_dir, "model_b0.ckpt"), b0_model, extra={"epoch": selected[nnet.SHELL_B0]})
    nnet.save_model(os.path.join(out_dir, "model_dwi.ckpt"), dwi_model, extra={"epoch": selected[nnet.SHELL_WEIGHTED]})
    return TrainResult(b0_model, dwi_model, rows, log_path, out_dir, selected)


def _write_log(path, rows):
    cols = ["epoch", "loss_rec", "loss_kl", "loss_g", "loss_d", "val_acc_30", "val_acc_50"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: (f"{r[c]:.8g}" if c != "epoch" else r[c]) for c in cols})


def select_model(checkpoints, val_scans, cfg: TrainConfig, companions: dict):
    """Pick the checkpoint with the best mean validation ACC over the 30 mm
    and 50 mm top cuts; ties go to the later epoch. Returns (model, epoch)."""
    if not checkpoints:
        raise SelectionError("no checkpoints to select from")
    if not val_scans:
        raise SelectionError("no validation scans")
    best = None
    for epoch, path in checkpoints:
        model = nnet.load_model(path)
        trial = dict(companions)
        trial[model.shell] = model
        per_cut = [validation_score(trial, val_scans, cfg, c) for c in cfg.validation_cuts_mm]
        score = float(np.mean(per_cut))
        if not np.isfinite(score):
            continue
        if best is None or score > best[0] or (score == best[0] and epoch > best[1]):
            best = (score, epoch, model)
    if best is None:
        raise SelectionError("no checkpoint produced a finite validation score")
    return best[2], best[1]


def _foreground(d: DwiVolume) -> np.ndarray:
    """Heuristic head mask from the mean b0: above 10% of its 99th percentile."""
    if d.gradients is not None and d.gradients.is_b0.any():
        ref = d.stack()[..., d.gradients.is_b0].mean(axis=3)
    else:
        ref = d.stack().mean(axis=3)
    pos = ref[ref > 0]
    if pos.size == 0:
        return np.zeros(d.grid.dims, dtype=bool)
    return ref > 0.1 * np.percentile(pos, 99.0)


def impute_scan(scan: DwiVolume, cut: FovCut, models: dict, structural: Volume3,
                mask: Mask | None = None, batch_size: int = 8,
                use_structural: bool = True) -> DwiVolume:
    """Fill the missing slab of a truncated scan with model output.

    Routes each volume to its shell's model, decodes every sagittal slice
    meeting the slab with eps = 0, rescales to the input's intensity range,
    and splices so acquired voxels pass through bit for bit.
    """
    if scan.gradients is None:
        raise ValidationError("scan has no gradient table attached")
    if cut.n_slices == 0:
        return scan
    needed = {shell_of(b) for b in scan.gradients.bvals}
    for s in needed:
        if s not in models or models[s] is None:
            raise ConfigError(f"no model provided for shell {s!r}")
    grid = scan.grid
    fg = mask.bits if mask is not None else _foreground(scan)
    acq = fg.copy()
    acq[:, :, cut.first_missing_k : cut.last_missing_k + 1] = False
    tf = fit_dti(scan, Mask(grid, acq))
    orient = orientation_map(tf)
    norm, rec = normalize_intensity(scan)
    struct_norm = normalize_intensity(structural)[0] if use_structural else None
    stack_norm = norm.stack()
    out_norm = stack_norm.copy(order="F")
    slice_list = [int(i) for i in np.nonzero(fg.any(axis=(1, 2)))[0]]
    offsets = tuple(range(-NEIGHBOR_RADIUS, NEIGHBOR_RADIUS + 1))
    for n in range(len(scan)):
        model = models[shell_of(scan.gradients.bvals[n])]
        bmap = bvec_map(scan.gradients.bvecs[n], grid)
        for start in range(0, len(slice_list), batch_size):
            chunk = slice_list[start : start + batch_size]
            stacks = [
                assemble_condition_stack(
                    PatchStack25D(i, extract_patch(stack_norm[..., n], i), offsets),
                    struct_norm, orient, bmap, i,
                ).data
                for i in chunk
            ]
            arr = np.stack(stacks).transpose(0, 3, 1, 2)
            pred, _ = model.generate(np.ascontiguousarray(arr[:, :11]), np.ascontiguousarray(arr[:, 11:]), eps=None)
            for b, i in enumerate(chunk):
                out_norm[i, :, :, n] = pred.data[b, 0]
    imputed = denormalize(from_stack(grid, out_norm, scan.gradients), rec)
    return splice_imputation(scan, imputed, cut)


def copy_baseline(scan: DwiVolume, cut: FovCut) -> DwiVolume:
    """Nearest-acquired-slice baseline: every missing slice is a copy of the
    boundary slice next to the slab."""
    if cut.n_slices == 0:
        return scan
    nz = scan.grid.dims[2]
    src = cut.first_missing_k - 1 if cut.side == TOP else cut.last_missing_k + 1
    if src < 0 or src >= nz:
        raise ValidationError("cut leaves no acquired boundary slice to copy")
    data = scan.stack().copy(order="F")
    for k in range(cut.first_missing_k, cut.last_missing_k + 1):
        data[:, :, k, :] = data[:, :, src, :]
    return scan.with_stack(data)
