"""Command-line entry point wiring the pipeline stages together.

Every subcommand is deterministic given its flags, writes machine-readable
reports (JSON/CSV), and drops a manifest recording the command, config
hash, input digests and seed into its output directory. Exit codes: 0 ok,
1 validation problem, 2 I/O problem.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, backend, nnet, phantom, preprocess, tract
from .core import DwiVolume, Grid3, Mask, Volume3
from .dti import TensorField, fit_dti, orientation_map
from .errors import (
    ConfigError,
    CorruptError,
    FormatError,
    FovxError,
    IoError,
    UnsupportedError,
    ValidationError,
)
from .nifti import read_gradients, read_nifti, write_gradients, write_nifti
from .preprocess import FovCut, detect_fov_cutoff, truncate_fov
from .shmetrics import acc, fit_sh, psnr, split_wm_mask
from .training import ScanRecord, TrainConfig, impute_scan, train


def _sha256(path):
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
    except OSError as e:
        raise IoError(f"cannot digest {path}: {e}") from e
    return h.hexdigest()


def _write_manifest(out_dir, command, config, inputs, seed, t0):
    """One manifest per output directory; rerunning a command replaces it."""
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "config": config,
        "inputs": {p: _sha256(p) for p in inputs if p},
        "version": __version__,
        "seed": seed,
        "duration_s": round(time.monotonic() - t0, 3),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def _out_dir_of(path):
    return os.path.dirname(os.path.abspath(path))


def _finite_or_none(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _sanitize(obj):
    """Strict-JSON guard: non-finite floats become null."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return _finite_or_none(obj)


def _load_dwi(path, bval, bvec) -> DwiVolume:
    img = read_nifti(path)
    if not isinstance(img, DwiVolume):
        raise ValidationError(f"{path}: expected a 4D DWI series")
    return img.attach(read_gradients(bval, bvec))


def _load_mask(path) -> Mask:
    img = read_nifti(path)
    if not isinstance(img, Volume3) or img.channels != 1:
        raise ValidationError(f"{path}: expected a 3D mask volume")
    return Mask(img.grid, img.data > 0.5)


def _load_volume(path) -> Volume3:
    img = read_nifti(path)
    if not isinstance(img, Volume3):
        raise ValidationError(f"{path}: expected a 3D volume")
    return img


# -- phantom -------------------------------------------------------------------


def _write_phantom_scan(scan, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_nifti(os.path.join(out_dir, "dwi.nii"), scan.dwi)
    write_gradients(os.path.join(out_dir, "dwi.bval"), os.path.join(out_dir, "dwi.bvec"), scan.dwi.gradients)
    write_nifti(os.path.join(out_dir, "t1.nii"), scan.structural)
    grid = scan.brain.grid
    write_nifti(os.path.join(out_dir, "brain.nii"), Volume3(grid, scan.brain.bits.astype(np.float32)))
    write_nifti(os.path.join(out_dir, "bundles.nii"), Volume3(grid, scan.bundle_labels.astype(np.float32)))
    t = scan.truth_tensors
    write_nifti(os.path.join(out_dir, "truth_tensors.nii"), Volume3(grid, t.tensors.astype(np.float32)))
    write_nifti(os.path.join(out_dir, "truth_fa.nii"), t.fa)
    write_nifti(os.path.join(out_dir, "truth_md.nii"), t.md)
    write_nifti(os.path.join(out_dir, "truth_v1.nii"), Volume3(grid, t.v1.astype(np.float32)))


def _make_phantom(args, seed):
    grid = Grid3((args.grid,) * 3, (args.spacing,) * 3)
    scheme = phantom.default_scheme(args.dirs, args.n_b0, args.b)
    spec = phantom.preset_spec(args.preset, grid, scheme, s0=args.s0, sigma=args.sigma, seed=seed)
    return phantom.generate(spec)


def cmd_phantom(args):
    t0 = time.monotonic()
    seed = _seed_of(args)
    scan = _make_phantom(args, seed)
    _write_phantom_scan(scan, args.out_dir)
    _write_manifest(args.out_dir, "phantom", _config_of(args), [], seed, t0)
    return 0


# -- truncate / qa ---------------------------------------------------------------


def cmd_truncate(args):
    t0 = time.monotonic()
    d = _load_dwi(args.infile, args.bval, args.bvec)
    cut_scan, cut = truncate_fov(d, args.side, args.mm)
    write_nifti(args.out, cut_scan)
    if args.cut_json:
        with open(args.cut_json, "w") as f:
            f.write(cut.to_json() + "\n")
    _write_manifest(_out_dir_of(args.out), "truncate", _config_of(args),
                    [args.infile, args.bval, args.bvec], _seed_of(args), t0)
    return 0


def cmd_qa(args):
    t0 = time.monotonic()
    d = _load_dwi(args.infile, args.bval, args.bvec)
    mask = _load_mask(args.mask)
    cut = detect_fov_cutoff(d, mask)
    scan_id = os.path.basename(args.infile)
    if cut is None:
        row = f"{scan_id},none,0"
    else:
        row = f"{scan_id},{cut.side},{cut.cut_mm:.6g}"
    lines = ["scan_id,side,cut_mm", row]
    print("\n".join(lines))
    if args.report:
        with open(args.report, "w") as f:
            f.write("\n".join(lines) + "\n")
        _write_manifest(_out_dir_of(args.report), "qa", _config_of(args),
                        [args.infile, args.bval, args.bvec, args.mask], _seed_of(args), t0)
    return 0


# -- fit-dti ---------------------------------------------------------------------


def cmd_fit_dti(args):
    t0 = time.monotonic()
    d = _load_dwi(args.infile, args.bval, args.bvec)
    mask = _load_mask(args.mask)
    tf = fit_dti(d, mask)
    outputs = []
    if args.out_fa:
        write_nifti(args.out_fa, tf.fa)
        outputs.append(args.out_fa)
    if args.out_md:
        write_nifti(args.out_md, tf.md)
        outputs.append(args.out_md)
    if args.out_v1:
        write_nifti(args.out_v1, Volume3(tf.grid, tf.v1.astype(np.float32)))
        outputs.append(args.out_v1)
    if args.out_orient:
        write_nifti(args.out_orient, orientation_map(tf))
        outputs.append(args.out_orient)
    if not outputs:
        raise ValidationError("no outputs requested; pass at least one --out-* flag")
    _write_manifest(_out_dir_of(outputs[0]), "fit-dti", _config_of(args),
                    [args.infile, args.bval, args.bvec, args.mask], _seed_of(args), t0)
    return 0


# -- train / impute ----------------------------------------------------------------


def _load_scan_dir(path) -> ScanRecord:
    need = ["dwi.nii", "dwi.bval", "dwi.bvec", "t1.nii", "brain.nii"]
    for n in need:
        if not os.path.exists(os.path.join(path, n)):
            raise IoError(f"{path}: corpus scan is missing {n}")
    dwi = _load_dwi(os.path.join(path, "dwi.nii"), os.path.join(path, "dwi.bval"), os.path.join(path, "dwi.bvec"))
    return ScanRecord(
        scan_id=os.path.basename(os.path.normpath(path)),
        dwi=dwi,
        structural=_load_volume(os.path.join(path, "t1.nii")),
        brain=_load_mask(os.path.join(path, "brain.nii")),
    )


def load_corpus(root):
    """Corpus layout: root/train/<scan>/... and root/val/<scan>/..., each
    scan directory holding dwi.nii, dwi.bval, dwi.bvec, t1.nii, brain.nii."""
    out = {}
    for split in ("train", "val"):
        base = os.path.join(root, split)
        if not os.path.isdir(base):
            out[split] = []
            continue
        out[split] = [_load_scan_dir(os.path.join(base, d)) for d in sorted(os.listdir(base))
                      if os.path.isdir(os.path.join(base, d))]
    if not out["train"]:
        raise IoError(f"{root}: no training scans under {root}/train")
    return out["train"], out["val"]


def cmd_train(args):
    t0 = time.monotonic()
    if args.config:
        try:
            with open(args.config) as f:
                cfg = TrainConfig.from_json(f.read())
        except OSError as e:
            raise IoError(f"cannot read {args.config}: {e}") from e
        except (TypeError, KeyError, json.JSONDecodeError) as e:
            raise ConfigError(f"{args.config}: bad training config ({e})") from e
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = TrainConfig.from_json(json.dumps({**json.loads(cfg.to_json()), "seed": args.seed}))
    train_scans, val_scans = load_corpus(args.corpus)
    result = train(train_scans, val_scans, cfg, args.out_dir)
    inputs = [args.config] if args.config else []
    _write_manifest(args.out_dir, "train", json.loads(cfg.to_json()), inputs, cfg.seed, t0)
    if args.verbose:
        for r in result.log_rows:
            print(r)
    return 0


def cmd_impute(args):
    t0 = time.monotonic()
    d = _load_dwi(args.infile, args.bval, args.bvec)
    with open(args.cut_json) as f:
        cut = FovCut.from_json(f.read())
    models = {
        nnet.SHELL_B0: nnet.load_model(args.model_b0),
        nnet.SHELL_WEIGHTED: nnet.load_model(args.model_dwi),
    }
    structural = _load_volume(args.structural)
    mask = _load_mask(args.mask) if args.mask else None
    use_structural = models[nnet.SHELL_WEIGHTED].hyper.cond_channels >= 6
    out = impute_scan(d, cut, models, structural, mask=mask, use_structural=use_structural)
    write_nifti(args.out, out)
    _write_manifest(_out_dir_of(args.out), "impute", _config_of(args),
                    [args.infile, args.bval, args.bvec, args.structural, args.cut_json,
                     args.model_b0, args.model_dwi, args.mask], _seed_of(args), t0)
    return 0


# -- evaluate -----------------------------------------------------------------------


def _dwi_subset(d: DwiVolume, keep) -> DwiVolume:
    vols = tuple(v for v, k in zip(d.volumes, keep) if k)
    return DwiVolume(d.grid, vols, None)


def evaluate_report(ref: DwiVolume, test: DwiVolume, mask: Mask, cut: FovCut | None, l_max: int = 4) -> dict:
    """ACC and per-shell WM/non-WM PSNR, restricted to the cut slab when one
    is given."""
    bits = mask.bits
    if cut is not None and cut.n_slices > 0:
        slab = np.zeros_like(bits)
        slab[:, :, cut.first_missing_k : cut.last_missing_k + 1] = True
        bits = bits & slab
    region = Mask(mask.grid, bits)
    tf = fit_dti(ref, mask)
    wm_all, _ = split_wm_mask(tf)
    wm = Mask(mask.grid, wm_all.bits & bits)
    nonwm = Mask(mask.grid, bits & ~wm_all.bits)

    ref_sh = fit_sh(ref, region, l_max=l_max)
    test_sh = fit_sh(test, region, l_max=l_max)
    r_all = acc(ref_sh, test_sh, region)
    r_wm = acc(ref_sh, test_sh, wm)

    is_b0 = ref.gradients.is_b0

    def _psnr(m, keep):
        if m.count == 0 or not keep.any():
            return None
        return psnr(_dwi_subset(ref, keep), _dwi_subset(test, keep), m)

    return _sanitize(
        {
            "acc_mean": r_all.mean,
            "acc_wm_mean": r_wm.mean,
            "psnr_wm_b0": _psnr(wm, is_b0),
            "psnr_wm_dwi": _psnr(wm, ~is_b0),
            "psnr_nonwm_b0": _psnr(nonwm, is_b0),
            "psnr_nonwm_dwi": _psnr(nonwm, ~is_b0),
            "voxels_included": r_all.included,
        }
    )


def cmd_evaluate(args):
    t0 = time.monotonic()
    ref = _load_dwi(args.ref, args.bval, args.bvec)
    test = _load_dwi(args.test, args.bval, args.bvec)
    mask = _load_mask(args.mask)
    cut = None
    if args.cut_json:
        with open(args.cut_json) as f:
            cut = FovCut.from_json(f.read())
    report = evaluate_report(ref, test, mask, cut)
    with open(args.report, "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(_out_dir_of(args.report), "evaluate", _config_of(args),
                    [args.ref, args.test, args.bval, args.bvec, args.mask, args.cut_json],
                    _seed_of(args), t0)
    return 0


# -- tract --------------------------------------------------------------------------


def _tf_from_maps(fa: Volume3, v1_img) -> TensorField:
    """Minimal tensor field for tracking from fa + v1 volumes on disk."""
    grid = fa.grid
    if isinstance(v1_img, DwiVolume):
        v1 = v1_img.stack().astype(np.float64)
    else:
        v1 = v1_img.data.astype(np.float64)
    if v1.shape != grid.dims + (3,):
        raise ValidationError(f"v1 shape {v1.shape} does not match grid {grid.dims} + (3,)")
    dims = grid.dims
    zeros3 = np.zeros(dims)
    mask = Mask(grid, fa.data > 0)
    return TensorField(
        grid=grid, mask=mask, tensors=np.zeros(dims + (6,)), ln_s0=zeros3,
        fa=fa, md=Volume3(grid, zeros3.astype(np.float32)), v1=v1,
        evals=np.zeros(dims + (3,)), fit_failed=np.zeros(dims, dtype=bool),
        clamped=np.zeros(dims, dtype=bool),
    )


def cmd_tract(args):
    t0 = time.monotonic()
    fa = _load_volume(args.fa)
    v1 = read_nifti(args.v1)
    seeds = _load_mask(args.seeds)
    tf = _tf_from_maps(fa, v1)
    lines = tract.track(tf, seeds, step_mm=args.step, fa_stop=args.fa_stop, angle_stop_deg=args.angle_stop)
    stats = tract.bundle_stats(lines, tf.grid)
    with open(args.out_trk, "w") as f:
        json.dump(tract.streamlines_to_json(lines), f)
        f.write("\n")
    if args.out_mask:
        write_nifti(args.out_mask, Volume3(tf.grid, stats.occupancy.bits.astype(np.float32)))
    _write_manifest(_out_dir_of(args.out_trk), "tract", _config_of(args),
                    [args.fa, args.v1, args.seeds], _seed_of(args), t0)
    return 0


def cmd_tract_compare(args):
    t0 = time.monotonic()
    if len(args.ref_mask) != len(args.test_mask):
        raise ValidationError("--ref-mask and --test-mask must be given the same number of times")
    rows = ["kind,label,dice,ref_mean_length_mm,test_mean_length_mm,mean_diff,sd_diff,loa_low,loa_high"]
    ref_lens = []
    test_lens = []
    for idx, (rp, tp) in enumerate(zip(args.ref_mask, args.test_mask)):
        rm, tm = _load_mask(rp), _load_mask(tp)
        d = tract.dice(rm, tm)
        rlen = tlen = ""
        if args.ref_trk and args.test_trk and idx < len(args.ref_trk) and idx < len(args.test_trk):
            with open(args.ref_trk[idx]) as f:
                rl = tract.streamlines_from_json(json.load(f))
            with open(args.test_trk[idx]) as f:
                tl = tract.streamlines_from_json(json.load(f))
            r_stats = tract.bundle_stats(rl, rm.grid)
            t_stats = tract.bundle_stats(tl, tm.grid)
            ref_lens.append(r_stats.mean_length_mm)
            test_lens.append(t_stats.mean_length_mm)
            rlen = f"{r_stats.mean_length_mm:.6g}"
            tlen = f"{t_stats.mean_length_mm:.6g}"
        rows.append(f"pair,{os.path.basename(rp)},{d:.6g},{rlen},{tlen},,,,")
    if len(ref_lens) >= 2:
        ba = tract.bland_altman(ref_lens, test_lens)
        rows.append(
            "bland_altman,mean_length,,,,"
            f"{ba['mean_diff']:.6g},{ba['sd_diff']:.6g},{ba['loa_low']:.6g},{ba['loa_high']:.6g}"
        )
    text = "\n".join(rows) + "\n"
    print(text, end="")
    if args.report:
        with open(args.report, "w") as f:
            f.write(text)
        _write_manifest(_out_dir_of(args.report), "tract-compare", _config_of(args),
                        list(args.ref_mask) + list(args.test_mask), _seed_of(args), t0)
    return 0


# -- e2e ----------------------------------------------------------------------------


def cmd_e2e(args):
    t0 = time.monotonic()
    seed = _seed_of(args)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)

    scans = {}
    roles = [("train", args.train_scans), ("val", 1), ("test", 1)]
    corpus_train, corpus_val = [], []
    test_rec = None
    idx = 0
    for role, count in roles:
        for c in range(count):
            sid = f"{role}_{c:03d}"
            grid = Grid3((args.grid,) * 3, (args.spacing,) * 3)
            scheme = phantom.default_scheme(args.dirs, args.n_b0, args.b)
            spec = phantom.preset_spec(args.preset, grid, scheme, s0=args.s0,
                                       sigma=args.sigma, seed=seed * 1000 + idx)
            scan = phantom.generate(spec)
            _write_phantom_scan(scan, os.path.join(out, "scans", role, sid))
            rec = ScanRecord(sid, scan.dwi, scan.structural, scan.brain)
            scans[sid] = scan
            if role == "train":
                corpus_train.append(rec)
            elif role == "val":
                corpus_val.append(rec)
            else:
                test_rec = rec
            idx += 1

    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        seed=seed,
        batches_per_epoch=args.batches_per_epoch,
        val_stride=args.val_stride,
        sh_lmax=args.sh_lmax,
    )
    result = train(corpus_train, corpus_val, cfg, os.path.join(out, "ckpt"))

    trunc, cut = truncate_fov(test_rec.dwi, preprocess.TOP, cfg.test_cut_mm)
    cut_dir = os.path.join(out, "cut")
    os.makedirs(cut_dir, exist_ok=True)
    write_nifti(os.path.join(cut_dir, "dwi_cut.nii"), trunc)
    with open(os.path.join(cut_dir, "cut.json"), "w") as f:
        f.write(cut.to_json() + "\n")

    models = {nnet.SHELL_B0: result.model_b0, nnet.SHELL_WEIGHTED: result.model_dwi}
    imputed = impute_scan(trunc, cut, models, test_rec.structural, mask=test_rec.brain,
                          batch_size=cfg.batch_size)
    write_nifti(os.path.join(out, "imputed.nii"), imputed)

    report = evaluate_report(test_rec.dwi, imputed, test_rec.brain, cut, l_max=cfg.sh_lmax)
    with open(os.path.join(out, "eval.json"), "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")

    test_scan = scans[test_rec.scan_id]
    seeds = phantom.bundle_mask(test_scan, 0)
    ref_tf = test_scan.truth_tensors
    imp_tf = fit_dti(imputed, test_rec.brain)
    ref_lines = tract.track(ref_tf, seeds)
    imp_lines = tract.track(imp_tf, seeds)
    ref_stats = tract.bundle_stats(ref_lines, ref_tf.grid)
    imp_stats = tract.bundle_stats(imp_lines, imp_tf.grid)
    tract_report = {
        "dice": tract.dice(ref_stats.occupancy, imp_stats.occupancy),
        "ref_mean_length_mm": ref_stats.mean_length_mm,
        "test_mean_length_mm": imp_stats.mean_length_mm,
        "ref_streamlines": ref_stats.count,
        "test_streamlines": imp_stats.count,
    }
    with open(os.path.join(out, "tract.csv"), "w") as f:
        f.write("dice,ref_mean_length_mm,test_mean_length_mm,ref_streamlines,test_streamlines\n")
        f.write(
            f"{tract_report['dice']:.6g},{tract_report['ref_mean_length_mm']:.6g},"
            f"{tract_report['test_mean_length_mm']:.6g},{tract_report['ref_streamlines']},"
            f"{tract_report['test_streamlines']}\n"
        )

    consolidated = _sanitize(
        {
            "preset": args.preset,
            "seed": seed,
            "cut": json.loads(cut.to_json()),
            "training": {
                "epochs": cfg.epochs,
                "selected_epochs": result.selected_epochs,
                "final_losses": result.log_rows[-1] if result.log_rows else None,
            },
            "evaluate": report,
            "tract": tract_report,
        }
    )
    with open(os.path.join(out, "e2e_report.json"), "w") as f:
        json.dump(consolidated, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(out, "e2e", _config_of(args), [], seed, t0)
    return 0


# -- parser ------------------------------------------------------------------------


def _config_of(args):
    skip = {"func", "threads", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and not callable(v)}


def _seed_of(args):
    s = getattr(args, "seed", None)
    return 0 if s is None else int(s)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser():
    p = _Parser(prog="fovx", description="Diffusion MRI field-of-view extension toolkit")
    p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"fovx {__version__}")
    sub = p.add_subparsers(dest="cmd")

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--verbose", action="store_true")
        return sp

    sp = add("phantom", cmd_phantom, help="generate a synthetic scan")
    sp.add_argument("--preset", default="slab", choices=["slab", "arc+slab"])
    sp.add_argument("--grid", type=int, default=64)
    sp.add_argument("--spacing", type=float, default=2.0)
    sp.add_argument("--dirs", type=int, default=32)
    sp.add_argument("--n-b0", type=int, default=2)
    sp.add_argument("--b", type=float, default=1300.0)
    sp.add_argument("--s0", type=float, default=1000.0)
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--out-dir", required=True)

    sp = add("truncate", cmd_truncate, help="zero a superior/inferior slab")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--bval", required=True)
    sp.add_argument("--bvec", required=True)
    sp.add_argument("--side", choices=["top", "bottom"], required=True)
    sp.add_argument("--mm", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cut-json")

    sp = add("qa", cmd_qa, help="detect an existing FOV cutoff")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--bval", required=True)
    sp.add_argument("--bvec", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--report")

    sp = add("fit-dti", cmd_fit_dti, help="log-linear tensor fit")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--bval", required=True)
    sp.add_argument("--bvec", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out-fa")
    sp.add_argument("--out-md")
    sp.add_argument("--out-v1")
    sp.add_argument("--out-orient")

    sp = add("train", cmd_train, help="train the two per-shell models")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out-dir", required=True)

    sp = add("impute", cmd_impute, help="fill a truncated scan's missing slab")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--bval", required=True)
    sp.add_argument("--bvec", required=True)
    sp.add_argument("--structural", required=True)
    sp.add_argument("--model-b0", required=True)
    sp.add_argument("--model-dwi", required=True)
    sp.add_argument("--cut-json", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, help="ACC/PSNR agreement report")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--bval", required=True)
    sp.add_argument("--bvec", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--cut-json")
    sp.add_argument("--report", required=True)

    sp = add("tract", cmd_tract, help="deterministic streamline tracking")
    sp.add_argument("--fa", required=True)
    sp.add_argument("--v1", required=True)
    sp.add_argument("--seeds", required=True)
    sp.add_argument("--step", type=float, default=1.0)
    sp.add_argument("--fa-stop", type=float, default=0.2)
    sp.add_argument("--angle-stop", type=float, default=45.0)
    sp.add_argument("--out-trk", required=True)
    sp.add_argument("--out-mask")

    sp = add("tract-compare", cmd_tract_compare, help="Dice and Bland-Altman agreement")
    sp.add_argument("--ref-mask", action="append", required=True)
    sp.add_argument("--test-mask", action="append", required=True)
    sp.add_argument("--ref-trk", action="append")
    sp.add_argument("--test-trk", action="append")
    sp.add_argument("--report")

    sp = add("e2e", cmd_e2e, help="phantom -> truncate -> train -> impute -> evaluate -> tract")
    sp.add_argument("--preset", default="slab", choices=["slab", "arc+slab"])
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--grid", type=int, default=48)
    sp.add_argument("--spacing", type=float, default=2.0)
    sp.add_argument("--dirs", type=int, default=16)
    sp.add_argument("--n-b0", type=int, default=2)
    sp.add_argument("--b", type=float, default=1300.0)
    sp.add_argument("--s0", type=float, default=1000.0)
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--train-scans", type=int, default=2)
    sp.add_argument("--epochs", type=int, default=2)
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--batches-per-epoch", type=int, default=8)
    sp.add_argument("--val-stride", type=int, default=4)
    sp.add_argument("--sh-lmax", type=int, default=4)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    if getattr(args, "cmd", None) is None or not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    if args.threads:
        backend.set_threads(args.threads)
    try:
        return args.func(args)
    except (IoError, FormatError, CorruptError, UnsupportedError) as e:
        sys.stderr.write(f"fovx: {e}\n")
        return 2
    except OSError as e:
        sys.stderr.write(f"fovx: {e}\n")
        return 2
    except FovxError as e:
        sys.stderr.write(f"fovx: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
