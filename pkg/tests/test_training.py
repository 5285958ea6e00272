"""Training loop pieces: config, per-epoch sampling, model selection,
whole-scan imputation, and the copy baseline."""

import os

import numpy as np
import pytest

from fovx import nnet, phantom
from fovx.core import Grid3, Mask
from fovx.errors import (
    ConfigError,
    InvalidCutError,
    SelectionError,
    ValidationError,
)
from fovx.preprocess import BOTTOM, TOP, FovCut, truncate_fov
from fovx.training import (
    EpochSamples,
    ScanRecord,
    TrainConfig,
    copy_baseline,
    impute_scan,
    make_samples,
    select_model,
    shell_of,
    train,
    validation_score,
)

SMALL_CFG = dict(z_dim=4, base_channels=4, cut_min_mm=6.0, cut_max_mm=10.0)


@pytest.fixture(scope="module")
def small_scan():
    grid = Grid3((16, 16, 16), (2.0, 2.0, 2.0))
    scheme = phantom.default_scheme(6, 1, 1300.0)
    spec = phantom.preset_spec("slab", grid, scheme, s0=1000.0, sigma=0.0, seed=0)
    sc = phantom.generate(spec)
    return ScanRecord("sc0", sc.dwi, sc.structural, sc.brain)


def test_shell_of_threshold():
    assert shell_of(0.0) == nnet.SHELL_B0
    assert shell_of(50.0) == nnet.SHELL_B0
    assert shell_of(50.1) == nnet.SHELL_WEIGHTED
    assert shell_of(1300.0) == nnet.SHELL_WEIGHTED


# -- TrainConfig ----------------------------------------------------------------


def test_config_json_round_trip():
    cfg = TrainConfig(epochs=3, validation_cuts_mm=(10.0, 20.0), lr=1e-3, use_structural=False)
    again = TrainConfig.from_json(cfg.to_json())
    assert again == cfg
    assert isinstance(again.validation_cuts_mm, tuple)


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(cut_min_mm=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(cut_min_mm=30.0, cut_max_mm=20.0)
    with pytest.raises(ValidationError):
        TrainConfig(val_stride=0)
    with pytest.raises(ValidationError):
        TrainConfig(max_cut_retries=0)


def test_config_hyper_condition_channels():
    assert TrainConfig().hyper().cond_channels == 6
    assert TrainConfig(use_structural=False).hyper().cond_channels == 5
    h = TrainConfig(z_dim=8, base_channels=16, lambda_rec=7.0).hyper()
    assert (h.z_dim, h.base_channels, h.lambda_rec) == (8, 16, 7.0)


# -- per-epoch sampling -----------------------------------------------------------


def test_epoch_samples_determinism(small_scan):
    cfg = TrainConfig(**SMALL_CFG)
    a = make_samples(small_scan, cfg, np.random.default_rng(5))
    b = make_samples(small_scan, cfg, np.random.default_rng(5))
    c = make_samples(small_scan, cfg, np.random.default_rng(6))
    assert a.cut == b.cut
    assert a.descs == b.descs
    sa, sb = a.assemble(0), b.assemble(0)
    assert sa.stack.tobytes() == sb.stack.tobytes()
    assert sa.truth.tobytes() == sb.truth.tobytes()
    assert c.cut != a.cut  # a different stream draws a different truncation


def test_cut_draw_marginals(small_scan):
    cfg = TrainConfig(**SMALL_CFG)
    cuts, tops = [], 0
    for k in range(100):
        es = make_samples(small_scan, cfg, np.random.default_rng(1000 + k))
        cuts.append(es.cut.cut_mm)
        tops += es.cut.side == TOP
    cuts = np.asarray(cuts)
    assert cuts.min() >= cfg.cut_min_mm and cuts.max() <= cfg.cut_max_mm
    assert cuts.max() - cuts.min() > 1.0  # actually spread over the range
    assert 30 <= tops <= 70


def test_emission_covers_slab_slices_only(small_scan):
    cfg = TrainConfig(**SMALL_CFG)
    es = make_samples(small_scan, cfg, np.random.default_rng(2))
    cut = es.cut
    slab = small_scan.brain.bits[:, :, cut.first_missing_k : cut.last_missing_k + 1]
    emit = np.nonzero(slab.any(axis=(1, 2)))[0]
    n_vols = len(small_scan.dwi)
    assert len(es) == n_vols * len(emit)
    assert sorted({i for _, i in es.descs}) == sorted(int(i) for i in emit)
    assert sorted({n for n, _ in es.descs}) == list(range(n_vols))


def test_sample_fields(small_scan):
    cfg = TrainConfig(**SMALL_CFG)
    es = make_samples(small_scan, cfg, np.random.default_rng(3))
    s = es.assemble(0)
    assert s.stack.shape == (16, 16, 17)  # 11 dwi neighbors + 6 condition
    assert s.stack.dtype == np.float32
    assert s.truth.shape == (16, 16)
    assert s.missing.shape == (16, 16)
    # missing rows are exactly the slab columns
    want = np.zeros((16, 16), dtype=bool)
    want[:, es.cut.first_missing_k : es.cut.last_missing_k + 1] = True
    assert (s.missing == want).all()
    assert s.shell == shell_of(small_scan.dwi.gradients.bvals[s.volume_index])


def test_sample_stack_without_structural(small_scan):
    cfg = TrainConfig(use_structural=False, **SMALL_CFG)
    es = make_samples(small_scan, cfg, np.random.default_rng(3))
    assert es.assemble(0).stack.shape == (16, 16, 16)  # 11 + 5


def test_cut_retry_exhaustion(small_scan):
    # the grid is 32 mm tall; every draw in [40, 45] mm is an invalid cut
    cfg = TrainConfig(cut_min_mm=40.0, cut_max_mm=45.0, max_cut_retries=5)
    with pytest.raises(InvalidCutError):
        EpochSamples(small_scan, cfg, np.random.default_rng(0))


# -- training loop -----------------------------------------------------------------


def test_train_rejects_bad_corpus(small_scan, tmp_path):
    cfg = TrainConfig(**SMALL_CFG)
    with pytest.raises(ValidationError):
        train([], [], cfg, str(tmp_path))
    with pytest.raises(ValidationError):
        train([small_scan], [small_scan], cfg, str(tmp_path))


def test_micro_train_smoke_and_rerun_identical(small_scan, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=11, batches_per_epoch=2, **SMALL_CFG)
    res = train([small_scan], [], cfg, str(tmp_path / "a"))
    assert res.model_b0.shell == nnet.SHELL_B0
    assert res.model_dwi.shell == nnet.SHELL_WEIGHTED
    assert res.selected_epochs == {nnet.SHELL_B0: 1, nnet.SHELL_WEIGHTED: 1}
    assert len(res.log_rows) == 1
    row = res.log_rows[0]
    for k in ("loss_rec", "loss_kl", "loss_g", "loss_d"):
        assert np.isfinite(row[k])
    assert os.path.exists(res.log_path)
    for name in ("model_b0.ckpt", "model_dwi.ckpt", "b0_ep001.ckpt", "weighted_ep001.ckpt"):
        assert os.path.exists(tmp_path / "a" / name)

    train([small_scan], [], cfg, str(tmp_path / "b"))
    for name in ("model_b0.ckpt", "model_dwi.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- model selection ----------------------------------------------------------------


def _make_models(seed=1):
    hyper = TrainConfig(**SMALL_CFG).hyper()
    b0 = nnet.ImputationModel(nnet.SHELL_B0, hyper, seed=seed)
    dwi = nnet.ImputationModel(nnet.SHELL_WEIGHTED, hyper, seed=seed + 1)
    return b0, dwi


def test_select_model_tie_goes_to_later_epoch(small_scan, tmp_path):
    b0, dwi = _make_models()
    paths = []
    for ep in (1, 2):
        p = str(tmp_path / f"b0_ep{ep}.ckpt")
        nnet.save_model(p, b0, extra={"epoch": ep})
        paths.append((ep, p))
    cfg = TrainConfig(validation_cuts_mm=(8.0,), val_stride=4, **SMALL_CFG)
    _, epoch = select_model(paths, [small_scan], cfg, companions={nnet.SHELL_WEIGHTED: dwi})
    assert epoch == 2  # identical scores; later epoch wins


def test_select_model_error_paths(small_scan, tmp_path):
    b0, dwi = _make_models()
    cfg = TrainConfig(validation_cuts_mm=(8.0,), val_stride=4, **SMALL_CFG)
    with pytest.raises(SelectionError):
        select_model([], [small_scan], cfg, companions={nnet.SHELL_WEIGHTED: dwi})
    p = str(tmp_path / "b0.ckpt")
    nnet.save_model(p, b0, extra={"epoch": 1})
    with pytest.raises(SelectionError):
        select_model([(1, p)], [], cfg, companions={nnet.SHELL_WEIGHTED: dwi})


def test_validation_score_empty_slab_is_nan(small_scan):
    b0, dwi = _make_models()
    models = {nnet.SHELL_B0: b0, nnet.SHELL_WEIGHTED: dwi}
    # mask confined to the acquired region: nothing in the slab to score
    bits = small_scan.brain.bits.copy()
    bits[:, :, 12:] = False  # an 8 mm top cut removes slices 12..15
    low = ScanRecord("e", small_scan.dwi, small_scan.structural,
                     Mask(small_scan.brain.grid, bits))
    cfg = TrainConfig(**SMALL_CFG)
    assert np.isnan(validation_score(models, [low], cfg, 8.0))


# -- imputation and the copy baseline -------------------------------------------------


def test_impute_preserves_acquired_bitwise(small_scan):
    b0, dwi = _make_models()
    models = {nnet.SHELL_B0: b0, nnet.SHELL_WEIGHTED: dwi}
    trunc, cut = truncate_fov(small_scan.dwi, TOP, 8.0)
    out = impute_scan(trunc, cut, models, small_scan.structural, mask=small_scan.brain)
    s_in, s_out = trunc.stack(), out.stack()
    acq = np.ones(16, dtype=bool)
    acq[cut.first_missing_k : cut.last_missing_k + 1] = False
    assert s_out[:, :, acq, :].tobytes() == s_in[:, :, acq, :].tobytes()
    slab = s_out[:, :, ~acq, :]
    assert np.isfinite(slab).all()
    assert slab.max() > 0.0  # untrained but non-degenerate output

    again = impute_scan(trunc, cut, models, small_scan.structural, mask=small_scan.brain)
    assert again.stack().tobytes() == out.stack().tobytes()  # eps-free inference


def test_impute_zero_cut_is_identity(small_scan):
    models = dict.fromkeys((nnet.SHELL_B0, nnet.SHELL_WEIGHTED))
    empty = FovCut(TOP, 0.0, 0, -1)
    assert impute_scan(small_scan.dwi, empty, models, small_scan.structural) is small_scan.dwi


def test_impute_requires_model_per_shell(small_scan):
    b0, _ = _make_models()
    trunc, cut = truncate_fov(small_scan.dwi, TOP, 8.0)
    with pytest.raises(ConfigError):
        impute_scan(trunc, cut, {nnet.SHELL_B0: b0}, small_scan.structural)


def test_copy_baseline_both_sides(small_scan):
    d = small_scan.dwi
    trunc, cut = truncate_fov(d, TOP, 8.0)
    out = copy_baseline(trunc, cut)
    src = cut.first_missing_k - 1
    for k in cut.slab():
        assert out.stack()[:, :, k, :].tobytes() == trunc.stack()[:, :, src, :].tobytes()

    trunc, cut = truncate_fov(d, BOTTOM, 8.0)
    out = copy_baseline(trunc, cut)
    src = cut.last_missing_k + 1
    for k in cut.slab():
        assert out.stack()[:, :, k, :].tobytes() == trunc.stack()[:, :, src, :].tobytes()


def test_copy_baseline_needs_boundary_slice(small_scan):
    whole = FovCut(TOP, 32.0, 0, 15)  # nothing acquired below the slab
    with pytest.raises(ValidationError):
        copy_baseline(small_scan.dwi, whole)
