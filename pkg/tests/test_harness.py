import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarmae.datapipe import band_split, synth_tiles
from sarmae.harness import (
    EPOCH_SCHEDULE,
    ConfusionMatrix,
    DataError,
    NumericError,
    RunConfig,
    RunReport,
    ablation_report,
    evaluate_checkpoint,
    finetune,
    load_finetuned,
    miou,
    ols_fit,
    pretrain,
    resolve_epochs,
    rmse_metric,
    write_correlation_data,
)
from sarmae.harness.train import build_finetune_model, modisveg_target_affine
from sarmae.heads import RegressionHeadConfig, SegHeadConfig
from sarmae.tensor_core import Tensor, no_grad
from sarmae.vit_mae import MaeConfig, patchify

TINY = MaeConfig(image_size=16, patch_size=4, enc_dim=16, enc_depth=2, enc_heads=2, dec_dim=8, dec_depth=1, dec_heads=2)
TINY_REG = RegressionHeadConfig(seq_proj=4, hid_proj=4, fc_sizes=(8, 4))
TINY_SEG = SegHeadConfig(stage_channels=4)


@pytest.fixture(scope="module")
def corpus():
    tiles = synth_tiles(40, seed=0, desk_size=16)
    return tiles, band_split(tiles)


@pytest.fixture(scope="module")
def mae_ckpt(corpus, tmp_path_factory):
    tiles, manifest = corpus
    out = tmp_path_factory.mktemp("pre")
    ckpt, report, _ = pretrain(tiles, manifest, TINY, RunConfig(task="pretrain", epochs=2, lr=1e-3), out_dir=out)
    return ckpt, report


# -- metrics ---------------------------------------------------------------------

def test_miou_hand_example():
    per_class, mean = miou(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), num_classes=2)
    assert per_class == [0.5, 2 / 3]
    assert mean == 7 / 12


def test_miou_perfect_and_absent_classes():
    labels = np.array([0, 2, 2, 5])
    per_class, mean = miou(labels, labels)
    assert mean == 1.0
    assert per_class[1] is None and per_class[0] == 1.0
    assert sum(v is not None for v in per_class) == 3


def test_miou_global_accumulation():
    # two images: per-image averaging would give a different answer
    cm = ConfusionMatrix(2)
    cm.update([0, 0, 0, 0], [0, 0, 0, 1])
    cm.update([1], [1])
    tp0, fp0, fn0 = 3, 1, 0
    tp1, fp1, fn1 = 1, 0, 1
    expect = (tp0 / (tp0 + fp0 + fn0) + tp1 / (tp1 + fp1 + fn1)) / 2
    assert cm.miou() == expect


def test_miou_errors():
    with pytest.raises(ValueError):
        ConfusionMatrix(2).miou()
    with pytest.raises(ValueError):
        miou([0, 11], [0, 1])
    with pytest.raises(ValueError):
        miou([0, 1], [0])


def test_rmse_examples():
    assert rmse_metric([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse_metric(np.arange(10) + 5.0, np.arange(10)) == 5.0
    with pytest.raises(ValueError):
        rmse_metric([], [])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 300))
def test_rmse_two_pass_oracle(seed, n):
    rng = np.random.default_rng(seed)
    p, t = rng.uniform(0, 100, n), rng.uniform(0, 100, n)
    sq = [(a - b) ** 2 for a, b in zip(p.tolist(), t.tolist())]
    oracle = math.sqrt(math.fsum(sq) / n)
    assert abs(rmse_metric(p, t) - oracle) < 1e-9


def test_ols_examples():
    x = np.arange(10.0)
    fit = ols_fit(x, 2 * x + 1)
    assert (fit.slope, fit.intercept, fit.r2) == pytest.approx((2.0, 1.0, 1.0), abs=1e-12)
    flat = ols_fit(x, np.full(10, 3.0))
    assert flat.slope == 0.0 and flat.r2 == 0.0
    with pytest.raises(ValueError, match="variance"):
        ols_fit(np.ones(5), np.arange(5.0))
    with pytest.raises(ValueError):
        ols_fit([1.0], [2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 200))
def test_ols_normal_equations(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 100, n)
    y = 0.7 * x + rng.normal(0, 10, n)
    fit = ols_fit(x, y)
    resid = y - fit.predict(x)
    assert abs(resid.sum()) < 1e-9 * n * 100
    assert abs(np.dot(resid, x - x.mean())) < 1e-9 * n * 1e4
    oracle = np.polyfit(x, y, 1)
    assert fit.slope == pytest.approx(oracle[0], rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_order_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, true = rng.integers(0, 11, 500), rng.integers(0, 11, 500)
    perm = rng.permutation(500)
    assert abs(miou(pred, true)[1] - miou(pred[perm], true[perm])[1]) < 1e-9
    p, t = rng.uniform(0, 100, 500), rng.uniform(0, 100, 500)
    assert abs(rmse_metric(p, t) - rmse_metric(p[perm], t[perm])) < 1e-9


def test_correlation_files(tmp_path):
    x = np.array([10.0, 20.0, 30.0, 40.0])
    fit = write_correlation_data(x, x * 0.5 + 3, tmp_path / "corr.csv", label="Europe")
    lines = (tmp_path / "corr.csv").read_text().splitlines()
    assert lines[0] == "target,prediction,ols_fit" and len(lines) == 5
    meta = json.loads((tmp_path / "corr.json").read_text())
    assert meta["slope"] == pytest.approx(0.5) and meta["n"] == 4 and fit.r2 == pytest.approx(1.0)


# -- report tables ---------------------------------------------------------------

ESAWC_TABLE = {
    0.001: (0.345, 0.405, 0.214, 0.267),
    0.01: (0.438, 0.475, 0.290, 0.360),
    0.1: (0.486, 0.508, 0.339, 0.399),
    1.0: (0.522, 0.533, 0.393, 0.426),
}
MODISVEG_TABLE = {
    0.001: (7.187, 5.138, 14.326, 10.902),
    0.01: (5.671, 4.082, 12.415, 8.390),
    0.1: (4.171, 3.282, 10.116, 7.256),
    1.0: (3.749, 3.032, 8.883, 5.943),
}


def _rows(table):
    cols = [("Europe", "scratch"), ("Europe", "pretrained"), ("SouthAmerica", "scratch"), ("SouthAmerica", "pretrained")]
    return [
        {"label_fraction": f, "region": r, "init_mode": i, "value": v}
        for f, vals in table.items()
        for (r, i), v in zip(cols, vals)
    ]


def test_published_segmentation_table_bolding():
    table = ablation_report(_rows(ESAWC_TABLE), higher_is_better=True, metric="miou")
    assert table.best == {(1.0, "Europe", "pretrained"), (1.0, "SouthAmerica", "pretrained")}
    text = table.to_text()
    assert "**0.533**" in text and "**0.426**" in text and text.count("**") == 4
    assert not table.warnings


def test_published_regression_table_bolding():
    table = ablation_report(_rows(MODISVEG_TABLE), higher_is_better=False, metric="rmse")
    assert table.best == {(1.0, "Europe", "pretrained"), (1.0, "SouthAmerica", "pretrained")}
    assert "**3.032**" in table.to_text()


def test_single_run_table():
    table = ablation_report([{"label_fraction": 0.1, "region": "Synthetic", "init_mode": "scratch", "value": 0.4}], metric="miou")
    assert len(table.cells) == 1 and table.best == {(0.1, "Synthetic", "scratch")}
    assert table.to_csv().splitlines()[1] == "0.1,Synthetic,scratch,0.4,1"


def test_ties_and_missing_cells_warn():
    rows = [
        {"label_fraction": 0.01, "region": "R", "init_mode": "scratch", "value": 0.5},
        {"label_fraction": 0.01, "region": "R", "init_mode": "pretrained", "value": 0.5},
        {"label_fraction": 0.1, "region": "R", "init_mode": "pretrained", "value": 0.3},
    ]
    with pytest.warns(UserWarning) as rec:
        table = ablation_report(rows, higher_is_better=True, metric="miou")
    msgs = [str(w.message) for w in rec]
    assert any("tie" in m for m in msgs) and any("missing" in m for m in msgs)
    assert table.best == {(0.01, "R", "scratch"), (0.01, "R", "pretrained")}
    assert "—" in table.to_text()
    cells = json.loads(table.to_json())["cells"]
    assert len(cells) == 3


# -- schedule and run config -----------------------------------------------------

def test_epoch_schedule():
    assert resolve_epochs("pretrain") == 75
    expect = {"modisveg": (75, 50, 50, 25), "esawc": (100, 75, 50, 35)}
    for task, epochs in expect.items():
        for f, e in zip((0.001, 0.01, 0.1, 1.0), epochs):
            assert resolve_epochs(task, f) == e
    assert set(EPOCH_SCHEDULE) == {"modisveg", "esawc"}
    with pytest.raises(ValueError):
        resolve_epochs("esawc", 0.5)
    with pytest.raises(ValueError):
        resolve_epochs("other", 0.1)


def test_run_config_rules():
    assert RunConfig(task="esawc", label_fraction=0.001, paper_faithful=True).resolved_epochs == 100
    assert RunConfig(task="pretrain", paper_faithful=True).resolved_epochs == 75
    with pytest.raises(ValueError):
        RunConfig(task="pretrain", label_fraction=0.1)
    with pytest.raises(ValueError, match="paper-faithful"):
        RunConfig(task="modisveg", label_fraction=0.1, epochs=3, paper_faithful=True)
    assert RunConfig(task="pretrain").resolved_weight_decay == 0.05
    assert RunConfig(task="esawc").resolved_weight_decay == 0.0
    assert RunConfig(task="esawc").label_fraction == 1.0
    assert RunConfig.from_dict(RunConfig(task="esawc", seed=3).to_dict()) == RunConfig(task="esawc", seed=3)
    with pytest.raises(KeyError):
        RunConfig.from_dict({"momentum": 0.9})


def test_target_affine():
    assert modisveg_target_affine(np.array([10.0, 30.0])) == (20.0, 10.0)
    assert modisveg_target_affine(np.array([50.0])) == (50.0, 1.0)
    assert modisveg_target_affine(np.array([50.0, 50.2])) == (pytest.approx(50.1), 1.0)


# -- training loops --------------------------------------------------------------

def test_pretrain_report_and_checkpoint(mae_ckpt):
    ckpt, report = mae_ckpt
    assert ckpt.exists()
    assert [h["epoch"] for h in report.history] == [1, 2]
    assert report.best_val == min(h["val_loss"] for h in report.history)
    assert report.final_val == report.history[-1]["val_loss"]
    assert report.metric == "mae_mse"


def test_pretrain_bit_deterministic(corpus):
    tiles, manifest = corpus
    runs = [pretrain(tiles, manifest, TINY, RunConfig(task="pretrain", epochs=2, seed=4))[1] for _ in range(2)]
    assert runs[0].history == runs[1].history


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_diagnostic(corpus):
    tiles, manifest = corpus
    with pytest.raises(NumericError, match="lr=1e\\+30"):
        pretrain(tiles, manifest, TINY, RunConfig(task="pretrain", epochs=3, lr=1e30))


@pytest.mark.parametrize("task,head_cfg", [("modisveg", TINY_REG), ("esawc", TINY_SEG)])
def test_finetune_runs_and_reloads(corpus, mae_ckpt, tmp_path, task, head_cfg):
    tiles, manifest = corpus
    run = RunConfig(task=task, label_fraction=0.1, init_mode="pretrained", epochs=2, lr=1e-3)
    ckpt, report, model = finetune(task, tiles, manifest, TINY, head_cfg, run, checkpoint=mae_ckpt[0], out_dir=tmp_path)
    assert len(report.history) == 2 and report.history[0]["epoch"] == 1
    assert report.test_metric is not None
    assert report.extra["n_train_labelled"] == math.ceil(0.1 * len(manifest.ids("train")))
    # best-val checkpoint reproduces its logged val metric bit-exactly
    ev = evaluate_checkpoint(ckpt, tiles, manifest, split="val")
    assert ev["metric"] == report.best_val
    reloaded, meta = load_finetuned(ckpt)
    x = np.random.default_rng(0).standard_normal((2, 12, 16, 16)).astype(np.float32)
    with no_grad():
        tok = patchify(Tensor(x), TINY)
        np.testing.assert_array_equal(reloaded(tok).data, model(tok).data)
    back = RunReport.load(tmp_path)
    assert back.history == report.history and back.test_metric == report.test_metric
    if task == "modisveg":
        assert (tmp_path / "correlation_test.csv").exists()


def test_report_json_excludes_wall_clock(corpus, tmp_path):
    tiles, manifest = corpus
    for d in ("a", "b"):
        pretrain(tiles, manifest, TINY, RunConfig(task="pretrain", epochs=1), out_dir=tmp_path / d)
    assert (tmp_path / "a" / "report.json").read_text().replace("/a/", "/b/") == (tmp_path / "b" / "report.json").read_text()
    assert RunReport.load(tmp_path / "a").wall_clock_s > 0


def test_paired_arms_share_head_init_and_subset(corpus, mae_ckpt):
    tiles, manifest = corpus
    heads, subsets = [], []
    for mode in ("scratch", "pretrained"):
        run = RunConfig(task="esawc", label_fraction=0.1, init_mode=mode, epochs=1, seed=7)
        model = build_finetune_model("esawc", TINY, TINY_SEG, run, checkpoint=mae_ckpt[0])
        heads.append({n: p.data.copy() for n, p in model.head.named_parameters()})
        subsets.append(finetune("esawc", tiles, manifest, TINY, TINY_SEG, run, checkpoint=mae_ckpt[0])[1].extra["train_ids"])
    assert heads[0].keys() == heads[1].keys()
    assert all(np.array_equal(heads[0][k], heads[1][k]) for k in heads[0])
    assert subsets[0] == subsets[1]


def test_missing_labels_named(corpus):
    tiles, manifest = corpus
    broken = list(tiles)
    victim = sorted(manifest.ids("val"))[0]
    broken = [t if t.tile_id != victim else type(t)(**{**t.__dict__, "seg_label": None}) for t in broken]
    with pytest.raises(DataError, match=victim):
        finetune("esawc", broken, manifest, TINY, TINY_SEG, RunConfig(task="esawc", epochs=1))


def test_finetune_rejects_mismatched_config(corpus):
    tiles, manifest = corpus
    with pytest.raises(ValueError):
        finetune("esawc", tiles, manifest, TINY, TINY_SEG, RunConfig(task="modisveg", epochs=1))
    with pytest.raises(ValueError, match="checkpoint"):
        finetune("esawc", tiles, manifest, TINY, TINY_SEG, RunConfig(task="esawc", init_mode="pretrained", epochs=1))


@pytest.mark.slow
def test_desk_pretrain_val_loss_falls():
    tiles = synth_tiles(64, seed=0)
    manifest = band_split(tiles)
    falls = 0
    for seed in range(10):
        report = pretrain(tiles, manifest, MaeConfig.desk(), RunConfig(task="pretrain", epochs=5, seed=seed))[1]
        falls += report.history[4]["val_loss"] < report.history[0]["val_loss"]
    assert falls >= 9
