"""Pretraining and fine-tuning loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datapipe import ChannelStats, SplitManifest, TileRecord, label_fraction_sample
from ..heads import (
    FineTuneModel,
    RegressionHead,
    RegressionHeadConfig,
    SegHeadConfig,
    attach,
    build_head,
)
from ..tensor_core import (
    AdamW,
    Tensor,
    cross_entropy,
    derive_seed,
    load_checkpoint,
    make_rng,
    no_grad,
    rmse,
    save_checkpoint,
)
from ..vit_mae import MaeConfig, MaskedAutoencoder, decode_reconstruct, encode, mae_loss, make_mask_plan, patchify
from ..tensor_core import gather_tokens
from .metrics import ConfusionMatrix, rmse_metric, write_correlation_data
from .schedule import TASKS, resolve_epochs

log = logging.getLogger(__name__)

PRETRAIN_WEIGHT_DECAY = 0.05
HEAD_WEIGHT_DECAY = 0.0
METRIC_NAMES = {"pretrain": "mae_mse", "modisveg": "rmse", "esawc": "miou"}
HIGHER_IS_BETTER = {"pretrain": False, "modisveg": False, "esawc": True}


class DataError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class RunConfig:
    task: str = "pretrain"
    region: str = "Synthetic"
    label_fraction: float | None = None
    init_mode: str = "scratch"
    epochs: int | None = None
    batch_size: int = 8
    eval_batch_size: int = 32
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float | None = None
    paper_faithful: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "pretrain" and self.label_fraction is not None:
            raise ValueError("label_fraction applies to downstream tasks only")
        if self.task != "pretrain" and self.label_fraction is None:
            self.label_fraction = 1.0
        if self.init_mode not in ("scratch", "pretrained"):
            raise ValueError(f"init_mode must be scratch or pretrained, got {self.init_mode!r}")
        if self.paper_faithful and self.epochs is not None and self.epochs != self.scheduled_epochs():
            raise ValueError(f"paper-faithful run needs {self.scheduled_epochs()} epochs, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")

    def scheduled_epochs(self) -> int:
        return resolve_epochs(self.task, self.label_fraction)

    @property
    def resolved_epochs(self) -> int:
        return self.scheduled_epochs() if self.epochs is None else int(self.epochs)

    @property
    def resolved_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return PRETRAIN_WEIGHT_DECAY if self.task == "pretrain" else HEAD_WEIGHT_DECAY

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown RunConfig keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class RunReport:
    task: str
    metric: str
    config: dict
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.nan
    final_val: float = math.nan
    test_metric: float | None = None
    wall_clock_s: float = 0.0
    checkpoint: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def region(self) -> str:
        return self.config.get("run", {}).get("region", "")

    @property
    def label_fraction(self):
        return self.config.get("run", {}).get("label_fraction")

    @property
    def init_mode(self) -> str:
        return self.config.get("run", {}).get("init_mode", "")

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "history.jsonl", "w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec) + "\n")
        # wall clock lives apart so identical runs give byte-identical reports
        body = asdict(self)
        (directory / "timing.json").write_text(json.dumps({"wall_clock_s": body.pop("wall_clock_s")}))
        (directory / "report.json").write_text(json.dumps(body, indent=1))
        return directory / "report.json"

    @classmethod
    def load(cls, path) -> "RunReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        body = json.loads(path.read_text())
        timing = path.with_name("timing.json")
        if timing.exists():
            body.update(json.loads(timing.read_text()))
        return cls(**body)


# -- data preparation -------------------------------------------------------------

def _tiles_by_id(tiles: Sequence[TileRecord]) -> dict[str, TileRecord]:
    return {t.tile_id: t for t in tiles}


def _split_tiles(tiles, manifest: SplitManifest, split: str) -> list[TileRecord]:
    by_id = _tiles_by_id(tiles)
    missing = [tid for tid in manifest.ids(split) if tid not in by_id]
    if missing:
        raise DataError(f"manifest references tiles absent from the corpus: {missing[:10]}")
    return [by_id[tid] for tid in sorted(manifest.ids(split))]


def _token_array(tiles: Sequence[TileRecord], stats: ChannelStats, cfg: MaeConfig) -> np.ndarray:
    if not tiles:
        return np.zeros((0, cfg.num_patches, cfg.patch_dim), dtype=np.float32)
    images = stats.apply(np.stack([t.pixels for t in tiles]))
    with no_grad():
        return patchify(Tensor(images), cfg).data


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start : start + size]


def _check_finite(value: float, epoch: int, step: int, opt: AdamW) -> None:
    if not math.isfinite(value):
        raise NumericError(
            f"non-finite loss {value} at epoch {epoch} step {step}; lr={opt.state.lr}, grad norm={opt.grad_norm():.4g}"
        )


def _train_step(loss: Tensor, opt: AdamW, epoch: int, step: int) -> float:
    value = loss.item()
    _check_finite(value, epoch, step, opt)
    opt.zero_grad()
    loss.backward()
    gnorm = opt.grad_norm()
    if not math.isfinite(gnorm):
        raise NumericError(f"non-finite gradient at epoch {epoch} step {step}; lr={opt.state.lr}")
    opt.step()
    return value


# -- pretraining -------------------------------------------------------------------

def mae_eval_loss(model: MaskedAutoencoder, tokens: np.ndarray, seed: int, batch_size: int) -> float:
    """Masked MSE over a token array with one fixed mask stream per sample."""
    cfg = model.cfg
    total = 0.0
    for idx in _batches(len(tokens), batch_size):
        rngs = [make_rng(seed, "valmask", int(i)) for i in idx]
        with no_grad():
            x = Tensor(tokens[idx])
            plan = make_mask_plan(len(idx), cfg.num_patches, cfg.mask_ratio, rngs)
            vis = gather_tokens(x, plan.kept)
            pred = decode_reconstruct(model.decoder, encode(model.encoder, vis, plan), plan)
            total += float(mae_loss(pred, x, plan).item()) * len(idx)
    return total / len(tokens)


def pretrain(
    tiles: Sequence[TileRecord],
    manifest: SplitManifest,
    cfg: MaeConfig,
    run: RunConfig,
    out_dir=None,
) -> tuple[Path | None, RunReport, MaskedAutoencoder]:
    """Masked-autoencoder pretraining on the train split; keeps the best-val weights."""
    start = time.perf_counter()
    train = _split_tiles(tiles, manifest, "train")
    val = _split_tiles(tiles, manifest, "val")
    if not train or not val:
        raise DataError("pretraining needs non-empty train and val splits")
    stats = ChannelStats.from_tiles(train)
    train_tok = _token_array(train, stats, cfg)
    val_tok = _token_array(val, stats, cfg)

    model = MaskedAutoencoder(cfg, seed=derive_seed(run.seed, "mae"))
    opt = AdamW(model.trainable_parameters(), lr=run.lr, weight_decay=run.resolved_weight_decay)
    report = RunReport(task="pretrain", metric=METRIC_NAMES["pretrain"], config={"run": run.to_dict(), "mae": cfg.to_dict()})
    best_state = None
    for epoch in range(1, run.resolved_epochs + 1):
        order = make_rng(run.seed, "order", epoch).permutation(len(train_tok))
        losses = []
        for step, idx in enumerate(_batches(len(train_tok), run.batch_size, order)):
            rngs = [make_rng(run.seed, "mask", epoch, int(i)) for i in idx]
            x = Tensor(train_tok[idx])
            plan = make_mask_plan(len(idx), cfg.num_patches, cfg.mask_ratio, rngs)
            pred = decode_reconstruct(model.decoder, encode(model.encoder, gather_tokens(x, plan.kept), plan), plan)
            losses.append(_train_step(mae_loss(pred, x, plan), opt, epoch, step))
        val_loss = mae_eval_loss(model, val_tok, run.seed, run.eval_batch_size)
        _check_finite(val_loss, epoch, -1, opt)
        report.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        log.info("pretrain epoch %d train %.5f val %.5f", epoch, report.history[-1]["train_loss"], val_loss)
        if best_state is None or val_loss < report.best_val:
            report.best_val, report.best_epoch = val_loss, epoch
            best_state = model.state_dict()
    report.final_val = report.history[-1]["val_loss"]
    model.load_state_dict(best_state)
    meta = {"kind": "mae", "mae": cfg.to_dict(), "channel_stats": stats.to_dict(), "epoch": report.best_epoch, "val_loss": report.best_val}
    ckpt = None
    if out_dir is not None:
        ckpt = Path(out_dir) / "mae_best.ckpt"
        save_checkpoint(ckpt, _prefixed(model), meta)
        report.checkpoint = str(ckpt)
    report.wall_clock_s = time.perf_counter() - start
    if out_dir is not None:
        report.save(out_dir)
    return ckpt, report, model


def _prefixed(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


# -- fine-tuning --------------------------------------------------------------------

def _require_labels(task: str, tiles: Sequence[TileRecord]) -> None:
    attr = "veg_label" if task == "modisveg" else "seg_label"
    missing = [t.tile_id for t in tiles if getattr(t, attr) is None]
    if missing:
        raise DataError(f"{task} needs {attr} but these tiles have none: {missing[:20]}")


def _labels(task: str, tiles: Sequence[TileRecord]) -> np.ndarray:
    if task == "modisveg":
        return np.array([t.veg_label for t in tiles], dtype=np.float32)
    return np.stack([t.seg_label for t in tiles]).astype(np.int64)


def _task_loss(task: str, out: Tensor, labels: np.ndarray) -> Tensor:
    if task == "modisveg":
        return rmse(out, Tensor(labels))
    return cross_entropy(out, labels)


def evaluate_downstream(model: FineTuneModel, task: str, tokens: np.ndarray, labels: np.ndarray, batch_size: int) -> dict:
    """Metric and loss over an evaluation set; preds are returned for regression."""
    preds = []
    cm = ConfusionMatrix()
    loss_sum = 0.0
    for idx in _batches(len(tokens), batch_size):
        with no_grad():
            out = model(Tensor(tokens[idx]))
        if task == "modisveg":
            preds.append(out.data.astype(np.float64))
            d = out.data.astype(np.float64) - labels[idx]
            loss_sum += float(np.dot(d, d))
        else:
            cm.update(out.data.argmax(axis=1), labels[idx])
            with no_grad():
                loss_sum += float(cross_entropy(out, labels[idx]).item()) * labels[idx].size
    if task == "modisveg":
        p = np.concatenate(preds)
        return {"metric": rmse_metric(p, labels), "loss": math.sqrt(loss_sum / len(tokens)), "preds": p}
    return {"metric": cm.miou(), "loss": loss_sum / labels.size, "pixel_accuracy": cm.pixel_accuracy(), "iou": cm.iou().tolist()}


def _is_better(task: str, new: float, old: float) -> bool:
    if math.isnan(old):
        return True
    return new > old if HIGHER_IS_BETTER[task] else new < old


def modisveg_target_affine(labels: np.ndarray) -> tuple[float, float]:
    """Output offset/scale from the labelled subset: mean, and std floored at 1 vegetation %."""
    labels = np.asarray(labels, dtype=np.float64)
    scale = float(labels.std()) if labels.size > 1 else 1.0
    return float(labels.mean()), max(scale, 1.0)


def build_finetune_model(task, cfg: MaeConfig, head_cfg, run: RunConfig, checkpoint=None) -> FineTuneModel:
    head = build_head(task, cfg, head_cfg, seed=derive_seed(run.seed, "head"))
    return attach(cfg, head, run.init_mode, seed=derive_seed(run.seed, "encoder"), checkpoint=checkpoint)


def finetune(
    task: str,
    tiles: Sequence[TileRecord],
    manifest: SplitManifest,
    cfg: MaeConfig,
    head_cfg,
    run: RunConfig,
    checkpoint=None,
    out_dir=None,
) -> tuple[Path | None, RunReport, FineTuneModel]:
    """Fine-tune encoder + head end to end on a label fraction of the train split.

    Scratch and pretrained arms with the same seed share the label subset,
    the data order and the head initialisation; only the encoder differs.
    """
    if task not in ("modisveg", "esawc"):
        raise ValueError(f"unknown downstream task {task!r}")
    if run.task != task:
        raise ValueError(f"run config is for {run.task}, not {task}")
    start = time.perf_counter()
    subset_ids = set(label_fraction_sample(manifest, run.label_fraction, run.seed))
    train_all = _split_tiles(tiles, manifest, "train")
    train = [t for t in train_all if t.tile_id in subset_ids]
    val = _split_tiles(tiles, manifest, "val")
    test = _split_tiles(tiles, manifest, "test")
    if not val:
        raise DataError("fine-tuning needs a non-empty val split")
    for group in (train, val, test):
        _require_labels(task, group)

    if run.init_mode == "pretrained":
        if checkpoint is None:
            raise ValueError("pretrained init needs a checkpoint")
        _, meta = load_checkpoint(checkpoint)
        stats = ChannelStats.from_dict(meta["channel_stats"])
    else:
        stats = ChannelStats.from_tiles(train_all)

    model = build_finetune_model(task, cfg, head_cfg, run, checkpoint)
    y_train, y_val = _labels(task, train), _labels(task, val)
    if isinstance(model.head, RegressionHead):
        model.head.target_mean, model.head.target_scale = modisveg_target_affine(y_train)
    x_train = _token_array(train, stats, cfg)
    x_val = _token_array(val, stats, cfg)

    opt = AdamW(model.trainable_parameters(), lr=run.lr, weight_decay=run.resolved_weight_decay)
    report = RunReport(
        task=task,
        metric=METRIC_NAMES[task],
        config={"run": run.to_dict(), "mae": cfg.to_dict(), "head": head_cfg.to_dict()},
        extra={"n_train_labelled": len(train), "train_ids": sorted(subset_ids)},
    )
    best_state = None
    for epoch in range(1, run.resolved_epochs + 1):
        order = make_rng(run.seed, "order", epoch).permutation(len(train))
        losses = []
        for step, idx in enumerate(_batches(len(train), run.batch_size, order)):
            out = model(Tensor(x_train[idx]))
            losses.append(_train_step(_task_loss(task, out, y_train[idx]), opt, epoch, step))
        ev = evaluate_downstream(model, task, x_val, y_val, run.eval_batch_size)
        _check_finite(ev["metric"], epoch, -1, opt)
        report.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": ev["loss"], "val_metric": ev["metric"]})
        log.info("%s epoch %d train %.5f val %s %.5f", task, epoch, report.history[-1]["train_loss"], report.metric, ev["metric"])
        if best_state is None or _is_better(task, ev["metric"], report.best_val):
            report.best_val, report.best_epoch = ev["metric"], epoch
            best_state = model.state_dict()
    report.final_val = report.history[-1]["val_metric"]

    model.load_state_dict(best_state)
    if test:
        x_test, y_test = _token_array(test, stats, cfg), _labels(task, test)
        ev = evaluate_downstream(model, task, x_test, y_test, run.eval_batch_size)
        report.test_metric = ev["metric"]
        if task == "modisveg" and out_dir is not None and len(test) >= 2 and np.var(y_test) > 0:
            fit = write_correlation_data(y_test, ev["preds"], Path(out_dir) / "correlation_test.csv", label=f"{run.region} {run.init_mode}")
            report.extra["ols"] = {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2}

    ckpt = None
    if out_dir is not None:
        ckpt = Path(out_dir) / f"{task}_best.ckpt"
        meta = {
            "kind": "finetune",
            "task": task,
            "mae": cfg.to_dict(),
            "head": head_cfg.to_dict(),
            "channel_stats": stats.to_dict(),
            "run": run.to_dict(),
            "epoch": report.best_epoch,
            "val_metric": report.best_val,
        }
        if isinstance(model.head, RegressionHead):
            meta["target_affine"] = [model.head.target_mean, model.head.target_scale]
        save_checkpoint(ckpt, _prefixed(model), meta)
        report.checkpoint = str(ckpt)
    report.wall_clock_s = time.perf_counter() - start
    if out_dir is not None:
        report.save(out_dir)
    return ckpt, report, model


def load_finetuned(path) -> tuple[FineTuneModel, dict]:
    """Rebuild a fine-tuned model and its normalisation from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "finetune":
        raise DataError(f"{path} is not a fine-tuned checkpoint (kind={meta.get('kind')})")
    cfg = MaeConfig.from_dict(meta["mae"])
    head_cls = RegressionHeadConfig if meta["task"] == "modisveg" else SegHeadConfig
    head_cfg = head_cls.from_dict(meta["head"])
    head = build_head(meta["task"], cfg, head_cfg, seed=0)
    model = attach(cfg, head, "scratch", seed=0)
    model.load_state_dict(tensors)
    if "target_affine" in meta:
        model.head.target_mean, model.head.target_scale = meta["target_affine"]
    return model, meta


def evaluate_checkpoint(path, tiles: Sequence[TileRecord], manifest: SplitManifest, split: str = "test", batch_size: int = 32) -> dict:
    model, meta = load_finetuned(path)
    cfg = model.encoder.cfg
    task = meta["task"]
    group = _split_tiles(tiles, manifest, split)
    if not group:
        raise DataError(f"split {split!r} is empty")
    _require_labels(task, group)
    stats = ChannelStats.from_dict(meta["channel_stats"])
    ev = evaluate_downstream(model, task, _token_array(group, stats, cfg), _labels(task, group), batch_size)
    ev.pop("preds", None)
    return {"task": task, "split": split, "metric_name": METRIC_NAMES[task], **ev}
