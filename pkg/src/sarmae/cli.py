"""Command-line entry point: ``sarmae <subcommand> [options]``.

Subcommands: synth-data, split, stats, pretrain, finetune, evaluate,
reconstruct, report. Artifacts go under ``--out`` (default: the directory
named by ``SARMAE_OUTPUT``, else ``./runs``). Logs go to stderr; ``--json``
prints a machine-readable summary on stdout.

Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, write_snapshot
from .datapipe import (
    ChannelStats,
    SplitManifest,
    TileFormatError,
    aoi_stats,
    band_split,
    paper_stats,
    read_corpus,
    render_stats_csv,
    render_stats_text,
    synth_tiles,
    write_corpus,
)
from .datapipe.stats import sartile_bytes
from .harness import DataError, NumericError, ablation_report, evaluate_checkpoint, finetune, pretrain
from .harness.train import HIGHER_IS_BETTER, RunReport
from .tensor_core import CheckpointError, Tensor, load_checkpoint, make_rng, no_grad
from .vit_mae import MaeConfig, MaskedAutoencoder, reconstruct_image, write_reconstruction_grid

log = logging.getLogger("sarmae")

OUTPUT_ENV = "SARMAE_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PATTERN_CODES = {"T": "train", "V": "val", "E": "test"}
SNAPSHOT_NAME = "config.ini"


class _LogfmtFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage().replace('"', "'")
        return f'level={record.levelname} logger={record.name} msg="{msg}"'


def _setup_logging(verbosity: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_LogfmtFormatter())
    root = logging.getLogger("sarmae")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else _output_root() / default_name


def _pattern(text: str) -> tuple[str, ...]:
    try:
        return tuple(PATTERN_CODES[c] for c in text.upper())
    except KeyError as exc:
        raise ConfigError(f"data.pattern may only contain T, V, E; got {text!r}") from exc


def _experiment(args, extra: dict[str, object] | None = None) -> ExperimentConfig:
    """File, then --set overrides, then dedicated flags (flags win)."""
    cfg = load_config(args.config, args.set or ())
    for path, value in (extra or {}).items():
        if value is not None:
            section, key = path.split(".", 1)
            cfg.set(section, key, value)
    return cfg


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, indent=1, default=str))
    elif text is not None:
        print(text, end="" if text.endswith("\n") else "\n")


def _load_corpus(path):
    if path is None:
        raise ConfigError("--corpus is required")
    if not Path(path).exists():
        raise DataError(f"corpus directory not found: {path}")
    tiles = read_corpus(path)
    if not tiles:
        raise DataError(f"corpus {path} contains no tiles")
    return tiles


def _load_manifest(path, tiles, cfg: ExperimentConfig) -> SplitManifest:
    if path is None:
        d = cfg.data
        return band_split(tiles, d.band_height_deg, _pattern(d.pattern))
    if not Path(path).exists():
        raise DataError(f"split manifest not found: {path}")
    return SplitManifest.load(path)


# -- subcommands ------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _experiment(args, {"data.n_tiles": args.n, "data.synth_seed": args.seed, "data.tile_size": args.size})
    d = cfg.data
    out = _out_dir(args, f"corpus-{d.synth_seed}")
    tiles = synth_tiles(d.n_tiles, d.synth_seed, d.tile_size)
    write_corpus(tiles, out, extra={"generator": "synthetic", "seed": d.synth_seed, "tile_size": d.tile_size})
    write_snapshot(cfg.resolved(), out / SNAPSHOT_NAME)
    log.info("wrote %d tiles to %s", len(tiles), out)
    _emit(args, {"corpus": str(out), "n_tiles": len(tiles)}, f"wrote {len(tiles)} tiles to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _experiment(args, {"data.band_height_deg": args.band_height, "data.pattern": args.pattern})
    tiles = _load_corpus(args.corpus)
    d = cfg.data
    manifest = band_split(tiles, d.band_height_deg, _pattern(d.pattern))
    out = Path(args.manifest) if args.manifest else _out_dir(args, "split") / "split.json"
    manifest.save(out)
    write_snapshot(cfg.resolved(), out.parent / SNAPSHOT_NAME)
    fr = manifest.fractions()
    _emit(
        args,
        {"manifest": str(out), "counts": manifest.counts, "fractions": fr},
        f"{out}: " + ", ".join(f"{s} {manifest.counts[s]} ({100 * fr[s]:.1f}%)" for s in ("train", "val", "test")),
    )
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.paper:
        rows = paper_stats()
    else:
        tiles = _load_corpus(args.corpus)
        rows = aoi_stats(tiles, bytes_per_tile=sartile_bytes(tiles[0].pixels.shape[-1], with_mask=tiles[0].seg_label is not None))
    if args.csv:
        _emit(args, {"rows": [r.__dict__ for r in rows]}, render_stats_csv(rows))
    else:
        _emit(args, {"rows": [r.__dict__ for r in rows]}, render_stats_text(rows))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _experiment(args, {"run.seed": args.seed, "run.epochs": args.epochs})
    run = cfg.run("pretrain")
    mae = cfg.mae
    tiles = _load_corpus(args.corpus)
    manifest = _load_manifest(args.manifest, tiles, cfg)
    out = _out_dir(args, f"pretrain-s{run.seed}")
    write_snapshot(cfg.resolved("pretrain"), out / SNAPSHOT_NAME)
    manifest.save(out / "split.json")
    ckpt, report, _ = pretrain(tiles, manifest, mae, run, out_dir=out)
    _emit(
        args,
        {"checkpoint": str(ckpt), "best_epoch": report.best_epoch, "best_val": report.best_val, "final_val": report.final_val},
        f"checkpoint {ckpt} (best epoch {report.best_epoch}, val masked MSE {report.best_val:.5f})",
    )
    return EXIT_OK


def cmd_finetune(args) -> int:
    init = args.init or ("pretrained" if args.checkpoint else None)
    cfg = _experiment(args, {"run.seed": args.seed, "run.epochs": args.epochs, "run.label_fraction": args.fraction, "run.init_mode": init})
    task = args.task
    run = cfg.run(task)
    mae = cfg.mae
    if run.init_mode == "pretrained":
        if not args.checkpoint:
            raise ConfigError("run.init_mode=pretrained needs --checkpoint")
        _, meta = load_checkpoint(args.checkpoint)
        ck_mae = MaeConfig.from_dict(meta["mae"])
        if ck_mae != mae:
            raise ConfigError(f"mae config differs from the checkpoint's: {ck_mae} vs {mae}")
    tiles = _load_corpus(args.corpus)
    manifest = _load_manifest(args.manifest, tiles, cfg)
    out = _out_dir(args, f"{task}-{run.init_mode}-f{run.label_fraction:g}-s{run.seed}")
    write_snapshot(cfg.resolved(task), out / SNAPSHOT_NAME)
    ckpt, report, _ = finetune(task, tiles, manifest, mae, cfg.head(task), run, checkpoint=args.checkpoint, out_dir=out)
    _emit(
        args,
        {"checkpoint": str(ckpt), "metric": report.metric, "best_val": report.best_val, "final_val": report.final_val, "test": report.test_metric},
        f"checkpoint {ckpt}: val {report.metric} best {report.best_val:.4f} final {report.final_val:.4f}, test {report.test_metric}",
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _experiment(args)
    tiles = _load_corpus(args.corpus)
    manifest = _load_manifest(args.manifest, tiles, cfg)
    result = evaluate_checkpoint(args.checkpoint, tiles, manifest, split=args.split)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.json").write_text(json.dumps(result, indent=1))
        write_snapshot(cfg.resolved(), out / SNAPSHOT_NAME)
    _emit(args, result, f"{result['task']} {args.split} {result['metric_name']} = {result['metric']:.5f}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _experiment(args, {"run.seed": args.seed})
    tensors, meta = load_checkpoint(args.checkpoint)
    if meta.get("kind") != "mae":
        raise DataError(f"{args.checkpoint} is not an MAE checkpoint (kind={meta.get('kind')})")
    mae = MaeConfig.from_dict(meta["mae"])
    model = MaskedAutoencoder(mae)
    model.load_state_dict(tensors)
    stats = ChannelStats.from_dict(meta["channel_stats"])
    tiles = _load_corpus(args.corpus)
    manifest = _load_manifest(args.manifest, tiles, cfg)
    ids = sorted(manifest.ids(args.split))[: args.n]
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    by_id = {t.tile_id: t for t in tiles}
    images = stats.apply(np.stack([by_id[i].pixels for i in ids]))
    seed = cfg.run("pretrain").seed
    with no_grad():
        loss, pred, plan = model(Tensor(images), make_rng(seed, "reconstruct"))
    panels = reconstruct_image(pred, images, plan, mae)
    out = _out_dir(args, "reconstruct")
    png = write_reconstruction_grid(panels, out / "reconstruction.png", plan, mae)
    write_snapshot(cfg.resolved(), out / SNAPSHOT_NAME)
    _emit(args, {"png": str(png), "tiles": ids, "masked_mse": float(loss.item())}, f"wrote {png} (masked MSE {loss.item():.5f})")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise DataError(f"runs directory not found: {root}")
    reports = [RunReport.load(p) for p in sorted(root.rglob("report.json"))]
    reports = [r for r in reports if r.task != "pretrain" and (args.task is None or r.task == args.task)]
    if not reports:
        raise DataError(f"no fine-tuning reports under {root}")
    tasks = sorted({r.task for r in reports})
    if len(tasks) > 1:
        raise ConfigError(f"runs mix tasks {tasks}; pick one with --task")
    table = ablation_report(reports, higher_is_better=HIGHER_IS_BETTER[tasks[0]])
    out = _out_dir(args, "report")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{tasks[0]}_table.csv").write_text(table.to_csv())
    (out / f"{tasks[0]}_table.txt").write_text(table.to_text())
    (out / f"{tasks[0]}_table.json").write_text(table.to_json())
    if args.json:
        print(table.to_json())
    else:
        print(table.to_csv() if args.csv else table.to_text(), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ENV} or ./runs)")
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    p.add_argument("-v", "--verbose", action="count", default=1, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="tile corpus directory")
    p.add_argument("--manifest", help="split manifest JSON (default: band split from [data])")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarmae", description="Masked-autoencoder pretraining for 12-channel SAR tiles.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a labelled synthetic corpus")
    _common(p)
    p.add_argument("--n", type=int, help="number of tiles")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, help="tile side in pixels")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("split", help="latitude-band train/val/test split")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--band-height", type=float, help="band height in degrees")
    p.add_argument("--pattern", help="band cycle as letters T/V/E, e.g. TTTVE")
    p.add_argument("--manifest", help="output manifest path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", help="per-AOI tile counts, area and size")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus")
    src.add_argument("--paper", action="store_true", help="use the published AOI tile counts")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    _common(p)
    _data_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune encoder and task head")
    _common(p)
    _data_args(p)
    p.add_argument("--task", required=True, choices=("modisveg", "esawc"))
    p.add_argument("--fraction", type=float, help="label fraction of the train split")
    p.add_argument("--init", choices=("scratch", "pretrained"))
    p.add_argument("--checkpoint", help="MAE checkpoint for pretrained init")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint on a split")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", help="masked | reconstruction | original grid from an MAE checkpoint")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--n", type=int, default=4, help="number of tiles")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="fraction x init x region table from finished runs")
    _common(p)
    p.add_argument("--runs", required=True, help="directory searched recursively for report.json")
    p.add_argument("--task", choices=("modisveg", "esawc"))
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(0 if args.quiet else args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, TileFormatError, CheckpointError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
