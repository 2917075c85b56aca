"""Command-line pipeline: synth, ingest, train, eval, transfer, report.

Every command reads a TOML config, writes its artifacts into the output
directory and exits 0 on success. Failures exit nonzero after printing
a single-line `error: <kind>: <detail>` to stderr. All outputs are
deterministic for a fixed config and seed; wall-clock timestamps are
confined to the run manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import baselines, metrics, synth, training
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TRAINABLE_KINDS, ConfigError, RunConfig, load_config
from .features import SplitSpec, denormalize
from .ingest import load_l3_csv, save_l3_csv
from .raster import DisplacementCube, GridSpec, load_cube, rasterize_cube, save_cube
from .stgcn import StgcnForecaster
from .transformer import TransformerForecaster


def _write_manifest(out_dir: str, command: str, cfg_seed) -> None:
    """The only artifact that carries a timestamp."""
    stamp = datetime.now(timezone.utc).isoformat()
    with open(os.path.join(out_dir, "run_manifest.txt"), "w") as fh:
        fh.write(f"command={command}\n")
        fh.write(f"seed={cfg_seed}\n")
        fh.write(f"written_utc={stamp}\n")


def _prepare(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def _regime_spec(cfg: RunConfig) -> synth.RegimeSpec:
    s = cfg.synth
    if s is None:
        raise ConfigError("this command needs a [synth] section or paths.input")
    return synth.RegimeSpec(
        kind=s.kind,
        seed=cfg.seed,
        noise_sigma_mm=s.noise_sigma_mm,
        velocity_mm_yr=s.velocity_mm_yr,
        amplitude_mm=s.amplitude_mm,
        phase_rad=s.phase_rad,
        step_mm=s.step_mm,
        step_radius_frac=s.step_radius_frac,
        event_epoch=s.event_epoch,
        basis_order=s.basis_order,
        n_points=s.n_points,
        missing_fraction=s.missing_fraction,
        height=cfg.grid_height,
        width=cfg.grid_width,
        tile=s.tile,
    )


def _load_input_cube(cfg: RunConfig) -> DisplacementCube:
    """Cube from paths.input (.csv or container) or from the synth section."""
    if cfg.input_path is not None:
        if cfg.input_path.endswith(".csv"):
            series = load_l3_csv(cfg.input_path)
            grid = GridSpec.for_tile(series.tile, cfg.grid_height, cfg.grid_width)
            return rasterize_cube(series, grid)
        return load_cube(cfg.input_path)
    spec = _regime_spec(cfg)
    return synth.generate_tile(spec, T=cfg.synth.epochs, calendar=_calendar(cfg)).cube


def _calendar(cfg: RunConfig):
    return synth.default_calendar(cfg.synth.epochs, cadence_days=cfg.synth.cadence_days)


def _load_cube_path(path: str, cfg: RunConfig) -> DisplacementCube:
    if path.endswith(".csv"):
        series = load_l3_csv(path)
        grid = GridSpec.for_tile(series.tile, cfg.grid_height, cfg.grid_width)
        return rasterize_cube(series, grid)
    return load_cube(path)


def _forecaster(cfg: RunConfig):
    common = dict(
        loss_preset=cfg.loss_preset,
        lambda_rel=cfg.lambda_rel,
        lambda_corr=cfg.lambda_corr,
        lambda_grad=cfg.lambda_grad,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        max_steps=cfg.max_steps,
        warmup_frac=cfg.warmup_frac,
        final_lr_frac=cfg.final_lr_frac,
        clip_norm=cfg.clip_norm,
        ema_decay=cfg.ema_decay,
        patience=cfg.patience,
        seed=cfg.seed,
    )
    if cfg.model_kind == "transformer":
        return TransformerForecaster(
            patch_size=cfg.patch_size,
            embed_dim=cfg.embed_dim,
            layers=cfg.layers,
            heads=cfg.heads,
            ffn_multiplier=cfg.ffn_multiplier,
            dropout=cfg.dropout,
            **common,
        )
    if cfg.model_kind == "stgcn":
        return StgcnForecaster(
            blocks=cfg.blocks,
            hidden=cfg.hidden,
            kernel=cfg.kernel,
            dropout=cfg.dropout,
            **common,
        )
    raise ConfigError(
        f"model.kind {cfg.model_kind!r} has no trainable parameters; "
        "use the eval command"
    )


def _write_report_files(report: metrics.MetricsReport, out_dir: str) -> None:
    base = os.path.join(out_dir, f"metrics_{report.label}")
    with open(base + ".json", "w") as fh:
        fh.write(report.to_json() + "\n")
    with open(base + ".csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metrics.MetricsReport.csv_header())
        w.writerow(report.csv_row())


def _aligned_baseline_reports(cube: DisplacementCube, samples, target_epochs):
    """Persistence / linear / seasonal scored on the same target epochs
    as the model's held-out windows."""
    values = cube.values
    days = cube.calendar.epoch_days
    split = SplitSpec(samples.train_fraction)
    train_count = split.train_epoch_count(values.shape[0])
    truth = values[target_epochs]
    out = []
    pred = baselines.persistence_forecast(values, target_epochs)
    out.append(metrics.compute_metrics(pred, truth, label="persistence"))
    try:
        pred, _ = baselines.fit_predict_linear(values, days, train_count, target_epochs)
        out.append(metrics.compute_metrics(pred, truth, label="linear"))
        pred, _ = baselines.fit_predict_seasonal(values, days, train_count, target_epochs)
        out.append(metrics.compute_metrics(pred, truth, label="seasonal"))
    except ValueError:
        pass  # too few training epochs for the regressions; persistence stands
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = _prepare(args)
    spec = _regime_spec(cfg)
    tile = synth.generate_tile(spec, T=cfg.synth.epochs, calendar=_calendar(cfg))
    save_l3_csv(tile.points, os.path.join(cfg.out_dir, f"{spec.tile}.csv"))
    save_cube(tile.cube, os.path.join(cfg.out_dir, "truth_cube.defcube"))
    summary = {
        "kind": spec.kind,
        "tile": spec.tile,
        "epochs": cfg.synth.epochs,
        "points": len(tile.points.points),
        "event_epoch": tile.event_epoch,
    }
    with open(os.path.join(cfg.out_dir, "synth_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg.out_dir, "synth", cfg.seed)
    return 0


def cmd_ingest(args) -> int:
    cfg = _prepare(args)
    if cfg.input_path is None:
        raise ConfigError("ingest needs paths.input pointing at a CSV file")
    series = load_l3_csv(cfg.input_path)
    grid = GridSpec.for_tile(series.tile, cfg.grid_height, cfg.grid_width)
    cube = rasterize_cube(series, grid)
    save_cube(cube, os.path.join(cfg.out_dir, "cube.defcube"))
    summary = {
        "tile": series.tile.raw,
        "points": len(series.points),
        "skipped_rows": list(series.skipped_rows),
        "epochs": len(series.calendar.dates),
    }
    with open(os.path.join(cfg.out_dir, "ingest_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg.out_dir, "ingest", cfg.seed)
    return 0


def cmd_train(args) -> int:
    cfg = _prepare(args)
    if cfg.model_kind not in TRAINABLE_KINDS:
        raise ConfigError(
            f"model.kind {cfg.model_kind!r} is closed-form; nothing to train"
        )
    cube = _load_input_cube(cfg)
    est = _forecaster(cfg)
    samples = _featurize(cfg, cube)
    tile = cube.tile.raw if cube.tile is not None else None
    est.fit(samples, tile=tile)
    save_checkpoint(est.checkpoint_, os.path.join(cfg.out_dir, "model.defckpt"))
    training.write_training_log(
        est.log_, os.path.join(cfg.out_dir, "training_log.csv")
    )
    _write_manifest(cfg.out_dir, "train", cfg.seed)
    return 0


def _featurize(cfg: RunConfig, cube: DisplacementCube):
    from .features import MultimodalFeaturizer, make_windows

    feat = MultimodalFeaturizer(
        train_fraction=cfg.train_fraction, modality=cfg.modality
    )
    mm = feat.fit(cube).transform(cube)
    return make_windows(mm, cfg.history_length, SplitSpec(cfg.train_fraction))


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    cube = _load_input_cube(cfg)

    if cfg.model_kind in TRAINABLE_KINDS:
        if args.checkpoint is None:
            raise ConfigError(f"eval of a {cfg.model_kind} model needs --checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        samples = metrics.featurize_for_checkpoint(ckpt, cube)
        idx = samples.test_indices()
        report = metrics.evaluate_model(ckpt, samples, label=cfg.model_kind)
        target_epochs = np.array([samples.target_epoch(i) for i in idx])
        model = metrics.model_from_checkpoint(ckpt, use_ema=True)
        pred_mm = denormalize(
            metrics.predict_samples(model, samples, idx), ckpt.stats
        )
        truth_mm = denormalize(samples.targets(idx), samples.stats)
        reports = [report] + _aligned_baseline_reports(cube, samples, target_epochs)
    else:
        split = SplitSpec(cfg.train_fraction)
        train_count = split.train_epoch_count(cube.values.shape[0])
        target_epochs = np.arange(train_count, cube.values.shape[0])
        truth_mm = cube.values[target_epochs]
        days = cube.calendar.epoch_days
        if cfg.model_kind == "persistence":
            pred_mm = baselines.persistence_forecast(cube.values, target_epochs)
        elif cfg.model_kind == "linear":
            pred_mm, _ = baselines.fit_predict_linear(
                cube.values, days, train_count, target_epochs
            )
        else:
            pred_mm, _ = baselines.fit_predict_seasonal(
                cube.values, days, train_count, target_epochs
            )
        reports = [metrics.compute_metrics(pred_mm, truth_mm, label=cfg.model_kind)]

    for rep in reports:
        _write_report_files(rep, cfg.out_dir)

    heat_dir = os.path.join(cfg.out_dir, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    metrics.save_heatmaps(heat_dir, pred_mm, truth_mm)

    if truth_mm.shape[0] > 21:
        diag = metrics.event_centred_diagnostics(pred_mm, truth_mm)
        metrics.write_event_csv(
            diag, os.path.join(cfg.out_dir, "event_diagnostics.csv")
        )

    _write_manifest(cfg.out_dir, "eval", cfg.seed)
    return 0


def cmd_transfer(args) -> int:
    cfg = _prepare(args)
    if args.checkpoint is None or args.target is None:
        raise ConfigError("transfer needs --checkpoint and --target")
    before = _file_digest(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    target = _load_cube_path(args.target, cfg)
    report = metrics.cross_site_evaluate(ckpt, target, label="transfer")
    samples = metrics.featurize_for_checkpoint(ckpt, target)
    target_epochs = np.array(
        [samples.target_epoch(i) for i in samples.test_indices()]
    )
    reports = [report] + _aligned_baseline_reports(target, samples, target_epochs)
    for rep in reports:
        _write_report_files(rep, cfg.out_dir)
    after = _file_digest(args.checkpoint)
    if before != after:
        raise RuntimeError("checkpoint file changed during transfer")
    _write_manifest(cfg.out_dir, "transfer", cfg.seed)
    return 0


def _file_digest(path: str) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def cmd_report(args) -> int:
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for path in args.reports:
        with open(path) as fh:
            rows.append(metrics.MetricsReport.from_dict(json.load(fh)))
    if not rows:
        raise ValueError("report needs at least one metrics JSON file")
    out_path = os.path.join(out_dir, "comparison.csv")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metrics.MetricsReport.csv_header())
        for rep in rows:
            w.writerow(rep.csv_row())
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deformcast",
        description="Ground-deformation nowcasting pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, checkpoint=False, target=False, config=True):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", required=True, help="TOML run config")
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        if checkpoint:
            sp.add_argument("--checkpoint", default=None, help="model checkpoint path")
        if target:
            sp.add_argument("--target", default=None, help="target tile cube or CSV")
        sp.set_defaults(func=func)
        return sp

    add("synth", cmd_synth, "generate a synthetic tile (CSV + truth cube)")
    add("ingest", cmd_ingest, "rasterize a point CSV into a displacement cube")
    add("train", cmd_train, "fit a forecaster and write a checkpoint")
    add("eval", cmd_eval, "score a model or baseline on held-out epochs",
        checkpoint=True)
    add("transfer", cmd_transfer, "zero-shot evaluation on a foreign tile",
        checkpoint=True, target=True)
    rp = sub.add_parser("report", help="merge metrics JSONs into one comparison CSV")
    rp.add_argument("reports", nargs="+", help="metrics JSON files")
    rp.add_argument("--out", default=None, help="output directory")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line contract
        detail = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {detail}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
