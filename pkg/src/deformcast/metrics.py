"""Evaluation suite: pooled error metrics, accuracy-at-threshold,
per-epoch SSIM and Pearson, binned MAE, event-centred diagnostics and
grayscale heatmap export.

All metrics operate on de-normalized millimetre arrays shaped
(T_test, H, W) and are pooled over pixels and epochs unless stated
otherwise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .checkpoint import ModelCheckpoint, model_from_checkpoint
from .features import MultimodalFeaturizer, SampleSet, SplitSpec, denormalize, make_windows
from .raster import DisplacementCube

ACC_REL_LEVELS = (0.10, 0.20, 0.50)
ACC_ABS_LEVELS_MM = (1.0, 0.5, 0.2, 0.1)
REL_TRUTH_FLOOR_MM = 1e-6
N_MAE_BINS = 10


@dataclass(frozen=True)
class MaeBin:
    lo_mm: float
    hi_mm: float
    count: int
    mae_mm: float | None


@dataclass
class MetricsReport:
    label: str
    count: int
    rmse_mm: float
    mae_mm: float
    r2: float
    acc_rel: dict
    acc_rel_excluded: int
    acc_abs: dict
    ssim: float
    pearson: float
    binned_mae: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "count": self.count,
            "rmse_mm": self.rmse_mm,
            "mae_mm": self.mae_mm,
            "r2": self.r2,
            "acc_rel": {f"{int(p * 100)}": v for p, v in self.acc_rel.items()},
            "acc_rel_excluded": self.acc_rel_excluded,
            "acc_abs": {f"{t}": v for t, v in self.acc_abs.items()},
            "ssim": self.ssim,
            "pearson": self.pearson,
            "binned_mae": [
                {
                    "lo_mm": b.lo_mm,
                    "hi_mm": b.hi_mm,
                    "count": b.count,
                    "mae_mm": b.mae_mm,
                }
                for b in self.binned_mae
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            label=d["label"],
            count=int(d["count"]),
            rmse_mm=float(d["rmse_mm"]),
            mae_mm=float(d["mae_mm"]),
            r2=float(d["r2"]),
            acc_rel={p: float(d["acc_rel"][f"{int(p * 100)}"]) for p in ACC_REL_LEVELS},
            acc_rel_excluded=int(d["acc_rel_excluded"]),
            acc_abs={t: float(d["acc_abs"][f"{t}"]) for t in ACC_ABS_LEVELS_MM},
            ssim=float(d["ssim"]),
            pearson=float(d["pearson"]),
            binned_mae=[
                MaeBin(
                    float(b["lo_mm"]),
                    float(b["hi_mm"]),
                    int(b["count"]),
                    None if b["mae_mm"] is None else float(b["mae_mm"]),
                )
                for b in d["binned_mae"]
            ],
        )

    @staticmethod
    def csv_header() -> list:
        head = ["label", "count", "rmse_mm", "mae_mm", "r2"]
        head += [f"acc_rel_{int(p * 100)}pct" for p in ACC_REL_LEVELS]
        head.append("acc_rel_excluded")
        head += [f"acc_abs_{t}mm" for t in ACC_ABS_LEVELS_MM]
        head += ["ssim", "pearson"]
        head += [f"mae_bin_{i}" for i in range(N_MAE_BINS)]
        return head

    def csv_row(self) -> list:
        row = [self.label, self.count, repr(self.rmse_mm), repr(self.mae_mm), repr(self.r2)]
        row += [repr(self.acc_rel[p]) for p in ACC_REL_LEVELS]
        row.append(self.acc_rel_excluded)
        row += [repr(self.acc_abs[t]) for t in ACC_ABS_LEVELS_MM]
        row += [repr(self.ssim), repr(self.pearson)]
        for b in self.binned_mae:
            row.append("" if b.mae_mm is None else repr(b.mae_mm))
        return row


# ---------------------------------------------------------------------------
# scalar metrics

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Separable 2-D Gaussian weights normalized to unit sum."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {size}")
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_single(x: np.ndarray, y: np.ndarray, data_range: float, win: np.ndarray) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    k = win.shape[0]
    xs = sliding_window_view(x, (k, k))
    ys = sliding_window_view(y, (k, k))
    axes = ([2, 3], [0, 1])
    mx = np.tensordot(xs, win, axes=axes)
    my = np.tensordot(ys, win, axes=axes)
    exx = np.tensordot(xs * xs, win, axes=axes)
    eyy = np.tensordot(ys * ys, win, axes=axes)
    exy = np.tensordot(xs * ys, win, axes=axes)
    vx = exx - mx * mx
    vy = eyy - my * my
    cov = exy - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim_mean(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean structural similarity over epochs; the dynamic range is the
    truth range of each epoch, the window a size-11 Gaussian (sigma 1.5)
    shrunk to fit small grids."""
    T, H, W = truth.shape
    size = min(11, H, W)
    if size % 2 == 0:
        size -= 1
    win = gaussian_window(size)
    vals = []
    for t in range(T):
        r = float(truth[t].max() - truth[t].min())
        vals.append(_ssim_single(pred[t], truth[t], max(r, 1e-12), win))
    return float(np.mean(vals))


def pearson_mean(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean per-epoch Pearson correlation over flattened maps; epochs
    where either map has zero variance contribute 0."""
    vals = []
    for t in range(truth.shape[0]):
        x = pred[t].ravel()
        y = truth[t].ravel()
        xc = x - x.mean()
        yc = y - y.mean()
        vx = float(np.mean(xc * xc))
        vy = float(np.mean(yc * yc))
        if vx == 0.0 or vy == 0.0:
            vals.append(0.0)
        else:
            vals.append(float(np.mean(xc * yc)) / math.sqrt(vx * vy))
    return float(np.mean(vals))


def binned_mae(pred: np.ndarray, truth: np.ndarray) -> list:
    """MAE inside deciles of |truth|; duplicate quantile edges leave
    empty bins with mae None."""
    a = np.abs(truth).ravel()
    err = np.abs(pred - truth).ravel()
    edges = np.quantile(a, np.linspace(0.0, 1.0, N_MAE_BINS + 1))
    bins = []
    for i in range(N_MAE_BINS):
        lo, hi = edges[i], edges[i + 1]
        if i < N_MAE_BINS - 1:
            mask = (a >= lo) & (a < hi)
        else:
            mask = (a >= lo) & (a <= hi)
        n = int(mask.sum())
        mae = float(np.mean(err[mask])) if n else None
        bins.append(MaeBin(float(lo), float(hi), n, mae))
    return bins


def compute_metrics(pred_mm: np.ndarray, truth_mm: np.ndarray, label: str = "model") -> MetricsReport:
    pred = np.asarray(pred_mm, dtype=np.float64)
    truth = np.asarray(truth_mm, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.ndim != 3 or pred.shape[0] == 0:
        raise ValueError(f"need a non-empty (T, H, W) stack, got {pred.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValueError("metrics require finite inputs")

    err = pred - truth
    abs_err = np.abs(err)
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(abs_err))

    ss_res = float(np.sum(err * err))
    centered = truth - truth.mean()
    ss_tot = float(np.sum(centered * centered))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot

    abs_truth = np.abs(truth)
    valid = abs_truth >= REL_TRUTH_FLOOR_MM
    n_valid = int(valid.sum())
    acc_rel = {}
    for p in ACC_REL_LEVELS:
        if n_valid:
            hits = int(np.sum((abs_err < p * abs_truth) & valid))
            acc_rel[p] = hits / n_valid
        else:
            acc_rel[p] = 0.0
    acc_abs = {
        t: float(np.mean(abs_err < t)) for t in ACC_ABS_LEVELS_MM
    }

    return MetricsReport(
        label=label,
        count=int(truth.size),
        rmse_mm=rmse,
        mae_mm=mae,
        r2=r2,
        acc_rel=acc_rel,
        acc_rel_excluded=int(truth.size - n_valid),
        acc_abs=acc_abs,
        ssim=ssim_mean(pred, truth),
        pearson=pearson_mean(pred, truth),
        binned_mae=binned_mae(pred, truth),
    )


# ---------------------------------------------------------------------------
# checkpoint-driven evaluation

def params_digest(arrays: dict) -> str:
    """Order-independent content hash of named parameter arrays."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def predict_samples(model, samples: SampleSet, indices, batch_size: int = 16) -> np.ndarray:
    """Normalized one-step predictions for the given window indices."""
    idx = np.asarray(indices, dtype=np.int64)
    chunks = []
    for lo in range(0, len(idx), batch_size):
        part = idx[lo : lo + batch_size]
        out = model.forward_batch(samples.inputs(part))
        chunks.append(out.data)
    return np.concatenate(chunks, axis=0)


def evaluate_model(
    checkpoint: ModelCheckpoint,
    samples: SampleSet,
    label: str = "model",
    batch_size: int = 16,
    indices=None,
) -> MetricsReport:
    """Score a checkpoint's EMA weights on held-out windows, in mm."""
    if checkpoint.stats is None:
        raise ValueError("checkpoint carries no normalization statistics")
    idx = samples.test_indices() if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ValueError("empty held-out split")
    model = model_from_checkpoint(checkpoint, use_ema=True)
    pred = predict_samples(model, samples, idx, batch_size)
    pred_mm = denormalize(pred, checkpoint.stats)
    truth_mm = denormalize(samples.targets(idx), samples.stats)
    return compute_metrics(pred_mm, truth_mm, label=label)


def featurize_for_checkpoint(checkpoint: ModelCheckpoint, cube: DisplacementCube) -> SampleSet:
    """Windows for a (possibly foreign) cube under a checkpoint's recipe:
    static indicators from the cube's own training epochs, displacement
    and indicators normalized with the checkpoint's stored statistics."""
    if checkpoint.stats is None:
        raise ValueError("checkpoint carries no normalization statistics")
    cfg = checkpoint.config
    shape = cube.values.shape[1:]
    want = (cfg["grid_height"], cfg["grid_width"])
    if shape != want:
        raise ValueError(f"grid mismatch: cube {shape} vs checkpoint {want}")
    modality = "multimodal" if cfg["input_channels"] > 1 else "unimodal"
    feat = MultimodalFeaturizer(
        train_fraction=cfg["train_fraction"], modality=modality
    )
    feat.fit(cube)
    mm = feat.transform(cube, stats=checkpoint.stats)
    return make_windows(mm, cfg["history_length"], SplitSpec(cfg["train_fraction"]))


def cross_site_evaluate(
    checkpoint: ModelCheckpoint,
    target_cube: DisplacementCube,
    label: str = "transfer",
    batch_size: int = 16,
) -> MetricsReport:
    """Zero-shot evaluation on a foreign tile; parameters are read-only
    and verified bitwise unchanged."""
    before = params_digest(checkpoint.params), params_digest(checkpoint.ema)
    samples = featurize_for_checkpoint(checkpoint, target_cube)
    report = evaluate_model(checkpoint, samples, label=label, batch_size=batch_size)
    after = params_digest(checkpoint.params), params_digest(checkpoint.ema)
    if before != after:
        raise RuntimeError("checkpoint parameters changed during zero-shot evaluation")
    return report


# ---------------------------------------------------------------------------
# event-centred diagnostics

@dataclass
class EventDiagnostics:
    event_epoch: int
    offsets: np.ndarray
    epochs: np.ndarray
    pixels: dict
    curves: dict
    mae_series: np.ndarray
    pre_event_mae: float
    recovery_epoch: int | None


def event_centred_diagnostics(
    pred_mm: np.ndarray, truth_mm: np.ndarray, window: int = 10
) -> EventDiagnostics:
    """Locate the epoch of the largest one-step change in the truth and
    collect signed error curves around it for three probe pixels: the
    largest step, a half-amplitude step edge and a quiet background
    pixel. The estimated event epoch is the first epoch at the new
    level."""
    pred = np.asarray(pred_mm, dtype=np.float64)
    truth = np.asarray(truth_mm, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ValueError(
            f"need matching (T, H, W) stacks, got {pred.shape} and {truth.shape}"
        )
    T = truth.shape[0]
    if T <= 2 * window + 1:
        raise ValueError(
            f"series too short for a +/-{window} epoch window: length {T}"
        )

    diffs = np.abs(np.diff(truth, axis=0))
    per_epoch = diffs.max(axis=(1, 2))
    event = int(np.argmax(per_epoch)) + 1

    step = diffs[event - 1]
    peak = float(step.max())
    largest = np.unravel_index(int(np.argmax(step)), step.shape)
    edge = np.unravel_index(int(np.argmin(np.abs(step - 0.5 * peak))), step.shape)
    background = np.unravel_index(int(np.argmin(step)), step.shape)
    pixels = {
        "largest_step": (int(largest[0]), int(largest[1])),
        "step_edge": (int(edge[0]), int(edge[1])),
        "background": (int(background[0]), int(background[1])),
    }

    offsets = np.arange(-window, window + 1)
    keep = (event + offsets >= 0) & (event + offsets < T)
    offsets = offsets[keep]
    epochs = event + offsets

    err = pred - truth
    curves = {
        name: err[epochs, r, c].copy() for name, (r, c) in pixels.items()
    }
    mae_series = np.mean(np.abs(err), axis=(1, 2))
    pre = mae_series[:event]
    pre_mean = float(pre.mean()) if pre.size else math.nan

    recovery = None
    if math.isfinite(pre_mean):
        for t in range(event + 1, T):
            if mae_series[t] < 2.0 * pre_mean:
                recovery = t
                break

    return EventDiagnostics(
        event_epoch=event,
        offsets=offsets,
        epochs=epochs,
        pixels=pixels,
        curves=curves,
        mae_series=mae_series,
        pre_event_mae=pre_mean,
        recovery_epoch=recovery,
    )


def write_event_csv(diag: EventDiagnostics, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["offset", "epoch", "mae_mm", "err_largest_step",
             "err_step_edge", "err_background"]
        )
        for i, off in enumerate(diag.offsets):
            w.writerow(
                [int(off), int(diag.epochs[i]), repr(float(diag.mae_series[diag.epochs[i]])),
                 repr(float(diag.curves["largest_step"][i])),
                 repr(float(diag.curves["step_edge"][i])),
                 repr(float(diag.curves["background"][i]))]
            )


# ---------------------------------------------------------------------------
# heatmap export

def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("PGM export expects a 2-D uint8 array")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def save_heatmaps(out_dir, pred_mm: np.ndarray, truth_mm: np.ndarray, prefix: str = "epoch"):
    """Per-epoch truth / prediction / residual PGM images sharing one
    linear mm-to-gray mapping, recorded in a sidecar text file."""
    import os

    pred = np.asarray(pred_mm, dtype=np.float64)
    truth = np.asarray(truth_mm, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ValueError("heatmap export expects matching (T, H, W) stacks")
    residual = pred - truth
    lo = float(min(pred.min(), truth.min(), residual.min()))
    hi = float(max(pred.max(), truth.max(), residual.max()))
    if hi <= lo:
        hi = lo + 1.0
    scale = 255.0 / (hi - lo)

    def to_gray(a):
        return np.clip(np.rint((a - lo) * scale), 0, 255).astype(np.uint8)

    paths = []
    for t in range(truth.shape[0]):
        for kind, stack in (("truth", truth), ("pred", pred), ("residual", residual)):
            p = os.path.join(out_dir, f"{prefix}_{t:03d}_{kind}.pgm")
            write_pgm(p, to_gray(stack[t]))
            paths.append(p)
    sidecar = os.path.join(out_dir, f"{prefix}_gray_mapping.txt")
    with open(sidecar, "w") as fh:
        fh.write(f"lo_mm={lo!r}\n")
        fh.write(f"hi_mm={hi!r}\n")
        fh.write("gray=clip(round(255*(mm-lo_mm)/(hi_mm-lo_mm)), 0, 255)\n")
    return paths, sidecar
