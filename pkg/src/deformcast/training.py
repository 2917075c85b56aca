"""Composite loss, AdamW with warmup/cosine schedule, EMA and the fit loop.

The objective is a normalized-unit MAE (or SmoothL1) base term plus
optional relative, correlation and Sobel-gradient terms computed after
de-normalization to millimetres; all weighting factors are config
values. Training is bitwise deterministic for a fixed seed: batch
shuffling and dropout masks come from counter-based streams keyed by
(seed, purpose, step).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .checkpoint import ModelCheckpoint
from .features import NormStats, SampleSet, denormalize

SOBEL_X = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
SOBEL_Y = SOBEL_X.T.copy()

PRESETS = ("composite", "mae_only", "smoothl1_only")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss turns non-finite; carries the last finite state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class LossWeights:
    base: str = "mae"          # "mae" or "smoothl1"
    lam_rel: float = 0.0
    lam_corr: float = 0.0
    lam_grad: float = 0.0

    def __post_init__(self):
        if self.base not in ("mae", "smoothl1"):
            raise ValueError(f"unknown base loss {self.base!r}")
        if min(self.lam_rel, self.lam_corr, self.lam_grad) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def preset(cls, name, lam_rel=None, lam_corr=None, lam_grad=None):
        if name not in PRESETS:
            raise ValueError(f"loss preset must be one of {PRESETS}, got {name!r}")
        if name == "composite":
            return cls(
                base="mae",
                lam_rel=0.1 if lam_rel is None else lam_rel,
                lam_corr=0.1 if lam_corr is None else lam_corr,
                lam_grad=0.05 if lam_grad is None else lam_grad,
            )
        base = "smoothl1" if name == "smoothl1_only" else "mae"
        return cls(
            base=base,
            lam_rel=lam_rel or 0.0,
            lam_corr=lam_corr or 0.0,
            lam_grad=lam_grad or 0.0,
        )


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 40
    max_steps: int | None = None
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.01
    clip_norm: float = 1.0
    ema_decay: float = 0.999
    patience: int = 15
    seed: int = 0


# ---------------------------------------------------------------------------
# loss terms (differentiable; pred/target are (B, H, W))

def loss_mae(pred: ad.Tensor, target: ad.Tensor) -> ad.Tensor:
    return ad.mean(ad.abs_(ad.sub(pred, target)))


def loss_smoothl1(pred: ad.Tensor, target: ad.Tensor, beta: float = 1.0) -> ad.Tensor:
    return ad.mean(ad.smooth_l1(ad.sub(pred, target), beta))


def loss_rel(pred_mm: ad.Tensor, target_mm: ad.Tensor, eps: float = 1e-6) -> ad.Tensor:
    """Per-sample sum|err| / (sum|truth| + eps), averaged over the batch."""
    num = ad.sum_(ad.abs_(ad.sub(pred_mm, target_mm)), axis=(1, 2))
    den = ad.add(ad.sum_(ad.abs_(target_mm), axis=(1, 2)), eps)
    return ad.mean(ad.div(num, den))


def loss_corr(pred: ad.Tensor, target: ad.Tensor) -> ad.Tensor:
    """Per-sample 1 - Pearson over flattened maps, averaged.

    A zero-variance operand makes the covariance exactly zero while the
    guarded denominator stays positive, so its contribution is exactly 1.
    """
    B = pred.shape[0]
    m = pred.shape[1] * pred.shape[2]
    x = ad.reshape(pred, (B, m))
    y = ad.reshape(target, (B, m))
    mx = ad.expand(ad.mean(x, axis=1, keepdims=True), (B, m))
    my = ad.expand(ad.mean(y, axis=1, keepdims=True), (B, m))
    xc = ad.sub(x, mx)
    yc = ad.sub(y, my)
    cov = ad.mean(ad.mul(xc, yc), axis=1)
    vx = ad.mean(ad.mul(xc, xc), axis=1)
    vy = ad.mean(ad.mul(yc, yc), axis=1)
    r = ad.div(cov, ad.sqrt(ad.add(ad.mul(vx, vy), 1e-12)))
    return ad.mean(ad.add(ad.neg(r), 1.0))


def loss_grad(pred_mm: ad.Tensor, target_mm: ad.Tensor) -> ad.Tensor:
    """MAE between Sobel responses of prediction and truth, averaged over
    the two directions (valid region only)."""
    if pred_mm.shape[-2] < 3 or pred_mm.shape[-1] < 3:
        raise ValueError(
            f"loss_grad needs maps of at least 3x3, got {pred_mm.shape[-2:]}"
        )
    terms = []
    for kernel in (SOBEL_X, SOBEL_Y):
        gp = ad.fixed_kernel_conv2d(pred_mm, kernel)
        gt = ad.fixed_kernel_conv2d(target_mm, kernel)
        terms.append(ad.mean(ad.abs_(ad.sub(gp, gt))))
    return ad.mul(ad.add(terms[0], terms[1]), 0.5)


def _to_mm(t: ad.Tensor, stats: NormStats) -> ad.Tensor:
    shape = t.shape
    sigma = ad.constant(stats.pixel_std[None])
    mu = ad.constant(stats.pixel_mean[None])
    scaled = ad.mul(t, ad.expand(sigma, shape))
    return ad.add(scaled, ad.expand(mu, shape))


def composite_loss(
    pred_norm: ad.Tensor,
    target_norm: ad.Tensor,
    stats: NormStats,
    weights: LossWeights,
) -> ad.Tensor:
    """Base term in normalized units plus weighted mm-domain terms.

    With every weight zero this is exactly the base loss (no extra ops
    touch the graph)."""
    if weights.base == "smoothl1":
        total = loss_smoothl1(pred_norm, target_norm)
    else:
        total = loss_mae(pred_norm, target_norm)
    if weights.lam_rel or weights.lam_corr or weights.lam_grad:
        pred_mm = _to_mm(pred_norm, stats)
        target_mm = _to_mm(target_norm, stats)
        if weights.lam_rel:
            total = ad.add(total, ad.mul(loss_rel(pred_mm, target_mm), weights.lam_rel))
        if weights.lam_corr:
            total = ad.add(
                total, ad.mul(loss_corr(pred_norm, target_norm), weights.lam_corr)
            )
        if weights.lam_grad:
            total = ad.add(
                total, ad.mul(loss_grad(pred_mm, target_mm), weights.lam_grad)
            )
    return total


# ---------------------------------------------------------------------------
# optimizer, schedule, EMA

class AdamW:
    """Decoupled weight-decay Adam (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, tensors, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self, lr: float):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for t, m, v in zip(self.tensors, self.m, self.v):
            g = t.grad if t.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            t.data -= lr * (update + self.weight_decay * t.data)


def lr_schedule(
    step: int,
    total_steps: int,
    peak: float,
    warmup_frac: float = 0.05,
    final_frac: float = 0.01,
) -> float:
    """Linear warmup from 0 to peak over the first warmup_frac of steps,
    then cosine decay to final_frac * peak at the last step."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    warmup = max(1, int(math.floor(warmup_frac * total_steps)))
    if step < warmup:
        return peak * step / warmup
    last = total_steps - 1
    if last <= warmup:
        return peak
    progress = (step - warmup) / (last - warmup)
    floor = final_frac * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(tensors, max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return norm


class Ema:
    """Exponential moving average of parameter arrays."""

    def __init__(self, store, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = store.arrays()

    def update(self, store):
        d = self.decay
        for name, t in store.items():
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * t.data

    def arrays(self) -> dict:
        return {k: v.copy() for k, v in self.shadow.items()}


class EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record a held-out loss; True when it improved."""
        if value < self.best:
            self.best = value
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale > self.patience


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    holdout_loss: float
    holdout_rmse_mm: float


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "lr", "train_loss", "holdout_loss", "holdout_rmse_mm"])
        for r in rows:
            w.writerow(
                [r.epoch, r.step, repr(r.lr), repr(r.train_loss),
                 repr(r.holdout_loss), repr(r.holdout_rmse_mm)]
            )


# ---------------------------------------------------------------------------
# fit loop

class _SwappedParams:
    """Temporarily load foreign arrays into a model's parameters."""

    def __init__(self, store, arrays):
        self.store = store
        self.arrays = arrays

    def __enter__(self):
        self.saved = {k: t.data for k, t in self.store.items()}
        for k, t in self.store.items():
            t.data = self.arrays[k]
        return self

    def __exit__(self, *exc):
        for k, t in self.store.items():
            t.data = self.saved[k]
        return False


def _holdout_metrics(model, samples, weights, indices, batch_size):
    losses, sq, n = [], 0.0, 0
    for lo in range(0, len(indices), batch_size):
        idx = indices[lo : lo + batch_size]
        x = samples.inputs(idx)
        y = samples.targets(idx)
        pred = model.forward_batch(x)
        loss = composite_loss(pred, ad.constant(y), samples.stats, weights)
        losses.append(float(loss.data) * len(idx))
        p_mm = denormalize(pred.data, samples.stats)
        t_mm = denormalize(y, samples.stats)
        sq += float(np.sum((p_mm - t_mm) ** 2))
        n += p_mm.size
    total = sum(losses) / len(indices)
    return total, math.sqrt(sq / n)


def _snapshot(model, ema, samples, tile, hyper):
    config = model.config_dict()
    config["train_fraction"] = samples.train_fraction
    config["seed"] = hyper.seed
    return ModelCheckpoint(
        config=config,
        params=model.store.arrays(),
        ema=ema.arrays(),
        stats=samples.stats,
        tile=tile,
    )


def fit(
    model,
    samples: SampleSet,
    weights: LossWeights,
    hyper: TrainHyper,
    tile: str | None = None,
):
    """Train a model on the chronological train split of `samples`.

    Returns (best checkpoint, training log). The checkpoint holds the
    raw and EMA parameters of the epoch with the lowest held-out
    composite loss; held-out evaluation runs on the EMA weights.
    """
    train_idx = samples.train_indices()
    test_idx = samples.test_indices()
    if len(train_idx) == 0:
        raise ValueError("train split is empty")
    if len(test_idx) == 0:
        raise ValueError("held-out split is empty")

    steps_per_epoch = math.ceil(len(train_idx) / hyper.batch_size)
    total_steps = steps_per_epoch * hyper.max_epochs
    if hyper.max_steps is not None:
        total_steps = min(total_steps, hyper.max_steps)

    tensors = model.store.tensors()
    opt = AdamW(tensors, weight_decay=hyper.weight_decay)
    ema = Ema(model.store, hyper.ema_decay)
    stopper = EarlyStopper(hyper.patience)
    log: list[LogRow] = []
    best = None
    last_finite = None
    step = 0
    lr = 0.0

    for epoch in range(hyper.max_epochs):
        order = rngmod.stream(hyper.seed, "shuffle", epoch).permutation(train_idx)
        epoch_loss, seen = 0.0, 0
        for lo in range(0, len(order), hyper.batch_size):
            if step >= total_steps:
                break
            idx = order[lo : lo + hyper.batch_size]
            x = samples.inputs(idx)
            y = samples.targets(idx)
            lr = lr_schedule(
                step, total_steps, hyper.learning_rate,
                hyper.warmup_frac, hyper.final_lr_frac,
            )
            gen = rngmod.stream(hyper.seed, "dropout", step)
            ad.zero_grads(tensors)
            with ad.Tape():
                pred = model.forward_batch(x, train_gen=gen)
                loss = composite_loss(pred, ad.constant(y), samples.stats, weights)
                value = float(loss.data)
                if not math.isfinite(value):
                    ckpt = last_finite
                    if all(np.all(np.isfinite(t.data)) for t in tensors):
                        ckpt = _snapshot(model, ema, samples, tile, hyper)
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}", checkpoint=ckpt
                    )
                ad.backward(loss)
            clip_gradients(tensors, hyper.clip_norm)
            opt.step(lr)
            ema.update(model.store)
            epoch_loss += value * len(idx)
            seen += len(idx)
            step += 1

        if seen == 0:
            break
        with _SwappedParams(model.store, ema.shadow):
            hold_loss, hold_rmse = _holdout_metrics(
                model, samples, weights, test_idx, hyper.batch_size
            )
        log.append(
            LogRow(epoch, step, lr, epoch_loss / seen, hold_loss, hold_rmse)
        )
        if stopper.update(hold_loss):
            best = _snapshot(model, ema, samples, tile, hyper)
        last_finite = _snapshot(model, ema, samples, tile, hyper)
        if stopper.should_stop or step >= total_steps:
            break

    if best is None:
        best = last_finite or _snapshot(model, ema, samples, tile, hyper)
    return best, log
