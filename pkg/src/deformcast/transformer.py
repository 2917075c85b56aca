"""Patch-token transformer for one-step displacement forecasting.

A window of L multimodal frames is cut into non-overlapping P x P
patches, embedded, and concatenated with learnable query tokens that
stand for the next epoch. Masked self-attention blocks information flow
from history tokens to query tokens (queries may attend everywhere),
and the decoded query patches form an increment that is added onto the
last observed displacement map, so an untrained (zero) decoder is an
exact persistence forecaster.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import rng as rngmod
from .nn import ParamStore, dropout, linear_op
from .features import SampleSet

MASK_BLOCK = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    grid_height: int = 64
    grid_width: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    ffn_multiplier: int = 4
    input_channels: int = 6
    history_length: int = 16
    out_steps: int = 1
    dropout: float = 0.1

    def __post_init__(self):
        if self.grid_height % self.patch_size or self.grid_width % self.patch_size:
            raise ValueError(
                f"grid {self.grid_height}x{self.grid_width} not divisible by "
                f"patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.out_steps < 1:
            raise ValueError("out_steps must be >= 1")

    @property
    def patches_per_frame(self) -> int:
        return (self.grid_height // self.patch_size) * (
            self.grid_width // self.patch_size
        )

    @property
    def patch_dim(self) -> int:
        return self.input_channels * self.patch_size**2


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(L, C, H, W) -> (L * N_p, C * P^2), time-major then patch-row-major."""
    L, C, H, W = frames.shape
    if H % patch or W % patch:
        raise ValueError(f"frame {H}x{W} not divisible by patch size {patch}")
    hp, wp = H // patch, W // patch
    x = frames.reshape(L, C, hp, patch, wp, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(L * hp * wp, C * patch * patch))


def unpatchify(tokens: np.ndarray, L: int, C: int, H: int, W: int, patch: int):
    """Inverse of patchify."""
    hp, wp = H // patch, W // patch
    x = tokens.reshape(L, hp, wp, C, patch, patch)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x.reshape(L, C, H, W))


def build_attention_mask(L: int, out_steps: int, n_patches: int) -> np.ndarray:
    """Additive mask: history rows may not attend to query columns."""
    n_hist = L * n_patches
    total = (L + out_steps) * n_patches
    mask = np.zeros((total, total))
    mask[:n_hist, n_hist:] = MASK_BLOCK
    return mask


class TransformerModel:
    """Parameter container plus the batched forward pass."""

    kind = "transformer"

    def __init__(self, config: TransformerConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        self.mask = build_attention_mask(
            config.history_length, config.out_steps, config.patches_per_frame
        )
        self._init_params(seed)

    def _init_params(self, seed):
        cfg = self.config
        st = self.store
        gen = rngmod.stream(seed, "init", "transformer")
        D = cfg.embed_dim
        st.linear("embed", cfg.patch_dim, D, gen)
        st.layer_norm("embed_ln", D)
        st.new(
            "pos/temporal",
            gen.normal(0.0, 0.02, size=(cfg.history_length + cfg.out_steps, D)),
        )
        st.new("pos/spatial", gen.normal(0.0, 0.02, size=(cfg.patches_per_frame, D)))
        st.new("query", gen.normal(0.0, 0.02, size=(cfg.out_steps, D)))
        for k in range(cfg.layers):
            p = f"block{k}"
            st.layer_norm(f"{p}/ln_attn", D)
            st.linear(f"{p}/q", D, D, gen)
            st.linear(f"{p}/k", D, D, gen)
            st.linear(f"{p}/v", D, D, gen)
            st.linear(f"{p}/out", D, D, gen)
            st.layer_norm(f"{p}/ln_ffn", D)
            st.linear(f"{p}/ffn1", D, D * cfg.ffn_multiplier, gen)
            st.linear(f"{p}/ffn2", D * cfg.ffn_multiplier, D, gen)
        st.linear("decode", D, cfg.patch_size**2, gen)
        # small decoder gain: early predictions stay close to persistence
        # without cutting gradient flow into the decoder stack
        st.layer_norm("decode_ln", cfg.patch_size**2, gamma_init=0.1)

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["kind"] = self.kind
        return d

    # -- forward ------------------------------------------------------------

    def _tokens(self, x: ad.Tensor):
        """Patchify a (B, L, C, H, W) tensor into (B, L*N_p, C*P^2)."""
        cfg = self.config
        B = x.shape[0]
        L, C = cfg.history_length, cfg.input_channels
        P = cfg.patch_size
        hp, wp = cfg.grid_height // P, cfg.grid_width // P
        t = ad.reshape(x, (B, L, C, hp, P, wp, P))
        t = ad.transpose(t, (0, 1, 3, 5, 2, 4, 6))
        return ad.reshape(t, (B, L * hp * wp, C * P * P))

    def _positional(self, B: int):
        """(1, (L+L_out)*N_p, D) positional tensor, expanded to batch."""
        cfg = self.config
        Np, D = cfg.patches_per_frame, cfg.embed_dim
        steps = cfg.history_length + cfg.out_steps
        temporal = self.store["pos/temporal"]
        spatial = self.store["pos/spatial"]
        t = ad.reshape(temporal, (steps, 1, D))
        t = ad.expand(t, (steps, Np, D))
        s = ad.reshape(spatial, (1, Np, D))
        s = ad.expand(s, (steps, Np, D))
        pos = ad.reshape(ad.add(t, s), (1, steps * Np, D))
        return ad.expand(pos, (B, steps * Np, D))

    def _attention(self, z, prefix, train_gen):
        cfg = self.config
        st = self.store
        B, T, D = z.shape
        h = cfg.heads
        dk = D // h
        q = linear_op(z, st[f"{prefix}/q/w"], st[f"{prefix}/q/b"])
        k = linear_op(z, st[f"{prefix}/k/w"], st[f"{prefix}/k/b"])
        v = linear_op(z, st[f"{prefix}/v/w"], st[f"{prefix}/v/b"])

        def split(t):
            t = ad.reshape(t, (B, T, h, dk))
            return ad.transpose(t, (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.mul(scores, 1.0 / np.sqrt(dk))
        probs = ad.softmax_lastaxis(scores, mask=self.mask)
        probs = dropout(probs, cfg.dropout, train_gen)
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
        return linear_op(ctx, st[f"{prefix}/out/w"], st[f"{prefix}/out/b"])

    def encode(self, z: ad.Tensor, train_gen=None) -> ad.Tensor:
        """K pre-norm blocks: LN -> attention -> add, LN -> FFN -> add."""
        cfg = self.config
        st = self.store
        for j in range(cfg.layers):
            p = f"block{j}"
            a = ad.layer_norm_lastaxis(z, st[f"{p}/ln_attn/g"], st[f"{p}/ln_attn/b"])
            z = ad.add(z, self._attention(a, p, train_gen))
            f = ad.layer_norm_lastaxis(z, st[f"{p}/ln_ffn/g"], st[f"{p}/ln_ffn/b"])
            f = ad.gelu(linear_op(f, st[f"{p}/ffn1/w"], st[f"{p}/ffn1/b"]))
            f = dropout(f, cfg.dropout, train_gen)
            f = linear_op(f, st[f"{p}/ffn2/w"], st[f"{p}/ffn2/b"])
            z = ad.add(z, f)
        return z

    def embed(self, x: ad.Tensor) -> ad.Tensor:
        """Token sequence [history, queries] with positional terms added."""
        cfg = self.config
        st = self.store
        B = x.shape[0]
        Np, D = cfg.patches_per_frame, cfg.embed_dim
        tokens = self._tokens(x)
        h = linear_op(tokens, st["embed/w"], st["embed/b"])
        h = ad.layer_norm_lastaxis(h, st["embed_ln/g"], st["embed_ln/b"])
        qe = ad.reshape(st["query"], (1, cfg.out_steps, 1, D))
        qe = ad.expand(qe, (B, cfg.out_steps, Np, D))
        qe = ad.reshape(qe, (B, cfg.out_steps * Np, D))
        z = ad.concat([h, qe], axis=1)
        return ad.add(z, self._positional(B))

    def forward_batch(self, window, train_gen=None) -> ad.Tensor:
        """(B, L, C, H, W) normalized windows -> (B, H, W) prediction."""
        cfg = self.config
        x = window if isinstance(window, ad.Tensor) else ad.constant(window)
        B, L, C, H, W = x.shape
        if (L, C, H, W) != (
            cfg.history_length,
            cfg.input_channels,
            cfg.grid_height,
            cfg.grid_width,
        ):
            raise ValueError(
                f"window shape {x.shape} does not match config "
                f"(L={cfg.history_length}, C={cfg.input_channels}, "
                f"H={cfg.grid_height}, W={cfg.grid_width})"
            )
        st = self.store
        P = cfg.patch_size
        hp, wp = H // P, W // P
        Np = cfg.patches_per_frame

        z = self.encode(self.embed(x), train_gen)
        queries = ad.slice_axis(z, 1, L * Np, (L + cfg.out_steps) * Np)
        dec = linear_op(queries, st["decode/w"], st["decode/b"])
        dec = ad.layer_norm_lastaxis(dec, st["decode_ln/g"], st["decode_ln/b"])
        # unpatchify the first output step
        inc = ad.reshape(dec, (B, cfg.out_steps, hp, wp, P, P))
        inc = ad.slice_axis(inc, 1, 0, 1)
        inc = ad.transpose(inc, (0, 1, 2, 4, 3, 5))
        inc = ad.reshape(inc, (B, H, W))
        last = ad.slice_axis(x, 1, L - 1, L)          # (B, 1, C, H, W)
        last = ad.slice_axis(last, 2, 0, 1)           # displacement channel
        last = ad.reshape(last, (B, H, W))
        return ad.add(last, inc)


def predict_next(model: TransformerModel, window: np.ndarray, last_disp=None):
    """Single-window convenience wrapper around forward_batch."""
    w = np.asarray(window, dtype=np.float64)
    if last_disp is not None:
        if not np.array_equal(w[-1, 0], np.asarray(last_disp)):
            raise ValueError(
                "last_disp does not match displacement channel of the last frame"
            )
    out = model.forward_batch(w[None])
    return out.data[0]


def predict_windows(model, inputs: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Plain inference over (n, L, C, H, W) windows, chunked for memory."""
    parts = [
        model.forward_batch(inputs[i : i + chunk]).data
        for i in range(0, len(inputs), chunk)
    ]
    return np.concatenate(parts, axis=0)


class TransformerForecaster(BaseEstimator, RegressorMixin):
    """One-step forecaster with the training loop attached.

    fit() consumes a SampleSet (see features.make_windows); predict()
    maps (n, L, C, H, W) normalized windows to (n, H, W) normalized
    next-frame predictions using the EMA weights of the best epoch.
    """

    def __init__(
        self,
        patch_size=8,
        embed_dim=128,
        layers=4,
        heads=4,
        ffn_multiplier=4,
        dropout=0.1,
        loss_preset="composite",
        lambda_rel=None,
        lambda_corr=None,
        lambda_grad=None,
        learning_rate=1e-3,
        weight_decay=1e-4,
        batch_size=8,
        max_epochs=40,
        max_steps=None,
        warmup_frac=0.05,
        final_lr_frac=0.01,
        clip_norm=1.0,
        ema_decay=0.999,
        patience=15,
        seed=0,
    ):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.layers = layers
        self.heads = heads
        self.ffn_multiplier = ffn_multiplier
        self.dropout = dropout
        self.loss_preset = loss_preset
        self.lambda_rel = lambda_rel
        self.lambda_corr = lambda_corr
        self.lambda_grad = lambda_grad
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.warmup_frac = warmup_frac
        self.final_lr_frac = final_lr_frac
        self.clip_norm = clip_norm
        self.ema_decay = ema_decay
        self.patience = patience
        self.seed = seed

    def _build_model(self, samples: SampleSet) -> TransformerModel:
        T, C, H, W = samples.values.shape
        config = TransformerConfig(
            grid_height=H,
            grid_width=W,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            layers=self.layers,
            heads=self.heads,
            ffn_multiplier=self.ffn_multiplier,
            input_channels=C,
            history_length=samples.length,
            dropout=self.dropout,
        )
        return TransformerModel(config, seed=self.seed)

    def fit(self, X: SampleSet, y=None, tile=None):
        from . import training

        model = self._build_model(X)
        weights = training.LossWeights.preset(
            self.loss_preset, self.lambda_rel, self.lambda_corr, self.lambda_grad
        )
        hyper = training.TrainHyper(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            warmup_frac=self.warmup_frac,
            final_lr_frac=self.final_lr_frac,
            clip_norm=self.clip_norm,
            ema_decay=self.ema_decay,
            patience=self.patience,
            seed=self.seed,
        )
        self.checkpoint_, self.log_ = training.fit(model, X, weights, hyper, tile=tile)
        self.model_ = model
        self._eval_model = None
        return self

    def _ema_model(self) -> TransformerModel:
        if getattr(self, "_eval_model", None) is None:
            m = TransformerModel(self.model_.config, seed=self.seed)
            m.store.load_arrays(self.checkpoint_.ema)
            self._eval_model = m
        return self._eval_model

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("TransformerForecaster is not fitted yet")
        return predict_windows(self._ema_model(), np.asarray(X, dtype=np.float64))
