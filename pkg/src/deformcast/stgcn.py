"""Spatio-temporal graph convolutional forecaster on the pixel grid.

Pixels are graph nodes with queen (8-neighbour) connectivity. Each block
runs a gated temporal convolution (GLU), a graph convolution through the
symmetric normalized adjacency with a residual connection and layer
normalization over channels, then a second gated temporal convolution.
A per-node fully connected head maps the remaining channel x time
features to the next normalized displacement (absolute, no residual
trick).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from . import rng as rngmod
from .nn import ParamStore, dropout
from .features import SampleSet


@dataclass
class GridGraph:
    height: int
    width: int
    adjacency: sp.csr_matrix   # 0/1, symmetric, no self-loops
    normalized: sp.csr_matrix  # D^{-1/2} (A + I) D^{-1/2}

    @property
    def n_nodes(self) -> int:
        return self.height * self.width


def build_normalized_adjacency(H: int, W: int) -> GridGraph:
    """Queen adjacency over an H x W grid with symmetric normalization."""
    if H < 2 or W < 2:
        raise ValueError(f"grid must be at least 2x2, got {H}x{W}")
    rows, cols = [], []
    for i in range(H):
        for j in range(W):
            node = i * W + j
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ni, nj = i + di, j + dj
                    if 0 <= ni < H and 0 <= nj < W:
                        rows.append(node)
                        cols.append(ni * W + nj)
    n = H * W
    data = np.ones(len(rows))
    A = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    A_hat = A + sp.identity(n, format="csr")
    deg = np.asarray(A_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    D = sp.diags(inv_sqrt)
    norm = (D @ A_hat @ D).tocsr()
    return GridGraph(height=H, width=W, adjacency=A, normalized=norm)


@dataclass(frozen=True)
class StgcnConfig:
    grid_height: int = 64
    grid_width: int = 64
    input_channels: int = 6
    history_length: int = 16
    blocks: int = 2
    hidden: tuple = (32, 64)
    kernel: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.hidden) != self.blocks:
            raise ValueError(
                f"hidden widths {self.hidden} do not match {self.blocks} blocks"
            )
        if self.final_time_length < 1:
            raise ValueError(
                f"history_length {self.history_length} collapses after "
                f"{self.blocks} blocks of two valid kernel-{self.kernel} "
                f"convolutions (needs >= {self.blocks * 2 * (self.kernel - 1) + 1})"
            )

    @property
    def final_time_length(self) -> int:
        return self.history_length - self.blocks * 2 * (self.kernel - 1)


class StgcnModel:
    kind = "stgcn"

    def __init__(self, config: StgcnConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        self.graph = build_normalized_adjacency(config.grid_height, config.grid_width)
        self._init_params(seed)

    def _init_params(self, seed):
        cfg = self.config
        st = self.store
        gen = rngmod.stream(seed, "init", "stgcn")
        c_in = cfg.input_channels
        for b, c_out in enumerate(cfg.hidden):
            for tag, ci, co in (
                ("tconv1", c_in, c_out),
                ("tconv2", c_out, c_out),
            ):
                scale = 1.0 / np.sqrt(ci * cfg.kernel)
                for branch in ("gate", "lin"):
                    st.new(
                        f"block{b}/{tag}/{branch}_w",
                        gen.normal(0.0, scale, size=(co, ci, cfg.kernel)),
                    )
                    st.new(f"block{b}/{tag}/{branch}_b", np.zeros(co))
            st.new(
                f"block{b}/graph_w",
                gen.normal(0.0, 1.0 / np.sqrt(c_out), size=(c_out, c_out)),
            )
            st.layer_norm(f"block{b}/ln", c_out)
            c_in = c_out
        d_head = cfg.hidden[-1] * cfg.final_time_length
        st.linear("head", d_head, 1, gen, scale=1.0 / np.sqrt(d_head))

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["hidden"] = list(self.config.hidden)
        d["kind"] = self.kind
        return d

    # -- forward ------------------------------------------------------------

    def _glu(self, x, prefix):
        st = self.store
        gate = ad.conv1d_time(x, st[f"{prefix}/gate_w"], st[f"{prefix}/gate_b"])
        lin = ad.conv1d_time(x, st[f"{prefix}/lin_w"], st[f"{prefix}/lin_b"])
        return ad.mul(ad.sigmoid(gate), lin)

    def _graph_block(self, x, b):
        """Graph conv with residual and layer norm over channels.

        x: (B, C, N, L); W_g mixes channels, the normalized adjacency
        mixes 1-hop neighbourhoods.
        """
        st = self.store
        B, C, N, L = x.shape
        h = ad.transpose(x, (0, 2, 3, 1))              # (B, N, L, C)
        h = ad.matmul(h, st[f"block{b}/graph_w"])
        h = ad.transpose(h, (0, 3, 1, 2))              # (B, C, N, L)
        h = ad.adj_matmul(h, self.graph.normalized)
        r = ad.add(h, x)
        r = ad.transpose(r, (0, 2, 3, 1))
        r = ad.layer_norm_lastaxis(r, st[f"block{b}/ln/g"], st[f"block{b}/ln/b"])
        return ad.transpose(r, (0, 3, 1, 2))

    def forward_batch(self, window, train_gen=None) -> ad.Tensor:
        """(B, L, C, H, W) -> (B, H, W) absolute normalized prediction."""
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
        N = H * W
        x = ad.transpose(x, (0, 2, 3, 4, 1))           # (B, C, H, W, L)
        x = ad.reshape(x, (B, C, N, L))
        for b in range(cfg.blocks):
            x = self._glu(x, f"block{b}/tconv1")
            x = self._graph_block(x, b)
            x = self._glu(x, f"block{b}/tconv2")
            x = dropout(x, cfg.dropout, train_gen)
        B_, C2, N_, Lf = x.shape
        x = ad.transpose(x, (0, 2, 1, 3))              # (B, N, C2, Lf)
        x = ad.reshape(x, (B, N, C2 * Lf))
        st = self.store
        y = ad.matmul(x, st["head/w"])
        bias = ad.reshape(st["head/b"], (1, 1, 1))
        y = ad.add(y, ad.expand(bias, (B, N, 1)))
        return ad.reshape(y, (B, H, W))


class StgcnForecaster(BaseEstimator, RegressorMixin):
    """Graph-convolutional one-step forecaster (see TransformerForecaster
    for the shared fit/predict contract)."""

    def __init__(
        self,
        blocks=2,
        hidden=(32, 64),
        kernel=3,
        dropout=0.0,
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
        self.blocks = blocks
        self.hidden = hidden
        self.kernel = kernel
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

    def _build_model(self, samples: SampleSet) -> StgcnModel:
        T, C, H, W = samples.values.shape
        config = StgcnConfig(
            grid_height=H,
            grid_width=W,
            input_channels=C,
            history_length=samples.length,
            blocks=self.blocks,
            hidden=tuple(self.hidden),
            kernel=self.kernel,
            dropout=self.dropout,
        )
        return StgcnModel(config, seed=self.seed)

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

    def _ema_model(self) -> StgcnModel:
        if getattr(self, "_eval_model", None) is None:
            m = StgcnModel(self.model_.config, seed=self.seed)
            m.store.load_arrays(self.checkpoint_.ema)
            self._eval_model = m
        return self._eval_model

    def predict(self, X: np.ndarray) -> np.ndarray:
        from .transformer import predict_windows

        if not hasattr(self, "model_"):
            raise NotFittedError("StgcnForecaster is not fitted yet")
        return predict_windows(self._ema_model(), np.asarray(X, dtype=np.float64))
