"""Shared parameter plumbing for the two deep models."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class ParamStore:
    """Ordered named parameters; the order defines checkpoint layout."""

    def __init__(self):
        self._params = {}

    def new(self, name: str, data) -> ad.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = ad.parameter(np.asarray(data, dtype=np.float64), name=name)
        self._params[name] = t
        return t

    def linear(self, prefix: str, d_in: int, d_out: int, gen, scale: float = 0.02):
        w = self.new(f"{prefix}/w", gen.normal(0.0, scale, size=(d_in, d_out)))
        b = self.new(f"{prefix}/b", np.zeros(d_out))
        return w, b

    def layer_norm(self, prefix: str, d: int, gamma_init: float = 1.0):
        g = self.new(f"{prefix}/g", np.full(d, gamma_init))
        b = self.new(f"{prefix}/b", np.zeros(d))
        return g, b

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for k, t in self._params.items():
            src = np.asarray(arrays[k], dtype=np.float64)
            if src.shape != t.data.shape:
                raise ValueError(
                    f"parameter {k}: shape {src.shape} != expected {t.data.shape}"
                )
            t.data = src.copy()

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)


def add_bias(x: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """x (..., d) + b (d,) via explicit expand."""
    shaped = ad.reshape(b, (1,) * (x.ndim - 1) + b.shape)
    return ad.add(x, ad.expand(shaped, x.shape))


def linear_op(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor | None) -> ad.Tensor:
    y = ad.matmul(x, w)
    return add_bias(y, b) if b is not None else y


def dropout(x: ad.Tensor, p: float, gen) -> ad.Tensor:
    """Inverted dropout; identity when p = 0 or no generator is given."""
    if p <= 0.0 or gen is None:
        return x
    keep = (gen.random(size=x.shape) >= p).astype(np.float64) / (1.0 - p)
    return ad.mul(x, ad.constant(keep))
