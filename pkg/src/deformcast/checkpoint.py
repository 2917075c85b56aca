"""Model checkpoint container (magic ``DEFCKPT1``).

Layout: an ASCII header (magic, version, source tile, one-line canonical
JSON config, tensor count, then one ``name dim0 dim1 ...`` line per
tensor), a ``data`` separator line, and the raw little-endian float64
buffers concatenated in header order. Parameter tensors are prefixed
``param/``, EMA shadows ``ema/``, normalization statistics ``norm/``.
The writer always emits canonical JSON and a fixed tensor order, so a
load/save cycle reproduces the file bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .features import NormStats

MAGIC = "DEFCKPT1"
VERSION = 1


@dataclass
class ModelCheckpoint:
    config: dict
    params: dict          # name -> ndarray
    ema: dict             # name -> ndarray, same keys as params
    stats: NormStats | None = None
    tile: str | None = None
    version: int = VERSION

    def __post_init__(self):
        if set(self.params) != set(self.ema):
            raise ValueError("EMA tensor names do not match parameter names")
        for k in self.params:
            if self.params[k].shape != self.ema[k].shape:
                raise ValueError(f"EMA shape mismatch for {k}")


def _canonical_config(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def _stats_tensors(stats: NormStats):
    return [
        ("norm/pixel_mean", stats.pixel_mean),
        ("norm/pixel_std", stats.pixel_std),
        ("norm/static_mean", stats.static_mean),
        ("norm/static_std", stats.static_std),
        ("norm/epsilon", np.array([stats.epsilon])),
    ]


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    entries = []
    for name in ckpt.params:
        entries.append((f"param/{name}", np.asarray(ckpt.params[name], np.float64)))
    for name in ckpt.ema:
        entries.append((f"ema/{name}", np.asarray(ckpt.ema[name], np.float64)))
    if ckpt.stats is not None:
        entries.extend(
            (n, np.asarray(a, np.float64)) for n, a in _stats_tensors(ckpt.stats)
        )
    lines = [
        MAGIC,
        f"version {ckpt.version}",
        f"tile {ckpt.tile if ckpt.tile else '-'}",
        f"config {_canonical_config(ckpt.config)}",
        f"tensors {len(entries)}",
    ]
    for name, arr in entries:
        if " " in name:
            raise ValueError(f"tensor name {name!r} contains a space")
        dims = " ".join(str(d) for d in arr.shape) if arr.ndim else ""
        lines.append(f"{name} {dims}".rstrip())
    lines.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").rstrip("\n")
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC}")
        version = int(fh.readline().decode("ascii").split()[1])
        tile = fh.readline().decode("ascii").split()[1]
        config_line = fh.readline().decode("ascii").rstrip("\n")
        if not config_line.startswith("config "):
            raise ValueError(f"{path}: malformed config line")
        config = json.loads(config_line[len("config "):])
        count = int(fh.readline().decode("ascii").split()[1])
        table = []
        for _ in range(count):
            parts = fh.readline().decode("ascii").split()
            name = parts[0]
            shape = tuple(int(d) for d in parts[1:])
            table.append((name, shape))
        sep = fh.readline().decode("ascii").rstrip("\n")
        if sep != "data":
            raise ValueError(f"{path}: expected data separator, got {sep!r}")
        payload = fh.read()

    offset = 0
    tensors = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ValueError(f"{path}: truncated payload at tensor {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing payload bytes")

    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    ema = {k[len("ema/"):]: v for k, v in tensors.items() if k.startswith("ema/")}
    stats = None
    if "norm/pixel_mean" in tensors:
        stats = NormStats(
            pixel_mean=tensors["norm/pixel_mean"],
            pixel_std=tensors["norm/pixel_std"],
            static_mean=tensors["norm/static_mean"],
            static_std=tensors["norm/static_std"],
            epsilon=float(tensors["norm/epsilon"][0]),
        )
    return ModelCheckpoint(
        config=config,
        params=params,
        ema=ema,
        stats=stats,
        tile=None if tile == "-" else tile,
        version=version,
    )


def model_from_checkpoint(ckpt: ModelCheckpoint, use_ema: bool = True):
    """Rebuild a forward-ready model from a checkpoint's config snapshot."""
    cfg = dict(ckpt.config)
    kind = cfg.pop("kind")
    for extra in ("train_fraction", "seed"):
        cfg.pop(extra, None)
    if kind == "transformer":
        from .transformer import TransformerConfig, TransformerModel

        model = TransformerModel(TransformerConfig(**cfg))
    elif kind == "stgcn":
        from .stgcn import StgcnConfig, StgcnModel

        cfg["hidden"] = tuple(cfg.get("hidden", ()))
        model = StgcnModel(StgcnConfig(**cfg))
    else:
        raise ValueError(f"checkpoint has unknown model kind {kind!r}")
    model.store.load_arrays(ckpt.ema if use_ema else ckpt.params)
    return model
