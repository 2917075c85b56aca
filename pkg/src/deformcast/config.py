"""Run configuration: TOML parsing plus whole-file validation.

Validation never stops at the first problem; every violated field is
collected and reported in a single error so a config can be fixed in
one pass.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

MODEL_KINDS = ("transformer", "stgcn", "linear", "seasonal", "persistence")
TRAINABLE_KINDS = ("transformer", "stgcn")
MODALITIES = ("unimodal", "multimodal")
LOSS_PRESETS = ("composite", "mae_only", "smoothl1_only")
SYNTH_KINDS = ("trend", "seasonal", "coseismic", "mixed")


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    kind: str = "mixed"
    epochs: int = 120
    cadence_days: int = 6
    noise_sigma_mm: float = 0.5
    velocity_mm_yr: float = 5.0
    amplitude_mm: float = 3.0
    phase_rad: float = 0.6
    step_mm: float = 25.0
    step_radius_frac: float = 0.18
    event_epoch: int | None = None
    basis_order: int = 3
    n_points: int = 800
    missing_fraction: float = 0.02
    tile: str = "E32N34"


@dataclass
class RunConfig:
    seed: int = 0
    input_path: str | None = None
    out_dir: str = "out"
    grid_height: int = 64
    grid_width: int = 64
    train_fraction: float = 0.8
    model_kind: str = "transformer"
    modality: str = "multimodal"
    history_length: int = 16
    patch_size: int = 8
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    ffn_multiplier: int = 4
    dropout: float = 0.1
    blocks: int = 2
    hidden: tuple = (32, 64)
    kernel: int = 3
    loss_preset: str = "composite"
    lambda_rel: float | None = None
    lambda_corr: float | None = None
    lambda_grad: float | None = None
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
    synth: SynthSection | None = None


# (section, key) -> (RunConfig attribute, allowed python types)
_SCHEMA = {
    ("", "seed"): ("seed", (int,)),
    ("paths", "input"): ("input_path", (str,)),
    ("paths", "out"): ("out_dir", (str,)),
    ("grid", "height"): ("grid_height", (int,)),
    ("grid", "width"): ("grid_width", (int,)),
    ("split", "train_fraction"): ("train_fraction", (int, float)),
    ("model", "kind"): ("model_kind", (str,)),
    ("model", "modality"): ("modality", (str,)),
    ("model", "history_length"): ("history_length", (int,)),
    ("model", "patch_size"): ("patch_size", (int,)),
    ("model", "embed_dim"): ("embed_dim", (int,)),
    ("model", "layers"): ("layers", (int,)),
    ("model", "heads"): ("heads", (int,)),
    ("model", "ffn_multiplier"): ("ffn_multiplier", (int,)),
    ("model", "dropout"): ("dropout", (int, float)),
    ("model", "blocks"): ("blocks", (int,)),
    ("model", "hidden"): ("hidden", (list,)),
    ("model", "kernel"): ("kernel", (int,)),
    ("loss", "preset"): ("loss_preset", (str,)),
    ("loss", "lambda_rel"): ("lambda_rel", (int, float)),
    ("loss", "lambda_corr"): ("lambda_corr", (int, float)),
    ("loss", "lambda_grad"): ("lambda_grad", (int, float)),
    ("optimizer", "learning_rate"): ("learning_rate", (int, float)),
    ("optimizer", "weight_decay"): ("weight_decay", (int, float)),
    ("optimizer", "batch_size"): ("batch_size", (int,)),
    ("optimizer", "max_epochs"): ("max_epochs", (int,)),
    ("optimizer", "max_steps"): ("max_steps", (int,)),
    ("optimizer", "warmup_frac"): ("warmup_frac", (int, float)),
    ("optimizer", "final_lr_frac"): ("final_lr_frac", (int, float)),
    ("optimizer", "clip_norm"): ("clip_norm", (int, float)),
    ("optimizer", "ema_decay"): ("ema_decay", (int, float)),
    ("optimizer", "patience"): ("patience", (int,)),
}

_SYNTH_TYPES = {
    "kind": (str,),
    "epochs": (int,),
    "cadence_days": (int,),
    "noise_sigma_mm": (int, float),
    "velocity_mm_yr": (int, float),
    "amplitude_mm": (int, float),
    "phase_rad": (int, float),
    "step_mm": (int, float),
    "step_radius_frac": (int, float),
    "event_epoch": (int,),
    "basis_order": (int,),
    "n_points": (int,),
    "missing_fraction": (int, float),
    "tile": (str,),
}


def _assign(cfg, problems, dotted, attr, types, value):
    if isinstance(value, bool) or not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        problems.append(f"{dotted}: expected {names}, got {type(value).__name__}")
        return
    if attr == "hidden":
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            problems.append(f"{dotted}: expected a list of ints")
            return
        value = tuple(value)
    if isinstance(value, int) and float in types and int not in types:
        value = float(value)
    setattr(cfg, attr, value)


def parse_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed TOML document, collecting every
    problem before raising."""
    cfg = RunConfig()
    problems: list = []

    known_sections = {s for s, _ in _SCHEMA if s} | {"synth"}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in known_sections:
                problems.append(f"unknown section [{key}]")
            continue
        if ("", key) not in _SCHEMA:
            problems.append(f"unknown key {key}")
            continue
        attr, types = _SCHEMA[("", key)]
        _assign(cfg, problems, key, attr, types, value)

    for section in sorted(known_sections - {"synth"}):
        table = doc.get(section, {})
        if not isinstance(table, dict):
            continue
        for key, value in table.items():
            dotted = f"{section}.{key}"
            if (section, key) not in _SCHEMA:
                problems.append(f"unknown key {dotted}")
                continue
            attr, types = _SCHEMA[(section, key)]
            _assign(cfg, problems, dotted, attr, types, value)

    if "synth" in doc:
        table = doc["synth"]
        synth = SynthSection()
        for key, value in table.items():
            if key not in _SYNTH_TYPES:
                problems.append(f"unknown key synth.{key}")
                continue
            types = _SYNTH_TYPES[key]
            if isinstance(value, bool) or not isinstance(value, types):
                names = "/".join(t.__name__ for t in types)
                problems.append(
                    f"synth.{key}: expected {names}, got {type(value).__name__}"
                )
                continue
            if isinstance(value, int) and float in types and int not in types:
                value = float(value)
            setattr(synth, key, value)
        cfg.synth = synth

    problems.extend(validate(cfg))
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return cfg


def validate(cfg: RunConfig) -> list:
    """Return one message per violated field (empty when valid)."""
    p: list = []
    if cfg.seed < 0:
        p.append(f"seed must be >= 0 (got {cfg.seed})")
    if cfg.model_kind not in MODEL_KINDS:
        p.append(f"model.kind must be one of {MODEL_KINDS} (got {cfg.model_kind!r})")
    if cfg.modality not in MODALITIES:
        p.append(f"model.modality must be one of {MODALITIES} (got {cfg.modality!r})")
    if cfg.loss_preset not in LOSS_PRESETS:
        p.append(f"loss.preset must be one of {LOSS_PRESETS} (got {cfg.loss_preset!r})")
    if not 0.0 < cfg.train_fraction < 1.0:
        p.append(f"split.train_fraction must be in (0, 1) (got {cfg.train_fraction})")
    for name in ("grid_height", "grid_width"):
        v = getattr(cfg, name)
        if v < 1:
            p.append(f"grid.{name.split('_')[1]} must be positive (got {v})")
    for dotted, name in (
        ("model.history_length", "history_length"),
        ("model.patch_size", "patch_size"),
        ("model.embed_dim", "embed_dim"),
        ("model.layers", "layers"),
        ("model.heads", "heads"),
        ("model.ffn_multiplier", "ffn_multiplier"),
        ("model.blocks", "blocks"),
        ("model.kernel", "kernel"),
        ("optimizer.batch_size", "batch_size"),
        ("optimizer.max_epochs", "max_epochs"),
    ):
        v = getattr(cfg, name)
        if v < 1:
            p.append(f"{dotted} must be positive (got {v})")
    if cfg.max_steps is not None and cfg.max_steps < 1:
        p.append(f"optimizer.max_steps must be positive (got {cfg.max_steps})")
    if not 0.0 <= cfg.dropout < 1.0:
        p.append(f"model.dropout must be in [0, 1) (got {cfg.dropout})")
    if len(cfg.hidden) != cfg.blocks:
        p.append(
            f"model.hidden must list one width per block "
            f"(got {len(cfg.hidden)} widths for {cfg.blocks} blocks)"
        )
    if any(h < 1 for h in cfg.hidden):
        p.append(f"model.hidden widths must be positive (got {cfg.hidden})")
    for dotted, name in (
        ("optimizer.learning_rate", "learning_rate"),
        ("optimizer.clip_norm", "clip_norm"),
    ):
        v = getattr(cfg, name)
        if v <= 0:
            p.append(f"{dotted} must be > 0 (got {v})")
    for dotted, name in (
        ("optimizer.weight_decay", "weight_decay"),
        ("optimizer.patience", "patience"),
    ):
        v = getattr(cfg, name)
        if v < 0:
            p.append(f"{dotted} must be >= 0 (got {v})")
    if not 0.0 <= cfg.warmup_frac < 1.0:
        p.append(f"optimizer.warmup_frac must be in [0, 1) (got {cfg.warmup_frac})")
    if not 0.0 < cfg.final_lr_frac <= 1.0:
        p.append(f"optimizer.final_lr_frac must be in (0, 1] (got {cfg.final_lr_frac})")
    if not 0.0 <= cfg.ema_decay < 1.0:
        p.append(f"optimizer.ema_decay must be in [0, 1) (got {cfg.ema_decay})")
    for lam in ("lambda_rel", "lambda_corr", "lambda_grad"):
        v = getattr(cfg, lam)
        if v is not None and v < 0:
            p.append(f"loss.{lam} must be >= 0 (got {v})")
    if cfg.input_path is not None and not os.path.exists(cfg.input_path):
        p.append(f"paths.input does not exist: {cfg.input_path}")

    s = cfg.synth
    if s is not None:
        if s.kind not in SYNTH_KINDS:
            p.append(f"synth.kind must be one of {SYNTH_KINDS} (got {s.kind!r})")
        if s.epochs < 3:
            p.append(f"synth.epochs must be >= 3 (got {s.epochs})")
        if s.cadence_days < 1:
            p.append(f"synth.cadence_days must be >= 1 (got {s.cadence_days})")
        if s.noise_sigma_mm < 0:
            p.append(f"synth.noise_sigma_mm must be >= 0 (got {s.noise_sigma_mm})")
        if not 0.0 <= s.missing_fraction < 1.0:
            p.append(
                f"synth.missing_fraction must be in [0, 1) (got {s.missing_fraction})"
            )
        if s.n_points < 3:
            p.append(f"synth.n_points must be >= 3 (got {s.n_points})")
        if s.basis_order < 0:
            p.append(f"synth.basis_order must be >= 0 (got {s.basis_order})")
        if not 0.0 < s.step_radius_frac <= 1.0:
            p.append(
                f"synth.step_radius_frac must be in (0, 1] (got {s.step_radius_frac})"
            )
        if s.event_epoch is not None and not 1 <= s.event_epoch < s.epochs:
            p.append(
                f"synth.event_epoch must be in [1, epochs) (got {s.event_epoch})"
            )
    return p


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return parse_config(doc)


def config_summary(cfg: RunConfig) -> str:
    parts = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "synth" and v is not None:
            v = {sf.name: getattr(v, sf.name) for sf in fields(v)}
        parts.append(f"{f.name}={v!r}")
    return "\n".join(parts)


__all__ = [
    "ConfigError",
    "RunConfig",
    "SynthSection",
    "load_config",
    "parse_config",
    "validate",
    "MODEL_KINDS",
    "MODALITIES",
    "LOSS_PRESETS",
]
