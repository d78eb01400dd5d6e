"""Run configuration: one JSON file drives every CLI command.

Unknown keys are rejected, values are validated on load, and the
effective config (with overrides applied) is echoed into the run
manifest together with its hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelDims


@dataclass
class RunConfig:
    # data
    raw_path: str | None = None
    data_dir: str = "prepared"
    out_dir: str = "run"
    max_len: int = 50
    k_core: int = 5
    min_rating: float | None = None
    split_ratios: list = None  # type: ignore[assignment]
    # model
    dim: int = 128
    heads: int = 2
    n_layers: int = 2
    ffn_dim: int | None = None
    dropout: float = 0.1
    agg_coeff: float = 1e-3
    positional_encoding: bool = False
    dtype: str = "float64"
    # diffusion
    diffusion_steps: int = 32
    schedule_kind: str = "truncated_linear"
    # training
    batch_size: int = 512
    lr: float = 1e-3
    stage_epochs: list = None  # type: ignore[assignment]
    validate_every: int = 5
    patience: int = 4
    stages: list = None  # type: ignore[assignment]
    loss: str = "joint"
    pcgrad: bool = False
    clip_norm: float | None = None
    selection_metric: str = "hr20"
    # evaluation / export
    ks: list = None  # type: ignore[assignment]
    eval_repeats: int = 1
    normalize_export: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.split_ratios is None:
            self.split_ratios = [8, 1, 1]
        if self.stage_epochs is None:
            self.stage_epochs = [500, 5, 500]
        if self.stages is None:
            self.stages = [1, 2, 3]
        if self.ks is None:
            self.ks = [10, 20]
        self.validate()

    def validate(self) -> None:
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must be positive and divisible by heads {self.heads}")
        if self.diffusion_steps < 1:
            raise ConfigError(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")
        if self.agg_coeff <= 0:
            raise ConfigError(f"agg_coeff must be positive, got {self.agg_coeff}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.loss not in ("joint", "ce-only"):
            raise ConfigError(f"loss must be 'joint' or 'ce-only', got {self.loss!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if len(self.stage_epochs) != 3 or any(e < 1 for e in self.stage_epochs):
            raise ConfigError(f"stage_epochs needs three positive entries, got {self.stage_epochs}")
        if sorted(set(self.stages)) != list(self.stages) or not set(self.stages) <= {1, 2, 3}:
            raise ConfigError(f"stages must be an ordered subset of [1, 2, 3], got {self.stages}")
        if not self.stages:
            raise ConfigError("at least one training stage is required")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise ConfigError(f"split_ratios needs three positive entries, got {self.split_ratios}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError(f"ks must be positive cutoffs, got {self.ks}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.selection_metric.startswith("hr") or self.selection_metric.startswith("ndcg")):
            raise ConfigError(f"selection_metric must look like hr20/ndcg20, got {self.selection_metric!r}")

    def as_dict(self) -> dict:
        return asdict(self)

    def model_dims(self, n_items: int) -> ModelDims:
        return ModelDims(
            n_items=n_items, dim=self.dim, heads=self.heads, n_layers=self.n_layers,
            ffn_dim=self.ffn_dim, dropout=self.dropout, max_len=self.max_len,
            use_positional_encoding=self.positional_encoding,
            agg_coeff=self.agg_coeff, dtype=self.dtype,
        )


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def parse_override(text: str):
    """Parse a --set key=value override; values use JSON syntax when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings pass through
    return key, value


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Load a JSON config (all keys optional), apply overrides, validate."""
    payload: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} does not exist")
        try:
            payload = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"config {p} must hold a JSON object")
    if overrides:
        payload.update(overrides)
    unknown = set(payload) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**payload)


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(cfg.as_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
