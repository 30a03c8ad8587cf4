"""Run configuration: one record that pins every knob of a search run.

A config (plus its seed) is sufficient to regenerate every artifact of a
run bit-identically, so the config hash is stamped into tables,
checkpoints, and architecture files and is checked across pipeline stages.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, fields as dc_fields

from .shapesworld import DatasetSpec
from .space import AGGREGATION_OPS, INTRA_CELL_OPS


class ConfigError(ValueError):
    """Invalid or unknown configuration field (reported by name)."""


@dataclass
class SearchConfig:
    # search space
    cells: tuple = (5, 10, 10)           # initial cells per hyper-cell (1 reduction + n normals)
    nodes_per_cell: int = 2
    initial_channels: int = 8
    channel_multiplier: int = 3
    agg_channels: int = 32
    intra_ops: tuple = INTRA_CELL_OPS
    agg_ops: tuple = AGGREGATION_OPS
    cell_connectivity: str = "full"      # "full" | "single" (reduced spaces)

    # schedule
    epochs: int = 60
    warmup_epochs: int | None = None     # default: epochs // 3
    batch_size: int = 8
    gamma: float = 0.01
    temp_initial: float = 3.0
    temp_min: float = 0.03
    split_mode: str = "single"           # "single" | "bilevel" (ablation)

    # optimizers
    arch_lr: float = 0.001
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    arch_weight_decay: float = 1e-4
    weight_lr_max: float = 0.025
    weight_lr_min: float = 0.001
    weight_momentum: float = 0.9
    weight_weight_decay: float = 1e-3

    # retraining of derived architectures
    retrain_epochs: int = 8
    retrain_lr: float = 0.01
    retrain_power: float = 0.9
    retrain_momentum: float = 0.9
    retrain_weight_decay: float = 5e-4

    # latency benchmarking
    bench_reps: int = 30
    bench_warmup: int = 5

    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    @property
    def effective_warmup(self) -> int:
        return self.epochs // 3 if self.warmup_epochs is None else self.warmup_epochs

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"invalid config field {name!r}: {why}")

        if len(self.cells) != 3 or any(not isinstance(c, int) or c < 1 for c in self.cells):
            bad("cells", f"need 3 positive cell counts (reduction cell included), got {self.cells!r}")
        if self.nodes_per_cell < 1:
            bad("nodes_per_cell", "must be >= 1")
        if self.initial_channels < 1:
            bad("initial_channels", "must be >= 1")
        if self.channel_multiplier < 1:
            bad("channel_multiplier", "must be >= 1")
        if self.agg_channels < 1:
            bad("agg_channels", "must be >= 1")
        for s in range(3):
            out_ch = self.initial_channels * self.channel_multiplier ** (s + 1)
            if out_ch % self.nodes_per_cell != 0:
                bad("nodes_per_cell", f"hyper-cell {s + 1} width {out_ch} not divisible by {self.nodes_per_cell}")
        if not self.intra_ops or any(op not in INTRA_CELL_OPS for op in self.intra_ops):
            bad("intra_ops", f"must be a non-empty subset of {INTRA_CELL_OPS}")
        if not self.agg_ops or any(op not in AGGREGATION_OPS for op in self.agg_ops):
            bad("agg_ops", f"must be a non-empty subset of {AGGREGATION_OPS}")
        if self.cell_connectivity not in ("full", "single"):
            bad("cell_connectivity", "must be 'full' or 'single'")
        if self.epochs < 1:
            bad("epochs", "must be >= 1")
        if not 0 <= self.effective_warmup < self.epochs:
            bad("warmup_epochs", f"warm-up {self.effective_warmup} must lie in [0, epochs)")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.gamma < 0:
            bad("gamma", "must be >= 0")
        if not self.temp_initial >= self.temp_min > 0:
            bad("temp_initial", f"need temp_initial >= temp_min > 0, got {self.temp_initial}, {self.temp_min}")
        if self.split_mode not in ("single", "bilevel"):
            bad("split_mode", "must be 'single' or 'bilevel'")
        for name in ("arch_lr", "weight_lr_max", "weight_lr_min", "retrain_lr"):
            if getattr(self, name) <= 0:
                bad(name, "must be positive")
        for name in ("arch_weight_decay", "weight_weight_decay", "retrain_weight_decay"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if not 0 <= self.arch_beta1 < 1 or not 0 <= self.arch_beta2 < 1:
            bad("arch_beta1", "Adam momenta must lie in [0, 1)")
        if self.retrain_epochs < 0:
            bad("retrain_epochs", "must be >= 0")
        if self.bench_reps < 1 or self.bench_warmup < 0:
            bad("bench_reps", "need reps >= 1 and warmup >= 0")
        self.dataset.validate()

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cells"] = list(self.cells)
        d["intra_ops"] = list(self.intra_ops)
        d["agg_ops"] = list(self.agg_ops)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "SearchConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        known = {f.name for f in dc_fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config field {sorted(unknown)[0]!r}")
        kwargs = dict(raw)
        if "dataset" in kwargs and kwargs["dataset"] is not None:
            ds = kwargs["dataset"]
            if not isinstance(ds, dict):
                raise ConfigError("invalid config field 'dataset': must be a mapping")
            ds_known = {f.name for f in dc_fields(DatasetSpec)}
            ds_unknown = set(ds) - ds_known
            if ds_unknown:
                raise ConfigError(f"unknown config field 'dataset.{sorted(ds_unknown)[0]}'")
            kwargs["dataset"] = DatasetSpec(**ds)
        for name in ("cells", "intra_ops", "agg_ops"):
            if name in kwargs and kwargs[name] is not None:
                kwargs[name] = tuple(kwargs[name])
        try:
            cfg = cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"malformed config: {e}") from e
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def replace(self, **updates) -> "SearchConfig":
        d = self.to_dict()
        for key, val in updates.items():
            d[key] = val.to_dict() if isinstance(val, DatasetSpec) else val
        return SearchConfig.from_dict(d)
