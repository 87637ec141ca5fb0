"""Run configuration: one YAML file with a section per stage.

Unknown keys are rejected. Every stage's seed comes from the single
top-level ``seed``; sections therefore have no seed keys of their own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .encoder import EncoderConfig
from .fedruntime import FedConfig
from .finetune import FinetuneConfig
from .pipeline import ARMS, ExperimentConfig
from .syngen import SynConfig


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Either ``dir`` (a generated or prepared dataset) or explicit file paths."""

    dir: str | None = None
    interactions: str | None = None
    catalog: str | None = None
    embeddings: str | None = None
    min_len: int = 3
    embedding_format: str = "binary"
    synthetic: SynConfig = SynConfig()


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "test"
    n_list: tuple[int, ...] = (10,)


@dataclass(frozen=True)
class AnalysisConfig:
    max_pairs: int = 100_000
    bandwidth: float | None = None
    kde_grid: int = 256
    bound_trials: int = 1000
    kl_trials: int = 1000
    pca_max_items: int = 400


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    encoder: EncoderConfig = EncoderConfig()
    pretrain: FedConfig = FedConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    eval: EvalConfig = EvalConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    ablation: str = "full"
    seed: int = 0
    out: str | None = None

    def resolved(self) -> "RunConfig":
        """Propagate the global seed into every stage config."""
        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, synthetic=dataclasses.replace(self.data.synthetic, seed=self.seed)),
            pretrain=dataclasses.replace(self.pretrain, seed=self.seed),
            finetune=dataclasses.replace(self.finetune, seed=self.seed),
        )

    def experiment(self) -> ExperimentConfig:
        r = self.resolved()
        return ExperimentConfig(r.encoder, r.pretrain, r.finetune, tuple(r.eval.n_list), r.seed)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self.resolved()))

    def hash(self) -> str:
        """SHA-256 of the canonical JSON of everything except the output path."""
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> None:
        try:
            self.encoder.validate()
            self.pretrain.validate()
            self.finetune.validate()
            self.data.synthetic.validate()
        except ValueError as exc:
            raise RunConfigError(str(exc)) from exc
        if self.ablation not in ARMS:
            raise RunConfigError(f"ablation must be one of {list(ARMS)}, got {self.ablation!r}")
        if self.eval.mode not in ("valid", "test"):
            raise RunConfigError(f"eval.mode must be valid|test, got {self.eval.mode!r}")
        if not self.eval.n_list or any(n < 1 for n in self.eval.n_list):
            raise RunConfigError("eval.n_list must hold positive integers")
        if self.data.embedding_format not in ("binary", "tsv"):
            raise RunConfigError("data.embedding_format must be binary|tsv")
        for key in ("dir", "interactions", "catalog", "embeddings"):
            p = getattr(self.data, key)
            if p is not None and not Path(p).exists():
                raise RunConfigError(f"data.{key}: path does not exist: {p}")
        synthetic = self.data.dir is None and self.data.interactions is None
        if synthetic and self.data.synthetic.dim != self.encoder.dim:
            raise RunConfigError(
                f"data.synthetic.dim ({self.data.synthetic.dim}) must equal encoder.dim ({self.encoder.dim})"
            )
        if (self.data.interactions is None) != (self.data.embeddings is None):
            raise RunConfigError("data.interactions and data.embeddings must be given together")


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_NO_SEED = {"seed"}


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise RunConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(fields) - (_NO_SEED if cls is not RunConfig else set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise RunConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise RunConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise RunConfigError(f"{path}: expected a mapping")
            kwargs[name] = dict(value)
        else:
            kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise RunConfigError(f"{path}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise RunConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RunConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise RunConfigError(f"{path}: expected a string")
    return value


def config_from_dict(raw: dict | None) -> RunConfig:
    cfg = _build(RunConfig, raw or {}, "")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise RunConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise RunConfigError(f"{p}: invalid YAML: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    d = cfg.to_dict()
    for section in ("data",):
        d[section]["synthetic"].pop("seed", None)
    for section in ("pretrain", "finetune"):
        d[section].pop("seed", None)
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True))
