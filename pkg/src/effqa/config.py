"""Pipeline configuration: a flat ``section.key = value`` text format with
command-line ``--section.key value`` overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

ENV_CONFIG_VAR = "EFFQA_CONFIG"


@dataclass
class PathsConfig:
    dataset: str = "data/dataset.json"
    cache: str = "work/cache.jsonl"
    vocab: str = "work/vocab.json"
    extractor_checkpoint: str = "work/extractor.eqnn"
    dual_checkpoint: str = "work/dual.eqnn"
    index: str = "work/phrases.pqix"
    candidates: str = "work/candidates.jsonl"
    report: str = "work/report.json"


@dataclass
class EncoderSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 514
    dropout_rate: float = 0.1


@dataclass
class CorpusSection:
    max_context_tokens: int = 512
    max_question_tokens: int = 64
    min_freq: int = 1
    skip_bad_answers: bool = False


@dataclass
class BeamSection:
    s: int = 50
    e: int = 2
    max_answer_tokens: int = 30
    k_train: int = 60
    k_eval: int = 100


@dataclass
class ExtractorOptSection:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 5
    weight_decay: float = 0.01
    warmup_frac: float = 0.0
    dev_fraction: float = 0.1
    dev_recall_k: int = 10
    dropout: bool = True


@dataclass
class DualOptSection:
    learning_rate: float = 1e-5
    micro_batch: int = 4
    grad_accum: int = 8
    epochs: int = 5
    weight_decay: float = 0.01
    warmup_frac: float = 0.0
    proj_dim: int = 64
    pool: str = "pair_all"
    dropout: bool = True


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    beam: BeamSection = field(default_factory=BeamSection)
    extractor_opt: ExtractorOptSection = field(default_factory=ExtractorOptSection)
    dual_opt: DualOptSection = field(default_factory=DualOptSection)
    seed: int = 0
    threads: int = 0  # 0 = number of cores; 1 for bit-determinism

    def validate(self) -> None:
        cap = self.beam.s * self.beam.e
        if self.beam.k_train > cap:
            raise ConfigError(f"beam.k_train {self.beam.k_train} > s*e = {cap}")
        if self.beam.k_eval > cap:
            raise ConfigError(f"beam.k_eval {self.beam.k_eval} > s*e = {cap}")
        if self.encoder.d_model % self.encoder.n_heads != 0:
            raise ConfigError("encoder.d_model must be divisible by encoder.n_heads")
        if self.dual_opt.pool not in ("pair_all", "second_segment"):
            raise ConfigError(f"dual_opt.pool {self.dual_opt.pool!r} unknown")


def _coerce(raw: str, target_type, key: str):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: {raw!r} is not a boolean")
    try:
        return target_type(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {raw!r} is not a valid {target_type.__name__}") from e


def set_key(cfg: PipelineConfig, dotted: str, raw: str) -> None:
    """Assign one dotted key, e.g. ``beam.s`` or ``seed``."""
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {
            f.name for f in fields(obj)
        }:
            raise ConfigError(f"unknown config section {dotted!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    matching = [f for f in fields(obj) if f.name == leaf]
    if not matching or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(obj, leaf)
    setattr(obj, leaf, _coerce(raw, type(current), dotted))


def parse_config_text(text: str, cfg: PipelineConfig | None = None) -> PipelineConfig:
    cfg = cfg or PipelineConfig()
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        set_key(cfg, key.strip(), value.strip())
    return cfg


def load_config(path: str | None, overrides: list[tuple[str, str]] = ()) -> PipelineConfig:
    """Read a config file (or the EFFQA_CONFIG fallback), apply overrides."""
    cfg = PipelineConfig()
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        cfg = parse_config_text(text, cfg)
    for key, value in overrides:
        set_key(cfg, key, value)
    cfg.validate()
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    """Render the effective config back to the text format."""
    lines = []

    def emit(prefix: str, obj) -> None:
        for f in fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                emit(f"{prefix}{f.name}.", value)
            else:
                lines.append(f"{prefix}{f.name} = {value}")

    emit("", cfg)
    return "\n".join(lines)
