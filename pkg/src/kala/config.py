"""Run configuration: one JSON file plus dotted-key overrides."""

from dataclasses import asdict, dataclass, field, fields, is_dataclass
import json
import os

from .corpus.generate import GenConfig
from .errors import ConfigError
from .kfm import KfmConfig

FINE_TUNE, POINTWISE, RELATIONAL = "fine-tune", "kala-pointwise", "kala-relational"
VARIANTS = (FINE_TUNE, POINTWISE, RELATIONAL)
OUTPUT_ENV = "KALA_OUTPUT_DIR"


@dataclass
class ModelConfig:
    variant: str = RELATIONAL
    num_layers: int = 4
    hidden: int = 64
    intermediate: int = 256
    num_heads: int = 4
    max_len: int = 128
    dropout: float = 0.1
    init_std: float = 0.02         # encoder weight init; BERT's value, small for narrow models
    kfm_locations: list = field(default_factory=lambda: [4])
    kfm: KfmConfig = field(default_factory=KfmConfig)
    relation_dim: int = 32
    gnn_layers: int = 2
    gnn_dropout: float = 0.1
    recompute_per_layer: bool = False
    memory_init: str = "normal"    # or "encoder": mean mention states of the untrained encoder
    memory_min_count: int = 0      # keep entities seen more than this many times

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.memory_init not in ("normal", "encoder"):
            raise ConfigError("memory_init must be 'normal' or 'encoder'")
        if self.variant != FINE_TUNE:
            self.kfm.validate()
            if not self.kfm_locations:
                raise ConfigError("KALA variants need at least one KFM location")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup: float = 0.06
    separate_knowledge_optimizer: bool = False
    knowledge_lr: float = 3e-4
    max_answer_len: int = 30
    eval_batch_size: int = 64

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup fraction must lie in [0, 1)")


@dataclass
class Paths:
    corpus_dir: str = "corpus"
    output_dir: str = "runs"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GenConfig = field(default_factory=GenConfig)
    paths: Paths = field(default_factory=Paths)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.generator.validate()
        return self

    def to_dict(self):
        return asdict(self)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = known[name].default_factory if known[name].default_factory is not None else None
        template = sub() if callable(sub) else None
        if is_dataclass(template):
            kwargs[name] = _build(type(template), value, f"{where}.{name}".strip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data):
    if "seed" not in data:
        raise ConfigError("config must set a seed")
    return _build(RunConfig, data, "").validate()


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data, overrides):
    """Set ``a.b.c=value`` entries on a nested dict (values parsed as JSON when possible)."""
    for text in overrides:
        key, value = parse_override(text)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()):
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    data = apply_overrides(data, overrides)
    cfg = from_dict(data)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        cfg.paths.output_dir = env
    return cfg
