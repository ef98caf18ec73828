"""Model and training configuration.

Config files are flat ``key = value`` lines whose keys are exactly the field
names of :class:`ModelConfig`; ``#`` starts a comment.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

POS_ENC_CHOICES = ("none", "question", "image", "both")


@dataclass
class ModelConfig:
    # architecture
    read_layers: int = 4
    answer_layers: int = 4
    check_layers: int = 4
    d_c: int = 512
    heads: int = 8
    gate_pool: int = 8
    word_emb_dim: int = 300
    image_feat_dim: int = 2048
    n_q_max: int = 14
    n_i_max: int = 100
    n_answers: int = 3129
    use_gate: bool = True
    use_answer_token: bool = True
    use_masking: bool = True
    positional_encoding: str = "none"
    ln_eps: float = 1e-5
    dtype: str = "float32"
    # training
    base_lr: float = 0.002
    warmup_epochs: int = 4
    decay_epoch: int = 21
    decay_factor: float = 0.1
    epochs: int = 25
    batch_size: int = 64
    max_steps: int = 0
    grad_clip: float = 0.0
    lr_multipliers: dict = field(default_factory=dict)
    eval_batch_size: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("read_layers", "answer_layers", "check_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("d_c", "heads", "gate_pool", "word_emb_dim", "image_feat_dim",
                     "n_q_max", "n_i_max", "n_answers", "batch_size", "epochs", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_c % self.heads:
            raise ConfigError(f"d_c={self.d_c} is not divisible by heads={self.heads}")
        if self.use_gate and self.d_c % self.gate_pool:
            raise ConfigError(f"d_c={self.d_c} is not divisible by gate_pool={self.gate_pool}")
        if self.positional_encoding not in POS_ENC_CHOICES:
            raise ConfigError(f"positional_encoding must be one of {POS_ENC_CHOICES}")
        if self.positional_encoding in ("image", "both") and self.image_feat_dim % 4:
            raise ConfigError("image positional encoding needs image_feat_dim divisible by 4")
        if self.check_layers == 0 and not self.use_answer_token:
            raise ConfigError("check_layers=0 without an answer token leaves nothing to classify")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.warmup_epochs < 0 or self.decay_epoch <= self.warmup_epochs:
            raise ConfigError("need 0 <= warmup_epochs < decay_epoch")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        return cls.from_dict(parse_config_text(Path(path).read_text()))

    def dump(self, path):
        Path(path).write_text(format_config(self))


def _coerce(f, raw):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, dict):
            out = {}
            for item in filter(None, (p.strip() for p in text.split(","))):
                prefix, mult = item.split(":")
                out[prefix.strip()] = float(mult)
            return out
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {f.name}") from None
    return text


def parse_config_text(text):
    """Parse a flat ``key = value`` document (``#`` comments) or a flat JSON object.

    Quoted values are unquoted, so flat TOML files parse too.
    """
    if text.lstrip().startswith("{"):
        try:
            values = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad JSON config: {e}") from None
        if not isinstance(values, dict):
            raise ConfigError("JSON config must be an object")
        return values
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]
        values[key.strip()] = value
    return values


def format_config(config):
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, dict):
            value = ",".join(f"{k}:{v}" for k, v in value.items())
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def tiny_config(**overrides):
    """The small float64 configuration used for gradient checks."""
    base = dict(read_layers=2, answer_layers=2, check_layers=2, d_c=16, heads=2, gate_pool=8,
                word_emb_dim=6, image_feat_dim=12, n_q_max=4, n_i_max=5, n_answers=7,
                dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)
