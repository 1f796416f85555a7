"""Model/run configuration: typed dataclasses plus the flat key=value format.

Run configs are single-level ``key = value`` text files (diff-friendly for
sweep scripts).  Every key is schema-checked; unknown keys are rejected and
all violations are reported together, not first-only.  Environment variables
``RECGRELA_<KEY>`` (upper-cased key) override file values; explicit ``--set``
pairs override both.
"""

import os
from dataclasses import dataclass, fields

from .errors import ConfigError, ContractError

GATES = ("sigmoid", "silu", "gelu", "relu")
VARIANTS = ("dot_product", "linear", "rela")

ENV_PREFIX = "RECGRELA_"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; ``dim`` must split evenly over heads."""

    vocab_size: int  # includes the reserved padding slot 0
    dim: int = 64
    heads: int = 4
    layers: int = 4
    max_len: int = 200
    conv_width: int = 4
    dropout: float = 0.1
    drop_path: float = 0.1
    attn_eps: float = 1e-6
    variant: str = "rela"
    gate: str = "silu"
    scale_n: bool = True

    def __post_init__(self):
        problems = []
        if self.vocab_size < 2:
            problems.append(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            problems.append(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.layers < 1:
            problems.append(f"layers must be >= 1, got {self.layers}")
        if self.max_len < 1:
            problems.append(f"max_len must be >= 1, got {self.max_len}")
        if self.conv_width < 1:
            problems.append(f"conv_width must be >= 1, got {self.conv_width}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.drop_path < 1.0:
            problems.append("dropout/drop_path rates must be in [0, 1)")
        if self.attn_eps <= 0:
            problems.append(f"attn_eps must be positive, got {self.attn_eps}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gate not in GATES:
            problems.append(f"gate must be one of {GATES}, got {self.gate!r}")
        if self.variant == "rela" and (self.dim // max(self.heads, 1)) % 2 != 0:
            problems.append("rela needs an even per-head dim (pairwise rotation)")
        if problems:
            raise ConfigError(problems)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def long_term(self) -> bool:
        """Sequences count as long-term once max_len exceeds 1.5x dim."""
        return self.max_len > 1.5 * self.dim


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


class Field:
    def __init__(self, typ, default, help_text):
        self.typ = typ
        self.default = default
        self.help = help_text

    def parse(self, raw: str):
        if self.typ is bool:
            return _parse_bool(raw)
        return self.typ(raw)


# every run-config key; model keys feed ModelConfig, train keys TrainConfig
SCHEMA = {
    "vocab_size": Field(int, 0, "item vocabulary size incl. padding (0 = from dataset)"),
    "dim": Field(int, 64, "embedding width D"),
    "heads": Field(int, 4, "attention heads"),
    "layers": Field(int, 4, "stacked blocks"),
    "max_len": Field(int, 200, "maximum sequence length"),
    "conv_width": Field(int, 4, "causal conv kernel width"),
    "dropout": Field(float, 0.1, "dropout rate"),
    "drop_path": Field(float, 0.1, "stochastic-depth rate"),
    "attn_eps": Field(float, 1e-6, "attention normalizer guard"),
    "variant": Field(str, "rela", "attention kernel: rela|linear|dot_product"),
    "gate": Field(str, "silu", "gate nonlinearity: sigmoid|silu|gelu|relu"),
    "scale_n": Field(bool, True, "sqrt(N) key-value scaling"),
    "learning_rate": Field(float, 0.001, "Adam learning rate"),
    "batch_size": Field(int, 128, "training batch size"),
    "max_epochs": Field(int, 100, "epoch cap"),
    "patience": Field(int, 10, "early-stop patience (epochs without improvement)"),
    "adam_beta1": Field(float, 0.9, "Adam beta1"),
    "adam_beta2": Field(float, 0.999, "Adam beta2"),
    "adam_eps": Field(float, 1e-8, "Adam epsilon"),
    "clip_norm": Field(float, 0.0, "global grad-norm clip (0 = off)"),
    "eval_metric": Field(str, "ndcg@10", "early-stop metric"),
    "eval_batch_size": Field(int, 256, "evaluation batch size"),
    "mask_seen": Field(bool, False, "mask training-seen items at evaluation"),
    "seed": Field(int, 0, "run seed (CLI may draw one when absent)"),
    "data": Field(str, "", "dataset cache path"),
    "out": Field(str, "", "output directory"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; '#' starts a comment.

    Raises ConfigError listing every unknown key and every bad value.
    """
    values = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = SCHEMA[key].parse(val)
        except ValueError as exc:
            problems.append(f"{source}:{lineno}: bad value for {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def env_overrides(environ=None) -> dict:
    """RECGRELA_<KEY> variables mapped onto schema keys."""
    environ = os.environ if environ is None else environ
    values = {}
    problems = []
    for key, field in SCHEMA.items():
        var = ENV_PREFIX + key.upper()
        if var in environ:
            try:
                values[key] = field.parse(environ[var])
            except ValueError as exc:
                problems.append(f"env {var}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def parse_overrides(pairs) -> dict:
    """--set KEY=VALUE pairs (highest precedence)."""
    values = {}
    problems = []
    for pair in pairs or ():
        if "=" not in pair:
            problems.append(f"--set needs KEY=VALUE, got {pair!r}")
            continue
        key, _, val = pair.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            problems.append(f"--set: unknown key {key!r}")
            continue
        try:
            values[key] = SCHEMA[key].parse(val.strip())
        except ValueError as exc:
            problems.append(f"--set {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def resolve(file_values=None, overrides=None, environ=None) -> dict:
    """Defaults < config file < environment < --set."""
    merged = {k: f.default for k, f in SCHEMA.items()}
    merged.update(file_values or {})
    merged.update(env_overrides(environ))
    merged.update(overrides or {})
    return merged


def model_config_from(values: dict, vocab_size: int | None = None) -> ModelConfig:
    v = vocab_size if vocab_size is not None else values["vocab_size"]
    if v < 2:
        raise ContractError("vocab_size unresolved; provide it or a dataset")
    return ModelConfig(
        vocab_size=v, dim=values["dim"], heads=values["heads"],
        layers=values["layers"], max_len=values["max_len"],
        conv_width=values["conv_width"], dropout=values["dropout"],
        drop_path=values["drop_path"], attn_eps=values["attn_eps"],
        variant=values["variant"], gate=values["gate"],
        scale_n=values["scale_n"])


def format_config(values: dict) -> str:
    lines = [f"{k} = {values[k]}" for k in SCHEMA]
    return "\n".join(lines) + "\n"


def config_as_items(cfg) -> list:
    """(name, value) pairs of a dataclass config, in field order."""
    return [(f.name, getattr(cfg, f.name)) for f in fields(cfg)]
