"""Flat ``key = value`` run configuration.

Every key is a field of :class:`RunConfig`; its metadata carries the unit and
a one-line description used for the CLI help text.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .schedules import Schedule, make_schedule


def _key(default, unit: str, doc: str):
    return field(default=default, metadata={"unit": unit, "doc": doc})


@dataclass
class RunConfig:
    seed: int | None = _key(None, "int", "master seed; required, there is no entropy default")
    # noise schedule
    schedule: str = _key("cosine", "name", "one of linear, cosine, gaussian, bimodal, constant")
    clamp_eps: float = _key(1e-4, "probability", "masking rates are clamped into [eps, 1-eps]")
    gauss_mean: float = _key(0.3, "probability", "mean of the simple Gaussian schedule")
    gauss_std: float = _key(0.1, "probability", "std of the simple Gaussian schedule")
    bimodal_w1: float = _key(0.6, "fraction", "weight of the left (low-rate) mode")
    bimodal_mu1: float = _key(0.12, "probability", "mean of the left mode")
    bimodal_sigma1: float = _key(0.02, "probability", "std of the left mode")
    bimodal_mu2_lo: float = _key(0.4, "probability", "right-mode mean at tau = 0")
    bimodal_mu2_hi: float = _key(0.85, "probability", "right-mode mean as tau -> infinity")
    bimodal_sigma2: float = _key(0.08, "probability", "std of the right mode")
    constant_rate: float = _key(0.15, "probability", "masking rate of the constant schedule")
    # objective
    derivative_power: float = _key(1.0, "exponent", "softening power on |alpha'_t| in the loss weight")
    rate_factor: bool = _key(True, "bool", "keep the 1/(1-alpha_t) factor in the loss weight")
    # frequency-informed masking
    freq_masking: bool = _key(True, "bool", "mask rare tokens more often")
    mask_power_max: float = _key(0.02, "exponent", "final weight-softening power, ramped from 0")
    weight_eps: float = _key(1e-4, "probability", "rank weights live in [eps, 1-eps]")
    # optimisation
    epochs: int = _key(10, "epochs", "passes over the segmented corpus")
    max_steps: int = _key(0, "steps", "if > 0, stop after this many steps instead")
    batch_size: int = _key(32, "sequences", "sequences per optimiser step")
    seq_len: int = _key(128, "tokens", "segment length; longer documents are split")
    lr: float = _key(3e-4, "1/step", "peak learning rate")
    warmup_frac: float = _key(0.01, "fraction", "share of steps spent in linear warmup")
    min_lr_frac: float = _key(0.1, "fraction", "cosine decay floor relative to peak lr")
    weight_decay: float = _key(0.01, "coefficient", "decoupled weight decay on matrices")
    grad_clip: float = _key(1.0, "norm", "global gradient-norm clip; 0 disables")
    # model
    layers: int = _key(4, "count", "encoder blocks")
    hidden_dim: int = _key(256, "units", "residual width")
    heads: int = _key(4, "count", "attention heads")
    ffn_dim: int = _key(1024, "units", "feed-forward inner width")
    timestep_dim: int = _key(128, "units", "sinusoidal timestep embedding size")
    time_conditioning: bool = _key(True, "bool", "feed diffusion time through AdaLN")
    tie_weights: bool = _key(True, "bool", "share input embedding and output head")
    # tokenizer
    vocab_size: int = _key(2048, "tokens", "BPE vocabulary size when training a tokenizer")
    # paths
    corpus: str = _key("", "path", "UTF-8 text, one document per line")
    vocab: str = _key("", "path", "BPE vocab file; empty = train one from the corpus")
    freq_table: str = _key("", "path", "token_id<TAB>count file; empty = count the corpus")
    out_dir: str = _key("out", "path", "run directory for logs, checkpoints, resolved config")
    eval_pairs: str = _key("", "path", "minimal-pair TSV scored at each evaluation")
    # evaluation / bookkeeping
    eval_every: int = _key(0, "steps", "evaluation cadence; 0 = only after the last step")
    eval_mask_rate: float = _key(0.15, "probability", "masking rate for the held-fixed CE probe")
    eval_conditioning: str = _key("none", "name", "time input for PLL scoring: none or single-token")
    checkpoint_every: int = _key(0, "steps", "checkpoint cadence; 0 = only after the last step")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schedule not in ("linear", "cosine", "gaussian", "bimodal", "constant"):
            raise ConfigError(f"schedule: unknown value {self.schedule!r}")
        if self.eval_conditioning not in ("none", "single-token"):
            raise ConfigError(f"eval_conditioning: unknown value {self.eval_conditioning!r}")
        if not (0.0 <= self.derivative_power <= 1.0):
            raise ConfigError("derivative_power: must lie in [0, 1]")
        if not (0.0 <= self.mask_power_max < 1.0):
            raise ConfigError("mask_power_max: must lie in [0, 1)")
        for name in ("epochs", "batch_size", "seq_len", "layers", "hidden_dim", "heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps: must be >= 0")

    def schedule_obj(self) -> Schedule:
        params = {"clamp_eps": self.clamp_eps}
        if self.schedule == "gaussian":
            params.update(mean=self.gauss_mean, std=self.gauss_std)
        elif self.schedule == "bimodal":
            params.update(
                w1=self.bimodal_w1, mu1=self.bimodal_mu1, sigma1=self.bimodal_sigma1,
                mu2_lo=self.bimodal_mu2_lo, mu2_hi=self.bimodal_mu2_hi, sigma2=self.bimodal_sigma2,
            )
        elif self.schedule == "constant":
            params.update(rate=self.constant_rate)
        try:
            return make_schedule(self.schedule, **params)
        except ValueError as exc:
            raise ConfigError(f"schedule parameters: {exc}") from None

    def model_config(self, vocab_size: int) -> ModelConfig:
        try:
            return ModelConfig(
                layers=self.layers, hidden_dim=self.hidden_dim, heads=self.heads,
                ffn_dim=self.ffn_dim, vocab_size=vocab_size, max_seq_len=self.seq_len,
                timestep_dim=self.timestep_dim, time_conditioning=self.time_conditioning,
                tie_weights=self.tie_weights,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def config_fields():
    return dataclasses.fields(RunConfig)


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, ftype: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "int | None":
            return int(raw) if raw else None
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: key {name!r}: cannot parse {raw!r} as {ftype}") from None


def parse_pairs(items: list[tuple[str, str, str]]) -> dict:
    """Turn ``(key, raw_value, location)`` triples into typed values."""
    types = {f.name: f.type for f in config_fields()}
    out = {}
    for key, raw, where in items:
        if key not in types:
            raise ConfigError(f"{where}: unknown key {key!r}")
        out[key] = _coerce(key, str(types[key]), raw, where)
    return out


def read_config_items(path: str | Path) -> list[tuple[str, str, str]]:
    items = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        items.append((key.strip(), value, f"{path}:{lineno}"))
    return items


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    items = read_config_items(path) if path else []
    for i, item in enumerate(overrides):
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        items.append((key.strip(), value, f"override #{i + 1}"))
    return RunConfig(**parse_pairs(items))
