"""Run configuration: flat ``key=value`` files, packaged profiles, flag overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from typing import Mapping

from .pipeline import ENGINES, KG_MODES


class ConfigError(ValueError):
    pass


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    mode: str = "protonet"
    kg: str = "full"
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 5
    knn_k: int = 3
    encoder_dims: list[int] = field(default_factory=lambda: [32, 64])
    gnn_dims: list[int] = field(default_factory=lambda: [64, 16])
    head_dims: list[int] = field(default_factory=lambda: [64, 64])
    alpha: float = 0.01
    beta: float = 2e-5
    weight_decay: float = 0.0
    inner_steps: int = 5
    epochs: int = 10000
    meta_batch: int = 4
    seed: int = 0
    context_size: int = 50
    user_ratio: float = 1.0
    no_context: bool = False
    eval_episodes: int = 600
    val_every: int = 0
    val_episodes: int = 100
    split: str = "test"
    triples: str = ""
    embeddings: str = ""
    corpus: str = ""
    splits: str = ""

    @property
    def supervised(self) -> bool:
        return self.mode != "arm"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


MAML_ONLY = {"alpha", "inner_steps"}
ARM_ONLY = {"context_size", "user_ratio", "no_context"}
SUPERVISED_ONLY = {"n_way", "k_shot", "n_query"}

_CONVERT = {int: int, float: float, str: str, bool: _bool, list[int]: _ints}


def _field_types() -> dict[str, type]:
    hints = {"int": int, "float": float, "str": str, "bool": bool, "list[int]": list[int]}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[normalize_key(k)] = v.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_kv(fh.read(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def profile(name: str) -> dict[str, str]:
    text = resources.files("kgml").joinpath("profiles", f"{name}.cfg").read_text(encoding="utf-8")
    return parse_kv(text, f"profile:{name}")


def profile_for(mode: str) -> str:
    return "unsupervised" if mode == "arm" else "supervised"


def build_config(explicit: Mapping[str, object], file_values: Mapping[str, str] | None = None,
                 base: Mapping[str, object] | None = None) -> RunConfig:
    """Defaults < profile for the mode < ``base`` < config file < explicit flags.

    ``base`` (e.g. a checkpoint's saved config) is exempt from the
    mode-applicability checks applied to user-supplied keys.
    """
    file_values = dict(file_values or {})
    base = dict(base or {})
    user = {**file_values, **{k: v for k, v in explicit.items() if v is not None}}
    mode = str(user.get("mode", base.get("mode", RunConfig.mode)))
    if mode not in ENGINES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(ENGINES)}")
    merged = {**profile(profile_for(mode)), **base, **user}
    types = _field_types()
    kwargs = {}
    for k, v in merged.items():
        if k not in types:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            kwargs[k] = _CONVERT[types[k]](v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
    cfg = RunConfig(**kwargs)
    validate(cfg, set(user))
    return cfg


def validate(cfg: RunConfig, explicit: set[str] = frozenset()) -> None:
    if cfg.kg not in KG_MODES:
        raise ConfigError(f"unknown kg mode {cfg.kg!r}; choose from {', '.join(KG_MODES)}")
    if cfg.mode != "maml" and explicit & MAML_ONLY:
        raise ConfigError(f"{sorted(explicit & MAML_ONLY)} only apply to mode=maml")
    if cfg.mode != "arm" and explicit & ARM_ONLY:
        raise ConfigError(f"{sorted(explicit & ARM_ONLY)} only apply to mode=arm")
    if cfg.mode == "arm" and explicit & SUPERVISED_ONLY:
        raise ConfigError(f"{sorted(explicit & SUPERVISED_ONLY)} do not apply to mode=arm")
    for name in ("n_way", "k_shot", "n_query", "inner_steps", "meta_batch", "context_size", "eval_episodes"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.epochs < 0 or cfg.val_every < 0 or cfg.val_episodes < 1:
        raise ConfigError("epochs/val_every must be >= 0 and val_episodes >= 1")
    if cfg.alpha <= 0 or cfg.beta <= 0:
        raise ConfigError("learning rates must be positive")
    if cfg.weight_decay < 0:
        raise ConfigError("weight_decay must be non-negative")
    if not 0 < cfg.user_ratio <= 1:
        raise ConfigError("user_ratio must lie in (0, 1]")
    if cfg.kg != "no-knn" and cfg.kg != "off" and cfg.knn_k < 1:
        raise ConfigError("knn_k must be >= 1 when k-NN densification is on")
    if not cfg.encoder_dims or len(cfg.encoder_dims) < 2 or not cfg.gnn_dims or not cfg.head_dims:
        raise ConfigError("encoder_dims needs >= 2 entries; gnn_dims and head_dims nonempty")
    if min(cfg.encoder_dims + cfg.gnn_dims + cfg.head_dims) < 1:
        raise ConfigError("layer widths must be positive")


def format_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
