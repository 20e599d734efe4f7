"""Run configuration: flat ``key = value`` files, env overrides and stage hashes."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from .errors import ConfigError

ENV_PREFIX = "KGWALK_"

# keys that only say where things live; changing them does not change results
PATH_KEYS = ("data_dir", "work_dir", "interactions", "triplets", "matches")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_dir: str = "data"
    work_dir: str = "work"
    interactions: str = ""
    triplets: str = ""
    matches: str = ""
    # model sizes and search
    dim: int = 32
    hidden: int = 64
    max_len: int = 3
    beam: int = 64
    batch: int = 512
    k: int = 10
    strategy: str = "path"
    max_fanout: int = 512
    # KGE pre-training
    kge_epochs: int = 100
    kge_lr: float = 1e-3
    kge_negatives: int = 8
    kge_dropout: float = 0.1
    kge_batch: int = 512
    kge_variant: str = "distmult"
    kge_interactions: bool = True
    # policy training
    epochs: int = 20
    lr: float = 1e-3
    action_dropout: float = 0.5
    embed_dropout: float = 0.1
    grad_clip: float = 5.0
    baseline: bool = False
    val_users: int = 500
    # ablation switches
    use_kg: bool = True
    reward_shaping: bool = True
    freeze_embeddings: bool = False
    # seeds and runs
    seed: int = 0
    runs: int = 5

    def run_seed(self, run: int) -> int:
        return self.seed + run

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())

    def semantic(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in PATH_KEYS}

    def hash(self) -> str:
        return digest(self.semantic())


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
RATE_KEYS = ("action_dropout", "embed_dropout", "kge_dropout")
LR_KEYS = ("lr", "kge_lr")
POSITIVE_KEYS = ("dim", "hidden", "max_len", "beam", "batch", "k", "kge_batch", "max_fanout", "runs", "val_users")
NONNEGATIVE_KEYS = ("kge_epochs", "kge_negatives", "epochs")
CHOICES = {"strategy": ("path", "reward"), "kge_variant": ("distmult", "conve")}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key = value`` pairs. Raises ConfigError naming the first bad line."""
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key or not key.replace("_", "").isalnum():
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        raw[key] = value.strip()
    return raw


def _coerce(key: str, value, typ: str):
    if not isinstance(value, str):
        return value
    if typ == "bool":
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if typ == "int":
        try:
            return int(value)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {value!r}") from None
    if typ == "float":
        try:
            return float(value)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {value!r}") from None
    return value


def validate_config(raw: Mapping[str, object], base: RunConfig | None = None) -> RunConfig:
    """Apply ``raw`` over ``base`` (defaults if None), collecting every violation.

    Raises ConfigError listing one message per bad key.
    """
    errors: list[str] = []
    values = {}
    for key, value in raw.items():
        if key not in FIELD_TYPES:
            errors.append(f"{key}: unknown key")
            continue
        try:
            values[key] = _coerce(key, value, FIELD_TYPES[key])
        except ValueError as exc:
            errors.append(str(exc))
    cfg = replace(base or RunConfig(), **values)

    for key in RATE_KEYS:
        v = getattr(cfg, key)
        if not 0.0 <= v < 1.0:
            errors.append(f"{key}: must be in [0,1), got {v}")
    for key in LR_KEYS:
        v = getattr(cfg, key)
        if not 0.0 < v < 1.0:
            errors.append(f"{key}: must be in (0,1), got {v}")
    for key in POSITIVE_KEYS:
        if getattr(cfg, key) < 1:
            errors.append(f"{key}: must be >= 1, got {getattr(cfg, key)}")
    for key in NONNEGATIVE_KEYS:
        if getattr(cfg, key) < 0:
            errors.append(f"{key}: must be >= 0, got {getattr(cfg, key)}")
    for key, allowed in CHOICES.items():
        if getattr(cfg, key) not in allowed:
            errors.append(f"{key}: must be one of {', '.join(allowed)}, got {getattr(cfg, key)!r}")
    if cfg.grad_clip <= 0:
        errors.append(f"grad_clip: must be > 0, got {cfg.grad_clip}")
    if errors:
        raise ConfigError(errors)
    return cfg


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in FIELD_TYPES:
                out[key] = value
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, object] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then the file, then ``KGWALK_*`` variables, then ``overrides``."""
    raw: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror}") from None
        raw.update(parse_text(text, str(p)))
    raw.update(env_overrides(environ))
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(raw)


# -- per-stage hashes -----------------------------------------------------

_STAGE_KEYS = {
    "ingest": ("seed",),
    "train-kge": ("dim", "max_fanout", "use_kg", "kge_epochs", "kge_lr", "kge_negatives",
                  "kge_dropout", "kge_batch", "kge_variant", "kge_interactions"),
    "train-policy": ("hidden", "max_len", "batch", "epochs", "lr", "action_dropout", "embed_dropout",
                     "grad_clip", "baseline", "reward_shaping", "freeze_embeddings", "k", "beam", "val_users"),
    "recommend": ("k", "beam", "max_len"),
    "evaluate": ("k",),
}
STAGES = tuple(_STAGE_KEYS)


def stage_hash(cfg: RunConfig, stage: str, upstream: str = "", extra=None) -> str:
    """Hash of the fields ``stage`` reads, chained onto its upstream stage hash."""
    d = cfg.semantic()
    return digest({"stage": stage, "up": upstream, "keys": {k: d[k] for k in _STAGE_KEYS[stage]}, "extra": extra})


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]
