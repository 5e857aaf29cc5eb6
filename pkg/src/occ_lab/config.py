"""Flat dotted-key config files and their mapping onto TrainConfig.

Format: one ``key = value`` per line, ``#`` comments, blank lines ignored.
Values are JSON scalars (numbers, true/false, quoted strings) or bare words.
Overrides arrive as repeated ``--set key=value`` flags with the same value
syntax. A config snapshot round-trips to an identical TrainConfig.
"""

from __future__ import annotations

import json
from pathlib import Path

from .policy import Backend, ModelConfig
from .proxy import ClipMode, OccConfig, ProxyBackend
from .rlgrad import Algo, AlgoConfig
from .tasks import TaskName, make_task
from .trainer import Regime, RegimeConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_file(path: str | Path) -> tuple[dict, dict]:
    """Returns (flat key->value, key->line) for error reporting."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    flat: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError("expected 'key = value'", str(path), lineno)
        key, _, value = text.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError("empty key", str(path), lineno)
        if key in flat:
            raise ConfigError(f"duplicate key {key!r}", str(path), lineno)
        flat[key] = parse_value(value)
        lines[key] = lineno
    return flat, lines


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = parse_value(value)
    return out


_ENUMS = {
    "model.backend": Backend,
    "task.name": TaskName,
    "algo.name": Algo,
    "regime.kind": Regime,
    "occ.clip_mode": ClipMode,
    "occ.proxy_backend": ProxyBackend,
}

_INT_KEYS = {"train.steps", "train.batch", "train.group", "train.seed",
             "train.l_probes", "model.vocab_size", "model.context_window",
             "model.hidden_dim", "task.prompt_len", "task.response_len", "algo.ppo_epochs",
             "algo.micro_batches"}

_FLOAT_KEYS = {"train.eta", "train.temperature", "train.l_fd_step",
               "algo.clip_low", "algo.clip_high", "regime.fixed_lambda",
               "occ.lambda_plus", "occ.epsilon"}

_BOOL_KEYS = {"train.instrument_exact"}

KNOWN_KEYS = set(_ENUMS) | _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS


def _coerce(key: str, value, path=None, line=None):
    try:
        if key in _ENUMS:
            return _ENUMS[key](str(value))
        if key in _INT_KEYS:
            if isinstance(value, bool) or int(value) != float(value):
                raise ValueError
            return int(value)
        if key in _FLOAT_KEYS:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if key in _BOOL_KEYS:
            if isinstance(value, bool):
                return value
            raise ValueError
    except (ValueError, TypeError):
        raise ConfigError(f"bad value for {key}: {value!r}", path, line) from None
    raise ConfigError(f"unknown key {key!r}", path, line)


def build_train_config(flat: dict, path: str | None = None,
                       lines: dict | None = None) -> TrainConfig:
    lines = lines or {}
    vals = {}
    for key, raw in flat.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}", path, lines.get(key))
        vals[key] = _coerce(key, raw, path, lines.get(key))

    def get(key, default):
        return vals.get(key, default)

    model = ModelConfig(
        vocab_size=get("model.vocab_size", 16),
        context_window=get("model.context_window", 8),
        hidden_dim=get("model.hidden_dim", 32),
        backend=get("model.backend", Backend.TABULAR_SOFTMAX),
    )
    task = make_task(get("task.name", TaskName.SUM_MOD), model.vocab_size,
                     get("task.prompt_len", None), get("task.response_len", None))
    algo = AlgoConfig(
        algo=get("algo.name", Algo.GRPO),
        clip_low=get("algo.clip_low", 0.2),
        clip_high=get("algo.clip_high", None),
        ppo_epochs=get("algo.ppo_epochs", 2),
        micro_batches=get("algo.micro_batches", 2),
    )
    occ = OccConfig(
        lambda_plus=get("occ.lambda_plus", 1.0),
        epsilon=get("occ.epsilon", 1e-8),
        clip_mode=get("occ.clip_mode", ClipMode.NO_CLIP),
        proxy_backend=get("occ.proxy_backend", ProxyBackend.VIRTUAL_STEP),
    )
    regime = RegimeConfig(
        kind=get("regime.kind", Regime.DETACH),
        fixed_lambda=get("regime.fixed_lambda", 0.1),
        occ=occ,
    )
    try:
        return TrainConfig(
            eta=get("train.eta", 0.05),
            steps=get("train.steps", 200),
            batch=get("train.batch", 64),
            group=get("train.group", 8),
            algo=algo,
            model=model,
            task=task,
            regime=regime,
            seed=get("train.seed", 0),
            instrument_exact=get("train.instrument_exact", False),
            temperature=get("train.temperature", 1.0),
            l_probes=get("train.l_probes", 2),
            l_fd_step=get("train.l_fd_step", 1e-4),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), path) from exc


def config_to_flat(cfg: TrainConfig) -> dict:
    """Canonical flat snapshot; build_train_config inverts it exactly."""
    flat = {
        "train.eta": cfg.eta,
        "train.steps": cfg.steps,
        "train.batch": cfg.batch,
        "train.group": cfg.group,
        "train.seed": cfg.seed,
        "train.temperature": cfg.temperature,
        "train.instrument_exact": cfg.instrument_exact,
        "train.l_probes": cfg.l_probes,
        "train.l_fd_step": cfg.l_fd_step,
        "model.backend": cfg.model.backend.value,
        "model.vocab_size": cfg.model.vocab_size,
        "model.context_window": cfg.model.context_window,
        "model.hidden_dim": cfg.model.hidden_dim,
        "task.name": cfg.task.name.value,
        "task.prompt_len": cfg.task.prompt_len,
        "task.response_len": cfg.task.response_len,
        "algo.name": cfg.algo.algo.value,
        "algo.clip_low": cfg.algo.clip_low,
        "algo.clip_high": cfg.algo.clip_high,
        "algo.ppo_epochs": cfg.algo.ppo_epochs,
        "algo.micro_batches": cfg.algo.micro_batches,
        "regime.kind": cfg.regime.kind.value,
        "regime.fixed_lambda": cfg.regime.fixed_lambda,
        "occ.lambda_plus": cfg.regime.occ.lambda_plus,
        "occ.epsilon": cfg.regime.occ.epsilon,
        "occ.clip_mode": cfg.regime.occ.clip_mode.value,
        "occ.proxy_backend": cfg.regime.occ.proxy_backend.value,
    }
    return flat


def write_config_file(path: str | Path, flat: dict) -> None:
    lines = [f"{key} = {json.dumps(value)}" for key, value in flat.items()]
    Path(path).write_text("\n".join(lines) + "\n")
