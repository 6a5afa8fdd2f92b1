"""JSON experiment configuration: parsing, validation, defaults and model building.

A config document has up to four blocks::

    {
      "task":   {"kind": "linear_teacher", "true_ranks": [1, 3, 6]},
      "train":  {"total_steps": 2000, "learning_rate": 0.01},
      "policy": {"lambda": 1.05, "test_interval": 40},
      "sweep":  {"lambdas": [1.05, 1.1, 1.3, 2.0]}
    }

Every key is optional except ``task.kind``; unknown keys are errors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .fisher import ORIENTATIONS, ExpansionPolicy
from .harness import TrainConfig
from .tasks import LinearStudent, LinearTeacherSpec, ToyDenoiserSpec, gen_linear_teacher, gen_toy_denoiser_task


class ConfigError(ValueError):
    pass


TASK_SPECS = {"linear_teacher": LinearTeacherSpec, "toy_denoiser": ToyDenoiserSpec}

# keys whose value may be null
_OPTIONAL_INT = {"train.max_rank", "train.inject_nonfinite_at_step", "policy.probe_batch_size"}

_POLICY_KEYS = {
    "lambda": "lambda_threshold",
    "test_interval": "test_interval",
    "probe_batch_size": "probe_batch_size",
    "ratio_orientation": "ratio_orientation",
}
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "policy"] + ["max_rank"]


@dataclass(frozen=True)
class ExperimentConfig:
    task_kind: str
    task: LinearTeacherSpec | ToyDenoiserSpec
    train: TrainConfig
    max_rank: int | None = None
    lambdas: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        task = {"kind": self.task_kind}
        for k, v in asdict(self.task).items():
            task[k] = [list(x) for x in v] if k == "layer_dims" else (list(v) if isinstance(v, tuple) else v)
        train = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig) if f.name != "policy"}
        train["max_rank"] = self.max_rank
        p = self.train.policy
        policy = {key: getattr(p, attr) for key, attr in _POLICY_KEYS.items()}
        doc = {"task": task, "train": train, "policy": policy}
        if self.lambdas is not None:
            doc["sweep"] = {"lambdas": list(self.lambdas)}
        return doc

    def with_overrides(self, seed: int | None = None, ratio_orientation: str | None = None) -> ExperimentConfig:
        cfg = self
        if seed is not None:
            cfg = replace(cfg, task=replace(cfg.task, seed=seed), train=replace(cfg.train, seed=seed))
        if ratio_orientation is not None:
            policy = replace(cfg.train.policy, ratio_orientation=ratio_orientation)
            cfg = replace(cfg, train=replace(cfg.train, policy=policy))
        return cfg


def _check_keys(block: dict, allowed, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object, got {type(block).__name__}")
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown key")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(value, default, path: str):
    """Check ``value`` against the type of ``default`` and convert lists to tuples."""
    if value is None:
        if path in _OPTIONAL_INT:
            return None
        raise ConfigError(f"{path}: must not be null")
    if path in _OPTIONAL_INT or _is_int(default):
        if not _is_int(value):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if isinstance(default, float):
        if not (isinstance(value, (int, float)) and not isinstance(value, bool)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if path.endswith("layer_dims"):
        ok = isinstance(value, list) and all(
            isinstance(p, list) and len(p) == 2 and all(_is_int(d) for d in p) for p in value
        )
        if not ok:
            raise ConfigError(f"{path}: expected a list of [d_in, d_out] integer pairs")
        return tuple(tuple(p) for p in value)
    if isinstance(default, tuple):
        if not (isinstance(value, list) and all(_is_int(v) for v in value)):
            raise ConfigError(f"{path}: expected a list of integers")
        return tuple(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def parse_config_dict(doc: dict) -> ExperimentConfig:
    _check_keys(doc, {"task", "train", "policy", "sweep"}, "config")
    task_block = doc.get("task", {})
    if not isinstance(task_block, dict):
        raise ConfigError("task: expected an object")
    kind = task_block.get("kind")
    if kind not in TASK_SPECS:
        raise ConfigError(f"task.kind: must be one of {sorted(TASK_SPECS)}, got {kind!r}")
    spec_cls = TASK_SPECS[kind]
    default_spec = spec_cls()
    spec_fields = {f.name for f in fields(spec_cls)}
    _check_keys(task_block, ["kind", *spec_fields], "task")
    spec_kw = {k: _coerce(v, getattr(default_spec, k), f"task.{k}") for k, v in task_block.items() if k != "kind"}
    spec = spec_cls(**spec_kw)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None

    policy_block = doc.get("policy", {})
    _check_keys(policy_block, _POLICY_KEYS, "policy")
    default_policy = ExpansionPolicy()
    policy_kw = {}
    for key, v in policy_block.items():
        attr = _POLICY_KEYS[key]
        policy_kw[attr] = _coerce(v, getattr(default_policy, attr), f"policy.{key}")
    lam = policy_kw.get("lambda_threshold", default_policy.lambda_threshold)
    if math.isnan(lam) or lam <= 0:
        raise ConfigError(f"policy.lambda: must be > 0, got {lam}")
    if policy_kw.get("test_interval", 1) < 1:
        raise ConfigError(f"policy.test_interval: must be >= 1, got {policy_kw['test_interval']}")
    if policy_kw.get("ratio_orientation", ORIENTATIONS[0]) not in ORIENTATIONS:
        raise ConfigError(f"policy.ratio_orientation: must be one of {list(ORIENTATIONS)}")
    try:
        policy = ExpansionPolicy(**policy_kw)
    except ValueError as exc:
        raise ConfigError(f"policy: {exc}") from None

    train_block = doc.get("train", {})
    _check_keys(train_block, _TRAIN_KEYS, "train")
    default_train = TrainConfig()
    train_kw = {}
    max_rank = None
    for key, v in train_block.items():
        if key == "max_rank":
            max_rank = _coerce(v, None, "train.max_rank")
            if max_rank is not None and max_rank < 1:
                raise ConfigError("train.max_rank: must be >= 1")
        else:
            train_kw[key] = _coerce(v, getattr(default_train, key), f"train.{key}")
    try:
        train = TrainConfig(policy=policy, **train_kw)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None

    lambdas = None
    if "sweep" in doc:
        sweep = doc["sweep"]
        _check_keys(sweep, {"lambdas"}, "sweep")
        raw = sweep.get("lambdas")
        if not isinstance(raw, list) or not raw:
            raise ConfigError("sweep.lambdas: expected a non-empty list of numbers")
        for i, v in enumerate(raw):
            if not isinstance(v, (int, float)) or isinstance(v, bool) or math.isnan(v) or v <= 0:
                raise ConfigError(f"sweep.lambdas[{i}]: must be a number > 0, got {v!r}")
        lambdas = tuple(float(v) for v in raw)
    return ExperimentConfig(kind, spec, train, max_rank, lambdas)


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def build_experiment(cfg: ExperimentConfig):
    """Fresh ``(model, dataset)`` for ``cfg``; adapters start at rank 1, or ``fixed_rank`` for the baseline."""
    rank = cfg.train.fixed_rank if cfg.train.mode == "fixed_lora" else 1
    if cfg.task_kind == "linear_teacher":
        base, _, data = gen_linear_teacher(cfg.task)
        return LinearStudent(base, seed=cfg.train.seed, rank=rank, max_rank=cfg.max_rank), data
    return gen_toy_denoiser_task(cfg.task, rank=rank, max_rank=cfg.max_rank, adapter_seed=cfg.train.seed)
