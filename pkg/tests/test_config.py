from __future__ import annotations

import json
import math

import pytest

from selora.config import ConfigError, build_experiment, dump_config, parse_config, parse_config_dict
from selora.tasks import LinearTeacherSpec, ToyDenoiserSpec

TEACHER = {"task": {"kind": "linear_teacher"}}


def parse(**blocks):
    doc = {"task": {"kind": "linear_teacher"}}
    doc.update(blocks)
    return parse_config_dict(doc)


class TestDefaults:
    def test_empty_policy_block_gives_defaults(self):
        cfg = parse(policy={})
        assert cfg.train.policy.lambda_threshold == 1.1
        assert cfg.train.policy.test_interval == 40
        assert cfg.train.policy.ratio_orientation == "exp-over-orig"

    def test_train_defaults(self):
        cfg = parse()
        assert (cfg.train.total_steps, cfg.train.batch_size, cfg.train.mode) == (2000, 32, "selora")
        assert cfg.train.fixed_rank == 4 and cfg.max_rank is None and cfg.lambdas is None

    def test_task_defaults(self):
        assert parse().task == LinearTeacherSpec()
        assert parse_config_dict({"task": {"kind": "toy_denoiser"}}).task == ToyDenoiserSpec()

    def test_values_are_applied(self):
        cfg = parse(
            task={"kind": "linear_teacher", "layer_dims": [[4, 5], [6, 7]], "true_ranks": [1, 2]},
            train={"learning_rate": 1, "max_rank": 3},
            policy={"lambda": 1.05, "test_interval": 10, "probe_batch_size": 8},
            sweep={"lambdas": [1.05, 2]},
        )
        assert cfg.task.layer_dims == ((4, 5), (6, 7)) and cfg.task.true_ranks == (1, 2)
        assert cfg.train.learning_rate == 1.0 and isinstance(cfg.train.learning_rate, float)
        assert cfg.max_rank == 3 and cfg.lambdas == (1.05, 2.0)
        assert cfg.train.policy.probe_batch_size == 8


class TestErrors:
    @pytest.mark.parametrize(
        "doc, where",
        [
            ({"task": {"kind": "linear_teacher"}, "policy": {"lambda": 0}}, "policy.lambda"),
            ({"task": {"kind": "linear_teacher"}, "policy": {"lambda": -0.5}}, "policy.lambda"),
            ({"task": {"kind": "linear_teacher"}, "policy": {"test_interval": 0}}, "policy.test_interval"),
            ({"task": {"kind": "linear_teacher"}, "policy": {"lamda": 1.2}}, "policy.lamda"),
            ({"task": {"kind": "linear_teacher"}, "train": {"steps": 5}}, "train.steps"),
            ({"task": {"kind": "linear_teacher", "image_dim": 4}}, "task.image_dim"),
            ({"task": {"kind": "linear_teacher"}, "extra": {}}, "config.extra"),
            ({"task": {"kind": "resnet"}}, "task.kind"),
            ({}, "task.kind"),
            ({"task": {"kind": "linear_teacher"}, "train": {"total_steps": 1.5}}, "train.total_steps"),
            ({"task": {"kind": "linear_teacher"}, "train": {"total_steps": True}}, "train.total_steps"),
            ({"task": {"kind": "linear_teacher"}, "train": {"learning_rate": "fast"}}, "train.learning_rate"),
            ({"task": {"kind": "linear_teacher"}, "train": {"mode": "lora"}}, "train"),
            ({"task": {"kind": "linear_teacher", "layer_dims": [[4]]}}, "task.layer_dims"),
            ({"task": {"kind": "linear_teacher", "true_ranks": [1, 2]}}, "task"),
            ({"task": {"kind": "linear_teacher"}, "sweep": {"lambdas": []}}, "sweep.lambdas"),
            ({"task": {"kind": "linear_teacher"}, "sweep": {"lambdas": [1.1, 0]}}, "sweep.lambdas[1]"),
            ({"task": {"kind": "linear_teacher"}, "policy": {"ratio_orientation": "up"}}, "policy.ratio_orientation"),
            ({"task": {"kind": "linear_teacher"}, "policy": []}, "policy"),
        ],
    )
    def test_rejected_with_key_path(self, doc, where):
        with pytest.raises(ConfigError) as info:
            parse_config_dict(doc)
        assert where in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.json")

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{task:")
        with pytest.raises(ConfigError, match="invalid JSON"):
            parse_config(p)


class TestRoundTrip:
    @pytest.mark.parametrize(
        "doc",
        [
            TEACHER,
            {"task": {"kind": "toy_denoiser", "text_dim": 32}, "policy": {"lambda": math.inf}},
            {"task": {"kind": "linear_teacher", "layer_dims": [[3, 4]], "true_ranks": [2]},
             "train": {"mode": "fixed_lora", "fixed_rank": 2, "max_rank": 3}, "sweep": {"lambdas": [1.1, 1.3]}},
        ],
    )
    def test_effective_config_reparses_identically(self, doc, tmp_path):
        cfg = parse_config_dict(doc)
        p = tmp_path / "effective_config.json"
        p.write_text(dump_config(cfg))
        again = parse_config(p)
        assert again == cfg
        assert dump_config(again) == dump_config(cfg)

    def test_overrides(self):
        cfg = parse().with_overrides(seed=9, ratio_orientation="paper-literal")
        assert cfg.task.seed == 9 and cfg.train.seed == 9
        assert cfg.train.policy.ratio_orientation == "paper-literal"


class TestBuild:
    def test_selora_starts_at_rank_one(self):
        cfg = parse(task={"kind": "linear_teacher", "layer_dims": [[4, 4]], "true_ranks": [1], "n_samples": 20})
        model, _ = build_experiment(cfg)
        assert [a.rank for a in model.adapters] == [1]

    def test_fixed_lora_rank_and_cap(self):
        cfg = parse(
            task={"kind": "linear_teacher", "layer_dims": [[6, 4]], "true_ranks": [1], "n_samples": 20},
            train={"mode": "fixed_lora", "fixed_rank": 3, "max_rank": 5},
        )
        model, _ = build_experiment(cfg)
        assert model.adapters[0].rank == 3 and model.adapters[0].max_rank == 5
