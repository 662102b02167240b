"""
Tests for experiment configuration and runtime settings.
"""

import json

import pytest

from mergeforge.core.config import Settings
from mergeforge.core.exceptions import ConfigError
from mergeforge.schemas.config import ALL_METHODS, ExperimentConfig, MergeHyperParams, MethodsConfig, TrimScope


class TestExperimentConfig:
    """Test loading, overrides and validation."""

    def test_defaults(self):
        cfg = ExperimentConfig.load()
        assert cfg.suite.k_in == 6
        assert cfg.methods.methods == list(ALL_METHODS)
        assert cfg.hierarchical.fan_in_limit == 2
        assert cfg.hierarchical.match_flat_steps
        assert cfg.supermerge.learning_rate == 0.1
        assert cfg.cost.k * cfg.cost.n_layers == 2112

    def test_file_and_overrides(self, tmp_path):
        """Overrides are applied on top of the file and parsed as JSON when possible."""
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 3, "suite": {"k_in": 4}}))
        cfg = ExperimentConfig.load(path, ["suite.hidden_dims=[8, 8]", "methods.ties_trim_scope=per_layer"])
        assert cfg.seed == 3
        assert cfg.suite.k_in == 4
        assert cfg.suite.hidden_dims == [8, 8]
        assert cfg.methods.ties_trim_scope == TrimScope.PER_LAYER

    def test_dump_round_trip(self, tmp_path):
        cfg = ExperimentConfig.load(None, ["supermerge.epochs=7"])
        path = tmp_path / "dump.json"
        path.write_text(cfg.dump())
        assert ExperimentConfig.load(path) == cfg

    @pytest.mark.parametrize(
        "override",
        [
            "suite.unknown=1",
            "suite.k_in=1",
            "methods.methods=[\"average_merge\"]",
            "methods.lambda_grid=[]",
            "methods.lambda_grid=[1.5]",
            "methods.dare_drop_prob=1.0",
            "hierarchical.fan_in_limit=1",
            "missing-equals-sign",
            "suite.k_in.deeper=1",
        ],
    )
    def test_invalid_values(self, override):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(None, [override])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "absent.json")

    def test_broken_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(path)

    def test_duplicate_methods_collapse(self):
        assert MethodsConfig(methods=["ties", "ties", "pretrained"]).methods == ["ties", "pretrained"]

    def test_hyperparams_from_methods(self):
        methods = MethodsConfig(dare_drop_prob=0.5, ties_density=0.3)
        hp = MergeHyperParams.from_methods(methods, seed=4, lam=0.2)
        assert (hp.lam, hp.drop_prob, hp.density, hp.seed) == (0.2, 0.5, 0.3, 4)
        assert MergeHyperParams.model_validate({"lambda": 0.7}).lam == 0.7


class TestSettings:
    """Test environment-driven settings."""

    def test_environment_overrides(self, monkeypatch, tmp_path):
        monkeypatch.setenv("ARTIFACT_DIR", str(tmp_path))
        monkeypatch.setenv("LOG_LEVEL", "debug")
        settings = Settings()
        assert settings.ARTIFACT_DIR == tmp_path
        assert settings.LOG_LEVEL == "DEBUG"

    def test_bad_log_level(self, monkeypatch):
        monkeypatch.setenv("LOG_LEVEL", "chatty")
        with pytest.raises(ValueError):
            Settings()
