"""Tests for scenario loading, overrides and runtime settings."""

from pathlib import Path

import pytest
import yaml

from linkmpc.config import (
    ConfigError,
    apply_overrides,
    deep_merge,
    dump_scenario,
    get_env_or_value,
    load_runtime_settings,
    load_scenario,
    load_scenario_file,
    parse_override,
    parse_yaml_text,
)
from linkmpc.models import Scenario


class TestLoadScenario:
    """Tests for parsing and validating scenario text."""

    def test_empty_text_is_default_mission(self):
        """Should return the default experiment for an empty file."""
        scenario = load_scenario("")
        assert scenario == Scenario()
        assert scenario.duration == 26.0
        assert scenario.horizon.steps == 50
        assert scenario.horizon.step == 0.015
        assert scenario.optics.desired_range == 1.0
        assert scenario.weights.slack == 1.0e4
        assert scenario.n_obstacles == 3

    def test_partial_sections_keep_defaults(self):
        """Should fill unspecified fields from the defaults."""
        scenario = load_scenario("horizon:\n  steps: 20\n")
        assert scenario.horizon.steps == 20
        assert scenario.horizon.step == 0.015

    def test_negative_radius_names_field(self):
        """Should report the obstacle radius invariant."""
        text = yaml.safe_dump({"obstacles": [{"start_pos": [0, 0, 0], "end_pos": [0, 0, 0], "radius": -1}]})
        with pytest.raises(ConfigError, match="obstacle radius") as exc:
            load_scenario(text)
        assert exc.value.field == "obstacles.0.radius"

    def test_non_integer_rate_multiple_rejected(self):
        """Should refuse control_hz = 300 with plant_hz = 1000."""
        with pytest.raises(ConfigError, match="integer multiple"):
            load_scenario("rates:\n  control_hz: 300\n  plant_hz: 1000\n")

    def test_unknown_key_rejected(self):
        """Should treat unknown keys as hard errors."""
        with pytest.raises(ConfigError) as exc:
            load_scenario("horizon:\n  stepz: 3\n")
        assert exc.value.field == "horizon.stepz"

    def test_wrong_schema_version_rejected(self):
        """Should refuse unsupported schema versions."""
        with pytest.raises(ConfigError, match="schema_version"):
            load_scenario("schema_version: 99\n")

    def test_inverted_range_window_rejected(self):
        """Should refuse range_max below range_min."""
        with pytest.raises(ConfigError, match="range"):
            load_scenario("optics:\n  range_max: 0.1\n")

    def test_parse_error_reports_line(self):
        """Should carry the offending line number."""
        with pytest.raises(ConfigError) as exc:
            load_scenario("duration: 5\nhorizon:\n  steps: [1, 2\n  step: 0.01\n")
        assert exc.value.line is not None and exc.value.line >= 3

    def test_non_mapping_rejected(self):
        """Should require a mapping at the top level."""
        with pytest.raises(ConfigError):
            parse_yaml_text("- 1\n- 2\n")

    def test_serialization_round_trip(self):
        """Should reload the canonical form into an equal scenario."""
        scenario = load_scenario("duration: 3.5\nweights:\n  range: 4.0\n")
        text = dump_scenario(scenario)
        assert load_scenario(text) == scenario
        assert dump_scenario(load_scenario(text)) == text

    def test_default_dump_keeps_schema_order(self):
        """Should emit sections in schema order, schema_version first."""
        keys = list(yaml.safe_load(dump_scenario(Scenario())))
        assert keys[:3] == ["schema_version", "duration", "workspace"]
        assert keys[-1] == "solver"


class TestOverrides:
    """Tests for dotted-path overrides."""

    def test_parse_typed_value(self):
        """Should split the key and parse the value as YAML."""
        assert parse_override("horizon.steps=10") == (["horizon", "steps"], 10)
        assert parse_override("optics.tx_offset_body=[0, 0, 0]") == (["optics", "tx_offset_body"], [0, 0, 0])

    def test_missing_equals_rejected(self):
        """Should refuse overrides without '='."""
        with pytest.raises(ConfigError):
            parse_override("horizon.steps")

    def test_empty_key_component_rejected(self):
        """Should refuse paths like 'a..b'."""
        with pytest.raises(ConfigError):
            parse_override("horizon..steps=3")

    def test_list_index_override(self):
        """Should address list items by index."""
        scenario = load_scenario("", ["obstacles.1.radius=0.5"])
        assert scenario.obstacles[1].radius == 0.5
        assert scenario.obstacles[0].radius == 0.25

    def test_out_of_range_index_rejected(self):
        """Should refuse indices past the end of a list."""
        with pytest.raises(ConfigError, match="list index"):
            load_scenario("", ["obstacles.7.radius=0.5"])

    def test_scalar_descent_rejected(self):
        """Should refuse paths that continue below a scalar."""
        with pytest.raises(ConfigError, match="scalar"):
            apply_overrides({"duration": 1.0}, ["duration.x=2"])

    def test_overrides_apply_after_file(self):
        """Should let overrides win over file contents."""
        scenario = load_scenario("duration: 10\n", ["duration=2.5"])
        assert scenario.duration == 2.5

    def test_invalid_override_value_rejected(self):
        """Should validate overridden values like file values."""
        with pytest.raises(ConfigError, match="range"):
            load_scenario("", ["optics.range_max=0.1"])

    def test_does_not_mutate_input(self):
        """Should leave the input mapping untouched."""
        data = {"horizon": {"steps": 5}}
        apply_overrides(data, ["horizon.steps=6"])
        assert data == {"horizon": {"steps": 5}}


class TestDeepMerge:
    """Tests for recursive dictionary merge."""

    def test_nested_values_merge(self):
        """Should merge nested dicts key by key."""
        result = deep_merge({"a": {"x": 1, "y": 2}}, {"a": {"y": 3}})
        assert result == {"a": {"x": 1, "y": 3}}

    def test_lists_replace(self):
        """Should replace lists rather than merging them."""
        assert deep_merge({"a": [1, 2, 3]}, {"a": [4]}) == {"a": [4]}


class TestLoadScenarioFile:
    """Tests for reading scenario files."""

    def test_none_is_default(self):
        """Should return the default scenario without a path."""
        assert load_scenario_file(None) == Scenario()

    def test_reads_file(self, tmp_path):
        """Should load a scenario from disk."""
        path = tmp_path / "mission.yaml"
        path.write_text("duration: 1.5\n", encoding="utf-8")
        assert load_scenario_file(path).duration == 1.5

    def test_missing_file_raises(self, tmp_path):
        """Should wrap OS errors in ConfigError."""
        with pytest.raises(ConfigError, match="cannot read"):
            load_scenario_file(tmp_path / "absent.yaml")


class TestRuntimeSettings:
    """Tests for LINKMPC_* environment handling."""

    def test_env_var_takes_priority_over_value(self, monkeypatch):
        """Environment variable should override the fallback value."""
        monkeypatch.setenv("LINKMPC_TEST_VAR", "env_value")
        assert get_env_or_value("LINKMPC_TEST_VAR", "value", "default") == "env_value"

    def test_default_used_when_nothing_set(self, monkeypatch):
        """Default should be used when neither env nor value is set."""
        monkeypatch.delenv("LINKMPC_TEST_VAR", raising=False)
        assert get_env_or_value("LINKMPC_TEST_VAR", None, "default") == "default"

    def test_log_level_from_env(self, monkeypatch):
        """Should read and normalize LINKMPC_LOG_LEVEL."""
        monkeypatch.setenv("LINKMPC_LOG_LEVEL", "debug")
        assert load_runtime_settings().log_level == "DEBUG"

    def test_explicit_argument_wins(self, monkeypatch):
        """Should prefer CLI arguments over the environment."""
        monkeypatch.setenv("LINKMPC_JOBS", "8")
        assert load_runtime_settings(jobs=2).jobs == 2

    def test_jobs_from_env(self, monkeypatch):
        """Should coerce LINKMPC_JOBS to an integer."""
        monkeypatch.setenv("LINKMPC_JOBS", "3")
        assert load_runtime_settings().jobs == 3

    def test_invalid_values_raise_config_error(self, monkeypatch):
        """Should wrap validation failures in ConfigError."""
        monkeypatch.setenv("LINKMPC_LOG_LEVEL", "chatty")
        with pytest.raises(ConfigError, match="log_level"):
            load_runtime_settings()

    def test_rti_iters_bounds(self, monkeypatch):
        """Should refuse more than 50 RTI iterations."""
        monkeypatch.delenv("LINKMPC_RTI_ITERS", raising=False)
        with pytest.raises(ConfigError, match="rti_iters"):
            load_runtime_settings(rti_iters=51)


class TestExampleConfig:
    """Tests for the shipped example file."""

    def test_example_matches_defaults(self):
        """Should describe exactly the default scenario."""
        path = Path(__file__).resolve().parent.parent / "config.example.yaml"
        assert load_scenario_file(path) == Scenario()
