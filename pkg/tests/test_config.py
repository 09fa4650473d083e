import json

import pytest

from chambertwin.config import (
    ChamberSetup,
    ConfigError,
    FaultSpec,
    ScenarioConfig,
    default_scenario,
    load_config,
    parse_config,
)


class TestScenarioConfig:
    def test_default_scenario_covers_all_four_chambers(self):
        cfg = default_scenario()
        assert set(cfg.chambers) == {"A", "B", "C", "D"}
        assert cfg.chambers["A"].t_sp == 25.0
        assert cfg.chambers["A"].rh_sp == 60.0
        assert cfg.chambers["D"].t_sp == 40.0
        assert cfg.chambers["D"].rh_sp == 75.0
        assert cfg.duration_s == 86400.0
        assert cfg.time_scale == 1000.0

    def test_all_problems_reported_together(self):
        with pytest.raises(ConfigError) as err:
            ScenarioConfig(
                chambers={
                    "E": ChamberSetup(t_sp=25.0, rh_sp=60.0),
                    "A": ChamberSetup(t_sp=90.0, rh_sp=5.0),
                },
                duration_s=-1.0,
                time_scale=0.5,
            )
        problems = err.value.problems
        assert len(problems) == 5
        assert any("chambers.E" in p for p in problems)
        assert any("chambers.A.t_sp" in p for p in problems)
        assert any("chambers.A.rh_sp" in p for p in problems)
        assert any("duration_s" in p for p in problems)
        assert any("time_scale" in p for p in problems)

    def test_empty_chamber_map_rejected(self):
        with pytest.raises(ConfigError, match="at least one chamber"):
            ScenarioConfig(chambers={})

    def test_fault_target_validation(self):
        base = {"A": ChamberSetup(t_sp=25.0, rh_sp=60.0)}
        with pytest.raises(ConfigError, match="not in this scenario"):
            ScenarioConfig(chambers=base, faults=(FaultSpec("D.heater1", 10.0),))
        with pytest.raises(ConfigError, match="unknown unit"):
            ScenarioConfig(chambers=base, faults=(FaultSpec("A.reactor", 10.0),))
        with pytest.raises(ConfigError, match="clear_at"):
            ScenarioConfig(
                chambers=base, faults=(FaultSpec("A.heater1", 10.0, clear_at_s=5.0),)
            )

    def test_fault_spec_splits_target(self):
        fs = FaultSpec("C.sensor3", 120.0)
        assert fs.chamber == "C"
        assert fs.unit == "sensor3"

    def test_with_overrides(self):
        cfg = default_scenario()
        out = cfg.with_overrides(seed=7, time_scale=50.0, output_dir="elsewhere")
        assert out.seed == 7
        assert out.time_scale == 50.0
        assert out.output_dir == "elsewhere"
        assert out.chambers == cfg.chambers
        assert cfg.with_overrides() is cfg


class TestParseConfig:
    def minimal(self):
        return {"chambers": {"A": {"t_sp": 25.0, "rh_sp": 60.0}}}

    def test_minimal_document(self):
        cfg = parse_config(self.minimal())
        assert list(cfg.chambers) == ["A"]
        assert cfg.seed == 1
        assert cfg.poll_interval_s == 5.0

    def test_full_document(self):
        cfg = parse_config(
            {
                "chambers": {
                    "D": {
                        "t_sp": 40.0,
                        "rh_sp": 75.0,
                        "geometry": {"volume_m3": 12.0},
                        "initial": {"t_c": 39.0, "rh_pct": 70.0},
                    }
                },
                "duration_s": 3600,
                "time_scale": 200,
                "faults": [{"target": "D.heater1", "at_time": 600, "clear_at": 900}],
                "seed": 42,
                "poll_interval_s": 2,
                "output_dir": "runs/demo",
            }
        )
        setup = cfg.chambers["D"]
        assert setup.geometry.volume_m3 == 12.0
        # air charge follows the resized box
        assert setup.geometry.air_mass_kg == pytest.approx(12.0 * 1.2)
        assert setup.initial_t_c == 39.0
        assert setup.initial_rh_pct == 70.0
        assert cfg.faults == (FaultSpec("D.heater1", 600.0, 900.0),)
        assert cfg.seed == 42

    def test_unknown_top_level_key_gets_a_hint(self):
        doc = self.minimal()
        doc["chamber"] = {}
        with pytest.raises(ConfigError, match="did you mean 'chambers'"):
            parse_config(doc)

    def test_unknown_geometry_field(self):
        doc = {"chambers": {"A": {"t_sp": 25.0, "rh_sp": 60.0, "geometry": {"mass": 1}}}}
        with pytest.raises(ConfigError, match="geometry.mass"):
            parse_config(doc)

    def test_non_numeric_setpoint(self):
        doc = {"chambers": {"A": {"t_sp": "warm", "rh_sp": 60.0}}}
        with pytest.raises(ConfigError, match="t_sp"):
            parse_config(doc)

    def test_bool_is_not_a_seed(self):
        doc = self.minimal()
        doc["seed"] = True
        with pytest.raises(ConfigError, match="seed"):
            parse_config(doc)

    def test_faults_must_be_a_list(self):
        doc = self.minimal()
        doc["faults"] = {"target": "A.heater1"}
        with pytest.raises(ConfigError, match="faults: expected a list"):
            parse_config(doc)

    def test_problems_from_both_layers_collected(self):
        # a parse problem (bad type) and a validation problem (bad range)
        # surface in the same error
        doc = {
            "chambers": {"A": {"t_sp": 250.0, "rh_sp": 60.0}},
            "output_dir": 7,
        }
        with pytest.raises(ConfigError) as err:
            parse_config(doc)
        text = str(err.value)
        assert "output_dir" in text
        assert "t_sp" in text


class TestLoadConfig:
    def test_round_trip_through_a_file(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text(
            json.dumps(
                {
                    "chambers": {"B": {"t_sp": 30.0, "rh_sp": 65.0}},
                    "duration_s": 600,
                }
            )
        )
        cfg = load_config(path)
        assert cfg.chambers["B"].t_sp == 30.0
        assert cfg.duration_s == 600.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.json")

    def test_broken_json_names_the_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "chambers": {\n}')
        with pytest.raises(ConfigError, match="invalid JSON at line"):
            load_config(path)
