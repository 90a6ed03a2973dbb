import json
import math

import numpy as np
import pytest
import yaml

from lidarcal.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_PARTIAL, main
from lidarcal.config import config_from_dict, load_config
from lidarcal.errors import ConfigError
from lidarcal.geometry import PointCloud, euler_zyx_to_matrix
from lidarcal.pcd import write_pcd


def minimal(**overrides):
    raw = {"version": 1, "target": "T",
           "sensors": [{"id": "A", "cloud": "A.pcd"}, {"id": "T", "cloud": "T.pcd"}]}
    raw.update(overrides)
    return raw


class TestConfig:
    def test_defaults(self):
        cfg = config_from_dict(minimal(), "/data")
        assert cfg.coarse.voxel_size == 0.35 and cfg.coarse.fpfh_radius_factor == 5
        assert cfg.gicp.fitness_threshold == 0.2
        assert str(cfg.resolve("A.pcd")) == "/data/A.pcd"
        assert cfg.ground_sensors() == []

    def test_duplicate_ids_before_io(self, tmp_path):
        # neither cloud exists: the error must come from validation, not from reading
        raw = minimal(sensors=[{"id": "A", "cloud": "nope.pcd"}, {"id": "A", "cloud": "x.pcd"},
                               {"id": "T", "cloud": "y.pcd"}])
        with pytest.raises(ConfigError, match="duplicate"):
            config_from_dict(raw, tmp_path)

    @pytest.mark.parametrize("raw, message", [
        (minimal(target="Z"), "target"),
        (minimal(sensors=[{"id": "T", "cloud": "T.pcd"}]), "at least two"),
        (minimal(version=2), "version"),
        (minimal(extra=1), "unknown top-level"),
        (minimal(gicp={"max_correspondence_distance": -1}), "gicp"),
        (minimal(coarse={"voxel": 0.3}), "unknown keys in 'coarse'"),
        (minimal(ground={"enabled": True, "sensors": ["Q"]}), "ground sensors"),
        (minimal(seed="7"), "seed"),
        (minimal(sensors=[{"id": "A", "cloud": ""}, {"id": "T", "cloud": "T.pcd"}]), "empty cloud"),
        (minimal(output={"report": ""}), "output.report"),
        ([1, 2], "mapping"),
    ])
    def test_rejected(self, raw, message):
        with pytest.raises(ConfigError, match=message):
            config_from_dict(raw)

    def test_ground_selection(self):
        cfg = config_from_dict(minimal(ground={"enabled": True, "sensors": ["T"]}))
        assert cfg.ground_sensors() == ["T"]
        cfg = config_from_dict(minimal(ground={"enabled": True}))
        assert cfg.ground_sensors() == ["A", "T"]

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("target: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_echo_round_trips(self):
        cfg = config_from_dict(minimal(gicp={"max_correspondence_distance": 0.4}, seed=3))
        again = config_from_dict(cfg.echo())
        assert again == cfg


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pair_scene")
    assert main(["synth", "pair", "-o", str(out)]) == EXIT_OK
    return out


def write_config(path, raw):
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return str(path)


def far_cloud(path):
    """A lone sphere: curved, so it cannot slide onto the scene's planes."""
    dirs = np.random.default_rng(0).normal(size=(3000, 3))
    pts = 1.5 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True) + [500.0, 0, 0]
    write_pcd(PointCloud(pts), path)


class TestCli:
    def test_synth_outputs(self, pair_dir):
        assert sorted(p.name for p in pair_dir.iterdir()) == [
            "S.pcd", "T.pcd", "calibrate.yaml", "truth.yaml"]
        truth = yaml.safe_load((pair_dir / "truth.yaml").read_text())
        assert truth["target"] == "T" and set(truth["poses"]) == {"S", "T"}

    def test_calibrate_and_evaluate(self, pair_dir, capsys):
        assert main(["calibrate", str(pair_dir / "calibrate.yaml")]) == EXIT_OK
        report = json.loads((pair_dir / "report.json").read_text())
        assert report["status"] == "ok" and report["uncalibrated"] == []
        assert (pair_dir / "fused.pcd").exists()
        for entry in report["sensors"].values():
            m = np.array(entry["matrix"])
            assert np.abs(m[:3, :3] - euler_zyx_to_matrix(*entry["rpy"])).max() < 1e-9
            assert np.abs(m[:3, 3] - entry["xyz"]).max() == 0
        capsys.readouterr()
        code = main(["evaluate", str(pair_dir / "report.json"), str(pair_dir / "truth.yaml"),
                     "--json"])
        assert code == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert [r["sensor"] for r in summary["rows"]] == ["S"]
        assert math.degrees(summary["rows"][0]["angle"]) < 0.1

    def test_partial_exit_code(self, pair_dir, tmp_path, capsys):
        far_cloud(tmp_path / "X.pcd")
        raw = {"version": 1, "target": "T", "sensors": [
            {"id": "T", "cloud": str(pair_dir / "T.pcd")},
            {"id": "X", "cloud": "X.pcd"}], "output": {"report": "report.json"},
            "gicp": {"max_correspondence_distance": 0.3, "fine_voxel_size": 0.1}}
        assert main(["calibrate", write_config(tmp_path / "c.yaml", raw)]) == EXIT_PARTIAL
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["status"] == "partial" and report["uncalibrated"] == ["X"]
        assert "uncalibrated: X" in capsys.readouterr().err

    def test_input_error_exit_code(self, tmp_path):
        (tmp_path / "T.pcd").write_text("VERSION 0.7\nFIELDS x y z\nPOINTS two\n")
        raw = minimal()
        assert main(["calibrate", write_config(tmp_path / "c.yaml", raw)]) == EXIT_INPUT
        (tmp_path / "T.pcd").unlink()
        far_cloud(tmp_path / "A.pcd")
        assert main(["calibrate", str(tmp_path / "c.yaml")]) == EXIT_INPUT

    def test_config_error_exit_code(self, tmp_path, capsys):
        raw = minimal(sensors=[{"id": "A", "cloud": "a.pcd"}, {"id": "A", "cloud": "b.pcd"}])
        assert main(["calibrate", write_config(tmp_path / "c.yaml", raw)]) == EXIT_CONFIG
        assert "duplicate" in capsys.readouterr().err
        assert main(["calibrate", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG
        assert main(["synth", str(tmp_path / "absent_scene.yaml")]) == EXIT_CONFIG
        assert main(["evaluate", str(tmp_path / "r.json"), str(tmp_path / "t.yaml")]) == EXIT_CONFIG

    def test_ground_command(self, pair_dir, tmp_path, capsys):
        raw = yaml.safe_load((pair_dir / "calibrate.yaml").read_text())
        raw["sensors"] = [{"id": s["id"], "cloud": str(pair_dir / s["cloud"])} for s in raw["sensors"]]
        raw["ground"] = {"enabled": True, "sensors": ["T"]}
        capsys.readouterr()
        assert main(["ground", write_config(tmp_path / "g.yaml", raw)]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)["ground"]
        assert list(out) == ["T"]
        # T is mounted at roll 0.5, pitch 2.0 degrees, 2.0 m above the ground
        assert math.degrees(out["T"]["roll"]) == pytest.approx(0.5, abs=0.1)
        assert math.degrees(out["T"]["pitch"]) == pytest.approx(2.0, abs=0.1)
        assert out["T"]["z_offset"] == pytest.approx(2.0, abs=0.01)

    def test_synth_unknown_fixture_and_verbose(self, tmp_path):
        assert main(["-v", "synth", "not_a_fixture"]) == EXIT_CONFIG

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0 and "lidarcal" in capsys.readouterr().out
