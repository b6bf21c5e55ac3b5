import csv
import json
import os

import pytest

from stablecone.cli import main
from stablecone.experiments import (ConfigError, ExperimentError, RunManifest, config_from_dict,
                                    csv_text, emit_plot_data, load_config, run_experiment)

BASE = {"alpha": 1.5, "dim": 2, "seed": 5}


def _write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return str(path)


def test_defaults_and_digest():
    cfg = config_from_dict({"experiment": "survival", **BASE})
    assert cfg["reps"] == 100_000 and cfg["horizons"]["hi"] == 16384
    assert cfg["martin"]["anchor_scale"] == 16.0
    again = config_from_dict({"experiment": "survival", **BASE})
    assert cfg.digest == again.digest
    assert cfg.with_overrides(seed=6).digest != cfg.digest
    assert cfg.start.tolist() == [0.0, 1.0]


def test_alpha_one_rejected_with_message():
    with pytest.raises(ConfigError, match="alpha = 1 is excluded"):
        config_from_dict({"experiment": "beta", "alpha": 1.0, "dim": 2, "seed": 0})


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match="nearest known key: 'horizons'") as err:
        config_from_dict({"experiment": "beta", "horizon": {}, **BASE})
    assert err.value.path == ()
    with pytest.raises(ConfigError, match="'ladder'"):
        config_from_dict({"experiment": "compensator", "compensator": {"lader": [1]}, **BASE})


def test_json_parse_error_position(tmp_path):
    path = _write(tmp_path, '{\n  "alpha": 1.5,\n  "dim": 2 "seed": 1}\n')
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.line == 3 and err.value.col > 1


def test_invalid_values():
    for bad in ({"theta": 4.0}, {"start": [1.0]}, {"horizons": {"lo": 100, "hi": 10}},
                {"start": [0.0, -1.0]}, {"experiment": "nope"}):
        doc = {"experiment": "survival", **BASE, **bad}
        with pytest.raises(ConfigError):
            config_from_dict(doc)


def test_csv_text_round_trips_floats():
    text = csv_text(("a", "b", "c"), [(0.1, 3, True), (1 / 3, -2, False)])
    rows = list(csv.reader(text.splitlines()))
    assert float(rows[2][0]) == 1 / 3
    assert rows[1] == ["0.1", "3", "true"]
    assert "\r" not in text


def _small(experiment, **extra):
    doc = {"experiment": experiment, **BASE, "reps": 20_000,
           "horizons": {"lo": 16, "hi": 256}}
    doc.update(extra)
    return config_from_dict(doc)


def test_run_survival_manifest_and_rerun(tmp_path):
    cfg = _small("survival")
    m1 = run_experiment(cfg, tmp_path / "a", threads=1)
    m2 = run_experiment(cfg, tmp_path / "b", threads=3)
    assert all(m1.verify().values())
    assert [o["sha256"] for o in m1.outputs] == [o["sha256"] for o in m2.outputs]
    back = RunManifest.read(tmp_path / "a")
    assert back.config_digest == cfg.digest and back.scheme.startswith("philox")
    files = emit_plot_data(back, "survival", tmp_path / "plots")
    assert any(f.endswith("reference_slopes.txt") for f in files)
    with pytest.raises(FileNotFoundError):
        emit_plot_data(back, "tightness")


def test_module_error_becomes_failure_report(tmp_path):
    cfg = _small("beta", horizons={"lo": 16, "hi": 32})
    with pytest.raises(ExperimentError) as err:
        run_experiment(cfg, tmp_path / "f")
    assert os.path.exists(tmp_path / "f" / "failure.json")
    assert err.value.report["error"] == "ValueError"


def test_halfspace_only_experiments_refuse_other_cones(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(_small("v-estimate", theta=1.0), tmp_path / "v")


def test_cli_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, {"experiment": "beta", **BASE, "reps": 20_000,
                             "horizons": {"lo": 16, "hi": 512},
                             "beta": {"expected": 0.75, "tolerance": 0.2}})
    assert main(["beta", "--config", good, "--out-dir", str(tmp_path / "ok")]) == 0
    strict = _write(tmp_path, {"experiment": "beta", **BASE, "reps": 20_000,
                               "horizons": {"lo": 16, "hi": 512},
                               "beta": {"expected": 0.0, "tolerance": 0.01}}, "strict.json")
    assert main(["beta", "--config", strict, "--out-dir", str(tmp_path / "s")]) == 0
    assert main(["beta", "--config", strict, "--out-dir", str(tmp_path / "s"), "--assert"]) == 1
    bad = _write(tmp_path, {"experiment": "beta", "alpha": 1, "dim": 2, "seed": 0}, "bad.json")
    assert main(["beta", "--config", bad]) == 2
    assert "alpha = 1 is excluded" in capsys.readouterr().err
    assert main(["survival", "--config", good]) == 2
    assert main(["plot-data", "--manifest", str(tmp_path / "ok"), "--which", "kappa"]) == 2


def test_cli_seed_override_changes_digest(tmp_path):
    path = _write(tmp_path, {"experiment": "survival", **BASE, "reps": 5000,
                             "horizons": {"lo": 16, "hi": 64}})
    assert main(["survival", "--config", path, "--out-dir", str(tmp_path / "x"), "--seed", "9"]) == 0
    with open(tmp_path / "x" / "config.json") as fh:
        assert json.load(fh)["seed"] == 9
