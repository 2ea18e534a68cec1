import json

import pytest

from asipdyn import cli
from asipdyn import config as cf

MINIMAL = """\
map: {name: doubling}
observable: {name: cosine, k: 1}
run: {seed: 0, n: 1024, R: 2000}
analysis:
  clt: {}
"""


def _write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_minimal_clt_run(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL)
    out = tmp_path / "out"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 0
    names = set(_files(out))
    assert {"density.csv", "variance.csv", "clt.json", "manifest.json", "summary.txt"} <= names
    assert json.loads((out / "clt.json").read_text())["pass"] is True
    header = (out / "density.csv").read_text().splitlines()[0]
    assert header == "bin,left,right,pi,h"
    assert "clt:" in capsys.readouterr().out


def test_unknown_key_exit_1_and_no_files(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL + "bogus: 1\n")
    out = tmp_path / "out"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 1
    assert not out.exists()
    assert "config" in capsys.readouterr().err


def test_bad_analysis_parameter_exit_1(tmp_path):
    cfg = _write(tmp_path, MINIMAL.replace("clt: {}", "clt: {tol: -1}"))
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_usage_error_exit_1(capsys):
    assert cli.main(["no-such-command"]) == 1


def test_lsv_uniform_grid_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, """\
map: {name: lsv, gamma: 0.25}
observable: {name: power_law, a: 0.15}
grid: {kind: uniform, B: 1024}
analysis:
  density: {}
""")
    out = tmp_path / "out"
    assert cli.main(["density", "--config", str(cfg), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "build_ulam" in err and "transfer" in err
    assert not out.exists()


def test_lsv_without_gamma_is_config_error(tmp_path):
    cfg = _write(tmp_path, "map: {name: lsv}\n")
    with pytest.raises(cf.ConfigError):
        cf.load_config(cfg)


def test_manifest_replay_any_threads(tmp_path):
    cfg = _write(tmp_path, MINIMAL.replace("clt: {}", "clt: {}\n  wip: {}\n  lil: {threshold: 2.0}"))
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["run", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["run", str(a / "manifest.json"), "--out", str(b), "--threads", "3"]) == 0
    assert cli.main(["run", str(cfg), "--out", str(c), "--format", "json"]) == 0
    assert _files(a) == _files(b)
    assert "ensemble.json" in _files(c)
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["manifest_version"] == cf.MANIFEST_VERSION
    assert manifest["config"]["run"]["seed"] == 0
    assert "dir" not in manifest["config"]["output"]
    assert set(manifest["files"]) == set(_files(a)) - {"manifest.json"}


def test_seed_flag_changes_ensemble(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    assert (tmp_path / "a" / "ensemble.csv").read_bytes() != (tmp_path / "b" / "ensemble.csv").read_bytes()


def test_yaml_exponent_floats(tmp_path):
    cfg = _write(tmp_path, "grid: {tol: 1e-12}\nanalysis:\n  variance: {threshold: 1e-10}\n")
    data = cf.load_config(cfg)
    assert data["grid"]["tol"] == 1e-12 and isinstance(data["analysis"]["variance"]["threshold"], float)


def test_resolve_defaults_and_dependency_order():
    cfg = cf.resolve({}, ["clt"])
    assert cfg["map"]["name"] == "doubling" and cfg["grid"]["kind"] == "uniform"
    assert cli._plan(["clt"]) == ["density", "variance", "clt"]
    assert cli._plan(["ddm", "map_validate"]) == ["map_validate", "mixing", "ddm"]
    lsv = cf.resolve({"map": {"name": "lsv", "gamma": 0.25}}, [])
    assert lsv["grid"]["kind"] == "geometric" and lsv["grid"]["B"] == 8192


def test_observable_builders():
    f = cf.make_observable({"name": "combination", "parts": [
        {"weight": 2.0, "observable": {"name": "centered_linear"}},
        {"weight": -1.0, "observable": {"name": "indicator", "lo": 0.1, "hi": 0.3}}]})
    assert f(0.2) == pytest.approx(2 * (0.2 - 0.5) - 1.0)
    with pytest.raises(cf.ConfigError):
        cf.validate_config({"observable": {"name": "cosine", "k": 0}})


@pytest.mark.parametrize("cmd", ["map-validate", "mixing", "ddm", "decompose", "gordin", "correlations"])
def test_subcommands_run(tmp_path, cmd):
    out = tmp_path / "o"
    assert cli.main([cmd, "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
