import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbulab import cli
from gbulab.cli import ConfigError, RunConfig

P3 = {
    "problem": {"domain": {"kind": "interval", "params": [0.0, 1.0]}, "p": 3.0,
                "h": {"preset": "constant", "amplitude": 8.0},
                "u0": {"preset": "zero", "amplitude": 0.0}, "t_max": 20.0, "G_max": 1e6},
    "mesh": {"cells": 256, "grading": 2.0},
    "analysis": {"assert_rate": True},
}


def write_cfg(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@settings(max_examples=50)
@given(p=st.floats(2.05, 6.0), amp=st.floats(0.0, 100.0),
       preset=st.sampled_from(sorted(cli.PRESETS)), cells=st.integers(4, 512).map(lambda n: 2 * n),
       grading=st.floats(1.0, 4.0), rel_tol=st.floats(1e-5, 1e-2))
def test_config_round_trip(p, amp, preset, cells, grading, rel_tol):
    data = {"problem": {"p": p, "h": {"preset": preset, "amplitude": amp}},
            "mesh": {"cells": cells, "grading": grading},
            "bisect": {"rel_tol": rel_tol}}
    cfg = RunConfig.from_dict(data)
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.digest() == cfg.digest()


@pytest.mark.parametrize("data", [
    {"problem": {"h": {"preset": "gaussian", "amplitude": 1.0}}},
    {"problem": {"q": 3.0}},
    {"meshes": {}},
    {"mesh": {"cells": 64, "colour": "red"}},
])
def test_bad_configs_raise(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


@pytest.mark.parametrize("preset", sorted(cli.PRESETS))
def test_presets_vanish_on_boundary_except_constant(preset):
    cfg = RunConfig.from_dict({"problem": {"u0": {"preset": preset, "amplitude": 2.0}}, "mesh": {"cells": 64}})
    mesh = cfg.build_mesh()
    u = cfg.problem.u0.sampler()(mesh)
    if preset == "constant":
        assert np.allclose(u, 2.0)
    else:
        assert u[0] == pytest.approx(0.0, abs=1e-14) and u[-1] == pytest.approx(0.0, abs=1e-14)
        assert np.allclose(u, u[::-1])


def test_simulate_writes_outputs(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["simulate", "--config", write_cfg(tmp_path, P3), "--out", str(out), "--profiles"])
    assert code == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["outcome"] == "BlewUp" and manifest["steps"] > 0
    assert manifest["config_sha256"] == RunConfig.from_dict(P3).digest()
    rate = json.loads((out / "ratefit.json").read_text())
    assert rate["gamma"] == pytest.approx(1.0, rel=0.15)
    header = (out / "trace.csv").read_text().splitlines()[0]
    assert header.startswith("t,m")
    assert (out / "profile.csv").exists()

    code = cli.main(["fit", "--trace", str(out / "trace.csv"), "--p", "3", "--out", str(tmp_path / "fit")])
    assert code == cli.EXIT_OK
    assert json.loads((tmp_path / "fit" / "ratefit.json").read_text())["type"] == "TypeII"


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_USAGE
    bad = json.loads(json.dumps(P3))
    bad["problem"]["p"] = 2.0
    out = tmp_path / "p2"
    assert cli.main(["simulate", "--config", write_cfg(tmp_path, bad), "--out", str(out)]) == cli.EXIT_USAGE
    assert "p>2" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())
    assert cli.main(["nonsense"]) == cli.EXIT_USAGE


def test_out_dir_resolution(tmp_path, monkeypatch):
    monkeypatch.setenv("GBU_OUT_DIR", str(tmp_path / "env"))
    assert cli.resolve_out_dir(None) == tmp_path / "env"
    cfg = RunConfig.from_dict({"output_dir": str(tmp_path / "cfg")})
    assert cli.resolve_out_dir(None, cfg) == tmp_path / "cfg"
    assert cli.resolve_out_dir(str(tmp_path / "arg"), cfg) == tmp_path / "arg"
    monkeypatch.delenv("GBU_OUT_DIR")
    assert str(cli.resolve_out_dir(None)) == "out"


def test_certify_exit_codes(tmp_path):
    assert cli.main(["certify", "--out", str(tmp_path / "a")]) == cli.EXIT_OK
    certs = json.loads((tmp_path / "a" / "certificates.json").read_text())
    assert all(c["passed"] for c in certs if c["required"])
    assert cli.main(["certify", "--p-extend", "3.2", "--out", str(tmp_path / "b")]) == cli.EXIT_ASSERT
    assert cli.main(["certify", "--grid", "huge"]) == cli.EXIT_USAGE


def test_bisect_writes_probe_log(tmp_path):
    data = json.loads((Path(__file__).parents[1] / "runs" / "p4_threshold.json").read_text())
    data["mesh"]["cells"] = 128
    data["bisect"]["rel_tol"] = 1e-2
    out = tmp_path / "new" / "dir"
    assert cli.main(["bisect", "--config", write_cfg(tmp_path, data), "--out", str(out)]) == cli.EXIT_OK
    star = json.loads((out / "lambda_star.json").read_text())
    lo, hi = star["lambda_lo_final"], star["lambda_hi_final"]
    assert (hi - lo) <= 1e-2 * hi and 40 < lo < 55
    assert (out / "probe_log.csv").read_text().startswith("lambda,outcome")
    data["problem"]["h"] = {"preset": "constant", "amplitude": 1.0}
    assert cli.main(["bisect", "--config", write_cfg(tmp_path, data, "h.json")]) == cli.EXIT_USAGE
