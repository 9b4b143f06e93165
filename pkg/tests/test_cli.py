import json

import numpy as np

from safelmdp.cli import main
from safelmdp.env import gen_synthetic, save_spec


def write_config(tmp_path, **kw):
    base = dict(experiment="synthetic", agent="slucb", K=3, H=2, d=3, N=4, n_states=3, seeds=[0])
    base.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(base))
    return str(p)


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", write_config(tmp_path), "--out", str(out), "--seeds", "1,2", "--K", "2"])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["runs"] == 2 and summary["total_violations"] == 0
    assert (out / "manifest.json").exists()
    assert len((out / "violations.csv").read_text().splitlines()) == 1 + 2 * 2


def test_run_agent_override(tmp_path, capsys):
    assert main(["run", "--config", write_config(tmp_path), "--agent", "lsvi_known_gamma"]) == 0
    assert json.loads(capsys.readouterr().out)["agent"] == "lsvi_known_gamma"


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--config", write_config(tmp_path, agent="nope")]) == 2
    assert main(["run", "--config", write_config(tmp_path), "--seeds", "a,b"]) == 2
    assert "error:" in capsys.readouterr().err


def test_compare(tmp_path, capsys):
    a = write_config(tmp_path)
    b = tmp_path / "b.json"
    b.write_text(json.dumps(dict(json.loads(open(a).read()), agent="lsvi_known_gamma")))
    out = tmp_path / "cmp"
    assert main(["compare", "--configs", f"{a},{b}", "--out", str(out)]) == 0
    assert (out / "compare.csv").exists()
    c = tmp_path / "c.json"
    c.write_text(json.dumps(dict(json.loads(open(a).read()), tau=0.3)))
    assert main(["compare", "--configs", f"{a},{c}"]) == 2


def test_validate(tmp_path, capsys):
    spec = gen_synthetic(d=3, H=2, n_states=3, N=4, rng=np.random.default_rng(0))
    good = tmp_path / "good.json"
    save_spec(spec, good)
    assert main(["validate", "--spec", str(good)]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    spec.mu = spec.mu * 2.0  # transitions no longer sum to one
    bad = tmp_path / "bad.json"
    save_spec(spec, bad)
    assert main(["validate", "--spec", str(bad)]) == 3
    (tmp_path / "junk.json").write_text("{")
    assert main(["validate", "--spec", str(tmp_path / "junk.json")]) == 2
