import json
import shutil

import numpy as np
import pytest

from toys2s import cli
from toys2s import ensemble as en
from toys2s import harness as hs
from toys2s.metrics import SkillReport

CFG = {
    "toy": {"K": 12, "J": 4, "R": 8}, "truth_years": 3, "train_years": [0, 1],
    "test_years": [2, 2], "lead_steps": 56, "members": 3, "max_inits": 4,
    "init_every_days": 10, "clim_max_inits": 8, "clim_members": 2,
    "train": {"stage1_epochs": 1, "stage2_epochs": 1, "batches_per_epoch": 10},
    "error_growth_steps": 40, "error_growth_inits": 10, "regions": ["global", "tropics"],
}


def _write_cfg(path, **kw):
    path.write_text(json.dumps({**CFG, **kw}))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(d / "cfg.json")
    out = d / "run"
    assert cli.main(["hindcast", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    return d, cfg, out


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    unknown = _write_cfg(tmp_path / "u.json", colour="red")
    assert cli.main(["train", "--config", unknown, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    overlap = _write_cfg(tmp_path / "o.json", test_years=[1, 2])
    assert cli.main(["hindcast", "--config", overlap, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--threads", "0"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--seed", "-1"]) == cli.EXIT_CONFIG
    missing = _write_cfg(tmp_path / "m.json", truth=str(tmp_path / "nowhere"))
    assert cli.main(["train", "--config", missing, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_numeric_failure(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.json", toy={"K": 12, "J": 4, "R": 2, "F": 1e7}, truth_years=1)
    assert cli.main(["gen-truth", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_hindcast_outputs(run):
    d, cfg, out = run
    for name in ("truth", "model_W2S", "clim", "hindcasts", "maps", "skill.csv", "run.log"):
        assert (out / name).exists(), name
    rep = SkillReport.read_csv(out / "skill.csv")
    assert {e.climatology_kind for e in rep.entries} == {"observed", "model"}
    assert len(list((out / "hindcasts").glob("init_*"))) == 4


def test_verify_and_report(run):
    d, cfg, out = run
    before = (out / "skill.csv").read_bytes()
    assert cli.main(["verify", "--config", cfg, "--out", str(out), "--threads", "2"]) == cli.EXIT_OK
    assert (out / "skill.csv").read_bytes() == before
    assert cli.main(["report", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    assert list((out / "report").glob("*.svg"))


def test_partial_results(run, tmp_path, capsys):
    d, cfg, out = run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    target = sorted((copy / "hindcasts").glob("init_*"))[1]
    hc = en.load_ensemble(target)
    meta = json.loads((target / "ensemble.json").read_text())
    values = hc.values.copy()
    values[:, :, -1] = np.nan
    specs = [en.MemberSpec(m["member"], tuple(m["stream"]), m["records"], m["ok"], m["n_valid"])
             for m in meta["members"]]
    shutil.rmtree(target)
    en.write_ensemble(hs.EnsembleHindcast(hc.grid, hc.variables, hc.init_time, hc.lead_hours,
                                          values, hc.attrs),
                      specs, en.PerturbationConfig(**meta["config"]), target)
    assert cli.main(["verify", "--config", cfg, "--out", str(copy)]) == cli.EXIT_PARTIAL
    assert f"incomplete_inits: {hc.init_time}" in capsys.readouterr().err


def test_verify_without_hindcasts(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json")
    assert cli.main(["verify", "--config", cfg, "--out", str(tmp_path / "empty")]) == cli.EXIT_CONFIG
    assert cli.main(["report", "--config", cfg, "--out", str(tmp_path / "empty")]) == cli.EXIT_CONFIG


def test_indices(run):
    d, cfg, out = run
    for which, files in (("mjo", ("mjo.csv", "hovmoller.csv")), ("nao", ("nao.csv",)),
                         ("tele", ("pna.csv",))):
        assert cli.main(["index", which, "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
        for f in files:
            assert (out / "indices" / f).stat().st_size > 0
    lines = (out / "indices" / "mjo.csv").read_text().splitlines()
    assert len(lines) > 100


def test_error_growth_command(run, capsys):
    d, cfg, out = run
    assert cli.main(["error-growth", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    text = (out / "error_growth.csv").read_text().splitlines()
    assert text[0] == "variable,lead_step,rmse,ensemble_rmse,saturation"
    assert "z500: final-quarter max" in capsys.readouterr().out
