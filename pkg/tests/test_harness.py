import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from toys2s import harness as hs
from toys2s import metrics as mt
from toys2s import toyearth as te
from toys2s.gridstore import EnsembleHindcast, STEP_HOURS

TOY = te.ToyParams(K=12, J=4, R=8)
LEAD = 56


@pytest.fixture(scope="module")
def camp(tmp_path_factory):
    out = tmp_path_factory.mktemp("camp")
    cfg = hs.ExperimentConfig(toy=TOY.to_dict(), truth_years=3, train_years=(0, 1),
                              test_years=(2, 2), lead_steps=LEAD, members=4, max_inits=6,
                              clim_max_inits=12, clim_members=2, init_every_days=10,
                              regions=("global", "tropics"),
                              train={"stage1_epochs": 2, "stage2_epochs": 1,
                                     "batches_per_epoch": 20},
                              error_growth_steps=40, out=str(out / "run"))
    truth = hs.load_or_generate_truth(cfg)
    model = hs.train_or_load(cfg, truth)
    windows = hs.default_windows(LEAD)
    clims = hs.build_climatologies(cfg, truth, model.variables, windows)
    inits = hs.init_schedule(truth, cfg.test_years, cfg.init_every_days, LEAD, 12)
    return {"cfg": cfg, "truth": truth, "model": model, "windows": windows, "clims": clims,
            "inits": inits}


class TruthSystem(hs.ForecastSystem):
    """The verifying truth as a one-member forecast."""

    kinds = ("observed",)

    def hindcast(self, truth, init_time, n_steps):
        seg = hs.truth_segment(truth, init_time, n_steps, self.variables)
        return EnsembleHindcast(truth.grid, self.variables, init_time,
                                STEP_HOURS * np.arange(n_steps + 1), seg[:, None])


class BrokenSystem(hs.ForecastSystem):
    """Persistence, with every member of selected inits non-finite."""

    kinds = ("observed",)

    def __init__(self, variables, bad, members=5, n_bad_members=5):
        super().__init__(variables)
        self.bad, self.members, self.n_bad = set(bad), members, n_bad_members

    def hindcast(self, truth, init_time, n_steps):
        snap = hs.truth_snapshot(truth, init_time, self.variables)
        v = np.broadcast_to(snap[:, None, None], (len(self.variables), self.members, n_steps + 1)
                            + snap.shape[1:]).copy()
        if init_time in self.bad:
            v[:, :self.n_bad, -1] = np.nan
        return EnsembleHindcast(truth.grid, self.variables, init_time,
                                STEP_HOURS * np.arange(n_steps + 1), v)


# ---------------------------------------------------------------------------- plumbing


def test_config_validation():
    bad = [{"train_years": (0, 5), "test_years": (5, 6)}, {"train_years": (3, 1)},
           {"members": 0}, {"mode": "X"}, {"climatology": ("forecast",)}, {"regions": ("moon",)},
           {"min_member_fraction": 0.0}, {"perturbation": {"mode": "wind"}},
           {"train": {"lr": -1.0}}, {"toy": {"dt": 0.0}}]
    for kw in bad:
        with pytest.raises(hs.ConfigError):
            hs.ExperimentConfig(**kw)
    with pytest.raises(hs.ConfigError):
        hs.ExperimentConfig.from_dict({"lead_step": 3})


def test_config_json_round_trip(tmp_path):
    cfg = hs.ExperimentConfig(members=3, regions=("global",), train={"lr": 1e-3})
    f = tmp_path / "c.json"
    f.write_text(cfg.to_json())
    assert hs.ExperimentConfig.from_json(f) == cfg
    f.write_text("[1, 2]")
    with pytest.raises(hs.ConfigError):
        hs.ExperimentConfig.from_json(f)
    with pytest.raises(hs.ConfigError):
        hs.ExperimentConfig.from_json(tmp_path / "missing.json")


def test_lead_windows():
    ws = hs.lead_windows("weekly", 168)
    assert [w.label for w in ws] == [f"week{i}" for i in range(1, 7)]
    assert (ws[1].first, ws[1].last, ws[1].clim_offset_steps) == (29, 56, 28)
    assert [w.label for w in hs.lead_windows("biweekly", 168)] == ["biweek1", "biweek2", "biweek3"]
    assert hs.lead_windows("weekly", 55) == hs.lead_windows("weekly", 56)[:1]
    s = hs.lead_windows("step", 10, [0, 4])
    assert [w.label for w in s] == ["lead0", "lead4"] and s[1].clim_offset_steps == 4
    with pytest.raises(hs.ConfigError):
        hs.lead_windows("step", 10, [11])
    d = hs.default_windows(40)
    assert set(d) == {"step", "weekly"}


def test_aggregate_windows_matches_loop():
    rng = np.random.default_rng(0)
    variables = ("z500", "tp")
    x = rng.standard_normal((2, 3, 60, 2, 2))
    ws = hs.lead_windows("weekly", 59) + hs.lead_windows("step", 59, [0, 7])
    got = hs.aggregate_windows(x, variables, ws, lead_axis=2)
    for vi, v in enumerate(variables):
        for wi, w in enumerate(ws):
            seg = x[vi, :, w.first:w.last + 1]
            want = seg.sum(axis=1) if v == "tp" else seg.mean(axis=1)
            np.testing.assert_allclose(got[vi, :, wi], want, rtol=1e-12, atol=1e-12)


def test_parallel_map_preserves_order():
    items = list(range(50))
    assert hs.parallel_map(lambda x: x * x, items, 4) == [x * x for x in items]
    assert hs.parallel_map(str, [], 3) == []


def test_init_schedule(camp):
    truth = camp["truth"]
    inits = hs.init_schedule(truth, (2, 2), 5, LEAD)
    assert np.all(np.diff(inits) == 5 * 24)
    assert inits[0] == 2 * 360 * 24
    assert inits[-1] + LEAD * STEP_HOURS <= truth.times[-1]
    assert hs.init_schedule(truth, (2, 2), 5, LEAD, max_inits=3).size == 3
    with pytest.raises(hs.ConfigError):
        hs.init_schedule(truth, (3, 3), 5, LEAD)


def test_check_years(camp):
    with pytest.raises(hs.ConfigError):
        hs.check_years(replace(camp["cfg"], test_years=(3, 4)), camp["truth"])


# ---------------------------------------------------------------------------- anchors


def _verify(camp, system, inits=None, **kw):
    c = camp
    return hs.verify_system(system, c["truth"], c["inits"] if inits is None else inits, LEAD,
                            c["windows"], c["clims"], **kw)


def test_climatology_baseline_scores_zero(camp):
    variables = camp["model"].variables
    rep = _verify(camp, hs.ClimatologySystem(variables), regions=("global", "tropics"))
    n = 0
    for e in rep.entries:
        if e.metric in ("RPSS", "BSS"):
            assert e.climatology_kind == "observed"
            assert abs(e.value) <= 1e-12, e
            n += 1
    assert n == 2 * 2 * len(variables) * sum(len(ws) for ws in camp["windows"].values())


def test_perfect_forecast_scores_one(camp):
    variables = ("z500", "t2m", "sst")
    rep = _verify(camp, TruthSystem(variables))
    for e in rep.entries:
        want = 0.0 if e.metric == "RMSE" else 1.0
        assert e.value == pytest.approx(want, abs=1e-12), e


def test_persistence_lead0(camp):
    rep = _verify(camp, hs.PersistenceSystem(("z500", "t2m")))
    assert rep.value("z500", "ACC", "observed", "lead0") == pytest.approx(1.0, abs=1e-12)
    assert rep.value("t2m", "RMSE", "observed", "lead0") == 0.0
    assert rep.value("z500", "ACC", "observed", "week2") < 0.9
    assert not any(e.climatology_kind == "model" for e in rep.entries)


def test_incomplete_inits_flagged(camp):
    inits = camp["inits"][:5]
    bad = [int(inits[1]), int(inits[3])]
    rep = _verify(camp, BrokenSystem(("z500",), bad), inits=inits)
    assert rep.flags["incomplete_inits"] == " ".join(map(str, bad))
    assert all(e.n_pairs == 3 for e in rep.entries if e.metric in ("ACC", "RMSE"))
    # one of five members lost stays above the 0.8 floor
    rep = _verify(camp, BrokenSystem(("z500",), bad, n_bad_members=1), inits=inits)
    assert "incomplete_inits" not in rep.flags


def test_empty_region_rows(tmp_path, caplog):
    p = te.ToyParams(K=8, J=3, R=2)
    truth = te.gen_truth(p, 2, 0)
    assert np.all(np.abs(truth.grid.lat) > 20)
    windows = {"weekly": hs.lead_windows("weekly", 28)}
    clims = hs.ClimSet(hs.observed_climatologies(truth, (0, 0), windows, truth.variables))
    inits = hs.init_schedule(truth, (1, 1), 30, 28, 4)
    rep = hs.verify_system(hs.PersistenceSystem(("z500",)), truth, inits, 28, windows, clims,
                           regions=("global", "tropics"))
    trop = [e for e in rep.entries if e.region == "tropics"]
    assert trop and all(e.n_pairs == 0 and math.isnan(e.value) for e in trop)
    with caplog.at_level(logging.WARNING, logger="toys2s"):
        hs.emit_report(rep, tmp_path / "rep", formats=("csv",))
    assert sum("skipping empty row" in r.message for r in caplog.records) == len(trop)
    back = mt.SkillReport.read_csv(tmp_path / "rep" / "skill.csv")
    assert {e.region for e in back.entries} == {"global"}


# ---------------------------------------------------------------------------- campaign


@pytest.fixture(scope="module")
def hindcast_runs(camp, tmp_path_factory):
    out = {}
    for threads in (1, 2):
        d = tmp_path_factory.mktemp(f"hc{threads}")
        cfg = replace(camp["cfg"], out=str(d))
        res = hs.run_hindcast(cfg, threads, model=camp["model"], truth=camp["truth"])
        out[threads] = (cfg, res)
    return out


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_hindcast_thread_independent(hindcast_runs):
    (c1, r1), (c2, r2) = hindcast_runs[1], hindcast_runs[2]
    assert r1.flags == {} and r2.flags == {}
    for name in ("skill.csv", "maps", "hindcasts", "clim"):
        a, b = c1.out_dir / name, c2.out_dir / name
        if a.is_file():
            assert a.read_bytes() == b.read_bytes()
        else:
            ta, tb = _tree_bytes(a), _tree_bytes(b)
            assert ta and ta == tb


def test_hindcast_report_contents(hindcast_runs, camp):
    cfg, res = hindcast_runs[1]
    rep = res.report
    kinds = {e.climatology_kind for e in rep.entries}
    assert kinds == {"observed", "model"}
    labels = {e.lead_window for e in rep.entries}
    assert labels == {"lead0", "week1", "week2", "biweek1"}
    assert {e.region for e in rep.entries} == {"global", "tropics"}
    assert rep.value("z500", "ACC", "observed", "week1") > rep.value("z500", "ACC", "observed",
                                                                      "week2") - 0.2
    n_dirs = len(list((cfg.out_dir / "hindcasts").glob("init_*")))
    assert n_dirs == res.inits.size == cfg.max_inits


def test_verify_saved_reproduces(hindcast_runs):
    cfg, res = hindcast_runs[1]
    before = (cfg.out_dir / "skill.csv").read_bytes()
    maps = _tree_bytes(cfg.out_dir / "maps")
    again = hs.verify_saved(cfg, threads=2)
    assert (cfg.out_dir / "skill.csv").read_bytes() == before
    assert _tree_bytes(cfg.out_dir / "maps") == maps
    assert again.report.to_csv() == res.report.to_csv()


def test_maps_round_trip(hindcast_runs):
    cfg, res = hindcast_runs[1]
    back = hs.read_maps(cfg.out_dir / "maps")
    assert set(back) == set(res.report.maps)
    for k, v in back.items():
        np.testing.assert_array_equal(v, res.report.maps[k].astype(np.float32))


def test_skill_csv_round_trip(hindcast_runs):
    cfg, res = hindcast_runs[1]
    back = mt.SkillReport.read_csv(cfg.out_dir / "skill.csv")
    assert back.to_csv() == res.report.to_csv()


def test_report_svgs_parse_and_repeat(hindcast_runs, tmp_path):
    cfg, res = hindcast_runs[1]
    a = hs.emit_report(res.report, tmp_path / "a")
    b = hs.emit_report(res.report, tmp_path / "b")
    svgs = [p for p in a if p.suffix == ".svg"]
    assert svgs
    for p in svgs:
        root = ET.parse(p).getroot()
        assert root.tag.endswith("svg")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_emit_report_errors(tmp_path):
    with pytest.raises(ValueError):
        hs.emit_report(mt.SkillReport(), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rep = mt.SkillReport()
    rep.add(mt.SkillEntry("t2m", "ACC", "observed", "week1", "global", 0.5, 10, 1.0))
    with pytest.raises(hs.ConfigError):
        hs.emit_report(rep, blocker / "sub")


# ---------------------------------------------------------------------------- error growth


def test_error_growth(camp):
    c = camp
    raw = c["clims"].observed["step"]
    with pytest.raises(ValueError):
        hs.error_growth(c["model"], c["truth"], c["inits"][:9], raw, (0, 1), 20)
    curves = hs.error_growth(c["model"], c["truth"], c["inits"][:10], raw, (0, 1), 20,
                             ensemble=c["cfg"].perturbation_config(), members=3, threads=2)
    assert set(curves) == set(c["model"].variables)
    sig = hs.anomaly_sigma(c["truth"], raw, (0, 1), ("z500",))
    for v, cur in curves.items():
        assert cur.rmse[0] == pytest.approx(0.0, abs=1e-5)
        assert cur.rmse.shape == cur.ensemble_rmse.shape == (21,)
    assert curves["z500"].saturation == pytest.approx(math.sqrt(2) * sig["z500"], rel=1e-12)
    assert curves["z500"].rmse[20] > curves["z500"].rmse[1]
    text = hs.error_growth_csv(curves)
    assert text.count("\n") == 1 + 21 * len(curves)


# ---------------------------------------------------------------------------- ablation


def test_ablation_table(camp, tmp_path):
    cfg = replace(camp["cfg"], out=str(tmp_path / "abl"), ablation_inits=4, members=3,
                  train={"stage1_epochs": 1, "stage2_epochs": 1, "batches_per_epoch": 5})
    table = hs.run_ablation(cfg, threads=2, truth=camp["truth"])
    assert [r.label for r in table.rows] == list(hs.ABLATION_LABELS)
    assert table.variables == ("z500", "t2m") and table.n_inits == 4
    for r in table.rows:
        assert len(r.weekly_acc) == LEAD // 28
        assert all(-1 <= x <= 1 for x in r.weekly_acc)
        want = [(r.per_variable["z500"][i] + r.per_variable["t2m"][i]) / 2 for i in range(2)]
        assert r.weekly_acc == pytest.approx(want, abs=1e-15)
    text = (cfg.out_dir / "ablation.csv").read_text()
    assert text == table.to_csv()
    assert text.splitlines()[0] == "label,variable,week1,week2"
    svg = hs.ablation_svg(table, tmp_path / "abl.svg")
    ET.parse(svg)


def test_run_log(tmp_path):
    h = hs.setup_run_log(tmp_path)
    try:
        hs.log.info("hello %d", 3)
    finally:
        hs.log.removeHandler(h)
        h.close()
    assert "hello 3" in (tmp_path / "run.log").read_text()
