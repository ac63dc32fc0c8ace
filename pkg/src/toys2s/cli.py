"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 partial results.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import forecaster as fc
from . import harness as hs
from . import indices as ix
from .gridstore import ArchiveError, ClimatologyError, write_archive
from .toyearth import IntegrationDiverged, gen_truth

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
MJO_FIELDS = ("olr", "z500", "t2m")  # the toy has no winds; z500 and t2m stand in


def _config(args) -> hs.ExperimentConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise hs.ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise hs.ConfigError("config must be a JSON object")
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    return hs.ExperimentConfig.from_dict(d)


def cmd_gen_truth(cfg, args):
    years = args.years or cfg.truth_years
    truth = gen_truth(cfg.toy_params(), years, cfg.truth_seed)
    path = write_archive(truth, cfg.out_dir / "truth")
    print(f"truth: {truth.n_times} steps -> {path}")
    return EXIT_OK


def cmd_train(cfg, args):
    truth = hs.load_or_generate_truth(cfg)
    hs.check_years(cfg, truth)
    model = hs.train_or_load(cfg, truth, args.mode or cfg.mode)
    print(f"model {model.arch.mode}: {model.trainable_count()} parameters")
    return EXIT_OK


def cmd_climatology(cfg, args):
    truth = hs.load_or_generate_truth(cfg)
    hs.check_years(cfg, truth)
    model = hs.train_or_load(cfg, truth)
    windows = hs.default_windows(cfg.lead_steps)
    clims = hs.build_climatologies(cfg, truth, model.variables, windows)
    if "model" in cfg.climatology:
        sigma = hs.anomaly_sigma(truth, clims.observed["step"], cfg.train_years, model.variables)
        sweep = hs.SurrogateSystem(model, cfg.perturbation_config(),
                                   cfg.clim_members or cfg.members, sigma)
        hs.model_climatologies(cfg, truth, sweep, windows, args.threads)
    print(f"climatologies -> {cfg.out_dir / 'clim'}")
    return EXIT_OK


def _finish(result, out_dir):
    print(f"skill report -> {result.paths.get('skill')}")
    if result.flags:
        for k, v in sorted(result.flags.items()):
            print(f"flag {k}: {v}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_hindcast(cfg, args):
    return _finish(hs.run_hindcast(cfg, args.threads), cfg.out_dir)


def cmd_verify(cfg, args):
    return _finish(hs.verify_saved(cfg, args.threads), cfg.out_dir)


def cmd_error_growth(cfg, args):
    curves = hs.run_error_growth(cfg, args.threads)
    for v in sorted(curves):
        c = curves[v]
        print(f"{v}: final-quarter max {c.final_quarter_max():.4f}, saturation {c.saturation:.4f}")
    return EXIT_OK


def cmd_ablation(cfg, args):
    try:
        table = hs.run_ablation(cfg, args.threads)
    except hs.PartialResults as exc:
        print(f"ablation aborted: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    print(table.to_csv(), end="")
    return EXIT_PARTIAL if table.flags else EXIT_OK


def cmd_report(cfg, args):
    skill = cfg.out_dir / "skill.csv"
    if not skill.exists():
        raise hs.ConfigError(f"no skill report at {skill}")
    report = hs.mt.SkillReport.read_csv(skill)
    maps_dir = cfg.out_dir / "maps"
    if (maps_dir / "manifest.json").exists():
        report.maps = hs.read_maps(maps_dir)
    written = hs.emit_report(report, cfg.out_dir / "report", formats=("csv", "svg"))
    print(f"{len(written)} files -> {cfg.out_dir / 'report'}")
    return EXIT_OK


def _anomalies(truth, cfg, variables):
    windows = {"step": hs.lead_windows("step", 0)}
    clim = hs.build_climatologies(cfg, truth, variables, windows).observed["step"]
    kidx = clim.key_index(hs.calendar_key(truth.times))
    return {v: truth.field(v).astype(np.float64) - clim.mean[clim.index(v)][kidx]
            for v in variables}


def cmd_index(cfg, args):
    truth = hs.load_or_generate_truth(cfg)
    hs.check_years(cfg, truth)
    grid = truth.grid
    years = hs.year_of(truth.times)
    train = (years >= cfg.train_years[0]) & (years <= cfg.train_years[1])
    test = (years >= cfg.test_years[0]) & (years <= cfg.test_years[1])
    out = cfg.out_dir / "indices"
    out.mkdir(parents=True, exist_ok=True)
    if args.which == "mjo":
        anom = _anomalies(truth, cfg, MJO_FIELDS)
        n = ix.FILTER_DAYS * hs.STEPS_PER_DAY
        bands = [ix.band_mean(ix.intraseasonal_filter(anom[v]), grid) for v in MJO_FIELDS]
        t = truth.times[n:]
        tr, te = train[n:], test[n:]
        basis = ix.rmm_basis(*(b[tr] for b in bands))
        index = ix.rmm_project(*(b[te] for b in bands), basis, times=t[te])
        (out / "mjo.csv").write_text(ix.index_csv(index))
        np.savetxt(out / "hovmoller.csv", ix.hovmoller(anom["olr"][test], grid), delimiter=",",
                   fmt="%.9g")
        print(f"mjo: {index.times.size} samples -> {out / 'mjo.csv'}")
    elif args.which == "nao":
        z = _anomalies(truth, cfg, ("z500",))["z500"]
        model = ix.fit_nao(z[train], grid)
        index = model.index(z[test], truth.times[test])
        (out / "nao.csv").write_text(ix.index_csv(index))
        print(f"nao: {index.times.size} samples -> {out / 'nao.csv'}")
    else:
        z = _anomalies(truth, cfg, ("z500",))["z500"]
        zs = ix.standardized_anomalies(z[test], ref=z[train])
        zref = ix.standardized_anomalies(z[train], ref=z[train])
        for name, centers in sorted(ix.load_centers().items()):
            ref_raw = ix.point_pattern_raw(zref, grid, centers)
            sd = float(np.sqrt((ref_raw * ref_raw).mean()))
            index = ix.point_pattern_index(zs, grid, centers, name, ref_std=sd,
                                           times=truth.times[test])
            (out / f"{name.lower()}.csv").write_text(ix.index_csv(index))
        print(f"teleconnection indices -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-truth": cmd_gen_truth,
    "train": cmd_train,
    "hindcast": cmd_hindcast,
    "climatology": cmd_climatology,
    "verify": cmd_verify,
    "index": cmd_index,
    "error-growth": cmd_error_growth,
    "ablation": cmd_ablation,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--out", help="output directory")
    p = argparse.ArgumentParser(prog="toys2s", parents=[common],
                                description="Toy subseasonal forecasting experiments")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-truth", parents=[common], help="integrate the toy Earth")
    g.add_argument("--years", type=int)
    t = sub.add_parser("train", parents=[common], help="train the surrogate")
    t.add_argument("--mode", choices=sorted(fc.MODES))
    sub.add_parser("hindcast", parents=[common], help="run and verify a hindcast campaign")
    sub.add_parser("climatology", parents=[common], help="observed and model climatologies")
    sub.add_parser("verify", parents=[common], help="re-verify stored hindcasts")
    i = sub.add_parser("index", parents=[common], help="MJO, NAO or teleconnection indices")
    i.add_argument("which", choices=("mjo", "nao", "tele"))
    sub.add_parser("error-growth", parents=[common], help="error growth over 360 steps")
    sub.add_parser("ablation", parents=[common], help="five-row ablation ladder")
    sub.add_parser("report", parents=[common], help="CSV and SVG report from skill.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not (0 <= args.seed < 2 ** 64):
        print("error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    handler = None
    try:
        cfg = _config(args)
        handler = hs.setup_run_log(cfg.out_dir)
        hs.log.info("command %s threads=%d", args.command, args.threads)
        return COMMANDS[args.command](cfg, args)
    except (hs.ConfigError, ArchiveError, ClimatologyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fc.TrainingDiverged, fc.NonFiniteGradient, IntegrationDiverged,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except hs.PartialResults as exc:
        print(f"partial results: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    finally:
        if handler is not None:
            hs.log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
