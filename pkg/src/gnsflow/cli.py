"""Command-line entry point: ``gnsflow <subcommand> [--config FILE] [flags]``.

Every subcommand writes a run directory with ``manifest.json`` (config echo,
checksums, versions, wall-clock), ``report.json`` and its CSV/SVG artifacts.
Exit status: 0 when all checks pass, 1 when a check fails (the failures are
listed in ``failures.json``), 2 on configuration or input errors.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import svg
from .drift import SpectralField, rough_drift, smooth_drift
from .flow import WORKERS_ENV, incompressibility_report, iter_ensembles, steps_for, worker_count
from .runio import CSV_LIMIT, RunDirectory, RunFormatError, RunManifest, load_manifest, paths_to_csv, read_json
from .spectral import NoiseBasis, TrigPoly, build_noise_basis, check_structure

log = logging.getLogger("gnsflow")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "basis": {"K": "3", "decay": "2.0"},
    "drift": {"kind": "smooth", "c1": "0.0", "c2": "0.0", "amplitude": "1.0", "bins": "4", "cutoff": "8",
              "seed": "0", "file": ""},
    "simulate": {"grid": "64", "dt": "1e-3", "T": "0.5", "seed": "0", "replicas": "64", "thin": "1",
                 "scheme": "euler", "save_paths": "1", "tol": "0.05"},
    "transport": {"families_seed": "0", "families_n": "6", "partition": "8", "track": "0:0,1:2"},
    "energy": {"ladder": "4,8,16", "slack": "0.05", "min_fraction": ""},
    "minimize": {"target": "", "Kb": "1", "bins": "2", "lambda": "10,100", "iters": "400", "grid": "16",
                 "dt": "1e-2", "T": "0.5", "replicas": "16", "seed": "0", "residual": "0.05"},
    "decompose": {"grid": "64", "particles": "16", "pde_grid": "128", "dt": "1e-3", "T": "0.25", "seed": "0",
                  "replica": "0", "snapshots": "3", "construction": "true", "tol_factorization": "0.05",
                  "tol_divergence": "0.03"},
}

# per-subcommand flags: flag name -> (section, key)
FLAGS = {
    "check-basis": {"K": ("basis", "K"), "decay": ("basis", "decay")},
    "simulate": {"grid": ("simulate", "grid"), "dt": ("simulate", "dt"), "T": ("simulate", "T"),
                 "seed": ("simulate", "seed"), "replicas": ("simulate", "replicas"), "thin": ("simulate", "thin"),
                 "K": ("basis", "K"), "drift": ("drift", "file")},
    "transport": {"grid": ("simulate", "grid"), "dt": ("simulate", "dt"), "T": ("simulate", "T"),
                  "seed": ("simulate", "seed"), "replicas": ("simulate", "replicas"), "K": ("basis", "K"),
                  "drift": ("drift", "file")},
    "energy": {"grid": ("simulate", "grid"), "dt": ("simulate", "dt"), "T": ("simulate", "T"),
               "seed": ("simulate", "seed"), "replicas": ("simulate", "replicas"), "K": ("basis", "K"),
               "drift": ("drift", "file"), "ladder": ("energy", "ladder")},
    "minimize": {"target": ("minimize", "target"), "Kb": ("minimize", "Kb"), "bins": ("minimize", "bins"),
                 "lambda": ("minimize", "lambda"), "iters": ("minimize", "iters"), "seed": ("minimize", "seed"),
                 "K": ("basis", "K")},
    "decompose": {"drift": ("drift", "file"), "grid": ("decompose", "grid"), "dt": ("decompose", "dt"),
                  "T": ("decompose", "T"), "seed": ("decompose", "seed"), "K": ("basis", "K")},
}


class ConfigError(ValueError):
    pass


class Config:
    """INI configuration with defaults; values are parsed on access so errors name the key."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "Config":
        p = configparser.ConfigParser(interpolation=None)
        p.optionxform = str
        p.read_dict(DEFAULTS)
        if path:
            if not Path(path).is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                with open(path) as fh:
                    p.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
        for (section, key), value in overrides.items():
            if not p.has_section(section):
                p.add_section(section)
            p.set(section, key, str(value))
        return cls(p)

    def raw(self, section: str, key: str) -> str:
        try:
            return self.parser.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            raise ConfigError(f"missing config key [{section}] {key}") from None

    def _conv(self, section, key, fn, what):
        v = self.raw(section, key)
        try:
            return fn(v)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {v!r} is not {what}") from None

    def int(self, section, key):
        return self._conv(section, key, int, "an integer")

    def float(self, section, key):
        return self._conv(section, key, float, "a number")

    def bool(self, section, key):
        v = self.raw(section, key).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} = {v!r} is not a boolean")

    def floats(self, section, key):
        return self._conv(section, key, lambda v: tuple(float(x) for x in v.split(",") if x.strip()), "a number list")

    def ints(self, section, key):
        return self._conv(section, key, lambda v: tuple(int(x) for x in v.split(",") if x.strip()), "an integer list")

    def echo(self) -> dict:
        return {s: dict(self.parser.items(s)) for s in self.parser.sections()}


# -- shared builders ------------------------------------------------------------------------------


def build_basis(cfg: Config) -> NoiseBasis:
    K = cfg.int("basis", "K")
    if K < 0:
        raise ConfigError(f"[basis] K must be >= 0, got {K}")
    if K == 0:
        return NoiseBasis.empty()
    try:
        return build_noise_basis(K, cfg.float("basis", "decay"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_drift(cfg: Config, T: float) -> SpectralField:
    path = cfg.raw("drift", "file").strip()
    try:
        if path:
            if not Path(path).is_file():
                raise ConfigError(f"drift file not found: {path}")
            d = SpectralField.from_json(json.loads(Path(path).read_text()))
            if abs(d.T - T) > 1e-12:
                raise ConfigError(f"drift file covers T={d.T}, the run uses T={T}")
            return d
        kind = cfg.raw("drift", "kind").strip()
        if kind == "zero":
            return SpectralField.zero(T)
        if kind == "constant":
            return SpectralField.constant((cfg.float("drift", "c1"), cfg.float("drift", "c2")), T)
        if kind == "smooth":
            return smooth_drift(T, cfg.float("drift", "amplitude"))
        if kind == "rough":
            return rough_drift(T, cfg.int("drift", "bins"), cfg.int("drift", "cutoff"), cfg.int("drift", "seed"),
                               cfg.float("drift", "amplitude"))
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid drift: {exc}") from None
    raise ConfigError(f"[drift] kind must be zero, constant, smooth or rough, got {kind!r}")


def _steps(T: float, dt: float, section: str) -> int:
    try:
        return steps_for(T, dt)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _check(name: str, value: float, limit: float, passed: bool | None = None, kind: str = "max") -> dict:
    if passed is None:
        passed = value <= limit if kind == "max" else value >= limit
    return {"name": name, "value": float(value), "limit": float(limit), "kind": kind, "pass": bool(passed)}


# -- subcommands ----------------------------------------------------------------------------------


def cmd_check_basis(cfg: Config, run: RunDirectory) -> dict:
    basis = build_basis(cfg)
    rep = check_structure(basis)
    run.json("basis.json", basis.to_json())
    checks = [_check("max_divergence", rep.max_divergence, rep.tol),
              _check("max_covariance_deviation", rep.max_covariance_deviation, rep.tol),
              _check("max_self_transport", rep.max_self_transport, rep.tol)]
    return {"structure": rep.to_json(), "n_fields": len(basis), "checks": checks}


def _sim_params(cfg: Config) -> dict:
    p = {k: cfg.int("simulate", k) for k in ("grid", "seed", "replicas", "thin", "save_paths")}
    p.update(dt=cfg.float("simulate", "dt"), T=cfg.float("simulate", "T"), scheme=cfg.raw("simulate", "scheme"))
    if p["grid"] < 2 or p["replicas"] < 1 or p["thin"] < 1:
        raise ConfigError("[simulate] grid >= 2, replicas >= 1 and thin >= 1 are required")
    S = _steps(p["T"], p["dt"], "simulate")
    if S % p["thin"]:
        raise ConfigError(f"[simulate] thin={p['thin']} does not divide the step count {S}")
    if p["scheme"] not in ("euler", "heun"):
        raise ConfigError(f"[simulate] scheme must be euler or heun, got {p['scheme']!r}")
    return p


def cmd_simulate(cfg: Config, run: RunDirectory) -> dict:
    p = _sim_params(cfg)
    basis = build_basis(cfg)
    drift = build_drift(cfg, p["T"])
    tests = [TrigPoly.cos((1, 0)), TrigPoly.sin((1, 0)), TrigPoly.cos((0, 1)), TrigPoly.sin((0, 1))]
    devs, times, saved = [], None, []
    for chunk in iter_ensembles(basis, drift, p["grid"], p["dt"], p["seed"], p["replicas"], thin=p["thin"],
                                scheme=p["scheme"]):
        rep = incompressibility_report(chunk, tests)
        devs.append(rep.deviations)
        times = rep.times
        for e in chunk:
            if e.replica < p["save_paths"]:
                run.paths(f"paths_r{e.replica:03d}.bin", e)
                saved.append(e)
    dev = np.concatenate(devs)
    if saved and sum(e.positions.shape[0] * e.N for e in saved) <= CSV_LIMIT:
        paths_to_csv(run.path("paths.csv"), saved)
        run.add("paths.csv")
    per_t = np.max(np.abs(dev), axis=(0, 2))
    run.csv("incompressibility.csv", ["time", "max_deviation"], [(repr(float(t)), repr(float(v)))
                                                                 for t, v in zip(times, per_t)])
    run.text("incompressibility.svg", svg.line_plot([("max |dev|", times, per_t)], "Incompressibility",
                                                    "t", "max deviation"))
    tol = cfg.float("simulate", "tol")
    return {"basis_id": basis.id, "drift_id": drift.id, "replicas": p["replicas"], "N": p["grid"] ** 2,
            "incompressibility": {"max_deviation": float(per_t.max())},
            "checks": [_check("incompressibility", float(per_t.max()), tol)]}


# axiom -> (report key, nominal limit, kind); the pass flag itself comes from the sweep
AXIOM_METRICS = {
    "1_final_configuration": ("z_max", 3.0, "max"),
    "3_bracket": ("max_relative_error", 0.10, "max"),
    "5_drift_bound": ("max_ratio", 1.10, "max"),
    "6_start": ("max_dev", 1e-6, "max"),
    "7_nonnegative": ("min", -1e-9, "min"),
    "8_bounded": ("max_excess", 1e-6, "max"),
}


def cmd_transport(cfg: Config, run: RunDirectory) -> dict:
    from .energy import GradientFamily, PartitionFamily, generalized_energy_lb
    from .flow import endpoint_coupling
    from .transport import axiom_sweep, martingale_residual, sweep_families, theta_series
    from .variational import HeatShiftConfiguration

    p = _sim_params(cfg)
    if p["replicas"] < 2:
        raise ConfigError("[simulate] transport needs at least 2 replicas")
    basis = build_basis(cfg)
    drift = build_drift(cfg, p["T"])
    fam = sweep_families(cfg.int("transport", "families_seed"), cfg.int("transport", "families_n"))
    try:
        track = [tuple(int(v) for v in s.split(":")) for s in cfg.raw("transport", "track").split(",") if s.strip()]
    except ValueError:
        raise ConfigError("[transport] track must look like 0:0,1:2") from None
    if any(not (0 <= j < len(fam.phis) and 0 <= k < len(fam.psis)) for j, k in track):
        raise ConfigError("[transport] track index out of range")
    part, grads = PartitionFamily(cfg.int("transport", "partition")), GradientFamily()
    series = energy = None
    for chunk in iter_ensembles(basis, drift, p["grid"], p["dt"], p["seed"], p["replicas"], thin=p["thin"],
                                scheme=p["scheme"]):
        s = theta_series(chunk, fam.phis, fam.psis, track=track)
        e = theta_series(chunk, part.functions(), grads.functions, keep_increments=False)
        series = s if series is None else series.merged(s)
        energy = e if energy is None else energy.merged(e)
    lb = generalized_energy_lb(energy, part, grads)
    if drift.n_bins == 1 and drift.fields[0].degree == 0:
        c = drift.fields[0](np.zeros((1, 2)))[0]
        target = HeatShiftConfiguration((float(c[0]) * p["T"], float(c[1]) * p["T"]),
                                        p["T"] * basis.normalization if len(basis) else 0.0)
        target = target.moments(fam.phis, fam.psis)
        target_kind = "heat_shift"
    else:
        # independent replicas of the same seed as the reference coupling
        ref = [e for ch in iter_ensembles(basis, drift, p["grid"], p["dt"], p["seed"], p["replicas"],
                                          thin=_steps(p["T"], p["dt"], "simulate"), replica_offset=p["replicas"])
               for e in ch]
        target = endpoint_coupling(ref)
        target_kind = "empirical"
    sweep = axiom_sweep(series, fam, target, lb.value)
    checks = []
    for name, v in sweep.items():
        if not isinstance(v, dict):
            continue
        if name in AXIOM_METRICS:
            key, limit, kind = AXIOM_METRICS[name]
            checks.append(_check(name, v[key], limit, v["pass"], kind))
        else:
            checks.append(_check(name, 0.0, 0.0, v["pass"], kind="flag"))
    doc = {"axioms": sweep, "energy_lb": lb.to_json(), "target": target_kind}
    if p["thin"] == 1 and series.tracked:
        mres = martingale_residual(series)
        doc["martingale_residual"] = mres
        checks.append(_check("martingale_residual", mres["max_relative"], 0.02))
    mean, se = series.theta.mean(axis=0), series.theta.std(axis=0, ddof=1) / np.sqrt(series.R)
    run.csv("theta_mean.csv", ["time", "j", "k", "mean", "stderr"],
            [(repr(float(t)), j, k, repr(float(mean[n, j, k])), repr(float(se[n, j, k])))
             for n, t in enumerate(series.times) for j in range(mean.shape[1]) for k in range(mean.shape[2])])
    if track:
        j, k = track[0]
        run.text("theta.svg", svg.line_plot(
            [(f"replica {r}", series.times, series.theta[r, :, j, k]) for r in range(min(series.R, 6))],
            f"Theta_t(phi_{j}, psi_{k})", "t", "Theta"))
    doc["families"] = {"kind": "sweep", "seed": cfg.int("transport", "families_seed"),
                       "n": cfg.int("transport", "families_n"), "partition": part.m}
    doc["checks"] = checks
    return doc


def cmd_energy(cfg: Config, run: RunDirectory) -> dict:
    from .energy import EnergyConfig, energy_bound_check

    p = _sim_params(cfg)
    basis = build_basis(cfg)
    drift = build_drift(cfg, p["T"])
    ladder = cfg.ints("energy", "ladder")
    if not ladder or min(ladder) < 1:
        raise ConfigError("[energy] ladder needs positive partition sizes")
    mf = cfg.raw("energy", "min_fraction").strip()
    ecfg = EnergyConfig(grid_side=p["grid"], dt=p["dt"], replicas=p["replicas"], seed=p["seed"], ladder=ladder,
                        slack=cfg.float("energy", "slack"), thin=p["thin"])
    out = energy_bound_check(basis, drift, ecfg, min_fraction=float(mf) if mf else None)
    rows = [(r["m"], repr(r["eps"]), repr(r["value"]), repr(r["stderr"]), repr(r["time_error"]))
            for r in out["ladder"]]
    run.csv("ladder.csv", ["m", "eps", "lower_bound", "stderr", "time_error"], rows)
    ms = [r["m"] for r in out["ladder"]]
    run.text("ladder.svg", svg.line_plot(
        [("lower bound", ms, [r["value"] for r in out["ladder"]]),
         ("flow energy", ms, [out["flow_energy"]] * len(ms))], "Energy refinement ladder", "m", "energy"))
    E = out["flow_energy"]
    checks = [_check("bound", max(r["value"] for r in out["ladder"]), E * (1 + ecfg.slack) + 1e-12),
              _check("gap_shrinks", 0.0, 0.0, out["gap_shrinks"], kind="flag")]
    if mf:
        checks.append(_check("final_fraction", out["final_fraction"], float(mf), kind="min"))
    out["families"] = {"kind": "partition_x_embedding", "ladder": list(ladder)}
    out["checks"] = checks
    return out


def load_target(path: str, basis: NoiseBasis, sim):
    from .variational import HeatShiftConfiguration, reference_configuration

    if not path:
        raise ConfigError("[minimize] target file is required (--target)")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"target file not found: {path}")
    try:
        doc = json.loads(p.read_text())
        kind = doc.get("kind")
        if kind == "heat_shift":
            return HeatShiftConfiguration(tuple(float(v) for v in doc.get("shift", (0.0, 0.0))),
                                          float(doc.get("heat_time", 0.0))), doc
        if kind == "drift":
            d = SpectralField.from_json(doc["drift"])
            if abs(d.T - sim.T) > 1e-12:
                raise ConfigError(f"target drift covers T={d.T}, the run uses T={sim.T}")
            return reference_configuration(d, basis, sim.settings), doc
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid target file {path}: {exc}") from None
    raise ConfigError(f"target kind must be heat_shift or drift, got {kind!r}")


def cmd_minimize(cfg: Config, run: RunDirectory) -> dict:
    from types import SimpleNamespace

    from .variational import DriftParameterization, OptimizerConfig, SimulationSettings, minimize_energy

    T = cfg.float("minimize", "T")
    dt = cfg.float("minimize", "dt")
    _steps(T, dt, "minimize")
    sim = SimulationSettings(grid_side=cfg.int("minimize", "grid"), dt=dt, replicas=cfg.int("minimize", "replicas"),
                             seed=cfg.int("minimize", "seed"))
    basis = build_basis(cfg)
    target, tdoc = load_target(cfg.raw("minimize", "target").strip(), basis, SimpleNamespace(T=T, settings=sim))
    param = DriftParameterization(cfg.int("minimize", "Kb"), cfg.int("minimize", "bins"), T)
    opt = OptimizerConfig(seed=sim.seed, lambdas=cfg.floats("minimize", "lambda"), budget=cfg.int("minimize", "iters"),
                          residual_threshold=cfg.float("minimize", "residual"))
    res = minimize_energy(target, basis, param, opt, sim)
    doc = res.to_json()
    run.json("minimization.json", doc)
    run.json("drift.json", res.drift.to_json())
    keys = ["iteration", "evaluations", "lambda", "energy", "residual", "objective"]
    run.csv("convergence.csv", keys, [[repr(h[k]) if isinstance(h[k], float) else h[k] for k in keys]
                                      for h in res.history])
    it = [h["iteration"] for h in res.history]
    run.text("convergence.svg", svg.line_plot(
        [("energy", it, [h["energy"] for h in res.history]), ("residual", it, [h["residual"] for h in res.history])],
        "Energy minimization", "iteration", "value", logy=True))
    checks = [_check("moment_residual", res.residual, opt.residual_threshold),
              _check("evaluations", res.evaluations, opt.budget)]
    return {"energy": res.energy, "residual": res.residual, "evaluations": res.evaluations, "method": res.method,
            "target": tdoc, "families": {"kind": "constraint_moments", "n": 28}, "checks": checks}


def cmd_decompose(cfg: Config, run: RunDirectory) -> dict:
    from .decomposition import (
        construction_check, factorize, martingale_flow_with_jacobian, transport_pde_theta, weak_divergence_check,
    )

    T, dt = cfg.float("decompose", "T"), cfg.float("decompose", "dt")
    S = _steps(T, dt, "decompose")
    side, pde = cfg.int("decompose", "grid"), cfg.int("decompose", "pde_grid")
    if side < 2 or pde < 2:
        raise ConfigError("[decompose] grid and pde_grid must be >= 2")
    basis = build_basis(cfg)
    drift = build_drift(cfg, T)
    construction = cfg.bool("decompose", "construction")
    store = construction and side <= 64
    rec = martingale_flow_with_jacobian(basis, side, dt, T, cfg.int("decompose", "seed"),
                                        cfg.int("decompose", "replica"), store=store)
    fac = factorize(drift, rec, cfg.int("decompose", "particles"))
    tests = [TrigPoly.cos((1, 0)), TrigPoly.sin((0, 1)), TrigPoly.cos((1, 1))]
    div = weak_divergence_check(rec, drift, tests, cfg.float("decompose", "tol_divergence"))
    det = rec.det_report()
    phi = TrigPoly.constant(1.0) + TrigPoly.cos((1, 0)) * 0.5
    th = transport_pde_theta(rec, drift, phi, pde)
    cons = th.conservation()
    n_snap = max(cfg.int("decompose", "snapshots"), 1)
    idx = sorted(set(np.linspace(0, S, n_snap).round().astype(int).tolist()))
    for n in idx:
        grid = th.values[n]
        run.csv(f"theta_n{n:05d}.csv", ["i"] + [f"j{j}" for j in range(grid.shape[1])],
                [[i] + [repr(float(v)) for v in row] for i, row in enumerate(grid)])
        run.text(f"theta_n{n:05d}.svg", svg.heatmap(grid, f"theta at t = {n * dt:.4g}"))
    checks = [_check("factorization_distance", fac["max_distance"], cfg.float("decompose", "tol_factorization")),
              _check("weak_divergence", div["max_residual"], div["tol"]),
              _check("det_deviation", det["max_dev"], float(det["bound"]),
                     det["positive"] and det["max_dev"] <= det["bound"]),
              _check("mass_drift", cons["mass_drift"], 1e-6),
              _check("l2_decay", cons["l2_decay"], 0.02)]
    doc = {"factorization": fac, "weak_divergence": div, "det": det, "conservation": cons, "snapshots": idx}
    if store:
        phis = [TrigPoly.constant(1.0) + TrigPoly.cos((1, 0)) * 0.5,
                TrigPoly.constant(1.0) + TrigPoly.sin((0, 1)) * 0.5]
        psis = [TrigPoly.cos((1, 0)), TrigPoly.sin((0, 1)), TrigPoly.cos((1, 1))]
        built = construction_check(rec, drift, phis, psis, side=pde)
        built.pop("conservation", None)
        doc["construction"] = built
        checks += [_check("construction_energy", built["energy_lb"], built["drift_energy"] * 1.05 + 1e-12),
                   _check("construction_match", built["max_flow_mismatch"], 0.05),
                   _check("construction_identity", built["identity_error"], 0.10)]
    doc["families"] = {"kind": "decomposition", "tests": len(tests)}
    doc["checks"] = checks
    return doc


COMMANDS = {"check-basis": cmd_check_basis, "simulate": cmd_simulate, "transport": cmd_transport,
            "energy": cmd_energy, "minimize": cmd_minimize, "decompose": cmd_decompose}


# -- report ---------------------------------------------------------------------------------------


def _run_dt(doc: dict) -> float | None:
    cfg = doc["manifest"]["config"]
    for section in ("decompose", "simulate", "minimize"):
        if doc["manifest"]["command"] == section or (section == "simulate" and "simulate" in cfg):
            try:
                return float(cfg[section]["dt"])
            except (KeyError, ValueError):
                return None
    return None


def merge_reports(run_dirs) -> dict:
    """Combine run reports; runs of one command must share their test families."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    runs = []
    for d in run_dirs:
        try:
            m = load_manifest(d)
            rep = read_json(Path(d) / "report.json")
        except (OSError, RunFormatError) as exc:
            raise ConfigError(f"{d}: {exc}") from None
        runs.append({"dir": str(d), "manifest": m.to_json(), "report": rep})
    by_cmd: dict = {}
    for r in runs:
        by_cmd.setdefault(r["manifest"]["command"], []).append(r)
    for cmd, group in by_cmd.items():
        fams = {repr(g["report"].get("families")) for g in group}
        if len(fams) > 1:
            raise ConfigError(f"runs of {cmd!r} use different test families; refusing to merge")
    rows = []
    for cmd, group in by_cmd.items():
        group.sort(key=lambda g: -(_run_dt(g) or 0.0))
        for i, g in enumerate(group):
            for c in g["report"].get("checks", []):
                row = {"run": g["dir"], "command": cmd, "dt": _run_dt(g), **c}
                if len(group) > 1 and i > 0:
                    prev = next((p for p in group[i - 1]["report"].get("checks", []) if p["name"] == c["name"]), None)
                    if prev is not None and c["kind"] != "flag" and c["value"] != 0:
                        row["convergence_ratio"] = prev["value"] / c["value"]
                rows.append(row)
    return {"runs": [{"dir": r["dir"], "command": r["manifest"]["command"], "exit_code": r["manifest"]["exit_code"]}
                     for r in runs],
            "rows": rows, "all_pass": all(r["pass"] for r in rows)}


def render_table(merged: dict) -> str:
    ratio = any("convergence_ratio" in r for r in merged["rows"])
    head = ["run", "command", "check", "value", "limit", "pass"] + (["convergence_ratio"] if ratio else [])
    lines = [" | ".join(head)]
    for r in merged["rows"]:
        cells = [r["run"], r["command"], r["name"], f"{r['value']:.6g}", f"{r['limit']:.6g}",
                 "PASS" if r["pass"] else "FAIL"]
        if ratio:
            cells.append(f"{r['convergence_ratio']:.4g}" if "convergence_ratio" in r else "")
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_report(run_dirs, out) -> int:
    merged = merge_reports(run_dirs)
    rd = RunDirectory(out, RunManifest("report", {"runs": [str(d) for d in run_dirs]}, 0))
    rd.json("report.json", merged)
    rd.text("summary.txt", render_table(merged))
    ratio_rows = [r for r in merged["rows"] if "convergence_ratio" in r]
    keys = ["run", "command", "name", "dt", "value", "limit", "pass", "convergence_ratio"]
    rd.csv("summary.csv", keys, [[r.get(k, "") for k in keys] for r in merged["rows"]])
    if ratio_rows:
        names = sorted({r["name"] for r in merged["rows"] if r.get("dt") and r["kind"] != "flag"})
        series = [(n, [r["dt"] for r in merged["rows"] if r["name"] == n], [r["value"] for r in merged["rows"]
                                                                          if r["name"] == n]) for n in names]
        rd.text("convergence.svg", svg.line_plot(series, "Check values against dt", "dt", "value", logy=True))
    code = EXIT_OK if merged["all_pass"] else EXIT_FAIL
    rd.manifest.exit_code = code
    rd.close()
    sys.stdout.write(render_table(merged))
    return code


# -- entry point ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnsflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, flags in FLAGS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file; flags override its keys")
        sp.add_argument("--out", help="run directory (default runs/<command>)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key")
        sp.add_argument("--workers", type=int, help=f"worker threads (else ${WORKERS_ENV})")
        for flag in flags:
            sp.add_argument(f"--{flag}", dest=f"flag_{flag}")
    rp = sub.add_parser("report")
    rp.add_argument("runs", nargs="*")
    rp.add_argument("--out", default="runs/report")
    return ap


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        try:
            key, value = item.split("=", 1)
            section, k = key.split(".", 1)
        except ValueError:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}") from None
        out[(section, k)] = value
    for flag, target in FLAGS[args.command].items():
        v = getattr(args, f"flag_{flag}")
        if v is not None:
            out[target] = v
    return out


def _failures(run: RunDirectory, failures: list) -> None:
    run.json("failures.json", {"failures": failures})


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "report":
        try:
            return cmd_report(args.runs, args.out)
        except ConfigError as exc:
            sys.stderr.write(f"error: {exc}\n")
            return EXIT_CONFIG
    out = args.out or f"runs/{args.command}"
    t0 = time.time()
    try:
        cfg = Config.load(args.config, _overrides(args))
        if args.workers is not None:
            os.environ[WORKERS_ENV] = str(worker_count(args.workers))
        seed_key = {"minimize": ("minimize", "seed"), "decompose": ("decompose", "seed")}.get(
            args.command, ("simulate", "seed"))
        manifest = RunManifest(args.command, cfg.echo(), cfg.int(*seed_key))
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    run = RunDirectory(out, manifest)
    try:
        doc = COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        _failures(run, [{"name": "config", "message": str(exc)}])
        manifest.exit_code = EXIT_CONFIG
        manifest.wall_clock = time.time() - t0
        run.close()
        return EXIT_CONFIG
    failed = [c for c in doc.get("checks", []) if not c["pass"]]
    run.json("report.json", {"command": args.command, **doc})
    code = EXIT_FAIL if failed else EXIT_OK
    if failed:
        _failures(run, failed)
    manifest.exit_code = code
    manifest.wall_clock = time.time() - t0
    run.close()
    for c in doc.get("checks", []):
        detail = "" if c["kind"] == "flag" else f"  {c['value']:.6g}  (limit {c['limit']:.6g})"
        sys.stdout.write(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}{detail}\n")
    sys.stdout.write(f"run directory: {out}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
