"""Command-line front end: ``hinfgrid <command> [options]``.

Exit codes: 0 success, 1 configuration or operational error, 2 no
stabilizing gain found, 3 certificate failed, 4 simulated instability.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .config import ConfigError, ProjectConfig, load_config, load_network, read_gain, write_gain
from .converter import (
    ConverterParams,
    admittance_cascade,
    build_plant,
    controller_template,
    extract_admittance,
    sensitivity_entry,
    solve_operating_point,
)
from .lti import default_grid, freqresp, identity, sigma_plot, write_sigma_csv
from .network import certify, kron_reduce
from .sim import (
    NoStepError,
    Scenario,
    ScenarioError,
    SimConfig,
    metrics,
    preset_scenarios,
    simulate_network,
    simulate_single,
)
from .synthesis import (
    K_PUBLISHED_PQ,
    K_PUBLISHED_PV,
    StabilizationError,
    SynthesisConfig,
    evaluate_controller,
    lg_family,
    synthesize,
)

EXIT_OK, EXIT_ERROR, EXIT_NO_STABILIZER, EXIT_CERT_FAIL, EXIT_UNSTABLE = 0, 1, 2, 3, 4

__all__ = ["main", "build_parser", "resolve_gains", "packaged_gain", "crossover_frequency"]


def packaged_gain(mode: str = "PV") -> np.ndarray:
    """Gain synthesized with the default configuration and shipped with the package."""
    name = {"PV": "k_hinf_pv.txt", "PQ": "k_hinf_pq.txt"}[mode]
    ref = resources.files("hinfgrid") / "data" / name
    if not ref.is_file():
        raise ConfigError(f"no packaged {mode} gain; run 'hinfgrid synth' and pass it with --k-file")
    with resources.as_file(ref) as p:
        return read_gain(p)


def resolve_gains(cfg: ProjectConfig) -> dict:
    """``{mode: 3x7 gain}`` for the configured controller kind."""
    c = cfg.controller
    if c.kind in ("droop", "pll"):
        K = controller_template(c.kind).K
        return {"PV": K, "PQ": K}
    if c.kind == "published":
        return {"PV": K_PUBLISHED_PV, "PQ": K_PUBLISHED_PQ}
    if c.kind == "file":
        out = {"PV": read_gain(cfg.path(c.file))}
        out["PQ"] = read_gain(cfg.path(c.pq_file)) if c.pq_file else out["PV"]
        return out
    pv = read_gain(cfg.path(c.file)) if c.file else packaged_gain("PV")
    try:
        pq = read_gain(cfg.path(c.pq_file)) if c.pq_file else packaged_gain("PQ")
    except ConfigError:
        pq = K_PUBLISHED_PQ
    return {"PV": pv, "PQ": pq}


def crossover_frequency(omega, mag, level: float = 1 / np.sqrt(2)) -> float:
    """Lowest frequency where ``mag`` rises through ``level`` (log interpolation)."""
    omega, mag = np.asarray(omega, float), np.asarray(mag, float)
    above = np.flatnonzero(mag >= level)
    if above.size == 0:
        return np.nan
    k = above[0]
    if k == 0:
        return float(omega[0])
    w0, w1 = omega[k - 1], omega[k]
    if w0 <= 0:
        return float(w1)
    a0, a1 = np.log(mag[k - 1]), np.log(mag[k])
    f = (np.log(level) - a0) / (a1 - a0)
    return float(np.exp(np.log(w0) + f * (np.log(w1) - np.log(w0))))


def _family(cfg: ProjectConfig, lgs, mode: str | None = None):
    params = cfg.params()
    if mode:
        params = params.with_(mode=mode)
    op = cfg.operating_point
    return lg_family(params, lgs, float(op.get("P_ref", 1.0)), op.get("V_or_Q_ref"))


def _synth_config(cfg: ProjectConfig, lgs) -> SynthesisConfig:
    s = cfg.synthesis
    w = cfg.weighting()
    fam = _family(cfg, lgs, "PQ" if w.mode == "PQ" else None)
    mask = np.ones((3, 7), bool) if s.mask is None else np.asarray(s.mask, bool)
    return SynthesisConfig(fam, w, mask=mask, starts=s.starts, grid=default_grid(s.grid_points),
                           max_iters=s.max_iters, seed=s.seed, box=s.box, margin=s.margin,
                           time_budget=s.time_budget)


def _report(res, path_json: Path, path_txt: Path, extra: dict | None = None) -> None:
    rows = [{"L_g": r.L_g, "norm": r.norm, "stable": r.stable, "abscissa": r.abscissa,
             "certified_norm": r.certified_norm} for r in res.per_plant]
    data = {"K": res.K.K.tolist(), "objective": res.objective, "verification": res.verification,
            "iterations": res.iterations, "per_plant": rows, **(extra or {})}
    path_json.write_text(json.dumps(data, indent=2) + "\n")
    lines = ["K ="]
    lines += ["  " + "  ".join(f"{v:19.12g}" for v in row) for row in res.K.K]
    lines.append(f"objective     {res.objective:.12g}")
    if np.isfinite(res.verification):
        lines.append(f"verification  {res.verification:.12g}")
    lines.append(f"iterations    {res.iterations}")
    lines.append(f"{'L_g':>8} {'norm':>20} {'certified':>20} {'abscissa':>20} stable")
    for r in res.per_plant:
        lines.append(f"{r.L_g:8.4g} {r.norm:20.12g} {r.certified_norm:20.12g} {r.abscissa:20.12g} {r.stable}")
    path_txt.write_text("\n".join(lines) + "\n")


def _lg_list(arg: str | None, default):
    if arg is None:
        return list(default)
    try:
        vals = [float(v) for v in arg.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--lg expects comma-separated numbers, got {arg!r}") from exc
    if not vals or min(vals) <= 0:
        raise ConfigError("--lg values must be positive")
    return vals


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: ProjectConfig, args) -> int:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    sc = _synth_config(cfg, _lg_list(args.lg, cfg.synthesis.lg))
    try:
        res = synthesize(sc, log=lambda m: print(m, file=sys.stderr))
    except StabilizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_STABILIZER
    write_gain(out / "K.txt", res.K)
    _report(res, out / "synthesis_report.json", out / "synthesis_report.txt",
            {"start_objectives": res.start_objectives})
    with open(out / "objective_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["evaluation", "best_objective"])
        for k, v in enumerate(res.trace):
            w.writerow([k, f"{v:.12g}"])
    print((out / "synthesis_report.txt").read_text(), end="")
    return EXIT_OK


def cmd_eval_k(cfg: ProjectConfig, args) -> int:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    sc = _synth_config(cfg, _lg_list(args.lg, cfg.synthesis.lg))
    mode = "PQ" if sc.weights.mode == "PQ" else "PV"
    K = resolve_gains(cfg)[mode]
    res = evaluate_controller(K, sc, certify_norm=args.certify_norm)
    _report(res, out / "eval_report.json", out / "eval_report.txt")
    print((out / "eval_report.txt").read_text(), end="")
    return EXIT_OK


def cmd_certify(cfg: ProjectConfig, args) -> int:
    spec = load_network(cfg)
    red = kron_reduce(spec)
    if args.lambda1_scale != 1.0:
        red = red.scaled(args.lambda1_scale)
    lgs = _lg_list(args.lg, cfg.network.lg)
    if len(lgs) == 1:
        lgs = lgs * len(spec.boundary)
    if len(lgs) != len(spec.boundary):
        raise ConfigError(f"need one L_g per boundary node ({len(spec.boundary)})")
    K = resolve_gains(cfg)[cfg.params().mode]
    devices = []
    for lg in lgs:
        p = cfg.params().with_(L_g=lg, tau=spec.tau, omega_b=spec.omega0)
        plant = build_plant(p, solve_operating_point(p, float(cfg.operating_point.get("P_ref", 1.0)),
                                                     cfg.operating_point.get("V_or_Q_ref")))
        devices.append(admittance_cascade(plant, K))
    names = [f"converter{k + 1}(L_g={lg:g})" for k, lg in enumerate(lgs)]
    rep = certify(devices, red, names, cascaded=True)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "certificate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerows(rep.to_rows())
        w.writerow(["lambda1", f"{rep.lambda1:.12g}"])
        w.writerow(["verdict", rep.verdict])
    for row in rep.to_rows():
        print("  ".join(f"{c:>24}" for c in row))
    print(f"lambda1 = {rep.lambda1:.12g}  margin = {rep.margin:.12g}  verdict = {rep.verdict}")
    return EXIT_OK if rep.passed else EXIT_CERT_FAIL


def _load_scenario(cfg: ProjectConfig, name: str | None) -> Scenario:
    if name is None and cfg.simulation.scenario_file:
        f = cfg.path(cfg.simulation.scenario_file)
        if not f.exists():
            raise ConfigError(f"scenario file {f} not found")
        return Scenario.from_dict(tomli.loads(f.read_text()))
    name = name or cfg.simulation.scenario
    presets = preset_scenarios()
    if name in presets:
        return presets[name]
    f = Path(name)
    if f.suffix == ".toml" and f.exists():
        return Scenario.from_dict(tomli.loads(f.read_text()))
    raise ConfigError(f"unknown scenario {name!r} (presets: {', '.join(presets)})")


def _step_metrics(trace, scenario: Scenario, suffix_of) -> list:
    rows = []
    evs = list(scenario.events)
    for k, ev in enumerate(evs):
        if ev.kind != "p_ref_step":
            continue
        t1 = next((e.time for e in evs[k + 1:] if e.time > ev.time), scenario.duration)
        if trace.unstable and trace.t[-1] < t1:
            continue
        sig = "P_E" + suffix_of(ev)
        try:
            m = metrics(trace, sig, (ev.time, min(t1, trace.t[-1])))
        except NoStepError:
            continue
        rows.append({"event_time": ev.time, "signal": sig, "rise_time_10_90": m.rise_time_10_90,
                     "overshoot_pct": m.overshoot_pct, "settling_time_2pct": m.settling_time_2pct,
                     "stable": m.stable})
    return rows


def cmd_simulate(cfg: ProjectConfig, args) -> int:
    scen = _load_scenario(cfg, args.scenario)
    s = cfg.simulation
    sim_cfg = SimConfig(dt=s.dt, decimation=s.decimation, icd_limit=s.icd_limit, icq_limit=s.icq_limit)
    gains = resolve_gains(cfg)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    summary = {"scenario": scen.name, "controller": cfg.controller.kind, "runs": []}
    unstable = False
    if scen.converters > 1:
        spec = load_network(cfg)
        p = cfg.params().with_(tau=spec.tau, omega_b=spec.omega0)
        lgs = _lg_list(args.lg, []) if args.lg else None
        if lgs:
            scen = Scenario(scen.duration, scen.events, {**scen.initial, "L_g": lgs}, scen.name, scen.converters)
        tr = simulate_network([(p, gains)] * scen.converters, spec, scen, sim_cfg, args.lambda1_scale)
        path = out / f"trace_{scen.name or 'scenario'}.csv"
        tr.to_csv(path)
        rows = _step_metrics(tr, scen, lambda e: f"_{e.converter}")
        summary["runs"].append({"trace": path.name, "unstable": tr.unstable,
                                "unstable_time": None if not tr.unstable else tr.unstable_time, "steps": rows})
        unstable = tr.unstable
    else:
        lgs = [scen.initial["L_g"]] if "L_g" in scen.initial and not args.lg else _lg_list(args.lg, s.lg)
        for lg in lgs:
            sc = Scenario(scen.duration, scen.events, {**scen.initial, "L_g": lg}, scen.name)
            tr = simulate_single(cfg.params(), gains, sc, sim_cfg)
            path = out / f"trace_{scen.name or 'scenario'}_lg{lg:g}.csv"
            tr.to_csv(path)
            rows = _step_metrics(tr, sc, lambda e: "")
            summary["runs"].append({"L_g": lg, "trace": path.name, "unstable": tr.unstable,
                                    "unstable_time": None if not tr.unstable else tr.unstable_time,
                                    "steps": rows})
            unstable |= tr.unstable
    (out / f"metrics_{scen.name or 'scenario'}.json").write_text(json.dumps(summary, indent=2) + "\n")
    for run in summary["runs"]:
        head = f"L_g={run['L_g']:g} " if "L_g" in run else ""
        status = f"UNSTABLE at t={run['unstable_time']:.6g}" if run["unstable"] else "stable"
        print(f"{head}{run['trace']}: {status}")
        for m in run["steps"]:
            print(f"  {m['signal']} step at {m['event_time']:g} s: rise {m['rise_time_10_90']:.6g} s, "
                  f"overshoot {m['overshoot_pct']:.6g} %, settling {m['settling_time_2pct']:.6g} s")
    return EXIT_UNSTABLE if unstable else EXIT_OK


def _entry(arg: str) -> tuple[int, int]:
    try:
        i, j = (int(v) for v in arg.split(","))
    except ValueError as exc:
        raise ConfigError(f"--entry expects i,j, got {arg!r}") from exc
    return i, j


def cmd_sigma(cfg: ProjectConfig, args) -> int:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    grid = default_grid()
    if args.target == "identity":
        fr = sigma_plot(identity(2), grid)
        write_sigma_csv(out / "sigma_identity.csv", fr)
        print(f"max sigma1 = {fr.singular_values[:, 0].max():.12g}")
        return EXIT_OK
    K = resolve_gains(cfg)[cfg.params().mode]
    for lg in _lg_list(args.lg, [0.2, 0.35, 0.5]):
        p = cfg.params().with_(L_g=lg)
        plant = build_plant(p, solve_operating_point(p, float(cfg.operating_point.get("P_ref", 1.0)),
                                                     cfg.operating_point.get("V_or_Q_ref")))
        if args.target == "fy":
            sys_ = admittance_cascade(plant, K)
        elif args.target == "y":
            sys_ = extract_admittance(plant, K)
        else:
            sys_ = sensitivity_entry(plant, K, *_entry(args.entry))
        fr = sigma_plot(sys_, grid)
        name = f"sigma_{args.target}_lg{lg:g}.csv"
        write_sigma_csv(out / name, fr)
        print(f"{name}: max sigma1 = {fr.singular_values[:, 0].max():.12g}")
    return EXIT_OK


def cmd_bode(cfg: ProjectConfig, args) -> int:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    i, j = _entry(args.entry)
    grid = default_grid()
    K = resolve_gains(cfg)[cfg.params().mode]
    for lg in _lg_list(args.lg, [cfg.params().L_g]):
        p = cfg.params().with_(L_g=lg)
        plant = build_plant(p, solve_operating_point(p, float(cfg.operating_point.get("P_ref", 1.0)),
                                                     cfg.operating_point.get("V_or_Q_ref")))
        G = freqresp(sensitivity_entry(plant, K, i, j), grid)[:, 0, 0]
        mag = np.abs(G)
        name = f"bode_P{i}{j}_{cfg.controller.kind}_lg{lg:g}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega_rad_s", "magnitude", "phase_deg"])
            for om, g in zip(grid, G):
                w.writerow([f"{om:.15g}", f"{abs(g):.15g}", f"{np.degrees(np.angle(g)):.15g}"])
        print(f"{name}: crossover {crossover_frequency(grid, mag):.12g} rad/s")
    return EXIT_OK


def cmd_scenarios(cfg: ProjectConfig, args) -> int:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    for name, sc in preset_scenarios().items():
        (out / f"scenario_{name}.toml").write_text(tomli_w.dumps(sc.to_dict()))
        kinds = ", ".join(f"{e.kind}@{e.time:g}" for e in sc.events)
        print(f"{name}: {sc.converters} converter(s), {sc.duration:g} s, events: {kinds}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "certify": cmd_certify, "simulate": cmd_simulate, "sigma": cmd_sigma,
            "bode": cmd_bode, "scenarios": cmd_scenarios, "eval-k": cmd_eval_k}


class _Parser(argparse.ArgumentParser):
    # usage errors are operational errors; code 2 is reserved for the synthesis verdict
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hinfgrid", description="Robust static-gain control of grid converters")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="project TOML file")
    ap.add_argument("--seed", type=int, help="synthesis seed")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--lg", help="comma-separated grid inductances")
    ap.add_argument("--controller", choices=["hinf", "droop", "pll", "published", "file"])
    ap.add_argument("--k-file", help="gain file for --controller file (or hinf override)")
    ap.add_argument("--lambda1-scale", type=float, default=1.0, help="scale network susceptances")
    ap.add_argument("--scenario", help="preset name or scenario TOML file")
    ap.add_argument("--target", default="fy", choices=["fy", "y", "entry", "identity"])
    ap.add_argument("--entry", default="7,7", help="closed-loop entry i,j (1-based)")
    ap.add_argument("--starts", type=int, help="synthesis start count")
    ap.add_argument("--certify-norm", action="store_true", help="eval-k: also certify each plant norm")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.output["dir"] = str(Path(args.out).resolve())
        if args.seed is not None:
            cfg.synthesis.seed = args.seed
        if args.starts is not None:
            cfg.synthesis.starts = args.starts
            cfg.synthesis.validate()
        if args.controller:
            cfg.controller.kind = args.controller
        if args.k_file:
            cfg.controller.file = str(Path(args.k_file).resolve())
        cfg.controller.validate()
        if args.lambda1_scale <= 0:
            raise ConfigError("--lambda1-scale must be positive")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ScenarioError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
