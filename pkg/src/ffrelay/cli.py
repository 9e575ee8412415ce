"""Command-line driver: ``ffrelay <command> [--key value ...]``.

Parameters come from an optional flat ``key = value`` config file and are
overridden by command-line flags.  Lists are comma separated and any item may
be a ``start:stop:step`` range (stop included).  Every run writes its CSV/SVG
outputs plus ``manifest.json``; ``ffrelay --from-manifest FILE`` replays it.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .arma import ArmaProcess, compose_effective_noise, to_state_space
from .bounds import (EXACT, RELAXED, best_rate_for_model, best_rate_for_taps, p2p_rate, pad_model,
                     parallel_bound, quartic_bound_ma1, ma1_relay_noise, series_bound, single_tap_sweep)
from .errors import ConfigError, FfRelayError, InfeasibleTaps
from .output import atomic_write, csv_text, json_text, svg_lines

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
MODE_NAMES = {"relaxed": RELAXED, "exact": EXACT}
GLOBAL = {"seed": 0, "bits": False, "workers": 1}

COMMANDS: dict[str, dict] = {
    "bound-ma1": {"rho": 1.0, "sigma_w2": 1.0, "chi": 0.0, "gamma": 1.0, "resolution": 1e-4},
    "bound-riccati": {"network": "", "taps": [0.0], "rho": 1.0, "sigma_w2": 1.0, "gamma": 1.0,
                      "mode": "relaxed"},
    "bound-parallel": {"rho": 1.0, "sigma2": [1.0, 1.0], "gamma": [1.0, 1.0]},
    "bound-series": {"rho": 1.0, "sigma2": [1.0, 1.0], "gamma": [1.0, 1.0], "npts": 41},
    "block": {"taps": [1.0, 0.0], "rho": 1.0, "sigma_w2": 0.1, "gamma": 1.1, "n": 20,
              "normalization": "message"},
    "table1": {"n": 20, "rho": 1.0, "sigma_w2": 0.1, "trials": 1000, "gammas": [1.3, 1.8, 2.5, 5.0],
               "fixed_taps": [1.0, 0.0], "fixed_gamma": 1.1, "normalization": "message"},
    "noisyfb": {"rho": 1.0, "sigma_w2": 1.0, "sigma_n2": 0.0, "gamma": 2.0},
    "noisyfb-sweep": {"rho": 1.0, "sigma_w2": 1.0, "sigma_n2": 0.0, "gamma": 2.0, "h1_step": 1e-3,
                      "feedback": True},
    "simulate": {"rho": 1.0, "taps": [0.0], "sigma_w2": 1.0, "n": 200, "m": 2, "trials": 10000,
                 "n_list": [], "rate_fraction": 0.8},
    "fig3": {"rho": 1.0, "sigma_w2": 1.0, "chi": [0.0, 0.25, 0.5], "gamma": [0.0, 2.0, 0.02],
             "modes": ["relaxed", "exact"], "resolution": 1e-3, "target_chi": [], "target_gain_pct": [],
             "target_tol_pct": 2.0},
    "fig4": {"rho": 1.0, "sigma_w2": 1.0, "gamma": 4.0, "sigma_n2": [0.0, 0.1, 0.25, 0.5, 1.0], "h1_step": 1e-3},
    "fig5": {"rho": 1.0, "sigma_n2": 0.1, "gamma": 4.0, "sigma_w2": [0.5, 1.0, 2.0, 5.0, 20.0],
             "h1_step": 1e-3},
}
# fig3's default gamma grid is a range, not a list
_DEFAULT_TEXT = {("fig3", "gamma"): "0:2:0.02"}


# ------------------------------------------------------------------ parsing


def parse_range(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"range needs start:stop:step, got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ConfigError(f"empty or backwards range {text!r}")
    n = int(math.floor((stop - start) / step + 1e-9))
    return [float(np.round(start + i * step, 12)) for i in range(n + 1)]


def parse_value(text: str, default):
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, list):
            if not text:
                return []
            out = []
            for item in text.split(","):
                item = item.strip()
                if ":" in item:
                    out.extend(parse_range(item))
                elif default and isinstance(default[0], str):
                    out.append(item)
                else:
                    out.append(float(item))
            return out
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {type(default).__name__}") from None


def read_config(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve(command: str, raw: dict[str, str]) -> dict:
    schema = dict(GLOBAL, **COMMANDS[command])
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    params = {}
    for key, default in schema.items():
        if key in raw:
            params[key] = parse_value(raw[key], default)
        elif (command, key) in _DEFAULT_TEXT:
            params[key] = parse_value(_DEFAULT_TEXT[command, key], default)
        else:
            params[key] = default
    return params


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ffrelay", description="Feedback capacity bounds for filter-and-forward relay channels.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--from-manifest", metavar="FILE", help="replay the run recorded in a manifest")
    p.add_argument("--out", default=None, help="output directory (default: out/<command>)")
    sub = p.add_subparsers(dest="command")
    for name, schema in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value parameter file")
        sp.add_argument("--out", default=None, dest="sub_out")
        for key, default in dict(GLOBAL, **schema).items():
            if isinstance(default, bool):
                sp.add_argument(f"--{key}", nargs="?", const="true", default=None)
            else:
                sp.add_argument(f"--{key}", default=None)
    return p


# ------------------------------------------------------------------ helpers


def _rates(header, rows, bits):
    if not bits:
        return header, rows
    idx = [i for i, h in enumerate(header) if h.endswith("rate_nats") or h == "bound_rate" or h == "empirical_rate"]
    header = [h.replace("rate_nats", "rate_bits") if i in idx else h for i, h in enumerate(header)]
    out = []
    for row in rows:
        row = list(row)
        for i in idx:
            row[i] = row[i] / math.log(2.0)
        out.append(row)
    return header, out


def _white_pair(sigma_w2):
    return ArmaProcess.white(sigma_w2), ArmaProcess.white(1.0)


def _taps(values):
    t = [float(v) for v in values]
    return t if any(t) else [0.0]


def _mode(name):
    try:
        return MODE_NAMES[name]
    except KeyError:
        raise ConfigError(f"mode must be one of {sorted(MODE_NAMES)}") from None


# ------------------------------------------------------------------ commands


def cmd_bound_ma1(p):
    w = ma1_relay_noise(p["sigma_w2"], p["chi"])
    res = quartic_bound_ma1(w, ArmaProcess.white(1.0), p["rho"], p["gamma"], p["resolution"])
    header = ["gamma", "chi", "h", "rate_nats", "relay_power_relaxed"]
    rows = [[p["gamma"], p["chi"], float(res.taps.taps[0]), res.rate_nats, res.relay_power_relaxed]]
    return {"bound_ma1.csv": (header, rows)}, {"rate_nats": res.rate_nats}


def cmd_bound_riccati(p):
    if p["network"]:
        from .network import check_node_constraints, effective_noise, parse_network, reduce_to_effective_filter

        try:
            text = Path(p["network"]).read_text()
        except OSError as exc:
            raise OSError(f"cannot read network file: {exc}") from exc
        net = parse_network(text)
        taps, _ = reduce_to_effective_filter(net)
        ok = check_node_constraints(net)
        if not all(ok.values()):
            bad = ", ".join(k for k, v in ok.items() if not v)
            raise InfeasibleTaps(f"relay power budget exceeded at: {bad}")
        model = pad_model(to_state_space(effective_noise(net)))
        rate, s, _ = best_rate_for_model(model, net.rho)
        header = ["rate_nats", "taps", "s", "constraint_mode"]
        rows = [[rate, " ".join(f"{t:.12g}" for t in taps.taps), " ".join(f"{v:.12g}" for v in s), RELAXED]]
        return {"bound_riccati.csv": (header, rows)}, {"rate_nats": rate, "node_feasible": ok}
    w, z = _white_pair(p["sigma_w2"])
    res = best_rate_for_taps(_taps(p["taps"]), w, z, p["rho"], p["gamma"], _mode(p["mode"]))
    header = ["rate_nats", "taps", "s", "constraint_mode", "relay_power_relaxed", "relay_power_exact"]
    rows = [[res.rate_nats, " ".join(f"{t:.12g}" for t in res.taps.taps), " ".join(f"{v:.12g}" for v in res.s),
             res.constraint_mode, res.relay_power_relaxed, res.relay_power_exact]]
    return {"bound_riccati.csv": (header, rows)}, {"rate_nats": res.rate_nats}


def _gain_rows(res):
    return [[i, float(h), res.rate_nats] for i, h in enumerate(res.extra.get("gains", res.taps.taps))]


def cmd_bound_parallel(p):
    n = len(p["sigma2"])
    if len(p["gamma"]) != n:
        raise ConfigError("sigma2 and gamma need the same length")
    res = parallel_bound(None, p["sigma2"], p["gamma"], p["rho"])
    return {"bound_parallel.csv": (["relay", "gain", "rate_nats"], _gain_rows(res))}, {"rate_nats": res.rate_nats}


def cmd_bound_series(p):
    if len(p["gamma"]) != len(p["sigma2"]):
        raise ConfigError("sigma2 and gamma need the same length")
    res = series_bound(None, p["sigma2"], p["gamma"], p["rho"], p["npts"])
    return {"bound_series.csv": (["relay", "gain", "rate_nats"], _gain_rows(res))}, {"rate_nats": res.rate_nats}


def cmd_block(p):
    from .block import BlockProgram, certify, solve_block

    w, z = _white_pair(p["sigma_w2"])
    taps = [float(t) for t in p["taps"]]
    prog = BlockProgram.for_taps(taps, w, z, p["n"], p["rho"], p["gamma"], p["normalization"])
    sol = solve_block(prog)
    cert = certify(prog, sol)
    header = ["gamma", "taps", "rate_nats", "newton_steps", "kkt_residual"]
    rows = [[p["gamma"], " ".join(f"{t:.12g}" for t in taps), sol.rate_nats, sol.newton_steps, sol.kkt_residual]]
    return {"block.csv": (header, rows)}, {"rate_nats": sol.rate_nats, "certificate": cert}


def cmd_table1(p):
    from .block import BlockProgram, random_two_tap_search, solve_block

    w, z = _white_pair(p["sigma_w2"])
    N, rho = p["n"], p["rho"]
    base = p2p_rate(rho)
    rows, log_rows, source = [], [], []

    def add(gamma, h1, h2, rate, how):
        rows.append([gamma, h1, h2, rate, 100.0 * (rate / base - 1.0)])
        source.append(how)

    sol = solve_block(BlockProgram.for_taps([0.0, 0.0], w, z, N, rho, 0.0, p["normalization"]))
    add(0.0, 0.0, 0.0, sol.rate_nats, "relay_off")
    ft = [float(t) for t in p["fixed_taps"]] + [0.0]
    sol = solve_block(BlockProgram.for_taps(ft[:2], w, z, N, rho, p["fixed_gamma"], p["normalization"]))
    add(p["fixed_gamma"], ft[0], ft[1], sol.rate_nats, "fixed")
    for i, gamma in enumerate(p["gammas"]):
        taps, sol, log = random_two_tap_search(rho, gamma, p["sigma_w2"], N, p["trials"], p["seed"] + i,
                                               p["normalization"], p["workers"])
        add(gamma, float(taps.taps[0]), float(taps.taps[1]), sol.rate_nats, "search")
        log_rows.extend([gamma, *entry] for entry in log)
    header = ["gamma", "h1", "h2", "rate_nats", "pct_gain_vs_p2p"]
    files = {"table1.csv": (header, rows),
             "table1_candidates.csv": (["gamma", "h1", "h2", "rate_nats"], log_rows)}
    report = {"rows": [dict(zip(header, r), taps_source=s) for r, s in zip(rows, source)]}
    return files, report


def _fb_problem(p, sigma_n2=None, sigma_w2=None):
    from .noisyfb import NoisyFbProblem

    return NoisyFbProblem(p["rho"], p["sigma_w2"] if sigma_w2 is None else sigma_w2,
                          p["sigma_n2"] if sigma_n2 is None else sigma_n2, p["gamma"])


def cmd_noisyfb(p):
    from .noisyfb import solve

    try:
        sol = solve(_fb_problem(p))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    header = ["g1", "g2", "f21", "h1", "snr", "mu2", "mu3", "relay_power_saturated", "method"]
    rows = [[sol.g1, sol.g2, sol.f21, sol.h1, sol.snr, sol.mu2, sol.mu3, sol.relay_power_saturated, sol.method]]
    return {"noisyfb.csv": (header, rows)}, {"snr": sol.snr, "branch": sol.branch}


def _h1_grid(prob, step):
    hb = prob.h_max
    n = int(math.floor(hb / step + 1e-9))
    grid = [float(np.round(i * step, 12)) for i in range(n + 1)]
    if hb - grid[-1] > 1e-12:
        grid.append(hb)
    return grid


def _sweep_rows(prob, step, feedback):
    from .noisyfb import sweep_h1

    return [[pt.h1, pt.snr, pt.g2, pt.f21, pt.branch] for pt in sweep_h1(prob, _h1_grid(prob, step), feedback)]


def cmd_noisyfb_sweep(p):
    try:
        prob = _fb_problem(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = _sweep_rows(prob, p["h1_step"], p["feedback"])
    best = max(rows, key=lambda r: r[1])
    return {"noisyfb_sweep.csv": (["h1", "snr", "g2", "f21", "branch"], rows)}, {"argmax_h1": best[0],
                                                                                   "peak_snr": best[1]}


def _curves_report(curves):
    return {name: {"argmax_h1": max(rows, key=lambda r: r[1])[0], "peak_snr": max(r[1] for r in rows)}
            for name, rows in curves.items()}


def cmd_fig4(p):
    curves = {}
    base = _fb_problem(p, sigma_n2=math.inf)
    curves["no_feedback"] = _sweep_rows(base, p["h1_step"], False)
    for sn in p["sigma_n2"]:
        curves[f"sigma_n2={sn:g}"] = _sweep_rows(_fb_problem(p, sigma_n2=sn), p["h1_step"], True)
    rows = [[name, *r] for name, rs in curves.items() for r in rs]
    report = _curves_report(curves)
    nofb = report["no_feedback"]["peak_snr"]
    for name, rep in report.items():
        rep["peak_gain_pct"] = 100.0 * (rep["peak_snr"] / nofb - 1.0)
    svg = svg_lines({k: ([r[0] for r in v], [r[1] for r in v]) for k, v in curves.items()}, "h1", "SNR")
    return {"fig4.csv": (["curve", "h1", "snr", "g2", "f21", "branch"], rows), "fig4.svg": svg}, report


def cmd_fig5(p):
    curves = {}
    for sw in p["sigma_w2"]:
        curves[f"sigma_w2={sw:g}"] = _sweep_rows(_fb_problem(p, sigma_w2=sw), p["h1_step"], True)
    rows = [[name, *r] for name, rs in curves.items() for r in rs]
    svg = svg_lines({k: ([r[0] for r in v], [r[1] for r in v]) for k, v in curves.items()}, "h1", "SNR")
    return {"fig5.csv": (["curve", "h1", "snr", "g2", "f21", "branch"], rows), "fig5.svg": svg}, \
        _curves_report(curves)


def cmd_fig3(p):
    gammas = p["gamma"]
    base = p2p_rate(p["rho"])
    rows, report, curves = [], {"p2p_rate_nats": base, "curves": {}}, {}
    for mode_name in p["modes"]:
        mode = _mode(mode_name)
        for chi in p["chi"]:
            sweep = single_tap_sweep(p["rho"], p["sigma_w2"], chi, gammas, mode, p["resolution"])
            for r in sweep:
                rows.append([r.gamma, chi, r.h_opt, r.rate_nats, r.rate_gain_pct, r.constraint_mode])
            peak = max(sweep, key=lambda r: r.rate_nats)
            key = f"{mode_name}:chi={chi:g}"
            report["curves"][key] = {"peak_rate_nats": peak.rate_nats, "peak_gamma": peak.gamma,
                                     "peak_gain_pct": peak.rate_gain_pct, "rate_at_min_gamma": sweep[0].rate_nats}
            curves[key] = ([r.gamma for r in sweep], [r.rate_nats for r in sweep])
    if p["target_chi"]:
        if len(p["target_chi"]) != len(p["target_gain_pct"]):
            raise ConfigError("target_chi and target_gain_pct need the same length")
        matches = []
        for chi, target in zip(p["target_chi"], p["target_gain_pct"]):
            gains = {m: report["curves"].get(f"{m}:chi={chi:g}", {}).get("peak_gain_pct") for m in p["modes"]}
            ok = [m for m, g in gains.items() if g is not None and abs(g - target) <= p["target_tol_pct"]]
            matches.append({"chi": chi, "target_gain_pct": target, "gain_pct_by_mode": gains,
                            "matching_modes": ok,
                            "discrepancy_pct": {m: (g - target if g is not None else None) for m, g in gains.items()}})
        report["mode_match"] = matches
    if p["bits"]:
        curves = {k: (x, [v / math.log(2.0) for v in y]) for k, (x, y) in curves.items()}
    svg = svg_lines(curves, "gamma", "rate (bits)" if p["bits"] else "rate (nats)")
    header = ["gamma", "chi", "h_opt", "rate_nats", "rate_gain_pct", "constraint_mode"]
    return {"fig3.csv": (header, rows), "fig3.svg": svg}, report


def cmd_simulate(p):
    from .coding import ClosedLoopRun, error_collapse_study, run_closed_loop

    w, z = _white_pair(p["sigma_w2"])
    zt = compose_effective_noise(w, z, _taps(p["taps"]))
    model = pad_model(to_state_space(zt))
    rate, s, _ = best_rate_for_model(model, p["rho"])
    header = ["N", "M", "trials", "ser", "empirical_rate", "bound_rate"]
    if p["n_list"]:
        study = error_collapse_study(model, s, p["rate_fraction"], [int(n) for n in p["n_list"]], p["trials"],
                                     p["seed"], rate, p["workers"])
        rows = [[r["N"], r["M"], r["trials"], r["ser"], r["empirical_rate"], r["bound_rate"]] for r in study]
        return {"simulate.csv": (header, rows)}, {"loglog_ser": [r["loglog_ser"] for r in study]}
    res = run_closed_loop(ClosedLoopRun(model, s, p["m"], p["n"], p["trials"], p["seed"], p["rho"], p["workers"]))
    rows = [[p["n"], p["m"], p["trials"], res["symbol_error_rate"], res["empirical_rate"], rate]]
    report = {"average_power": res["average_power"],
              "empirical_snr_final": float(res["empirical_snr_trajectory"][-1]),
              "expected_snr_final": float(res["expected_snr_trajectory"][-1])}
    return {"simulate.csv": (header, rows)}, report


HANDLERS = {
    "bound-ma1": cmd_bound_ma1, "bound-riccati": cmd_bound_riccati, "bound-parallel": cmd_bound_parallel,
    "bound-series": cmd_bound_series, "block": cmd_block, "table1": cmd_table1, "noisyfb": cmd_noisyfb,
    "noisyfb-sweep": cmd_noisyfb_sweep, "simulate": cmd_simulate, "fig3": cmd_fig3, "fig4": cmd_fig4,
    "fig5": cmd_fig5,
}


# ------------------------------------------------------------------ driver


def run(command: str, params: dict, out_dir: Path) -> dict:
    files, report = HANDLERS[command](params)
    written = []
    for name, content in files.items():
        if isinstance(content, tuple):
            header, rows = _rates(*content, params.get("bits", False))
            content = csv_text(header, rows)
        atomic_write(out_dir / name, content)
        written.append(name)
    manifest = {"artifact_version": __version__, "command": command, "parameters": params,
                "outputs": sorted(written), "report": report}
    atomic_write(out_dir / "manifest.json", json_text(manifest))
    return manifest


def _error_record(exc, status, command, out_dir):
    code = getattr(exc, "code", None) or {EXIT_CONFIG: "invalid_parameter", EXIT_IO: "io_error"}.get(status, "error")
    rec = {"status": "error", "exit_code": status, "command": command, "error": code, "message": str(exc)}
    text = json.dumps(rec, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None and status != EXIT_IO:
        try:
            atomic_write(out_dir / "error.json", text + "\n")
        except OSError:
            pass
    return status


def main(argv=None) -> int:
    command, out_dir = None, None
    try:
        args = build_parser().parse_args(argv)
        if args.from_manifest:
            try:
                man = json.loads(Path(args.from_manifest).read_text())
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read manifest: {exc}") from None
            command = man.get("command")
            if command not in COMMANDS:
                raise ConfigError(f"manifest names unknown command {command!r}")
            raw = {k: _manifest_text(v) for k, v in man.get("parameters", {}).items()}
            out_dir = Path(args.out or Path(args.from_manifest).parent)
        else:
            command = args.command
            if command is None:
                raise ConfigError("no command given")
            raw = read_config(args.config) if args.config else {}
            schema = dict(GLOBAL, **COMMANDS[command])
            for key in schema:
                val = getattr(args, key, None)
                if val is not None:
                    raw[key] = val
            out_dir = Path(args.sub_out or args.out or Path("out") / command)
        params = resolve(command, raw)
        run(command, params, out_dir)
        print(str(out_dir / "manifest.json"))
        return EXIT_OK
    except (ConfigError, ValueError) as exc:
        return _error_record(exc, EXIT_CONFIG, command, out_dir)
    except FfRelayError as exc:
        return _error_record(exc, EXIT_SOLVER, command, out_dir)
    except OSError as exc:
        return _error_record(exc, EXIT_IO, command, out_dir)


def _manifest_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(_manifest_text(x) for x in v)
    return str(v)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
