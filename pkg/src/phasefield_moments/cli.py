"""Command-line experiments.

    phasefield-moments spectrum          --config run.toml --out out/
    phasefield-moments control-linear    --config run.toml --y0 y0.json
    phasefield-moments cost-sweep        --config run.toml
    phasefield-moments control-nonlinear --config run.toml
    phasefield-moments simulate          --config run.toml --y0 y0.csv --v control.json

Exit codes: 0 ok, 1 configuration error, 2 (H2) fails, 3 (H1) fails,
4 precision exhausted, 5 fixed-point iteration did not contract.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

import mpmath as mp
import numpy as np
import scipy

from . import __version__
from .biortho import ExponentialDictionary, PrecisionExhausted, build_biorth
from .galerkin_sim import forward_solve, ucp_witness
from .linear_control import ControlSignal, FourierState, control_cost, synthesize_control
from .nonlinear_control import NoContraction, calibrate_M, fixed_point, make_weights, resimulate
from .spectral import Parameters, build_spectrum, check_H1, check_H2

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_H2, EXIT_H1, EXIT_PRECISION, EXIT_NO_CONTRACTION = range(6)

DEFAULTS = {
    "xi": 1.0,
    "rho": 1.0,
    "tau": 2.0,
    "c": 1,
    "T": 0.5,
    "N": 16,
    "steps": 4096,
    "precision_bits": 256,
    "max_bits": 4096,
    "biorth_tol": 1e-12,
    "patch_horizon": None,
    "seed": 0,
    "random_trials": 0,
    "y0": None,  # list of [theta_k, phi_k] rows
    "N_probe": 8,
    "T_list": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
    "a": 2.0,
    "b": 1.1,
    "M": "fit",
    "max_iter": 15,
    "tol_fp": 1e-10,
    "substeps": 64,
    "ucp_T": 1.0,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(raw)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return validate(cfg)


def validate(cfg: dict) -> dict:
    try:
        for key in ("xi", "rho", "tau", "T", "biorth_tol", "a", "b", "tol_fp", "ucp_T"):
            cfg[key] = float(cfg[key])
        for key in ("N", "steps", "precision_bits", "max_bits", "seed", "random_trials", "N_probe", "max_iter", "substeps"):
            if isinstance(cfg[key], bool) or int(cfg[key]) != cfg[key]:
                raise ConfigError(f"{key} must be an integer")
            cfg[key] = int(cfg[key])
        cfg["c"] = int(cfg["c"])
        Parameters(cfg["xi"], cfg["rho"], cfg["tau"], cfg["c"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg["T"] > 0:
        raise ConfigError("T must be positive")
    if cfg["N"] < 1 or cfg["steps"] < 3 or cfg["precision_bits"] < 53 or cfg["random_trials"] < 0:
        raise ConfigError("N >= 1, steps >= 3, precision_bits >= 53 and random_trials >= 0 are required")
    if cfg["patch_horizon"] is not None:
        h = float(cfg["patch_horizon"])
        if not 0 < h <= cfg["T"]:
            raise ConfigError("patch_horizon must lie in (0, T]")
        cfg["patch_horizon"] = h
    if cfg["M"] != "fit":
        try:
            cfg["M"] = float(cfg["M"])
        except (TypeError, ValueError) as exc:
            raise ConfigError('M must be a positive number or "fit"') from exc
        if not cfg["M"] > 0:
            raise ConfigError('M must be a positive number or "fit"')
    try:
        cfg["T_list"] = [float(t) for t in cfg["T_list"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError("T_list must be a list of numbers") from exc
    if not cfg["T_list"] or min(cfg["T_list"]) <= 0:
        raise ConfigError("T_list must hold positive horizons")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def header(cfg: dict, command: str) -> dict:
    return {
        "command": command,
        "config_sha256": config_hash(cfg),
        "versions": {
            "phasefield_moments": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "mpmath": mp.__version__,
        },
        "config": cfg,
    }


def params_of(cfg: dict) -> Parameters:
    return Parameters(cfg["xi"], cfg["rho"], cfg["tau"], cfg["c"])


# ---------------------------------------------------------------- output


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, mp.mpf):
        return mp.nstr(obj, 40)
    if isinstance(obj, FourierState):
        return obj.to_dict()
    return obj


class Writer:
    """Atomic writes into the output directory; every file gets the header."""

    def __init__(self, out: str, head: dict):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.head = head
        self.files = []

    def _put(self, name: str, text: str) -> Path:
        path = self.dir / name
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8", newline="")
        os.replace(tmp, path)
        self.files.append(name)
        return path

    def json(self, name: str, payload: dict) -> Path:
        body = {"header": self.head, **_plain(payload)}
        return self._put(name, json.dumps(body, indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, table: str) -> Path:
        lines = [
            f"# phasefield_moments {self.head['versions']['phasefield_moments']} {self.head['command']}",
            f"# config_sha256 {self.head['config_sha256']}",
            "# numpy {numpy} scipy {scipy} mpmath {mpmath}".format(**self.head["versions"]),
        ]
        return self._put(name, "\r\n".join(lines) + "\r\n" + table)

    def rows(self, name: str, header_row, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(header_row)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
        return self.csv(name, buf.getvalue())


# ---------------------------------------------------------------- inputs


def _read_table(path: Path) -> tuple[list, list]:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def read_y0(path: str | None, cfg: dict) -> FourierState:
    """JSON sine coefficients ({"coeffs": [[theta_k, phi_k], ...]}) or CSV
    physical samples with columns theta, phi at the interior points
    x_i = i pi / (n + 1); CSV data goes through the exact sine transform."""
    N = cfg["N"]
    if path is None:
        if cfg["y0"] is None:
            return FourierState.mode(N, 1, [1.0, 0.0])
        arr = np.asarray(cfg["y0"], dtype=float)
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"initial-data file not found: {path}")
        if p.suffix.lower() == ".csv":
            head, rows = _read_table(p)
            try:
                cols = [head.index("theta"), head.index("phi")]
            except ValueError as exc:
                raise ConfigError("y0 CSV needs columns theta and phi") from exc
            vals = np.array([[float(r[c]) for c in cols] for r in rows])
            if vals.shape[0] < N:
                raise ConfigError(f"y0 CSV has {vals.shape[0]} samples, need at least N = {N}")
            return FourierState.from_physical(vals, N)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        arr = np.asarray(data["coeffs"] if isinstance(data, dict) else data, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError("y0 must be a list of [theta_k, phi_k] rows")
    if arr.shape[0] > N:
        raise ConfigError(f"y0 has {arr.shape[0]} modes, N = {N}")
    return FourierState(arr).padded(N)


def read_control(path: str | None, T: float) -> ControlSignal:
    if path is None:
        return ControlSignal.zero(T)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"control file not found: {path}")
    if p.suffix.lower() == ".csv":
        head, rows = _read_table(p)
        if head[:2] != ["t", "v"]:
            raise ConfigError("control CSV needs columns t, v")
        t = np.array([float(r[0]) for r in rows])
        v = np.array([float(r[1]) for r in rows])
        if not np.allclose(np.diff(t), t[-1] / (t.size - 1)) or t[0] != 0:
            raise ConfigError("control CSV must be sampled on a uniform grid starting at 0")
        return ControlSignal.from_samples(float(t[-1]), v)
    data = json.loads(p.read_text(encoding="utf-8"))
    return ControlSignal.from_dict(data.get("control", data))


# ---------------------------------------------------------------- commands


def _hypotheses(params: Parameters) -> tuple[int, dict]:
    h1 = check_H1(params)
    if not h1.holds:
        return EXIT_H1, {"H1": False, "violating_j": h1.violating_j}
    h2 = check_H2(params)
    info = {"H1": True, "j_star": h1.j_star, "H2": h2.holds, "H2_witnesses": h2.witnesses, "k0_bound": h2.k0_bound}
    return (EXIT_OK if h2.holds else EXIT_H2), info


def cmd_spectrum(cfg: dict, args, w: Writer) -> int:
    params = params_of(cfg)
    code, hyp = _hypotheses(params)
    if code != EXIT_OK:
        # no spectrum table without both conditions; the witnesses are the output
        w.json("spectrum.json", {"hypotheses": hyp})
        return code
    spec = build_spectrum(params, cfg["N"])
    w.json("spectrum.json", {"hypotheses": hyp, "spectrum": spec.to_dict()})
    rows = [(p.k, p.lambda1, p.lambda2, p.r_k) for p in spec.pairs]
    w.rows("spectrum.csv", ["k", "lambda1", "lambda2", "r_k"], rows)
    w.rows(
        "merged.csv",
        ["index", "Lambda", "k", "branch"],
        [(i + 1, float(v), int(k), int(b)) for i, (v, k, b) in enumerate(zip(spec.Lambda, spec.Lambda_k, spec.Lambda_branch))],
    )
    return code


def _ucp_demo(cfg: dict, params: Parameters, witnesses: list, w: Writer) -> dict:
    out = []
    for k, ell in witnesses:
        res = ucp_witness(params, int(k), int(ell), T=cfg["ucp_T"], steps=cfg["steps"])
        out.append({
            "k": int(k), "ell": int(ell), "phi0": res["phi0"].to_dict(), "eigen_gap": res["eigen_gap"],
            "trace_sup": res["trace_sup"], "norm_H1": res["norm_H1"], "verified": res["trace_sup"] <= 1e-10,
        })
    w.json("ucp_witness.json", {"witnesses": out})
    return {"witnesses": len(out), "all_verified": all(o["verified"] for o in out)}


def _linear_run(cfg, params, spec, fam, y0, h):
    v = synthesize_control(y0, spec, fam, cfg["T"], patch_horizon=h)
    sim = forward_solve(params, y0, v, N=cfg["N"], steps=cfg["steps"])
    n0 = y0.norm()
    term = sim.terminal.norm()
    return v, sim, {
        "y0_norm_H-1": n0,
        "terminal_norm_H-1": term,
        "terminal_ratio": term / n0 if n0 > 0 else 0.0,
        "moment_residual_abs": v.diagnostics["moment_residual_abs"],
        "moment_residual_rel": v.diagnostics["moment_residual_rel"],
        "v_l2": v.l2_norm,
    }


def cmd_control_linear(cfg: dict, args, w: Writer) -> int:
    params = params_of(cfg)
    code, hyp = _hypotheses(params)
    if code != EXIT_OK:
        if code == EXIT_H2 and args.demonstrate_ucp_failure:
            hyp["ucp_demo"] = _ucp_demo(cfg, params, hyp["H2_witnesses"], w)
        w.json("report.json", {"hypotheses": hyp})
        return code
    y0 = read_y0(args.y0, cfg)
    spec = build_spectrum(params, cfg["N"])
    h = cfg["patch_horizon"] or cfg["T"]
    try:
        fam = build_biorth(
            ExponentialDictionary(h, tuple(spec.Lambda)),
            precision_bits=cfg["precision_bits"], tol=cfg["biorth_tol"], max_bits=cfg["max_bits"],
        )
    except PrecisionExhausted as exc:
        w.json("report.json", {"hypotheses": hyp, "error": str(exc), "achieved": exc.achieved, "bits": exc.bits})
        return EXIT_PRECISION
    v, sim, rep = _linear_run(cfg, params, spec, fam, y0, cfg["patch_horizon"])
    rep["tol_terminal"] = max(1e-4, v.diagnostics["truncation_tail"])
    rep["horizon"] = h
    rep["precision_bits"] = fam.precision_bits
    rep["biorth_residual"] = fam.max_residual
    rng = np.random.default_rng(cfg["seed"])
    trials = []
    for _ in range(cfg["random_trials"]):
        z = FourierState(rng.standard_normal((cfg["N"], 2)))
        z = z.scaled(1.0 / z.norm())
        _, _, r = _linear_run(cfg, params, spec, fam, z, cfg["patch_horizon"])
        trials.append(r)
    w.csv("control.csv", v.to_csv())
    w.json("control.json", {"control": v.to_dict()})
    w.csv("closed_loop.csv", sim.to_csv())
    w.json("report.json", {"hypotheses": hyp, "result": rep, "random_trials": trials})
    return EXIT_OK


def cmd_cost_sweep(cfg: dict, args, w: Writer) -> int:
    params = params_of(cfg)
    code, hyp = _hypotheses(params)
    if code != EXIT_OK:
        w.json("cost.json", {"hypotheses": hyp})
        return code
    try:
        sweep = control_cost(params, cfg["T_list"], cfg["N"], cfg["N_probe"], cfg["precision_bits"], cfg["biorth_tol"])
    except PrecisionExhausted as exc:
        w.json("cost.json", {"hypotheses": hyp, "error": str(exc), "achieved": exc.achieved, "bits": exc.bits})
        return EXIT_PRECISION
    C0 = math.exp(sweep.log_C0)
    w.rows("cost.csv", ["T", "K_emp", "probe", "C0", "M_fit"], [(t, k, lab, C0, sweep.M_fit) for t, k, lab in sweep.rows])
    w.json("cost.json", {"hypotheses": hyp, "sweep": sweep.to_dict()})
    return EXIT_OK


def cmd_control_nonlinear(cfg: dict, args, w: Writer) -> int:
    params = params_of(cfg)
    code, hyp = _hypotheses(params)
    if code != EXIT_OK:
        w.json("manifest.json", {"hypotheses": hyp})
        return code
    y0 = read_y0(args.y0, cfg)
    N, T = cfg["N"], cfg["T"]
    try:
        M = calibrate_M(params, N, precision_bits=cfg["precision_bits"]) if cfg["M"] == "fit" else cfg["M"]
        sched = make_weights(T, cfg["a"], cfg["b"], M)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        res = fixed_point(
            params, y0, T, sched, N, max_iter=cfg["max_iter"], tol_fp=cfg["tol_fp"],
            substeps=cfg["substeps"], precision_bits=cfg["precision_bits"],
        )
    except PrecisionExhausted as exc:
        w.json("manifest.json", {"hypotheses": hyp, "error": str(exc), "achieved": exc.achieved, "bits": exc.bits})
        return EXIT_PRECISION
    except NoContraction as exc:
        w.json("manifest.json", {"hypotheses": hyp, "error": str(exc), "M": M})
        return EXIT_NO_CONTRACTION
    n0 = y0.norm()
    resim = {}
    for n in (N, 2 * N):
        r = resimulate(params, y0, res.v, T, n, substeps=512)
        resim[f"N={n}"] = r["terminal_norm"] / n0 if n0 > 0 else 0.0
    w.csv("iterations.csv", res.log_csv())
    w.json("control.json", {"control": res.v.to_dict()})
    w.csv("control.csv", res.v.to_csv())
    man = res.manifest()
    man.update({"hypotheses": hyp, "M": M, "resimulated_terminal_ratio": resim})
    w.json("manifest.json", man)
    return EXIT_OK if res.converged else EXIT_NO_CONTRACTION


def cmd_simulate(cfg: dict, args, w: Writer) -> int:
    params = params_of(cfg)
    y0 = read_y0(args.y0, cfg)
    v = read_control(args.v, cfg["T"])
    sim = forward_solve(params, y0, v, N=cfg["N"], steps=cfg["steps"], T=cfg["T"])
    w.csv("simulation.csv", sim.to_csv())
    w.json("simulation.json", {"simulation": sim.to_dict(), "terminal_norm_H-1": sim.terminal.norm()})
    return EXIT_OK


COMMANDS = {
    "spectrum": cmd_spectrum,
    "control-linear": cmd_control_linear,
    "cost-sweep": cmd_cost_sweep,
    "control-nonlinear": cmd_control_nonlinear,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with flat keys (see README)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="seed for random trial data")
    common.add_argument("--precision-bits", type=int, dest="precision_bits", help="starting mpmath precision")
    common.add_argument("--patch-horizon", type=float, dest="patch_horizon", help="act on [0, h] only, zero after")
    common.add_argument("--demonstrate-ucp-failure", action="store_true", dest="demonstrate_ucp_failure",
                        help="when (H2) fails, emit and verify the unobservable adjoint datum")
    common.add_argument("--y0", help="initial data: JSON coefficients or CSV physical samples")
    common.add_argument("--v", help="control for simulate: JSON atoms or CSV samples t, v")
    parser = argparse.ArgumentParser(prog="phasefield-moments", description="Boundary moment controls for the phase-field system.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "precision_bits": args.precision_bits, "patch_horizon": args.patch_horizon}
    try:
        cfg = load_config(args.config, overrides)
        w = Writer(args.out, header(cfg, args.command))
        code = COMMANDS[args.command](cfg, args, w)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.command}: exit {code}; wrote {', '.join(w.files)} to {w.dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
