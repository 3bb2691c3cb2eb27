"""Command-line front end.

Every subcommand resolves a flat parameter set (defaults, then flags, then
``--config`` JSON), validates it before allocating anything and writes its
files to ``<output_dir>/<subcommand>/<hash>/`` where ``hash`` identifies the
resolved parameters. Each CSV starts with ``# key=value`` lines echoing them.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import shutil
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import analysis
from .errors import ConfigError, NumericalError
from .fem import CoefficientField, build_pou, random_coefficient
from .mesh import build_hierarchy
from .problems import ManufacturedExact, ManufacturedSource, NodalField, random_nodal
from .superposition import (
    ErrorReport,
    LsmConfig,
    choose_ell,
    compare_to_global,
    global_reference,
    run_lsm,
    run_params,
)
from .timestepping import ProblemSpec, one_function, run_global_cn, write_nodal_csv, zero_function

SUBCOMMANDS = ("global", "lsm", "decay-matrix", "decay-profile", "loc-error", "figures")
FIGURES = ("fig2", "fig3", "fig4", "fig5")

# key -> (default, kind)
KEYS: dict[str, tuple[Any, str]] = {
    "d": (2, "int"),
    "h": (2.0 ** -5, "num"),
    "tau": (None, "num"),
    "H": (2.0 ** -2, "num"),
    "T": (None, "num"),
    "ell": ("auto-heuristic", "ell"),
    "t_fin": (1.0, "num"),
    "alpha": (1.0, "num"),
    "beta": (1.0, "num"),
    "coeff": ("constant", ("constant", "random")),
    "coeff_scale": (2.0 ** -5, "num"),
    "seed": (0, "int"),
    "rhs": ("one", ("zero", "one", "manufactured2d", "manufactured1d")),
    "ics": ("zero", ("zero", "manufactured", "random", "hat")),
    "compare": ("global", ("global", "exact", "none")),
    "output_dir": ("lsmwave-out", "str"),
    "parallelism": (1, "int"),
    "solver": ("direct", ("direct", "cg")),
    "cg_tol": (1e-13, "num"),
    # probe settings
    "n": (8, "int"),
    "ell_max": (None, "int"),
    "ells": (None, "ints"),
    "patch": (None, "int"),
    # figure sweeps
    "scale": ("desk", ("desk", "full")),
    "budget": (1800.0, "num"),
    "part": ("all", ("all", "left", "right")),
}

# defaults that differ per subcommand
SUB_DEFAULTS = {
    "decay-profile": {"rhs": "zero", "ics": "hat"},
    "loc-error": {"rhs": "zero", "ics": "hat"},
    "decay-matrix": {"h": 2.0 ** -4},
}

# Keys echoed into output headers and hashed into the output directory name.
# output_dir and parallelism never change results and are left out.
_PROBLEM = ("d", "h", "tau", "H", "T", "t_fin", "alpha", "beta", "coeff", "coeff_scale", "seed", "rhs", "ics", "solver", "cg_tol")
ECHO_KEYS = {
    "global": _PROBLEM + ("compare",),
    "lsm": _PROBLEM + ("ell", "compare"),
    "decay-matrix": ("d", "h", "tau"),
    "decay-profile": _PROBLEM + ("n", "ell_max", "patch"),
    "loc-error": _PROBLEM + ("n", "ell_max", "ells", "patch"),
    "figures": ("name", "scale", "part", "budget", "seed", "solver"),
}


def parse_number(v) -> float:
    """Accept ``0.125``, ``1/8``, ``2^-3`` or ``2**-3``."""
    if isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    s = str(v).strip().replace("**", "^")
    try:
        if "^" in s:
            base, exp = s.split("^", 1)
            return float(Fraction(base)) ** int(exp)
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot read {v!r} as a number") from None


def _coerce(key: str, v):
    default, kind = KEYS[key]
    if v is None:
        return None
    if isinstance(kind, tuple):
        if v not in kind:
            raise ConfigError(f"{key} must be one of {', '.join(kind)}; got {v!r}")
        return v
    if kind == "num":
        return parse_number(v)
    if kind == "int":
        x = parse_number(v)
        if x != int(x):
            raise ConfigError(f"{key} must be an integer, got {v!r}")
        return int(x)
    if kind == "ell":
        if v in ("auto-heuristic", "auto-theory"):
            return v
        return _coerce("n", v)
    if kind == "ints":
        items = v.split(",") if isinstance(v, str) else list(v)
        return [_coerce("n", x) for x in items]
    return str(v)


def load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a flat JSON object")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"config key {k!r}: nested objects are not supported")
    return data


def resolve(sub: str, flags: dict, config: Optional[dict] = None) -> dict:
    """Defaults, then flags, then config-file values; all validated."""
    cfg = {k: v[0] for k, v in KEYS.items()}
    cfg.update(SUB_DEFAULTS.get(sub, {}))
    for src in (flags, config or {}):
        for k, v in src.items():
            if k == "name":
                continue
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}")
            if v is not None:
                cfg[k] = _coerce(k, v)
    if sub == "figures":
        name = (config or {}).get("name") or flags.get("name")
        if name not in FIGURES:
            raise ConfigError(f"figure name must be one of {', '.join(FIGURES)}; got {name!r}")
        cfg["name"] = name
    if cfg["tau"] is None:
        cfg["tau"] = cfg["h"]
    if cfg["T"] is None:
        cfg["T"] = cfg["H"]
    validate(sub, cfg)
    return cfg


def _ratio(num: float, den: float, what: str) -> int:
    q = num / den
    k = int(round(q))
    if k < 1 or abs(q - k) > 1e-9 * max(q, 1.0):
        raise ConfigError(f"{what} must be a positive integer, got {q:.6g}")
    return k


def validate(sub: str, c: dict) -> None:
    if sub == "figures":
        return
    if c["d"] not in (1, 2):
        raise ConfigError(f"d must be 1 or 2, got {c['d']}")
    for k in ("h", "tau", "H", "T", "t_fin", "alpha", "beta", "cg_tol", "coeff_scale"):
        if not c[k] > 0 or not math.isfinite(c[k]):
            raise ConfigError(f"{k} must be positive and finite, got {c[k]!r}")
    if c["alpha"] > c["beta"]:
        raise ConfigError("alpha must not exceed beta")
    if c["parallelism"] < 1:
        raise ConfigError("parallelism must be at least 1")
    if sub == "decay-matrix":
        if c["h"] >= 1:
            raise ConfigError("h must be below 1")
        _ratio(1.0, c["h"], "1/h")
        return
    if not c["h"] <= c["H"] < 1:
        raise ConfigError(f"need h <= H < 1, got h={c['h']}, H={c['H']}")
    _ratio(1.0, c["H"], "1/H")
    _ratio(c["H"], c["h"], "H/h")
    if sub in ("global", "lsm"):
        _ratio(c["T"], c["tau"], "T/tau")
        _ratio(c["t_fin"], c["T"], "t_fin/T")
    else:
        _ratio(c["t_fin"], c["tau"], "t_fin/tau")
    if c["rhs"] == "manufactured2d" and c["d"] != 2 or c["rhs"] == "manufactured1d" and c["d"] != 1:
        raise ConfigError(f"rhs {c['rhs']} does not match d={c['d']}")
    manufactured = c["rhs"].startswith("manufactured")
    if c["compare"] == "exact" and not manufactured:
        raise ConfigError("compare=exact needs a manufactured right-hand side")
    if c["coeff"] == "random" and manufactured:
        raise ConfigError("the manufactured solution assumes a constant coefficient")
    if c["ell_max"] is not None and c["ell_max"] < 0:
        raise ConfigError("ell_max must be nonnegative")
    if c["n"] < 0:
        raise ConfigError("n must be nonnegative")
    if isinstance(c["ell"], int) and c["ell"] < 0:
        raise ConfigError("ell must be nonnegative")
    if c["ells"] is not None and min(c["ells"], default=0) < 0:
        raise ConfigError("ells must be nonnegative")


def echo_lines(sub: str, c: dict) -> str:
    keys = sorted(ECHO_KEYS[sub])
    body = "".join(f"# {k}={_echo_value(c[k])}\n" for k in keys)
    digest = hashlib.sha256((sub + "\n" + body).encode()).hexdigest()[:12]
    return f"# subcommand={sub}\n" + body + f"# hash={digest}\n"


def _echo_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def tuple_hash(sub: str, c: dict) -> str:
    return echo_lines(sub, c).rstrip("\n").rsplit("=", 1)[1]


# -- building problems from a configuration -------------------------------------------------

def build_problem(c: dict) -> ProblemSpec:
    m = build_hierarchy(c["d"], c["H"], c["h"])
    if c["coeff"] == "random":
        A = random_coefficient(m, seed=c["seed"], eps_A=c["coeff_scale"], alpha=c["alpha"], beta=c["beta"])
    else:
        # A = 1; alpha and beta are kept as declared bounds (they enter auto-theory)
        A = CoefficientField(np.ones(m.num_elements), c["alpha"], c["beta"])
    f = {"zero": zero_function, "one": one_function}.get(c["rhs"])
    if f is None:
        f = ManufacturedSource()
    u0 = v0 = zero_function
    if c["ics"] == "random":
        u0 = random_nodal(m.num_nodes, c["seed"])
        v0 = random_nodal(m.num_nodes, c["seed"] + 1)
    elif c["ics"] == "hat":
        v0 = NodalField(build_pou(m).weight_vector(_patch_index(m, c)))
    return ProblemSpec(m, c["t_fin"], c["tau"], A, f, u0, v0)


def _patch_index(m, c: dict) -> int:
    count = (m.n_coarse - 1) ** m.dim
    i = count // 2 if c["patch"] is None else c["patch"]
    if not 0 <= i < count:
        raise ConfigError(f"patch must lie in [0, {count - 1}], got {i}")
    return i


def _omega(p: ProblemSpec, c: dict):
    return build_pou(p.mesh).supports[_patch_index(p.mesh, c)]


# -- subcommands ----------------------------------------------------------------------------

def cmd_global(c: dict, out: Path, head: str) -> None:
    p = build_problem(c)
    n_res = _ratio(c["T"], c["tau"], "T/tau")
    steps = [0] + [k * n_res for k in range(1, p.num_steps // n_res + 1)]
    traj = run_global_cn(p, snapshot_steps=steps, solver=c["solver"])
    if not traj.stability_holds():
        raise NumericalError("discrete energy exceeded the stability bound")
    traj.write_energy_csv(out / "energy.csv", head)
    for s in steps:
        write_nodal_csv(out / f"snapshot_{s:06d}.csv", traj.at(s), head + f"# step={s}\n")
    if c["compare"] == "exact":
        err = analysis.trajectory_exact_error(traj, ManufacturedExact(), c["T"], c["t_fin"], p.coeff)
        _write_rows(out / "summary.csv", head, ["rel_error"], [[repr(float(err))]])


def cmd_lsm(c: dict, out: Path, head: str) -> None:
    p = build_problem(c)
    cfg = LsmConfig(p, H=c["H"], T=c["T"], ell=c["ell"], parallelism=c["parallelism"], solver=c["solver"], cg_tol=c["cg_tol"])
    t0 = time.perf_counter()
    res = run_lsm(cfg, keep_states=False)
    if c["compare"] == "global":
        rep = compare_to_global(cfg, result=res)
    elif c["compare"] == "exact":
        rep = ErrorReport(run_params(cfg), analysis.lsm_exact_error(res, ManufacturedExact(), p.coeff))
    else:
        rep = ErrorReport(run_params(cfg), float("nan"))
    rep.wall_time = time.perf_counter() - t0
    if c["compare"] != "none" and not math.isfinite(rep.rel_error):
        raise NumericalError("error is not finite")
    analysis.write_reports(out / "summary.csv", [rep], head)
    _write_rows(
        out / "timing.csv", head, ["interval", "seconds"],
        [["setup", repr(res.setup_time)]] + [[k, repr(t)] for k, t in enumerate(res.wall_times)] + [["total", repr(rep.wall_time)]],
    )
    write_nodal_csv(out / "final_snapshot.csv", res.snapshots[-1], head)


def cmd_decay_matrix(c: dict, out: Path, head: str) -> None:
    md = analysis.matrix_decay(c["h"], c["tau"], c["d"])
    info = (
        f"# fit_rate={_echo_value(md.fit_rate)}\n# fit_r2={_echo_value(md.r2)}\n"
        f"# gamma_formula={_echo_value(md.gamma_formula)}\n"
        f"# fitted_rate_constant={_echo_value(md.fitted_rate_constant)}\n# pgm_scale=log10 floor {md.log_floor:g}\n"
    )
    md.write_bands_csv(out / "bands.csv", head + info)
    md.write_grid_csv(out / "magnitude.csv")
    md.write_pgm(out / "magnitude.pgm")


def cmd_decay_profile(c: dict, out: Path, head: str) -> None:
    p = build_problem(c)
    ell_max = c["ell_max"] if c["ell_max"] is not None else p.mesh.n_fine
    prof = analysis.decay_profile(p, _omega(p, c), c["n"], ell_max)
    info = "".join(f"# {k}={_echo_value(v)}\n" for k, v in sorted(prof.info.items()))
    prof.write_csv(out / "profile.csv", head + info)


def cmd_loc_error(c: dict, out: Path, head: str) -> None:
    p = build_problem(c)
    ells = c["ells"]
    if ells is None:
        top = c["ell_max"] if c["ell_max"] is not None else c["n"] + 16
        ells = list(range(0, top + 1))
    prof = analysis.localization_errors(p, _omega(p, c), ells, c["n"])
    prof.write_csv(out / "profile.csv", head)


def _write_rows(path: Path, head: str, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(head)
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- figure sweeps --------------------------------------------------------------------------

def _sweep_ells(H: float, h: float) -> list:
    r = int(round(H / h))
    step = max(1, r // 4)
    return sorted({1, *range(step, 2 * r + step + 1, step)})


def figure_points(name: str, scale: str, part: str = "all", c: Optional[dict] = None) -> list[dict]:
    """Parameter sets of one figure; each becomes one CSV row.

    ``desk`` caps ``h`` at ``2^-8`` in 2D and ``2^-13`` in 1D.
    """
    desk = scale == "desk"
    seed = 1 if c is None else c["seed"]
    pts = []

    def add(panel, **kw):
        if part in ("all", panel):
            base = dict(d=2, alpha=1.0, beta=1.0, coeff="constant", rhs="one", compare="global", panel=panel)
            base.update(kw)
            pts.append(base)

    if name == "fig2":
        for k in range(5, 9 if desk else 10):
            h = 2.0 ** -k
            for j in range(1, k - 1):
                H = 2.0 ** -j
                add("left", h=h, tau=h, H=H, T=H, ell=int(round(2 * H / h)))
        for ell in _sweep_ells(2 ** -4, 2 ** -8):
            add("right", h=2 ** -8, tau=2 ** -8, H=2 ** -4, T=2 ** -4, ell=ell)
    elif name == "fig3":
        h_left = 2.0 ** (-8 if desk else -9)
        for q in (0.25, 0.5, 1.0, 2.0, 4.0):
            for j in range(1, 6):
                H = 2.0 ** -j
                add("left", h=h_left, tau=q * h_left, H=H, T=H, ell=int(round(2 * H / h_left)))
            for ell in _sweep_ells(2 ** -4, 2 ** -8):
                add("right", h=2 ** -8, tau=q * 2 ** -8, H=2 ** -4, T=2 ** -4, ell=ell)
    elif name == "fig4":
        for q, ts in ((0.25, (0.25, 0.5, 1.0)), (2.0, (0.5, 1.0))):
            for t in ts:
                for ell in _sweep_ells(2 ** -4, 2 ** -8):
                    add("left", h=2 ** -8, tau=q * 2 ** -8, H=2 ** -4, T=t * 2 ** -4, ell=ell)
        for a, b in ((1.0, 8.0), (0.125, 1.0)):
            for ell in _sweep_ells(2 ** -4, 2 ** -8):
                add("right", h=2 ** -8, tau=2 ** -8, H=2 ** -4, T=2 ** -4 / b, ell=ell,
                    alpha=a, beta=b, coeff="random", seed=seed, coeff_scale=2 ** -5)
    elif name == "fig5":
        h2 = 2.0 ** (-8 if desk else -11)
        for ell in _sweep_ells(2 ** -4, h2):
            add("left", h=h2, tau=2 ** -8, H=2 ** -4, T=2 ** -4, ell=ell, rhs="manufactured2d", compare="exact")
        h1 = 2.0 ** (-13 if desk else -16)
        for ell in _sweep_ells(2 ** -4, h1):
            add("right", d=1, h=h1, tau=2 ** -8, H=2 ** -4, T=2 ** -4, ell=ell, rhs="manufactured1d", compare="exact")
    else:
        raise ConfigError(f"unknown figure {name!r}")
    return pts


def _point_cost(pt: dict) -> float:
    """Rough work estimate: patch unknowns times steps."""
    r = pt["H"] / pt["h"]
    side = min(1.0 / pt["h"], 2 * r + 2 * pt["ell"])
    patches = (1.0 / pt["H"] - 1) ** pt["d"]
    return patches * side ** pt["d"] / pt["tau"]


def cmd_figures(c: dict, out: Path, head: str) -> None:
    pts = figure_points(c["name"], c["scale"], c["part"], c)
    order = sorted(range(len(pts)), key=lambda i: _point_cost(pts[i]))
    t0 = time.perf_counter()
    done: dict[int, ErrorReport] = {}
    skipped = []
    refs: dict = {}
    for i in order:
        pt = pts[i]
        if time.perf_counter() - t0 > c["budget"]:
            skipped.append(i)
            continue
        pc = dict(c)
        pc.update({k: v for k, v in pt.items() if k != "panel"})
        pc.update(ics="zero", t_fin=1.0)
        p = build_problem(pc)
        cfg = LsmConfig(p, H=pc["H"], T=pc["T"], ell=pc["ell"], parallelism=c["parallelism"], solver=c["solver"])
        if pc["compare"] == "exact":
            t1 = time.perf_counter()
            res = run_lsm(cfg, keep_states=False)
            rep = ErrorReport(run_params(cfg), analysis.lsm_exact_error(res, ManufacturedExact(), p.coeff),
                              wall_time=time.perf_counter() - t1)
        else:
            key = tuple(sorted((k, v) for k, v in pt.items() if k not in ("ell", "panel")))
            if key not in refs:
                refs.clear()  # keep one reference alive at a time
                refs[key] = global_reference(p, pc["T"], solver=c["solver"])
            rep = compare_to_global(cfg, reference=refs[key])
        done[i] = rep
        print(f"{c['name']} {pt['panel']}: " + " ".join(rep.row()), flush=True)
    for panel in ("left", "right"):
        idx = [i for i in range(len(pts)) if pts[i]["panel"] == panel and i in done]
        if idx or any(pts[i]["panel"] == panel for i in skipped):
            analysis.write_reports(out / f"{c['name']}_{panel}.csv", [done[i] for i in idx], head)
    _write_rows(
        out / "skipped.csv", head, ["panel", "d", "h", "tau", "H", "T", "ell"],
        [[pts[i]["panel"]] + [_echo_value(pts[i][k]) for k in ("d", "h", "tau", "H", "T", "ell")] for i in sorted(skipped)],
    )


COMMANDS: dict[str, Callable[[dict, Path, str], None]] = {
    "global": cmd_global,
    "lsm": cmd_lsm,
    "decay-matrix": cmd_decay_matrix,
    "decay-profile": cmd_decay_profile,
    "loc-error": cmd_loc_error,
    "figures": cmd_figures,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file; its values override flags")
    for k, (default, kind) in KEYS.items():
        choices = list(kind) if isinstance(kind, tuple) else None
        shown = "" if default is None else f" (default {default})"
        common.add_argument(f"--{k.replace('_', '-')}", dest=k, default=None, choices=choices, help=f"{k}{shown}")
    ap = argparse.ArgumentParser(prog="lsmwave", description="Wave equation solvers and localization experiments.")
    sp = ap.add_subparsers(dest="sub", required=True)
    for name in SUBCOMMANDS:
        sub = sp.add_parser(name, parents=[common])
        if name == "figures":
            sub.add_argument("name", nargs="?", choices=FIGURES)
    return ap


def run(argv: Optional[list] = None) -> Path:
    """Parse, validate and execute; returns the output directory."""
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("sub", "config")}
    config = load_json(args.config) if args.config else None
    c = resolve(args.sub, flags, config)
    if args.sub == "lsm" and isinstance(c["ell"], str):
        # echo the resolved layer count instead of the selection rule
        c["ell"] = _resolve_ell(c)
    head = echo_lines(args.sub, c)
    final = Path(c["output_dir"]) / args.sub / tuple_hash(args.sub, c)
    tmp = final.with_name(final.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    try:
        COMMANDS[args.sub](c, tmp, head)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    shutil.rmtree(final, ignore_errors=True)
    os.replace(tmp, final)
    return final


def _resolve_ell(c: dict) -> int:
    mode = "heuristic" if c["ell"] == "auto-heuristic" else "theory"
    return choose_ell(c["tau"], c["h"], c["T"], c["H"], c["t_fin"], alpha=c["alpha"], beta=c["beta"], mode=mode)


def main(argv: Optional[list] = None) -> int:
    try:
        out = run(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    print(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
