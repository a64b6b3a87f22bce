"""Command line front end.

Four subcommands driven by a single JSON config file: ``solve`` runs one
Picard solve and reports diagnostics, ``convergence`` runs a refinement
study with observed rates, ``complex-check`` reports the structure
residuals of the discrete sequence, and ``l3-study`` samples the
divergence-free L3 bound.  Reports are written with sorted keys and
repr-formatted floats so identical configs produce identical bytes.

Exit codes: 0 all assertions pass, 1 an assertion or the iteration
failed, 2 the config could not be parsed or validated.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import verify
from .linalg import LinAlgError
from .mesh import Mesh, MeshError, mesh_metrics, read_gmsh_msh2, unit_cube_mesh
from .mhd import MhdDriver, MhdError, MhdParams, SourceData
from .operators import lp_norm, norm_d, norm_h1_vec
from .verify import StudyError, VerifyError

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2

# norms whose finest-pair observed rate must reach 0.9 in a study
RATE_COLUMNS = ("err_u_h1", "err_B_l2", "err_B_hcurl_h", "err_B_l3")
RATE_THRESHOLD = 0.9

_TOP_KEYS = {
    "mesh",
    "params",
    "bc_family",
    "variant",
    "picard",
    "case",
    "levels",
    "samples",
    "quad_degree",
    "seed",
    "outputs",
}


class ConfigError(Exception):
    """The config file is malformed or violates an invariant."""


def _require_keys(section: dict, allowed: set, where: str) -> None:
    extra = set(section) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in {where}")


def load_config(path: str) -> dict:
    """Read and validate a RunConfig JSON file into a plain dict."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _require_keys(raw, _TOP_KEYS, "config root")

    cfg: dict = {}

    mesh = raw.get("mesh")
    if not isinstance(mesh, dict) or len(mesh) != 1 or not set(mesh) <= {"builtin", "msh2"}:
        raise ConfigError('mesh must be exactly one of {"builtin": n} or {"msh2": path}')
    if "builtin" in mesh:
        n = mesh["builtin"]
        if not isinstance(n, int) or n < 1:
            raise ConfigError("mesh.builtin must be a positive integer")
        cfg["mesh"] = ("builtin", n)
    else:
        if not isinstance(mesh["msh2"], str):
            raise ConfigError("mesh.msh2 must be a file path")
        cfg["mesh"] = ("msh2", mesh["msh2"])

    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params must be an object")
    _require_keys(params, {"Re", "Rm", "s"}, "params")
    for key in ("Re", "Rm", "s"):
        val = params.get(key, 1.0)
        if not isinstance(val, (int, float)) or not val > 0:
            raise ConfigError(f"params.{key} must be a positive number")
        cfg[key] = float(val)

    cfg["bc_family"] = raw.get("bc_family", "normal_B")
    cfg["variant"] = raw.get("variant", "multiplier")

    picard = raw.get("picard", {})
    if not isinstance(picard, dict):
        raise ConfigError("picard must be an object")
    _require_keys(picard, {"tol", "maxit"}, "picard")
    tol = picard.get("tol", 1e-8)
    if not isinstance(tol, (int, float)) or not 0.0 < tol < 1.0:
        raise ConfigError("picard.tol must lie in (0, 1)")
    maxit = picard.get("maxit", 100)
    if not isinstance(maxit, int) or maxit < 1:
        raise ConfigError("picard.maxit must be a positive integer")
    cfg["tol"], cfg["maxit"] = float(tol), maxit

    case = raw.get("case")
    if (
        not isinstance(case, dict)
        or len(case) != 1
        or not set(case) <= {"builtin", "zero_source"}
    ):
        raise ConfigError(
            'case must be exactly one of {"builtin": lambda} or {"zero_source": true}'
        )
    if "builtin" in case:
        lam = case["builtin"]
        if not isinstance(lam, (int, float)) or lam < 0:
            raise ConfigError("case.builtin must be a nonnegative amplitude")
        cfg["case"] = ("builtin", float(lam))
    else:
        if case["zero_source"] is not True:
            raise ConfigError("case.zero_source accepts only true")
        cfg["case"] = ("zero_source", None)

    levels = raw.get("levels", [2, 4, 8])
    if (
        not isinstance(levels, list)
        or not levels
        or not all(isinstance(n, int) and n >= 1 for n in levels)
        or any(levels[i] >= levels[i + 1] for i in range(len(levels) - 1))
    ):
        raise ConfigError("levels must be a strictly increasing list of positive integers")
    cfg["levels"] = levels

    samples = raw.get("samples", 50)
    if not isinstance(samples, int) or samples < 1:
        raise ConfigError("samples must be a positive integer")
    cfg["samples"] = samples

    quad = raw.get("quad_degree", 6)
    if not isinstance(quad, int) or not 6 <= quad <= 12:
        raise ConfigError("quad_degree must be an integer in [6, 12]")
    cfg["quad_degree"] = quad

    seed = raw.get("seed", 42)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    cfg["seed"] = seed

    outputs = raw.get("outputs", {})
    if not isinstance(outputs, dict):
        raise ConfigError("outputs must be an object")
    _require_keys(outputs, {"csv", "json"}, "outputs")
    for key in ("csv", "json"):
        if key in outputs and not isinstance(outputs[key], str):
            raise ConfigError(f"outputs.{key} must be a file name")
    cfg["outputs"] = outputs

    try:
        cfg["params"] = MhdParams(
            Re=cfg["Re"],
            Rm=cfg["Rm"],
            s=cfg["s"],
            bc_family=cfg["bc_family"],
            variant=cfg["variant"],
        )
    except MhdError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# ----------------------------------------------------------------------
# report plumbing


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays so json can emit them."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _write_json(report: dict, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(text: str, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _out_path(cfg: dict, out_dir: str, kind: str, default: str) -> str:
    return os.path.join(out_dir, cfg["outputs"].get(kind, default))


def _params_section(cfg: dict) -> dict:
    kind, arg = cfg["case"]
    return {
        **cfg["params"].as_dict(),
        "case": kind,
        "lam": arg,
        "tol": cfg["tol"],
        "maxit": cfg["maxit"],
        "seed": cfg["seed"],
        "quad_degree": cfg["quad_degree"],
    }


def _build_mesh(cfg: dict, *, min_n: int = 1) -> tuple[Mesh, dict]:
    kind, arg = cfg["mesh"]
    if kind == "builtin":
        if arg < min_n:
            raise ConfigError(f"builtin mesh needs n >= {min_n} for this command")
        mesh = unit_cube_mesh(arg)
        meta = {"source": "builtin", "n": arg}
    else:
        try:
            mesh = read_gmsh_msh2(arg)
        except (OSError, MeshError) as exc:
            raise ConfigError(f"cannot load mesh {arg}: {exc}") from exc
        meta = {"source": "msh2", "path": arg}
    metrics = mesh_metrics(mesh)
    meta.update(
        num_vertices=metrics.num_vertices,
        num_cells=metrics.num_cells,
        h_max=metrics.h_max,
        h_min=metrics.h_min,
    )
    return mesh, meta


def _case_and_sources(cfg: dict):
    kind, lam = cfg["case"]
    if kind == "builtin":
        case = verify.builtin_case(
            cfg["bc_family"], lam, Re=cfg["Re"], Rm=cfg["Rm"], s=cfg["s"]
        )
        return case, case.sources()
    return None, SourceData()


# ----------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: dict, out_dir: str) -> int:
    mesh, mesh_meta = _build_mesh(cfg, min_n=2)
    case, sources = _case_and_sources(cfg)
    driver = MhdDriver(mesh, cfg["params"], sources=sources)
    state, run = driver.picard_solve(tol=cfg["tol"], maxit=cfg["maxit"])
    diag = driver.diagnostics(state)

    scale = max(1.0, run.state_norm)
    checks = {
        "converged": run.converged,
        "divB": diag.divB_max <= 1e-10 * diag.divB_scale,
        "multiplier": diag.r_norm <= 1e-10 * scale,
        "curlE": diag.curlE_norm <= 1e-10 * scale,
        "energy": diag.energy_residual <= 1e-9,
    }
    errors = (
        verify.error_norms(driver, state, case, quad_degree=cfg["quad_degree"])
        if case is not None
        else {}
    )
    report = {
        "params": _params_section(cfg),
        "mesh": mesh_meta,
        "iterations": run.iterations,
        "increments": run.increments,
        "residuals": run.residuals,
        "diagnostics": diag.as_dict(),
        "norms": {
            "u_h1": norm_h1_vec(state.u),
            "E_l2": lp_norm(state.E, 2),
            "B_d": norm_d(state.B, driver.dcurl),
            "p_l2": lp_norm(state.p, 2),
            "state_W": run.state_norm,
        },
        "errors": errors,
        "rates": {},
        "checks": checks,
        "pass": all(checks.values()),
    }
    _write_json(report, _out_path(cfg, out_dir, "json", "solve_report.json"))
    return EXIT_PASS if report["pass"] else EXIT_FAIL


def cmd_convergence(cfg: dict, out_dir: str) -> int:
    if cfg["case"][0] != "builtin":
        raise ConfigError("a convergence study needs the builtin case (an exact solution)")
    if len(cfg["levels"]) < 3:
        raise ConfigError("a convergence study needs at least 3 levels")
    case, _ = _case_and_sources(cfg)
    json_path = _out_path(cfg, out_dir, "json", "convergence_report.json")

    try:
        table = verify.convergence_study(
            case,
            cfg["levels"],
            variant=cfg["variant"],
            tol=cfg["tol"],
            maxit=cfg["maxit"],
            quad_degree=cfg["quad_degree"],
        )
    except StudyError as exc:
        report = {
            "params": _params_section(cfg),
            "mesh": {"levels": cfg["levels"]},
            "iterations": exc.report.iterations,
            "increments": exc.report.increments,
            "diagnostics": {"failure": str(exc)},
            "errors": {},
            "rates": {},
            "pass": False,
        }
        _write_json(report, json_path)
        print(f"convergence study failed: {exc}", file=sys.stderr)
        return EXIT_FAIL

    final_rates = {c: table.rates[c][-1] for c in RATE_COLUMNS}
    passed = all(r >= RATE_THRESHOLD for r in final_rates.values())
    report = {
        "params": _params_section(cfg),
        "mesh": {"ns": table.ns, "hs": table.hs},
        "iterations": [r.iterations for r in table.reports],
        "increments": [r.increments for r in table.reports],
        "diagnostics": {
            "quadrature_check": table.quadrature_check,
            "final_rates": final_rates,
            "rate_threshold": RATE_THRESHOLD,
        },
        "errors": table.errors,
        "rates": table.rates,
        "pass": passed,
    }
    _write_text(table.to_csv(), _out_path(cfg, out_dir, "csv", "convergence_table.csv"))
    _write_json(report, json_path)
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_complex_check(cfg: dict, out_dir: str) -> int:
    mesh, mesh_meta = _build_mesh(cfg)
    result = verify.complex_check(mesh, seed=cfg["seed"])
    report = {
        "params": {"seed": cfg["seed"]},
        "mesh": mesh_meta,
        "iterations": 0,
        "increments": [],
        "diagnostics": result,
        "errors": {},
        "rates": {},
        "pass": bool(result["pass"]),
    }
    _write_json(report, _out_path(cfg, out_dir, "json", "complex_report.json"))
    return EXIT_PASS if report["pass"] else EXIT_FAIL


def cmd_l3_study(cfg: dict, out_dir: str) -> int:
    if len(cfg["levels"]) < 2:
        raise ConfigError("an L3 study needs at least 2 levels to compare growth")
    result = verify.l3_study(
        cfg["levels"],
        samples=cfg["samples"],
        bc_family=cfg["bc_family"],
        seed=cfg["seed"],
    )
    lines = ["n,max_ratio"]
    for n, ratio in zip(result["levels"], result["max_ratios"]):
        lines.append(f"{n},{ratio!r}")
    report = {
        "params": {
            "bc_family": cfg["bc_family"],
            "samples": cfg["samples"],
            "seed": cfg["seed"],
        },
        "mesh": {"levels": result["levels"]},
        "iterations": 0,
        "increments": [],
        "diagnostics": result,
        "errors": {},
        "rates": {},
        "pass": bool(result["growth_ok"]),
    }
    _write_text("\n".join(lines) + "\n", _out_path(cfg, out_dir, "csv", "l3_table.csv"))
    _write_json(report, _out_path(cfg, out_dir, "json", "l3_report.json"))
    return EXIT_PASS if report["pass"] else EXIT_FAIL


COMMANDS = {
    "solve": cmd_solve,
    "convergence": cmd_convergence,
    "complex-check": cmd_complex_check,
    "l3-study": cmd_l3_study,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mhdfem",
        description="Structure-preserving incompressible MHD solver and its verification studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "run one Picard solve and write a diagnostics report"),
        ("convergence", "run a refinement study and assert observed rates"),
        ("complex-check", "check the discrete sequence structure on one mesh"),
        ("l3-study", "sample the divergence-free L3/curl ratio across levels"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out-dir", default=".", help="directory for reports")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args.out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LinAlgError, MhdError, VerifyError, MeshError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
