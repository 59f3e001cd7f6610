"""Command-line pipeline: config ingestion, stage orchestration, reports.

Config is a JSON object::

    {
      "landscape": {"preset": "tilted_double_well"}
                   or {"dimension": 2, "V": "(x^2-1)^2 + y^2",
                       "b": ["...", "..."], "nu": ["...", "..."],
                       "box": 2.0},
      "h": [0.1, 0.15, 0.2],
      "c": [0.0],                      # perturbation strengths (presets only)
      "grid": {"n": 96},
      "stages": ["analyze", "spectrum"],
      "out": "runs/demo",
      "seed": 0,
      "sde": {"trials": 500, "radius": 0.3},
      "quasimode": {"export_fields": false},
      "graded": {"instances": 200}
    }

Stages run in dependency order; analyze is added implicitly when a later
stage needs its output.  Every run writes run_manifest.json (config,
versions, stage outcomes); data files are CSV with a fixed number format,
so identical config + seed reproduce byte-identical bodies.  Exit codes:
0 all stage assertions passed, 1 a stage failed, 2 config/usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import expr as ex
from .discretize import Grid, assemble, small_spectrum
from .graded import selftest as graded_selftest
from .labelling import SublevelTopology, label_minima
from .landscape import (
    Landscape,
    PRESETS,
    find_critical_points,
    make_preset,
    validate_stationarity,
)
from .quasimode import (
    GeometryError,
    build_cutoffs,
    build_quasimode,
    default_parameters,
    dirichlet_and_residuals,
    predicted_dirichlet,
    predicted_norm_sq,
)
from .saddle import predict_spectrum, transverse_map
from .sde import hitting_time_stats, make_config

STAGES = ("analyze", "spectrum", "quasimode", "sde", "graded-selftest")
_NEEDS_LANDSCAPE = ("analyze", "spectrum", "quasimode", "sde")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    landscape: dict | None
    h: tuple[float, ...]
    c: tuple[float, ...]
    grid_n: int
    stages: tuple[str, ...]
    out: Path
    seed: int
    sde_trials: int
    sde_radius: float
    quasimode_export: bool
    graded_instances: int


def _require(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def parse_config(path: Path, overrides: dict | None = None) -> RunConfig:
    """Load and validate a JSON run configuration."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    _require(isinstance(raw, dict), str(path), "top level must be an object")
    raw = dict(raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val

    stages = raw.get("stages")
    _require(isinstance(stages, list) and stages, "stages",
             "at least one stage is required")
    for s in stages:
        _require(s in STAGES, "stages",
                 f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    # dependency order, implicit analyze
    wanted = set(stages)
    if wanted & set(_NEEDS_LANDSCAPE[1:]):
        wanted.add("analyze")
    stages = tuple(s for s in STAGES if s in wanted)

    land = raw.get("landscape")
    if any(s in wanted for s in _NEEDS_LANDSCAPE):
        _require(isinstance(land, dict), "landscape",
                 f"required by stages {', '.join(sorted(wanted & set(_NEEDS_LANDSCAPE)))}")
        if "preset" in land:
            _require(land["preset"] in PRESETS, "landscape.preset",
                     f"unknown preset {land['preset']!r}; "
                     f"available: {', '.join(PRESETS)}")
        else:
            _require("V" in land, "landscape.V",
                     "missing potential expression")
            _require(land.get("dimension", 2) == 2, "landscape.dimension",
                     "only dimension 2 is supported")
            try:
                ex.parse(land["V"], 2)
            except ValueError as e:
                raise ConfigError(f"landscape.V: {e}") from e
            for key in ("b", "nu"):
                if key in land:
                    _require(isinstance(land[key], list)
                             and len(land[key]) == 2,
                             f"landscape.{key}",
                             "must be a list of 2 expressions")
                    for k, text in enumerate(land[key]):
                        try:
                            ex.parse(text, 2)
                        except ValueError as e:
                            raise ConfigError(
                                f"landscape.{key}[{k}]: {e}") from e
    else:
        land = None

    h = tuple(float(x) for x in raw.get("h", [0.1, 0.15, 0.2]))
    _require(len(h) > 0, "h", "at least one h value is required")
    for x in h:
        _require(0.0 < x <= 1.0, "h", f"h values must lie in (0, 1], got {x}")
    c = tuple(float(x) for x in raw.get("c", [0.0]))
    if land is not None and "preset" not in land:
        _require(c == (0.0,), "c",
                 "a c sweep applies to preset landscapes only")

    grid = raw.get("grid", {})
    _require(isinstance(grid, dict), "grid", "must be an object")
    grid_n = int(grid.get("n", 96))
    _require(grid_n >= 16, "grid.n", "needs at least 16 nodes per axis")

    sde_opts = raw.get("sde", {})
    qm_opts = raw.get("quasimode", {})
    graded_opts = raw.get("graded", {})
    out = Path(raw.get("out", "kramers_out"))
    seed = int(raw.get("seed", 0))

    return RunConfig(
        landscape=land,
        h=h,
        c=c,
        grid_n=grid_n,
        stages=stages,
        out=out,
        seed=seed,
        sde_trials=int(sde_opts.get("trials", 500)),
        sde_radius=float(sde_opts.get("radius", 0.3)),
        quasimode_export=bool(qm_opts.get("export_fields", False)),
        graded_instances=int(graded_opts.get("instances", 200)),
    )


# ---------------------------------------------------------------------------
# Deterministic CSV emission

def _fmt(x) -> str:
    if isinstance(x, float):
        return "%.12g" % x
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


# ---------------------------------------------------------------------------
# Stage implementations.  Each returns a list of artifact file names and
# raises StageFailure (with the violated invariant) to fail the run.

class StageFailure(RuntimeError):
    pass


@dataclass
class _Context:
    """Work shared between stages for one pipeline run."""

    cfg: RunConfig
    landscapes: dict = field(default_factory=dict)   # c -> Landscape
    analysis: dict = field(default_factory=dict)     # c -> (crit, wm, data)
    operators: dict = field(default_factory=dict)    # (h, c) -> OperatorMatrix
    lambda2: dict = field(default_factory=dict)      # (h, c) -> float

    def landscape(self, c: float) -> Landscape:
        if c not in self.landscapes:
            spec = self.cfg.landscape
            if "preset" in spec:
                kwargs = {"c": c}
                if "a" in spec:
                    kwargs["a"] = float(spec["a"])
                self.landscapes[c] = make_preset(spec["preset"], **kwargs)
            else:
                zero = ex.constant(0.0)
                b = tuple(ex.parse(t, 2) for t in spec["b"]) \
                    if "b" in spec else (zero, zero)
                nu = tuple(ex.parse(t, 2) for t in spec["nu"]) \
                    if "nu" in spec else (zero, zero)
                self.landscapes[c] = Landscape(
                    dimension=2, V=ex.parse(spec["V"], 2), b=b, nu=nu,
                    halfwidth=float(spec.get("box", 2.0)))
        return self.landscapes[c]

    def analyzed(self, c: float):
        if c not in self.analysis:
            land = self.landscape(c)
            crit = find_critical_points(land)
            wm = label_minima(crit, SublevelTopology(land))
            self.analysis[c] = (crit, wm, transverse_map(land, wm))
        return self.analysis[c]

    def operator(self, h: float, c: float):
        key = (h, c)
        if key not in self.operators:
            crit, _, _ = self.analyzed(c)
            grid = Grid(halfwidth=self.landscape(c).halfwidth, n=self.cfg.grid_n)
            self.operators[key] = assemble(self.landscape(c), h, grid,
                                           "L-weighted", criticals=crit)
        return self.operators[key]


def _stage_analyze(ctx: _Context) -> list[str]:
    cfg = ctx.cfg
    rows = []
    for c in cfg.c:
        land = ctx.landscape(c)
        station = validate_stationarity(land, tolerance=1e-10, seed=cfg.seed)
        if not station.passed:
            raise StageFailure(
                "analyze: drift field violates stationarity of exp(-V/h): "
                f"max |b.grad V| = {station.max_b_dot_grad_V:.3e}, "
                f"max |div nu| = {station.max_div_nu:.3e}, "
                f"max |div b - nu.grad V| = {station.max_div_b_mismatch:.3e} "
                f"> {station.tolerance:g}")
        _, wm, data = ctx.analyzed(c)
        preds = {h: predict_spectrum(land, wm, h, data) for h in cfg.h}
        for i in range(len(wm.wells)):
            base = preds[cfg.h[0]][i]
            row = [c,
                   float(base.minimum.point[0]), float(base.minimum.point[1]),
                   float(base.minimum.value), base.S, base.zeta]
            row.extend(preds[h][i].lam for h in cfg.h)
            rows.append(row)

    header = ["c", "m_x", "m_y", "V_m", "S", "zeta"]
    header.extend(f"lambda_h{_fmt(h)}" for h in cfg.h)
    _write_csv(cfg.out / "ek_table.csv", header, rows)

    _, wm0, _ = ctx.analyzed(cfg.c[0])
    wells_json = [{
        "round": w.round_index,
        "minimum": [float(x) for x in w.minimum.point],
        "V": float(w.minimum.value),
        "sigma": None if math.isinf(w.sigma) else w.sigma,
        "barrier": None if math.isinf(w.barrier) else w.barrier,
        "saddles": [[float(x) for x in s.point] for s in w.saddles],
        "is_global": w.is_global,
    } for w in sorted(wm0.wells, key=lambda w: w.round_index)]
    with open(cfg.out / "well_map.json", "w") as f:
        json.dump({"wells": wells_json}, f, indent=2)
        f.write("\n")
    return ["ek_table.csv", "well_map.json"]


def _stage_spectrum(ctx: _Context) -> list[str]:
    cfg = ctx.cfg
    rows = []
    for c in cfg.c:
        land = ctx.landscape(c)
        _, wm, data = ctx.analyzed(c)
        n0 = len(wm.wells)
        for h in cfg.h:
            res = small_spectrum(ctx.operator(h, c), count=max(6, n0 + 2))
            if res.n0_observed != n0:
                raise StageFailure(
                    f"spectrum: cluster size {res.n0_observed} != number of "
                    f"labelled wells {n0} at h={_fmt(h)}, c={_fmt(c)}")
            ek = sorted(p.lam for p in predict_spectrum(land, wm, h, data))
            for k in range(n0):
                lam = res.eigenvalues[k]
                ratio = lam.real / ek[k] if ek[k] > 0 else ""
                rows.append([h, c, k, lam.real, lam.imag, ek[k], ratio])
                if ek[k] > 0:
                    dev = abs(lam.real / ek[k] - 1.0)
                    if dev > 3.0 * math.sqrt(h):
                        raise StageFailure(
                            "spectrum: |lambda/EK - 1| = "
                            f"{dev:.3f} > 3 sqrt(h) at h={_fmt(h)}, "
                            f"c={_fmt(c)}, k={k}")
    _write_csv(cfg.out / "spectrum_sweep.csv",
               ["h", "c", "k", "re_lambda", "im_lambda", "ek", "ratio"],
               rows)
    return ["spectrum_sweep.csv"]


def _geometry_with_retry(well, wm, data, land, grid):
    rho0, delta0 = default_parameters(well, wm)
    for _ in range(4):
        try:
            return build_cutoffs(well, wm, data, land, grid,
                                 rho0=rho0, delta0=delta0)
        except GeometryError:
            rho0 *= 0.5
            delta0 *= 0.5
    raise StageFailure(
        f"quasimode: no admissible cutoff geometry for the well at "
        f"{well.minimum.point} after 3 bisections")


def _stage_quasimode(ctx: _Context) -> list[str]:
    cfg = ctx.cfg
    rows, artifacts = [], []
    for c in cfg.c:
        land = ctx.landscape(c)
        _, wm, data = ctx.analyzed(c)
        grid = Grid(halfwidth=land.halfwidth, n=cfg.grid_n)
        for well in sorted(wm.wells, key=lambda w: w.round_index):
            if well.is_global:
                continue
            geom = _geometry_with_retry(well, wm, data, land, grid)
            for h in cfg.h:
                qm = build_quasimode(well, geom, h)
                forms = dirichlet_and_residuals(qm, ctx.operator(h, c))
                norm_pred = predicted_norm_sq(well, wm, h)
                _, dir_pred = predicted_dirichlet(well, wm, data, h)
                norm_ratio = qm.norm**2 / norm_pred
                rows.append([
                    c, h, well.round_index, qm.norm**2, norm_pred,
                    norm_ratio, forms.dirichlet_phi, dir_pred,
                    forms.dirichlet_phi / dir_pred, forms.residual_sq,
                    forms.adjoint_residual_sq,
                ])
                if abs(norm_ratio - 1.0) > 10.0 * h:
                    raise StageFailure(
                        "quasimode: ||psi||^2 off the harmonic prediction "
                        f"by {norm_ratio:.3f} (allowed 1 +- {10 * h:g}) at "
                        f"h={_fmt(h)}, c={_fmt(c)}, "
                        f"well round {well.round_index}")
                if cfg.quasimode_export:
                    name = (f"psi_grid_c{_fmt(c)}_well{well.round_index}"
                            f"_h{_fmt(h)}.csv")
                    pts = grid.points()
                    _write_csv(cfg.out / name, ["x", "y", "psi"],
                               [[float(p[0]), float(p[1]), float(v)]
                                for p, v in zip(pts, qm.values)])
                    artifacts.append(name)
    _write_csv(cfg.out / "quasimode_report.csv",
               ["c", "h", "well", "norm_sq", "norm_sq_pred", "norm_ratio",
                "dirichlet_phi", "dirichlet_pred", "dirichlet_ratio",
                "residual_sq", "adjoint_residual_sq"],
               rows)
    return ["quasimode_report.csv"] + artifacts


def _stage_sde(ctx: _Context) -> list[str]:
    cfg = ctx.cfg
    rows = []
    for c in cfg.c:
        land = ctx.landscape(c)
        _, wm, _ = ctx.analyzed(c)
        start = min((w for w in wm.wells if not w.is_global),
                    key=lambda w: w.round_index)
        for h in cfg.h:
            key = (h, c)
            if key not in ctx.lambda2:
                res = small_spectrum(ctx.operator(h, c),
                                     count=max(6, len(wm.wells) + 2))
                ctx.lambda2[key] = float(res.eigenvalues[1].real)
            lam2 = ctx.lambda2[key]
            sim = make_config(land, wm, h, start_well=start,
                              radius=cfg.sde_radius, trials=cfg.sde_trials,
                              seed=cfg.seed)
            st = hitting_time_stats(sim)
            ratio = st.mean * lam2
            rows.append([h, c, st.mean, st.stderr, 1.0 / lam2, ratio])
            if not 0.5 <= ratio <= 2.0:
                raise StageFailure(
                    "sde: mean hitting time is off the spectral prediction "
                    f"1/lambda_2 by factor {ratio:.2f} (allowed [0.5, 2]) "
                    f"at h={_fmt(h)}, c={_fmt(c)}")
    _write_csv(cfg.out / "sde_report.csv",
               ["h", "c", "mean_tau", "stderr", "inv_lambda2", "ratio"],
               rows)
    return ["sde_report.csv"]


def _stage_graded(ctx: _Context) -> list[str]:
    cfg = ctx.cfg
    report = graded_selftest(instances=cfg.graded_instances, seed=cfg.seed)
    with open(cfg.out / "graded_selftest.json", "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    _check_graded_report(report)
    return ["graded_selftest.json"]


def _check_graded_report(report: dict) -> None:
    if report["failures"]:
        raise StageFailure(
            f"graded-selftest: {report['failures']} instances failed "
            "cluster localization")
    shrink = report["min_shrink_ratio_h_over_h10"]
    if shrink is not None and shrink < 5.0:
        raise StageFailure(
            "graded-selftest: eigenvalue clusters shrank only "
            f"{shrink:.2f}x when h shrank 10x (need >= 5x)")


_STAGE_FUNCS = {
    "analyze": _stage_analyze,
    "spectrum": _stage_spectrum,
    "quasimode": _stage_quasimode,
    "sde": _stage_sde,
    "graded-selftest": _stage_graded,
}


def _versions() -> dict:
    import scipy

    from . import __version__

    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "kramers_lab": __version__,
    }


def run(cfg: RunConfig) -> int:
    """Execute the configured stages; returns the process exit code."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg)
    stage_records = []
    failed = False
    for name in cfg.stages:
        if failed:
            stage_records.append({"stage": name, "status": "skipped",
                                  "message": "earlier stage failed",
                                  "artifacts": []})
            continue
        try:
            artifacts = _STAGE_FUNCS[name](ctx)
            stage_records.append({"stage": name, "status": "passed",
                                  "message": "", "artifacts": artifacts})
        except StageFailure as e:
            print(f"FAILED {e}", file=sys.stderr)
            stage_records.append({"stage": name, "status": "failed",
                                  "message": str(e), "artifacts": []})
            failed = True
        except (ValueError, RuntimeError) as e:
            msg = f"{name}: {type(e).__name__}: {e}"
            print(f"FAILED {msg}", file=sys.stderr)
            stage_records.append({"stage": name, "status": "failed",
                                  "message": msg, "artifacts": []})
            failed = True

    manifest = {
        "config": {
            "landscape": cfg.landscape,
            "h": list(cfg.h),
            "c": list(cfg.c),
            "grid": {"n": cfg.grid_n},
            "stages": list(cfg.stages),
            "out": str(cfg.out),
            "seed": cfg.seed,
            "sde": {"trials": cfg.sde_trials, "radius": cfg.sde_radius},
            "quasimode": {"export_fields": cfg.quasimode_export},
            "graded": {"instances": cfg.graded_instances},
        },
        "versions": _versions(),
        "seed": cfg.seed,
        "stages": stage_records,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    with open(cfg.out / "run_manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")

    for rec in stage_records:
        print(f"{rec['stage']}: {rec['status']}")
    return 1 if failed else 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="kramers-lab",
        description="Eyring-Kramers spectral asymptotics: prediction and "
                    "validation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a JSON-configured pipeline")
    p_run.add_argument("config", type=Path)
    p_run.add_argument("--out", type=Path, default=None,
                       help="output directory (overrides config)")
    p_run.add_argument("--seed", type=int, default=None,
                       help="RNG seed (overrides config)")
    p_run.add_argument("--stages", type=str, default=None,
                       help="comma-separated stage list (overrides config)")

    p_self = sub.add_parser(
        "selftest",
        help="graded-matrix localization self-test; prints a JSON report")
    p_self.add_argument("--instances", type=int, default=200)
    p_self.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)

    if args.command == "selftest":
        report = graded_selftest(instances=args.instances, seed=args.seed)
        print(json.dumps(report, indent=2))
        try:
            _check_graded_report(report)
        except StageFailure as e:
            print(f"FAILED {e}", file=sys.stderr)
            return 1
        return 0

    overrides = {"out": str(args.out) if args.out is not None else None,
                 "seed": args.seed,
                 "stages": args.stages.split(",") if args.stages else None}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
