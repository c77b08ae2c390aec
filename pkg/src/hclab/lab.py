"""Experiment runner and CLI.

A study sweeps eps over a decreasing list, minimizes the composite energy per
eps with warm starts, computes the homogenized reference once, and emits a
report whose columns are the checkable quantities of the theory: energy
breakdowns, the splitting remainder, Poincare and extension constants,
hardening-continuity errors, unfolding residuals, and the gap to the
homogenized minimum.  Identical config and seed give bit-identical reports.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hclab import cellproblems, energies, materials, microgeometry, minimize, slgeometry, twoscale
from hclab.fields import DeformationField, Grid, PlasticField, prolong_deformation, prolong_plastic


class IoFailure(OSError):
    pass


class ConfigError(ValueError):
    pass


COLUMNS = [
    "eps", "infJ", "soft_el", "stiff_el", "hard_soft", "hard_stiff", "gradP",
    "diss_soft", "diss_stiff", "remainder", "poincare", "ext_const",
    "hard_cont_err", "unfold_resid", "gap",
]


@dataclass
class StudyConfig:
    """Declarative description of one convergence study."""

    geometry: dict = field(default_factory=lambda: {"builtin": "block4"})
    material: dict = field(default_factory=dict)
    eps_list: list = field(default_factory=lambda: [0.25, 0.125, 0.0625])
    strip: float = 0.5
    macro_elements: int = 8
    cell_resolution: int | None = None
    lambdas: list = field(default_factory=lambda: [1, 2])
    quantization_step: float = 1e-2
    tolerances: dict = field(default_factory=lambda: {
        "outer": 1e-8, "linear": 1e-10, "cell": 1e-8, "plastic": 1e-7})
    seed: int = 1234
    toggles: dict = field(default_factory=lambda: {
        "dissipation": False, "recovery_check": True, "correction": False})
    output_dir: str = "out"
    acceptance: dict | None = None

    def validate(self) -> None:
        eps = list(self.eps_list)
        if not eps:
            raise ConfigError("eps_list must not be empty")
        for e in eps:
            n = round(1.0 / e)
            if abs(e * n - 1.0) > 1e-12 or n < 2:
                raise ConfigError(f"eps {e} is not the reciprocal of an integer >= 2")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps_list must be strictly decreasing")
        if "mask_file" in self.geometry and not Path(self.geometry["mask_file"]).exists():
            raise ConfigError(f"mask file {self.geometry['mask_file']} does not exist")

    def hash(self) -> str:
        """Short content hash of the study definition (output location excluded)."""
        payload = asdict(self)
        payload.pop("output_dir", None)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def load_config(path) -> StudyConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    cfg = StudyConfig(**data)
    cfg.validate()
    return cfg


def _build_cell(geometry: dict) -> microgeometry.CellGeometry:
    if "builtin" in geometry:
        return microgeometry.builtin_cell(geometry["builtin"])
    if "mask_file" in geometry:
        return microgeometry.load_cell_mask(geometry["mask_file"])
    raise ConfigError("geometry must name a builtin or a mask_file")


def _build_model(material_spec: dict, dim: int) -> materials.MaterialModel:
    spec = dict(material_spec)
    spec.setdefault("dim", dim)
    return materials.default_material(**spec)


# -- fixed diagnostic fields ---------------------------------------------------


def _bump_values(coords: np.ndarray) -> np.ndarray:
    s = np.prod(np.sin(np.pi * coords), axis=-1)
    out = np.zeros_like(coords)
    out[:, 0] = 0.5 * s
    out[:, 1] = 0.3 * s + 0.2 * np.sin(2.0 * np.pi * coords[:, 0]) * np.prod(
        coords[:, 1:] * (1.0 - coords[:, 1:]), axis=-1)
    return out


def _oscillatory_values(coords: np.ndarray) -> np.ndarray:
    out = np.zeros_like(coords)
    out[:, 0] = np.sin(3.0 * np.pi * coords[:, 0]) * np.sin(np.pi * coords[:, 1]) \
        + 0.3 * np.cos(2.0 * np.pi * coords[:, 1])
    out[:, 1] = np.cos(np.pi * coords[:, 0]) * np.sin(2.0 * np.pi * coords[:, 1])
    return out


def _smooth_plastic(grid: Grid, r_K: float) -> PlasticField:
    coords = grid.node_coords()
    g = np.prod(np.sin(np.pi * coords), axis=-1)
    k = grid.dim**2 - 1
    direction = np.zeros(k)
    direction[0] = 0.8
    direction[1] = 0.35
    direction /= np.linalg.norm(direction)
    coeffs = 0.8 * r_K * g[:, None] * direction[None, :]
    return PlasticField(grid, coeffs, r_K=r_K)


def _random_field(grid: Grid, seed: int) -> DeformationField:
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((grid.n_nodes, grid.dim))
    return DeformationField(grid, vals, bc="free")


# -- per-row diagnostics ---------------------------------------------------------


def _hardening_continuity_error(domain, model, P: PlasticField) -> float:
    grid = P.grid
    Hg = model.hardening_smooth(grid.gauss_matrix_values(P.matrices()))
    soft = domain.soft_field.reshape(-1)
    int_soft = grid.integrate(Hg, element_mask=soft)
    int_all = grid.integrate(Hg)
    vol_s = float(domain.cell.vol_soft)
    vol_t = 1.0 - vol_s
    return max(abs(int_soft - vol_s * int_all), abs((int_all - int_soft) - vol_t * int_all))


def _unfold_residual(domain, seed: int) -> float:
    grid = Grid(domain.dim, domain.n_el)
    y = _random_field(grid, seed)
    tsf = twoscale.unfold(domain, y)
    norm_dev = abs(grid.lattice_norm_sq(y.values) - tsf.norm_sq())
    lhs = twoscale.unfold_scaled_gradients(domain, y)
    rhs = tsf.micro_gradients()
    grad_dev = float(np.max(np.abs(lhs - rhs)))
    return max(norm_dev, grad_dev)


@dataclass
class StudyReport:
    """Reference row + per-eps rows, all carrying the config hash."""

    config_hash: str
    reference: dict
    rows: list
    metadata: dict
    extras: dict = field(default_factory=dict)

    def all_rows(self) -> list:
        return [self.reference] + self.rows


def run_convergence_study(config: StudyConfig) -> StudyReport:
    """Execute the full pipeline; see the module docstring for the stages."""
    config.validate()
    cell = _build_cell(config.geometry)
    model = _build_model(config.material, cell.dim)
    cell_res = config.cell_resolution if config.cell_resolution else cell.resolution
    cache = cellproblems.HomDensityCache(
        step=config.quantization_step, lambdas=tuple(config.lambdas),
        resolution=cell_res, tol=config.tolerances.get("cell", 1e-8), seed=config.seed)
    schedule = minimize.Schedule(
        outer_tol=config.tolerances.get("outer", 1e-8),
        y_tol=config.tolerances.get("linear", 1e-10),
        p_tol=config.tolerances.get("plastic", 1e-7),
    )

    y_ref, P_ref, min_J, ref_report = minimize.minimize_J_limit(
        cell, model, cache=cache, macro_elements=config.macro_elements, schedule=schedule)
    ref_bd = ref_report.breakdown
    solve_reports = {"reference": ref_report.to_json_dict()}
    chash = config.hash()
    reference = {
        "eps": 0.0, "infJ": min_J,
        "soft_el": ref_bd.soft_elastic, "stiff_el": ref_bd.stiff_elastic,
        "hard_soft": ref_bd.hardening_soft, "hard_stiff": ref_bd.hardening_stiff,
        "gradP": ref_bd.grad_P_term, "diss_soft": 0.0, "diss_stiff": 0.0,
        "remainder": 0.0, "poincare": 0.0, "ext_const": 0.0,
        "hard_cont_err": 0.0, "unfold_resid": 0.0, "gap": 0.0,
        "config_hash": chash,
    }

    rows = []
    artifacts = {"reference": (y_ref, P_ref), "rows": {}}
    prev = None
    for eps in config.eps_list:
        n = round(1.0 / eps)
        domain = microgeometry.build_micro_domain(cell, n, strip=config.strip)
        grid = Grid(domain.dim, domain.n_el)
        if prev is None:
            init = None
        else:
            y_prev, P_prev = prev
            init = (prolong_deformation(y_prev, grid), prolong_plastic(P_prev, grid))
        y, P, value, row_report = minimize.minimize_J_eps(domain, model, init=init, schedule=schedule)
        solve_reports[f"eps={eps!r}"] = row_report.to_json_dict()
        prev = (y, P)
        artifacts["rows"][eps] = (domain, y, P)
        bd = energies.assemble_J_eps(domain, model, y, P)

        ytilde = twoscale.extend_into_inclusions(domain, y)
        v = DeformationField(grid, y.values - ytilde.values, bc="zero")
        bd_v = energies.assemble_J_eps(domain, model, v, P)
        remainder = abs((bd.soft_elastic + bd.hardening_soft) - (bd_v.soft_elastic + bd_v.hardening_soft))

        bump = DeformationField(grid, _bump_values(grid.node_coords()), bc="zero")
        poincare = twoscale.poincare_ratio(domain, bump)
        osc = DeformationField(grid, _oscillatory_values(grid.node_coords()), bc="free")
        c0, c1, _ = twoscale.extension_constants(domain, osc)
        P_smooth = _smooth_plastic(grid, model.K_radius)
        hard_err = _hardening_continuity_error(domain, model, P_smooth)
        resid = _unfold_residual(domain, config.seed)

        if config.toggles.get("dissipation", False):
            P_bar = PlasticField.identity(grid, r_K=model.K_radius)
            d0 = slgeometry.dissipation_integral(domain, P_bar, P, phase=0)
            d1 = slgeometry.dissipation_integral(domain, P_bar, P, phase=1)
        else:
            d0 = d1 = 0.0

        rows.append({
            "eps": eps, "infJ": value,
            "soft_el": bd.soft_elastic, "stiff_el": bd.stiff_elastic,
            "hard_soft": bd.hardening_soft, "hard_stiff": bd.hardening_stiff,
            "gradP": bd.grad_P_term, "diss_soft": d0, "diss_stiff": d1,
            "remainder": remainder, "poincare": poincare, "ext_const": max(c0, c1),
            "hard_cont_err": hard_err, "unfold_resid": resid,
            "gap": abs(value - min_J) / max(1.0, abs(min_J)),
            "config_hash": chash,
        })

    extras = {}
    if config.toggles.get("recovery_check", True):
        eps_f = config.eps_list[-1]
        domain_f, y_f, P_f = artifacts["rows"][eps_f]

        def w_zero(x, z):
            return np.zeros_like(x)

        v_k = twoscale.build_recovery_sequence(domain_f, w_zero, P_field=P_f)
        bd_rec = energies.assemble_J_eps(domain_f, model, v_k, P_f)
        J0k = bd_rec.soft_elastic + bd_rec.hardening_soft
        J0_limit = ref_bd.soft_elastic + ref_bd.hardening_soft
        extras["recovery"] = {
            "eps": eps_f, "J0_eps": J0k, "J0_limit": J0_limit,
            "bound_ok": bool(J0k <= J0_limit + 0.05 * (1.0 + J0_limit)),
        }

    report = StudyReport(
        config_hash=chash,
        reference=reference,
        rows=rows,
        metadata={
            "seed": config.seed,
            "tolerances": dict(config.tolerances),
            "config": asdict(config),
            "min_J": min_J,
            "almost_minimizer_tol": config.tolerances.get("outer", 1e-8),
            "solve_reports": solve_reports,
            "workers": os.environ.get("HCLAB_WORKERS", "1"),
        },
        extras=extras,
    )
    report.artifacts = artifacts
    return report


# -- emission ---------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def emit_report(report: StudyReport, formats=("csv", "json"), outdir=None) -> dict:
    """Write the report files; returns {format: path}.  Bytes are a pure
    function of the report contents."""
    outdir = Path(outdir if outdir is not None else report.metadata["config"]["output_dir"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output dir {outdir}: {exc}") from exc
    paths = {}
    if "csv" in formats:
        lines = [",".join(COLUMNS + ["config_hash"])]
        for row in report.all_rows():
            lines.append(",".join(_fmt(row[c]) for c in COLUMNS) + "," + row["config_hash"])
        path = outdir / "report.csv"
        path.write_text("\n".join(lines) + "\n")
        paths["csv"] = path
        long_lines = ["eps,metric,value"]
        for row in report.all_rows():
            for c in COLUMNS[1:]:
                long_lines.append(f"{_fmt(row['eps'])},{c},{_fmt(row[c])}")
        long_path = outdir / "report_long.csv"
        long_path.write_text("\n".join(long_lines) + "\n")
        paths["long"] = long_path
    if "json" in formats:
        payload = {
            "config_hash": report.config_hash,
            "reference": report.reference,
            "rows": report.rows,
            "metadata": report.metadata,
            "extras": report.extras,
        }
        path = outdir / "report.json"
        path.write_text(json.dumps(payload, sort_keys=True, indent=1))
        paths["json"] = path
    return paths


def parse_report(csv_path) -> list:
    """Read back the CSV rows as dicts (exact round trip of the emitted floats)."""
    lines = Path(csv_path).read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row = {}
        for name, cell in zip(header, cells):
            row[name] = cell if name == "config_hash" else float(cell)
        rows.append(row)
    return rows


def evaluate_acceptance(report: StudyReport, acceptance: dict) -> list:
    """Evaluate the config's acceptance block; returns [(name, ok)]."""
    checks = []
    gaps = [row["gap"] for row in report.rows]
    if acceptance.get("require_gap_decreasing"):
        ok = all(b < a for a, b in zip(gaps, gaps[1:]))
        checks.append(("gap_decreasing", ok))
    if acceptance.get("max_final_gap") is not None:
        checks.append(("final_gap", gaps[-1] < acceptance["max_final_gap"]))
    if acceptance.get("max_gap_all") is not None:
        checks.append(("gap_all", all(g < acceptance["max_gap_all"] for g in gaps)))
    if acceptance.get("max_unfold_resid") is not None:
        checks.append(("unfold_resid", all(
            row["unfold_resid"] <= acceptance["max_unfold_resid"] for row in report.rows)))
    if acceptance.get("recovery_bound") and "recovery" in report.extras:
        checks.append(("recovery_bound", report.extras["recovery"]["bound_ok"]))
    return checks


# -- CLI -------------------------------------------------------------------------


def _parse_matrix(text: str, dim: int) -> np.ndarray:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != dim * dim:
        raise ConfigError(f"expected {dim*dim} entries, got {len(vals)}")
    return np.array(vals).reshape(dim, dim)


def _cell_from_arg(arg: str) -> microgeometry.CellGeometry:
    if arg.startswith("builtin:"):
        return microgeometry.builtin_cell(arg.split(":", 1)[1])
    return microgeometry.load_cell_mask(arg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hclab", description="high-contrast composite laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    study = sub.add_parser("study", help="convergence studies")
    study_sub = study.add_subparsers(dest="study_command", required=True)
    run = study_sub.add_parser("run", help="run a study from a JSON config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--output-dir", default=None)
    run.add_argument("--eps", type=float, nargs="*", default=None)
    run.add_argument("--macro-elements", type=int, default=None)
    run.add_argument("--cell-resolution", type=int, default=None)

    cellp = sub.add_parser("cell", help="cell problems")
    cell_sub = cellp.add_subparsers(dest="cell_command", required=True)
    qp = cell_sub.add_parser("qprime", help="quasiconvexified soft cell value")
    qp.add_argument("--cell", default="builtin:block4")
    qp.add_argument("--F", default=None)
    qp.add_argument("--G", default=None)
    qp.add_argument("--resolution", type=int, default=32)
    qp.add_argument("--formulation", default="over_Q0", choices=["over_Q0", "over_Q"])
    qp.add_argument("--soft", default="convex", choices=["convex", "twowell"])
    mc = cell_sub.add_parser("multicell", help="multi-cell stiff density")
    mc.add_argument("--cell", default="builtin:block4")
    mc.add_argument("--F", default=None)
    mc.add_argument("--G", default=None)
    mc.add_argument("--resolution", type=int, default=32)
    mc.add_argument("--lambdas", default="1,2")
    mc.add_argument("--gamma", type=float, default=1.0)

    audit = sub.add_parser("audit", help="assumption audits")
    audit_sub = audit.add_subparsers(dest="audit_command", required=True)
    am = audit_sub.add_parser("model", help="audit the standing assumptions of a model")
    am.add_argument("--samples", type=int, default=10_000)
    am.add_argument("--seed", type=int, default=0)
    am.add_argument("--gamma", type=float, default=1.0)
    am.add_argument("--soft", default="convex", choices=["convex", "twowell"])

    geom = sub.add_parser("geom", help="geometry utilities")
    geom_sub = geom.add_subparsers(dest="geom_command", required=True)
    gc = geom_sub.add_parser("check", help="validate a cell mask and report measures")
    gc.add_argument("cell")
    gc.add_argument("--n-cells", type=int, default=None)
    gc.add_argument("--strip", type=float, default=0.5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "study" and args.study_command == "run":
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.output_dir is not None:
            config.output_dir = args.output_dir
        if args.eps:
            config.eps_list = list(args.eps)
        if args.macro_elements is not None:
            config.macro_elements = args.macro_elements
        if args.cell_resolution is not None:
            config.cell_resolution = args.cell_resolution
        config.validate()
        report = run_convergence_study(config)
        paths = emit_report(report, outdir=config.output_dir)
        print(f"reference min J = {report.metadata['min_J']:.8g}")
        for row in report.rows:
            print(f"eps={row['eps']:<8g} infJ={row['infJ']:.8g} gap={row['gap']:.3e}")
        for fmt, path in paths.items():
            print(f"wrote {fmt}: {path}")
        if config.acceptance:
            checks = evaluate_acceptance(report, config.acceptance)
            for name, ok in checks:
                print(f"acceptance {name}: {'PASS' if ok else 'FAIL'}")
            return 0 if all(ok for _, ok in checks) else 1
        return 0

    if args.command == "cell":
        cell = _cell_from_arg(args.cell)
        d = cell.dim
        F = _parse_matrix(args.F, d) if args.F else np.zeros((d, d))
        G = _parse_matrix(args.G, d) if args.G else np.eye(d)
        if args.cell_command == "qprime":
            model = materials.default_material(dim=d, soft=args.soft)
            res = cellproblems.qprime_W0(cell, model.W_soft_limit, F, G,
                                         resolution=args.resolution, formulation=args.formulation)
            print(f"QW0 = {res.value:.10g}  (iterations {res.iterations}, residual {res.residual:.2e},"
                  f" converged {res.converged})")
            return 0
        if args.cell_command == "multicell":
            lambdas = tuple(int(v) for v in args.lambdas.split(","))
            stiff = materials.StiffDensity(args.gamma)
            res = cellproblems.multicell_W1hom(cell, stiff, F, G, lambdas=lambdas,
                                               resolution=args.resolution)
            for lam, r in sorted(res.per_lambda.items()):
                print(f"lambda={lam}: {r.value:.10g} (converged {r.converged})")
            print(f"estimate = {res.estimate:.10g}")
            return 0

    if args.command == "audit" and args.audit_command == "model":
        model = materials.default_material(gamma=args.gamma, soft=args.soft)
        rep = materials.audit_assumptions(model, sample_count=args.samples, seed=args.seed)
        for name in sorted(rep.margins):
            print(f"{name:<18} margin {rep.margins[name]: .6e}")
        print(f"measured c_K = {rep.measured_cK:.6g}")
        print("PASS" if rep.is_pass else "FAIL")
        return 0 if rep.is_pass else 1

    if args.command == "geom" and args.geom_command == "check":
        cell = _cell_from_arg(args.cell)
        print(f"dim {cell.dim}, resolution {cell.resolution}, |soft| = {cell.vol_soft}"
              f" ({float(cell.vol_soft):.6g}), degenerate {cell.degenerate}")
        if args.n_cells:
            domain = microgeometry.build_micro_domain(cell, args.n_cells, strip=args.strip)
            print(f"eps = 1/{args.n_cells}: |T| = {len(domain.translations)},"
                  f" |T_hat| = {len(domain.translations_hat)},"
                  f" soft measure = {domain.measure_soft()} ({float(domain.measure_soft()):.6g})")
        print("geometry OK")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
