"""Run a scenario's batteries in dependency order and emit the report."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .conditions import (
    ProbeBudget,
    combine_certificate,
    el_residual,
    qc_boundary_probe,
    qc_interior_probe,
    second_variation_form,
    second_variation_min_rayleigh,
)
from .decomposition import (
    ball_murat_grad_sq_cells,
    equi_modulus,
    orthogonality_sweep,
    pi_decomposition_check,
)
from .errors import NoConvergence
from .lagrangian import reduce, tensor_extreme_eigs
from .measures import limit_bundle, localization_check
from .scenario import LagrangianSpec, Scenario, build_extremal
from .variations import BallMurat, BallMuratSequence, delta_prime_estimator, increments

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
BATTERY_ORDER = ("el", "secvar", "qc_interior", "qc_boundary", "sequences", "decomposition", "measures", "localization")


class OrchestrationError(RuntimeError):
    """The scenario could not be set up (Lagrangian, domain or extremal)."""


def battery_seed(seed: int, name: str) -> int:
    """Per-battery seed, so that toggling one battery leaves the others unchanged."""
    return (int(seed) + zlib.crc32(name.encode())) % 2**32


@dataclass
class Trace:
    columns: list
    rows: list

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "rows": [list(r) for r in self.rows]}


@dataclass
class Report:
    scenario: dict
    seed: int
    batteries: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    verdict: dict = field(default_factory=dict)
    schedules: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "provenance": {
                "toolkit_version": __version__,
                "seed": self.seed,
                "battery_seeds": {name: battery_seed(self.seed, name) for name in self.batteries},
                "schedules": self.schedules,
            },
            "scenario": self.scenario,
            "batteries": self.batteries,
            "verdict": self.verdict,
            "traces": {name: t.to_dict() for name, t in self.traces.items()},
        }


def _requested(s: Scenario) -> list[str]:
    b = s.battery
    flags = {
        "el": b.el,
        "secvar": b.secvar,
        "qc_interior": bool(b.qc_interior),
        "qc_boundary": bool(b.qc_boundary),
        "sequences": bool(b.sequences),
        "decomposition": b.decomposition is not None,
        "measures": b.measures is not None,
        "localization": b.localization is not None,
    }
    return [name for name in BATTERY_ORDER if flags[name]]


def _probe_trace(p) -> Trace:
    rows = [[i, float(a), float(b)] for i, (a, b) in enumerate(zip(p.initial_values, p.restart_values))]
    return Trace(["restart", "initial_value", "final_value"], rows)


def _run_probes(points, kind: str, R, domain, budget: ProbeBudget, seed: int, report: Report) -> list:
    children = np.random.SeedSequence(seed).spawn(len(points))
    probes = []
    for i, x0 in enumerate(points):
        s = int(children[i].generate_state(1)[0])
        if kind == "qc_interior":
            p = qc_interior_probe(R, x0, budget, s, domain)
        else:
            p = qc_boundary_probe(R, x0, domain, budget, s)
        probes.append(p)
        report.traces[f"{kind}_{i}"] = _probe_trace(p)
    return probes


def run_scenario(s: Scenario, only: list[str] | None = None) -> Report:
    """Execute the requested batteries; failures inside a battery are recorded and the run continues.

    ``only`` restricts the run to the named batteries.
    """
    report = Report(scenario=s.to_dict(), seed=s.seed)
    names = _requested(s) if only is None else [n for n in BATTERY_ORDER if n in only]
    if not names:
        report.verdict = _verdict({}, {}, names)
        return report
    try:
        domain = s.domain.build()
        W = s.lagrangian.build(domain.d, battery_seed(s.seed, "lagrangian"))
        y = build_extremal(s.extremal, domain, W)
        R = reduce(W, y)
    except Exception as exc:  # noqa: BLE001 - every setup failure is an orchestration failure
        raise OrchestrationError(f"{type(exc).__name__}: {exc}") from exc
    b = s.battery
    budget = ProbeBudget(s.budgets.multistarts, s.budgets.iters, s.budgets.grid_res, s.budgets.tol)
    parts: dict = {}

    def run(name, fn):
        try:
            result = fn()
            report.batteries[name] = {"status": "ok", "result": result}
        except Exception as exc:  # noqa: BLE001 - recorded per battery
            log.warning("battery %s failed: %s", name, exc)
            err = {"type": type(exc).__name__, "message": str(exc)}
            if isinstance(exc, NoConvergence) and exc.interval is not None:
                err["interval"] = list(exc.interval)
            report.batteries[name] = {"status": "error", "error": err}

    def el_battery():
        el = el_residual(W, y)
        parts["el"] = el
        return {**el.to_dict(), "tolerance": s.budgets.el_tol, "passed": el.norm <= s.budgets.el_tol}

    def secvar_battery():
        form = second_variation_form(R, y)
        ray = second_variation_min_rayleigh(form, tol=s.budgets.secvar_tol, seed=battery_seed(s.seed, "secvar"))
        parts["secvar"] = ray.value
        lo, hi = tensor_extreme_eigs(R.L(domain.quad_points().reshape(-1, domain.d)))
        return {
            "min_rayleigh": ray.value,
            "residual": ray.residual,
            "method": ray.method,
            "dofs": form.size,
            "pointwise_L_eig_range": [lo, hi],
            "positive": ray.value > 0,
        }

    def qc_battery(kind, points):
        def go():
            probes = _run_probes(points, kind, R, domain, budget, battery_seed(s.seed, kind), report)
            parts.setdefault("probes", []).extend(probes)
            return {"points": [p.to_dict() for p in probes], "budget": asdict(budget)}

        return go

    def sequences_battery():
        out = []
        for i, spec in enumerate(b.sequences):
            try:
                seq = spec.build(domain, W.m)
                trace = increments(W, y, seq)
            except Exception as exc:  # noqa: BLE001 - one bad sequence does not stop the others
                out.append({"sequence": spec.model_dump(mode="json"), "status": "error", "error": {"type": type(exc).__name__, "message": str(exc)}})
                continue
            est = delta_prime_estimator(trace)
            name = f"sequence_{i}_{seq.kind}"
            cols = ["n", "alpha", "dE", "dE_prime", "dE_prime_F", "l2sq", "ratio", "ratio_prime", "identity_gap"]
            report.traces[name] = Trace(cols, [[r[c] for c in cols] for r in trace.records])
            report.schedules[name] = seq.describe()
            out.append({"sequence": seq.describe(), "status": "ok", "estimate": est.to_dict(), "trace": name})
        return out

    def decomposition_battery():
        spec = b.decomposition
        if spec.kind == "ball_murat":
            rows = pi_decomposition_check(BallMuratSequence(spec.schedule), spec.j)
            cols = ["n", "j", "pi_total", "pi_tilde_total", "m_total", "cross_total", "gap", "bad_measure"]
            report.traces["decomposition_pi"] = Trace(cols, [[r[c] for c in cols] for r in rows])
            family = [
                (lambda mv: (mv[0] / mv[0].sum(), mv[1]))(ball_murat_grad_sq_cells(n)) for n in spec.schedule
            ]
            eq = equi_modulus(family, spec.deltas)
            report.traces["decomposition_equi"] = Trace(["delta", "modulus"], [list(r) for r in zip(eq.deltas, eq.modulus)])
            report.schedules["decomposition"] = {"n": list(spec.schedule), "j": spec.j, "deltas": list(spec.deltas)}
            return {"pi": [{k: r[k] for k in cols} for r in rows], "raw_gradient_modulus": eq.to_dict()}
        lag = spec.lagrangian or LagrangianSpec(builtin="poly", m=1, d=1, params=_ORTHOGONALITY_POLY)
        W1 = lag.build(1)
        if W1.m != 1 or W1.d != 1:
            raise ValueError("the oscillation+spike family is scalar on an interval; its Lagrangian needs m = d = 1")
        sweep = orthogonality_sweep(reduce(W1, np.zeros((1, 1))), spec.ns, spec.offset, seed=battery_seed(s.seed, "decomposition"))
        cols = ["n", "j", "alpha", "residual", "bound", "relative_residual", "bad_measure", "realized_C"]
        report.traces["decomposition_orthogonality"] = Trace(cols, [[r[c] for c in cols] for r in sweep["rows"]])
        report.schedules["decomposition"] = {"n": list(spec.ns), "offset": spec.offset, "j": "2^(n/4)", "alpha": "2^(-n/2)"}
        return sweep

    def measures_battery():
        spec = b.measures
        seq = spec.sequence.build(domain, W.m)
        lim = limit_bundle(seq, pool_tail=spec.pool_tail)
        total = lim.total_mass
        leb = lim.cell_volumes / lim.cell_volumes.sum()
        rows = [
            [i] + [float(c) for c in lim.cell_centers[i]] + [float(lim.cell_mass[i] / total), float(leb[i])]
            for i in range(lim.cell_mass.size)
        ]
        cols = ["cell"] + [f"x{a + 1}" for a in range(lim.cell_centers.shape[1])] + ["mass_fraction", "lebesgue_fraction"]
        report.traces["measures_cells"] = Trace(cols, rows)
        report.schedules["measures"] = seq.describe()
        out = {
            "sequence": seq.describe(),
            "total_mass": total,
            "cumulative_deviation": lim.cumulative_deviation(),
            "drift": lim.drift,
            "realized_radius": lim.realized_radius(),
            "n_atoms": int(lim.atom_w.size),
        }
        if isinstance(seq, BallMuratSequence):
            out["young_atom_at_zero"] = {str(n): float(BallMurat(n).young_atom_at_zero()) for n in seq.labels}
        return out

    def localization_battery():
        spec = b.localization
        seq = spec.sequence.build(domain, W.m)
        x0 = spec.x0 if spec.x0 is not None else getattr(seq, "x0", np.array(domain.origin) + 0.5 * np.array(domain.lengths))
        tr = localization_check(seq, x0, spec.r_schedule, spec.k_schedule, R, tol=spec.tol)
        report.traces["localization"] = Trace(["r", "k", "n", "value"], [[r["r"], r["k"], r["n"], r["value"]] for r in tr.rows])
        report.schedules["localization"] = {"sequence": seq.describe(), "r": list(spec.r_schedule), "k": list(spec.k_schedule)}
        return {k: v for k, v in tr.to_dict().items() if k != "rows"}

    table = {
        "el": el_battery,
        "secvar": secvar_battery,
        "qc_interior": qc_battery("qc_interior", b.qc_interior),
        "qc_boundary": qc_battery("qc_boundary", b.qc_boundary),
        "sequences": sequences_battery,
        "decomposition": decomposition_battery,
        "measures": measures_battery,
        "localization": localization_battery,
    }
    for name in names:
        run(name, table[name])
    report.verdict = _verdict(parts, s.budgets.model_dump(), names, s.seed)
    return report


_ORTHOGONALITY_POLY = {
    "monomials": [
        {"exponents": [2], "coefficient": 0.5},
        {"exponents": [3], "coefficient": 0.3},
        {"exponents": [4], "coefficient": 0.25},
    ]
}


def _verdict(parts: dict, budgets: dict, names: list, seed: int = 0) -> dict:
    checked, violated = [], []
    if "secvar" in parts:
        checked.append("second_variation")
        if parts["secvar"] < -1e-9:
            violated.append("second_variation")
    for p in parts.get("probes", []):
        kind = "qc_interior" if p.geometry == "ball" else "qc_boundary"
        if kind not in checked:
            checked.append(kind)
        if p.violation and kind not in violated:
            violated.append(kind)
    necessary = {
        "checked": checked,
        "violated": violated,
        "status": "not checked" if not checked else ("violated" if violated else "not violated"),
    }
    out = {"necessary": necessary, "sufficient": None}
    if "el" in parts and "secvar" in parts:
        budget = ProbeBudget(budgets["multistarts"], budgets["iters"], budgets["grid_res"], budgets["tol"])
        cert = combine_certificate(parts["el"], budgets["el_tol"], parts["secvar"], parts.get("probes", []), seed, budget)
        out["sufficient"] = {
            "verdict": cert.verdict,
            "beta_candidate": cert.beta_candidate,
            "reasons": cert.reasons,
            "violated": cert.violated,
            "note": cert.note,
        }
        if cert.verdict == "sufficient-candidate":
            out["summary"] = f"sufficient-candidate, beta={cert.beta_candidate:.6g}"
        elif cert.verdict == "violated":
            out["summary"] = "necessary condition violated: " + ", ".join(cert.violated)
        else:
            out["summary"] = "inconclusive: " + "; ".join(cert.reasons)
    elif violated:
        out["summary"] = "necessary condition violated: " + ", ".join(violated)
    else:
        out["summary"] = "no verdict: the el and secvar batteries are both needed for a sufficiency verdict"
    return out


# ------------------------------------------------------------- emission


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def report_json(report: Report) -> str:
    return json.dumps(_clean(report.to_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _flatten(prefix: str, obj, out: list) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], out)
    elif isinstance(obj, (str, int, float, bool)) or obj is None:
        out.append([prefix, obj])


def emit(report: Report, out_dir, fmt: str = "json") -> list[Path]:
    """Write report.json, or one CSV per trace plus summary.csv; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        path = out_dir / "report.json"
        path.write_text(report_json(report))
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    data = _clean(report.to_dict())
    for name, t in data["traces"].items():
        path = out_dir / f"{name}.csv"
        path.write_text(_csv_text(t["columns"], t["rows"]))
        written.append(path)
    rows: list = []
    _flatten("", {"batteries": data["batteries"], "verdict": data["verdict"], "provenance": data["provenance"]}, rows)
    path = out_dir / "summary.csv"
    path.write_text(_csv_text(["key", "value"], rows))
    written.append(path)
    return written
