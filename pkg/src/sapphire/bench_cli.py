"""Benchmark command line: ``run``, ``compare`` and ``selftest``.

``run spec.json`` executes every (problem, solver) cell of an experiment,
writes one trace CSV per cell under ``<output_dir>/traces`` and a
``summary.json`` validated against the bundled schema. ``compare DIR``
turns the traces of a finished run into a long-format CSV and prints a
passes-to-1e-6 ranking. ``selftest`` runs the oracle-backed suites.

Seeds: cell ``c`` (problems outer, solvers inner, counted from 0) runs with
``SeedSequence([seed, c]).generate_state(1)[0]``; synthetic data without an
explicit seed uses ``SeedSequence([seed, 2**20 + problem_index])``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import jsonschema
import numpy as np

from .data import DATA_DIR_ENV, Dataset, load_libsvm, make_synthetic, normalize_rows
from .losses import GlmLoss
from .regularizers import make_regularizer
from .solver import SolverConfig, SolverDivergedError, prox_svrg_run, saga_run, sapphire_run

__all__ = ["TRACE_HEADER", "main", "relative_errors"]

TRACE_HEADER = ("stage", "passes", "seconds", "objective", "relative_error", "grad_map_norm", "support_size", "apg_iters")
THRESHOLDS = (1e-3, 1e-6, 1e-9)
RANK_THRESHOLD = 1e-6
DIVERGED_MARK = "—"

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input from the user; reported with exit code 2."""


def _schema(name: str) -> dict:
    return json.loads(resources.files("sapphire").joinpath("schemas", name).read_text())


def _fmt(x) -> str:
    # shortest round-trip repr keeps CSVs exact and reproducible
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _threshold_key(t: float) -> str:
    return f"{t:.0e}"


def relative_errors(objectives, r_best: Optional[float]) -> np.ndarray:
    """``(R - R_best) / R_best``, or the plain difference when ``R_best == 0``."""
    obj = np.asarray(objectives, dtype=np.float64)
    if r_best is None:
        return np.full_like(obj, np.nan)
    return (obj - r_best) / r_best if r_best != 0 else obj - r_best


def _first_reaching(rel, x, threshold):
    hit = np.flatnonzero(rel <= threshold)
    return float(x[hit[0]]) if hit.size else None


# -- run ---------------------------------------------------------------------------


@dataclasses.dataclass
class _Cell:
    index: int
    problem: int
    solver: dict
    config: SolverConfig
    seed: int
    status: str = "ok"
    termination: Optional[str] = None
    message: Optional[str] = None
    trace: list = dataclasses.field(default_factory=list)


def _load_spec(path: Path) -> dict:
    try:
        spec = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"spec file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    validator = jsonschema.Draft202012Validator(_schema("experiment.schema.json"))
    errors = sorted(validator.iter_errors(spec), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{path}: spec does not match schema sapphire-experiment/1"]
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "(root)"
            lines.append(f"  at {where}: {e.message}")
        raise UsageError("\n".join(lines))
    names = [s["name"] for s in spec["solvers"]]
    if len(set(names)) != len(names):
        raise UsageError(f"{path}: solver names must be unique")
    pnames = [p["name"] for p in spec["problems"]]
    if len(set(pnames)) != len(pnames):
        raise UsageError(f"{path}: problem names must be unique")
    return spec


def _parse_overrides(items: Sequence[str]) -> dict:
    fields = {f.name for f in dataclasses.fields(SolverConfig)}
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--override expects key=value, got {item!r}")
        if key not in fields:
            raise UsageError(f"--override: unknown SolverConfig field {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_problem(prob: dict, index: int, seed: int, base: Path):
    data = prob["data"]
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        if "seed" not in syn:
            syn["seed"] = int(np.random.SeedSequence([seed, 2**20 + index]).generate_state(1)[0])
        ds = make_synthetic(
            syn["n"],
            syn["p"],
            syn.get("condition_number", 10.0),
            syn.get("support_size", max(1, syn["p"] // 10)),
            syn.get("noise_std", 0.1),
            syn["task"],
            seed=syn["seed"],
        ).dataset
    else:
        path = Path(data["path"])
        candidates = [path] if path.is_absolute() else [base / path]
        if not path.is_absolute() and os.environ.get(DATA_DIR_ENV):
            candidates.append(Path(os.environ[DATA_DIR_ENV]) / path)
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            raise UsageError(
                f"dataset not found: {data['path']} (looked in {base} and ${DATA_DIR_ENV})"
            )
        kind = data.get("kind", "auto")
        try:
            if "positive_label" in data:
                raw = load_libsvm(found, n_features=data.get("n_features"), kind="real")
                y = np.where(raw.labels == data["positive_label"], 1.0, -1.0)
                ds = Dataset(raw.features, y, "binary", raw.name)
            else:
                ds = load_libsvm(found, n_features=data.get("n_features"), kind=kind)
        except ValueError as exc:
            raise UsageError(f"{found}: {exc}") from None
    if data.get("normalize", False):
        ds = normalize_rows(ds)
    loss_spec = prob["loss"]
    if loss_spec["kind"] == "logistic" and ds.kind != "binary":
        raise UsageError(f"problem {prob['name']}: logistic loss needs binary labels")
    loss = GlmLoss(loss_spec["kind"], ds, float(loss_spec.get("ridge", 0.0)))
    rspec = dict(prob["regularizer"])
    kind = rspec.pop("kind")
    if "lam_rel" in rspec:
        rspec["lam"] = rspec.pop("lam_rel") * float(np.abs(loss.full_gradient(np.zeros(loss.p))).max())
    if kind == "none":
        rspec = {}
    elif "lam" not in rspec:
        raise UsageError(f"problem {prob['name']}: regularizer {kind} needs lam or lam_rel")
    return loss, make_regularizer(kind, **rspec)


def _run_cell(cell: _Cell, loss, reg) -> _Cell:
    method = cell.solver["method"]
    runner = {"proxsvrg": prox_svrg_run, "saga": saga_run}.get(method, sapphire_run)
    try:
        # a diverging cell is an expected outcome; it is reported in the summary
        with np.errstate(over="ignore", invalid="ignore"):
            res = runner(loss, reg, cell.config)
        cell.trace, cell.termination = res.trace, res.termination
    except SolverDivergedError as exc:
        cell.status, cell.message = "diverged", str(exc)
        cell.trace, cell.termination = exc.result.trace, exc.result.termination
    except Exception as exc:  # recorded, other cells continue
        cell.status, cell.message = "error", f"{type(exc).__name__}: {exc}"
    return cell


def _write_trace(path: Path, trace, rel) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for rec, e in zip(trace, rel):
        w.writerow([
            rec.stage,
            _fmt(rec.effective_passes),
            _fmt(rec.wall_seconds),
            _fmt(rec.objective),
            _fmt(e),
            _fmt(rec.grad_map_norm),
            rec.support_size,
            rec.apg_iters_total,
        ])
    path.write_text(buf.getvalue())


def _finite_or_none(x) -> Optional[float]:
    return float(x) if x is not None and math.isfinite(x) else None


def cmd_run(args) -> int:
    spec_path = Path(args.spec)
    spec = _load_spec(spec_path)
    overrides = _parse_overrides(args.override or [])
    if args.strict_paper:
        overrides["strict_paper"] = True
    seed = int(spec.get("seed", 0))
    base = spec_path.resolve().parent
    out_dir = Path(args.output) if args.output else base / spec.get("output_dir", f"{spec['name']}-out")
    trace_dir = out_dir / "traces"

    budget = {"max_passes": float(spec["budget"]["max_passes"])}
    if "max_seconds" in spec["budget"]:
        budget["max_seconds"] = float(spec["budget"]["max_seconds"])

    problems = [_load_problem(p, i, seed, base) for i, p in enumerate(spec["problems"])]
    cells: List[_Cell] = []
    for pi in range(len(problems)):
        for solver in spec["solvers"]:
            index = len(cells)
            cell_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
            settings = {**budget, **solver.get("config", {}), **overrides, "seed": cell_seed}
            if solver["method"] == "sapphire-nyssn":
                settings["precond"] = "nyssn"
            elif solver["method"] == "sapphire-ssn":
                settings.setdefault("precond", "ssn")
            try:
                cfg = SolverConfig(**settings)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"solver {solver['name']}: bad config: {exc}") from None
            cells.append(_Cell(index, pi, solver, cfg, cell_seed))

    def work(cell):
        loss, reg = problems[cell.problem]
        return _run_cell(cell, loss, reg)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            cells = list(pool.map(work, cells))
    else:
        cells = [work(c) for c in cells]

    trace_dir.mkdir(parents=True, exist_ok=True)
    summary = {"schema": "sapphire-summary/1", "experiment": spec["name"], "seed": seed,
               "thresholds": list(THRESHOLDS), "problems": []}
    for pi, prob in enumerate(spec["problems"]):
        loss, _ = problems[pi]
        mine = [c for c in cells if c.problem == pi]
        finals = [c.trace[-1].objective for c in mine if c.status == "ok" and c.trace]
        finals = [f for f in finals if math.isfinite(f)]
        r_best = min(finals) if finals else None
        entries = []
        for c in mine:
            entry = {
                "name": c.solver["name"], "method": c.solver["method"], "cell": c.index, "seed": c.seed,
                "status": c.status, "termination": c.termination, "message": c.message,
                "final_objective": None, "final_relative_error": None, "stages": 0, "passes": 0.0,
                "seconds": 0.0, "trace": None,
                "passes_to": {_threshold_key(t): None for t in THRESHOLDS},
                "seconds_to": {_threshold_key(t): None for t in THRESHOLDS},
            }
            if c.trace:
                obj = np.array([r.objective for r in c.trace])
                rel = relative_errors(obj, r_best)
                passes = np.array([r.effective_passes for r in c.trace])
                secs = np.array([r.wall_seconds for r in c.trace])
                name = f"{prob['name']}__{c.solver['name']}.csv"
                _write_trace(trace_dir / name, c.trace, rel)
                finite = np.isfinite(rel)
                entry.update(
                    final_objective=_finite_or_none(obj[-1]),
                    final_relative_error=_finite_or_none(rel[-1]),
                    stages=int(c.trace[-1].stage),
                    passes=float(passes[-1]),
                    seconds=float(secs[-1]),
                    trace=f"traces/{name}",
                )
                if c.status == "ok":
                    for t in THRESHOLDS:
                        entry["passes_to"][_threshold_key(t)] = _first_reaching(rel[finite], passes[finite], t)
                        entry["seconds_to"][_threshold_key(t)] = _first_reaching(rel[finite], secs[finite], t)
            entries.append(entry)
        summary["problems"].append({
            "name": prob["name"], "n_samples": loss.n, "n_features": loss.p,
            "r_best": r_best, "solvers": entries,
        })
    jsonschema.validate(summary, _schema("summary.schema.json"))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    for c in cells:
        label = f"{spec['problems'][c.problem]['name']}/{c.solver['name']}"
        extra = f" ({c.message})" if c.message else ""
        print(f"{label}: {c.status}, {c.termination or '-'}{extra}")
    print(f"wrote {out_dir / 'summary.json'}")
    return EXIT_FAILED if any(c.status == "error" for c in cells) else EXIT_OK


# -- compare -------------------------------------------------------------------------


def _read_trace(path: Path):
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != TRACE_HEADER:
        return None
    cols = {k: np.array([float(r[i]) for r in rows[1:]]) for i, k in enumerate(TRACE_HEADER)}
    return cols


def _collect(directory: Path):
    """``[(label, columns, diverged)]`` from a run directory."""
    summary_path = directory / "summary.json"
    found = []
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        many = len(summary["problems"]) > 1
        for prob in summary["problems"]:
            for s in prob["solvers"]:
                label = f"{prob['name']}/{s['name']}" if many else s["name"]
                cols = _read_trace(directory / s["trace"]) if s["trace"] else None
                if s["status"] == "error" and cols is None:
                    continue
                if cols is not None:
                    found.append((label, cols, s["status"] == "diverged"))
        return found
    for path in sorted(directory.rglob("*.csv")):
        cols = _read_trace(path)
        if cols is not None:
            found.append((path.stem, cols, not np.all(np.isfinite(cols["objective"]))))
    return found


def cmd_compare(args) -> int:
    directory = Path(args.directory)
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    traces = _collect(directory)
    if not traces:
        raise UsageError(f"no trace CSVs found in {directory}")
    out_path = Path(args.output) if args.output else directory / "compare.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("solver", "x_kind", "x", "relative_error"))
    for label, cols, _ in traces:
        for x_kind, key in (("passes", "passes"), ("seconds", "seconds")):
            for x, e in zip(cols[key], cols["relative_error"]):
                w.writerow((label, x_kind, _fmt(x), _fmt(e)))
    out_path.write_text(buf.getvalue())

    rows = []
    for label, cols, diverged in traces:
        rel = cols["relative_error"]
        ok = np.isfinite(rel)
        p = None if diverged else _first_reaching(rel[ok], cols["passes"][ok], RANK_THRESHOLD)
        s = None if diverged else _first_reaching(rel[ok], cols["seconds"][ok], RANK_THRESHOLD)
        rows.append((label, diverged, p, s))
    rows.sort(key=lambda r: (r[1], r[2] is None, r[2] if r[2] is not None else 0.0, r[0]))

    def cell(diverged, v):
        if diverged:
            return DIVERGED_MARK
        return "not reached" if v is None else f"{v:.2f}"

    width = max(len("solver"), *(len(r[0]) for r in rows))
    print(f"{'rank':>4}  {'solver':<{width}}  {'passes to 1e-6':>14}  {'seconds to 1e-6':>15}")
    for i, (label, diverged, p, s) in enumerate(rows, 1):
        print(f"{i:>4}  {label:<{width}}  {cell(diverged, p):>14}  {cell(diverged, s):>15}")
    print(f"wrote {out_path}")
    return EXIT_OK


# -- selftest ------------------------------------------------------------------------


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return min(failed, 125)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sapphire-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every cell of an experiment spec")
    run.add_argument("spec", help="experiment spec (JSON, schema sapphire-experiment/1)")
    run.add_argument("--output", "-o", help="output directory (default: from the spec)")
    run.add_argument("--threads", type=int, default=1, metavar="N", help="run up to N cells concurrently")
    run.add_argument("--strict-paper", action="store_true", help="APG without restart and with the printed step")
    run.add_argument("--override", action="append", metavar="K=V", help="set a SolverConfig field for every cell")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="long-format CSV and ranking from a run directory")
    cmp_.add_argument("directory")
    cmp_.add_argument("--output", "-o", help="CSV path (default: DIRECTORY/compare.csv)")
    cmp_.set_defaults(func=cmd_compare)

    st = sub.add_parser("selftest", help="run the oracle-backed property suites")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
