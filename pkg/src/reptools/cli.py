"""Command-line front end: ``reptools <subcommand> ...``.

Subcommands: randomize, check, estimate, simulate, law.  Every command
writes a JSON document to ``--out`` (or a directory for ``simulate``).
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import asymlaw, numerics
from .balance import BalanceScheme, ExperimentFrame, evaluate
from .design import DEFAULT_MAX_DRAWS, RngStream, rerandomize
from .errors import RepError
from .estimate import (
    Contrast,
    apply_contrast,
    estimate_multi_arm,
    estimate_two_arm,
    normal_interval,
    plugin_inference,
    plugin_inference_multi_arm,
)
from .simharness import (
    PopulationSpec,
    emit,
    generate_population,
    histogram_rows,
    run_replications,
    summarize,
)


def _fail(message):
    print(message, file=sys.stderr)
    raise SystemExit(2)


def _load_json_arg(value):
    """Accept a path to a JSON file or an inline JSON string."""
    if os.path.exists(value):
        with open(value) as fh:
            return json.load(fh)
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        _fail(f"error: {value!r} is neither a readable file nor valid JSON")


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        _fail(f"error: {path} has no data rows")
    return rows


def _covariate_columns(header):
    cols = [c for c in header if len(c) > 1 and c[0] == "x" and c[1:].isdigit()]
    return sorted(cols, key=lambda c: int(c[1:]))


def read_covariates(path):
    """Return ``(unit_ids, X)`` from a ``unit_id,x1,...,xJ`` CSV."""
    rows = _read_table(path)
    cols = _covariate_columns(rows[0].keys())
    ids = [r.get("unit_id", str(i + 1)) for i, r in enumerate(rows)]
    x = np.array([[float(r[c]) for c in cols] for r in rows]) if cols else np.zeros((len(rows), 0))
    return ids, x


def read_assignment(path, unit_ids=None):
    rows = _read_table(path)
    key = next((k for k in ("level", "z", "arm", "assignment") if k in rows[0]), None)
    if key is None:
        _fail("error: assignment CSV needs a 'level' or 'z' column")
    if unit_ids is not None and "unit_id" in rows[0]:
        lookup = {r["unit_id"]: r[key] for r in rows}
        missing = [u for u in unit_ids if u not in lookup]
        if missing:
            _fail(f"error: assignment lacks units {missing[:5]}")
        return np.array([int(float(lookup[u])) for u in unit_ids])
    return np.array([int(float(r[key])) for r in rows])


def _parse_arms(text):
    try:
        return [int(a) for a in text.split(",") if a.strip()]
    except ValueError:
        _fail(f"error: could not parse arm sizes {text!r}")


def _write(obj, path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def cmd_randomize(args):
    ids, x = read_covariates(args.covariates)
    arms = _parse_arms(args.arms)
    frame = ExperimentFrame(x, arm_sizes=arms)
    scheme = BalanceScheme.from_dict(_load_json_arg(args.scheme))
    rng = RngStream(args.seed, args.stream)
    result = rerandomize(frame, scheme, rng, max_draws=args.max_draws)
    doc = result.to_dict()
    doc["unit_ids"] = ids
    doc["seed"] = args.seed
    doc["stream_id"] = args.stream
    _write(doc, args.out)
    if args.assignment_out:
        with open(args.assignment_out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "level"])
            w.writerows(zip(ids, result.assignment.tolist()))
    return 0


def cmd_check(args):
    ids, x = read_covariates(args.covariates)
    labels = read_assignment(args.assignment, ids)
    frame = ExperimentFrame(x, assignment=labels)
    scheme = BalanceScheme.from_dict(_load_json_arg(args.scheme))
    report = evaluate(frame, scheme)
    doc = report.to_dict()
    doc["scheme"] = scheme.to_dict()
    _write(doc, args.out)
    return 0


def cmd_estimate(args):
    rows = _read_table(args.data)
    for col in ("z", "y"):
        if col not in rows[0]:
            _fail(f"error: estimation CSV needs a '{col}' column")
    cols = _covariate_columns(rows[0].keys())
    x = np.array([[float(r[c]) for c in cols] for r in rows]) if cols else np.zeros((len(rows), 0))
    z = np.array([int(float(r["z"])) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    frame = ExperimentFrame(x, assignment=z, outcomes=y)
    kind = args.kind.upper()
    scheme = BalanceScheme.from_dict(_load_json_arg(args.scheme)) if args.scheme else None
    if args.plugin and scheme is None:
        _fail("error: --plugin needs --scheme")
    rng = RngStream(args.seed, 0)

    if args.contrast is None and frame.arm_count == 2:
        est = estimate_two_arm(frame, kind, args.level)
        if args.plugin:
            est.plugin_ci = plugin_inference(est, frame, scheme, args.level, args.law_draws, rng)
        doc = est.to_dict()
    else:
        if args.contrast is None:
            _fail("error: more than two arms need --contrast")
        with open(args.contrast, newline="") as fh:
            g = Contrast([[float(v) for v in row] for row in csv.reader(fh) if row and not row[0].startswith("#")])
        est = estimate_multi_arm(frame, kind, args.level)
        point, cov = apply_contrast(est.point, est.ehw_cov, g)
        doc = {
            "kind": kind,
            "arm_means": est.point,
            "arm_cov": est.ehw_cov,
            "contrast": g.matrix,
            "point": point,
            "cov": cov,
            "level": args.level,
            "normal_ci": normal_interval(point, np.sqrt(np.diag(cov)), args.level),
        }
        if args.plugin:
            doc["plugin_ci"] = plugin_inference_multi_arm(est, frame, scheme, g, args.level, args.law_draws, rng)
            doc["plugin_experimental"] = True
    if scheme is not None:
        doc["scheme"] = scheme.to_dict()
        doc["balance"] = evaluate(frame, scheme).to_dict()
    _write(doc, args.out)
    return 0


def cmd_simulate(args):
    spec = PopulationSpec.from_dict(_load_json_arg(args.spec))
    schemes = _load_json_arg(args.schemes)
    if isinstance(schemes, dict):
        schemes = [schemes]
    pop = generate_population(spec, RngStream(args.seed, 0).derive(1))
    records = run_replications(
        pop, schemes, args.reps, args.seed, parallelism=args.parallelism, plugin=args.plugin,
    )
    summary = summarize(records, min_accepted=args.min_accepted)
    provenance = {
        "master_seed": args.seed,
        "population_stream": [0, 1],
        "replication_streams": f"0..{args.reps - 1}",
        "spec": spec.to_dict(),
        "schemes": schemes,
    }
    out = args.outdir
    os.makedirs(out, exist_ok=True)
    emit(records, os.path.join(out, "records.csv"))
    emit(records, os.path.join(out, "records.json"), provenance=provenance)
    emit(summary, os.path.join(out, "summary.json"), provenance=provenance)
    emit(summary, os.path.join(out, "summary.csv"))
    hist = histogram_rows(records)
    with open(os.path.join(out, "histograms.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["scheme_id", "kind", "bin_lo", "bin_hi", "count", "q025", "q975"], lineterminator="\n")
        w.writeheader()
        w.writerows(hist)
    return 0


def cmd_law(args):
    rng = RngStream(args.seed, 0)
    a0 = asymlaw.chi2_threshold(args.j, args.alpha0)
    rho = numerics.rho(args.j, a0)
    doc = {"j": args.j, "alpha0": args.alpha0, "a0": a0, "rho": rho}
    if args.scheme:
        if not args.covariates:
            _fail("error: --scheme needs --covariates")
        scheme = BalanceScheme.from_dict(_load_json_arg(args.scheme))
        _, x = read_covariates(args.covariates)
        arms = _parse_arms(args.arms) if args.arms else None
        if arms is None:
            _fail("error: --scheme needs --arms to fix the arm shares")
        frame = ExperimentFrame(x, arm_sizes=arms)
        if frame.arm_count == 2:
            e1, e0 = frame.shares
            law, scale = asymlaw.two_arm_law(frame.s2x, e1, e0, scheme)
        else:
            _, scale, law = asymlaw.multi_arm_law(
                frame.s2x, frame.shares, scheme, np.zeros((frame.arm_count, frame.n_covariates)), "N"
            )
        draws = asymlaw.sample_constrained(law, args.draws, rng)
        doc["scheme"] = scheme.to_dict()
    else:
        law = asymlaw.ConstrainedLaw(np.eye(args.j), ellipsoid=(np.eye(args.j), a0))
        draws = asymlaw.sample_constrained(law, args.draws, rng)
    sq = np.einsum("ij,ij->i", draws, draws)
    doc.update({
        "law_dim": law.dim,
        "draws": int(draws.shape[0]),
        "mean_sq_norm_per_dim": float(sq.mean() / law.dim),
        "coordinate_variances": draws.var(axis=0).tolist(),
        "coordinate_quantiles": {
            str(p): np.quantile(draws, p, axis=0, method="inverted_cdf").tolist() for p in (0.025, 0.5, 0.975)
        },
    })
    _write(doc, args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="reptools", description="Rerandomization based on balance-test p-values.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("randomize", help="draw an allocation that passes a balance scheme")
    r.add_argument("--covariates", required=True)
    r.add_argument("--arms", required=True, help="comma-separated arm sizes, label order")
    r.add_argument("--scheme", required=True, help="scheme JSON file or inline JSON")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--stream", type=int, default=0)
    r.add_argument("--max-draws", type=int, default=DEFAULT_MAX_DRAWS)
    r.add_argument("--out", required=True)
    r.add_argument("--assignment-out", help="also write a unit_id,level CSV")
    r.set_defaults(func=cmd_randomize)

    c = sub.add_parser("check", help="evaluate a given allocation")
    c.add_argument("--covariates", required=True)
    c.add_argument("--assignment", required=True)
    c.add_argument("--scheme", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_check)

    e = sub.add_parser("estimate", help="estimate treatment effects")
    e.add_argument("--data", required=True)
    e.add_argument("--kind", required=True, choices=["n", "f", "l", "N", "F", "L"])
    e.add_argument("--contrast")
    e.add_argument("--plugin", action="store_true")
    e.add_argument("--scheme")
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--law-draws", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo replications over balance schemes")
    s.add_argument("--spec", required=True)
    s.add_argument("--schemes", required=True)
    s.add_argument("--reps", type=int, default=5000)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--outdir", required=True)
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--plugin", action="store_true")
    s.add_argument("--min-accepted", type=int, default=100)
    s.set_defaults(func=cmd_simulate)

    la = sub.add_parser("law", help="summaries of a constrained limit law")
    la.add_argument("--j", type=int, required=True)
    la.add_argument("--alpha0", type=float, required=True)
    la.add_argument("--scheme")
    la.add_argument("--covariates")
    la.add_argument("--arms")
    la.add_argument("--draws", type=int, default=100_000)
    la.add_argument("--seed", type=int, default=0)
    la.add_argument("--out", required=True)
    la.set_defaults(func=cmd_law)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RepError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
