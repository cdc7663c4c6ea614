"""Command-line front end.

Exit codes: 0 success, 2 invalid input or flags, 3 numerical failure.
Diagnostics go to stderr; data goes to stdout unless ``--out`` is given.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import BLOCKS, TREATMENT_TOKEN, ColumnSchema, ModelSpec, load_dataset
from .errors import NegCtrlError, NumericalError, ValidationError
from .estimators import DENSITY_FLOOR, ROUTES, EstimateReport, FitCache, report
from .identify import (RANK_TOL, DiscreteLaw, ObservedLaw, ate_by_identification,
                       ate_by_reparameterization, enumerate_coarsenings, gmm_combine,
                       infer_latent_cardinality, numerical_rank, solve_bridge)
from .inference import wald_interval, wald_test

REPORT_SCHEMA = "negctrl-report/1"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
ESTIMATOR_CHOICES = (*ROUTES, "gmm")

log = logging.getLogger("negctrl")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def bundled_dataset_path() -> Path:
    return Path(str(resources.files("negctrl") / "datasets" / "vaccine_synthetic.csv"))


def _csv_list(text: str | None) -> tuple[str, ...]:
    if text is None:
        return ()
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--nce", required=True, help="negative control exposure column (Z)")
    p.add_argument("--nco", required=True, help="negative control outcome column (W)")
    p.add_argument("--covariates", default="", help="comma-separated covariate columns")
    p.add_argument("--z-ref", help="reference level of the NCE (default: first sorted level)")
    p.add_argument("--w-ref", help="reference level of the NCO (default: first sorted level)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="negctrl", description="Double negative control ATE estimation.")
    parser.add_argument("--version", action="version", version=f"negctrl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="estimate the ATE from a CSV file")
    _add_data_flags(est)
    est.add_argument("--estimators", default=",".join(ROUTES),
                     help=f"comma-separated subset of {','.join(ESTIMATOR_CHOICES)}")
    est.add_argument("--exposure", choices=("joint", "factorized"), default="joint")
    est.add_argument("--y-link", choices=("logit", "identity"), default="logit")
    est.add_argument("--saturated", action="store_true",
                     help="fully saturated working models (binary covariates)")
    for b in BLOCKS:
        est.add_argument(f"--formula-{b}", dest=f"formula_{b}", metavar="TERMS",
                         help=f"terms of the {b} block, comma-separated"
                              + ("; 'none' drops the interaction" if b == "waz" else ""))
    est.add_argument("--gmm-target", type=int, help="number of levels after coarsening (gmm)")
    est.add_argument("--level", type=float, default=0.95)
    est.add_argument("--density-floor", type=float, default=DENSITY_FLOOR)
    est.add_argument("--rank-tol", type=float, default=RANK_TOL)
    est.add_argument("--out")
    est.add_argument("--format", choices=("tsv", "json"), default="json")

    sim = sub.add_parser("simulate", help="operating characteristics of the estimators")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--n", type=int, default=2000)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--estimators", default=",".join(ROUTES))
    sim.add_argument("--level", type=float, default=0.95)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out", help="output prefix; writes <out>.raw.tsv and <out>.tsv/.json")
    sim.add_argument("--format", choices=("tsv", "json"), default="tsv")

    ide = sub.add_parser("identify", help="rank and bridge diagnostics for a discrete law or dataset")
    src = ide.add_mutually_exclusive_group(required=True)
    src.add_argument("--law", help="discrete-law JSON file")
    src.add_argument("--data", help="CSV file with discrete covariates")
    for flag in ("--outcome", "--treatment", "--nce", "--nco"):
        ide.add_argument(flag)
    ide.add_argument("--covariates", default="")
    ide.add_argument("--z-ref")
    ide.add_argument("--w-ref")
    ide.add_argument("--rank-tol", type=float, default=RANK_TOL)
    ide.add_argument("--out")
    return parser


# ---------------------------------------------------------------- helpers

def _schema(args) -> ColumnSchema:
    return ColumnSchema(args.outcome, args.treatment, args.nce, args.nco,
                        _csv_list(args.covariates), args.z_ref, args.w_ref)


def model_spec_from_args(args, covariates: Sequence[str]) -> ModelSpec:
    if args.saturated:
        spec = ModelSpec.saturated(covariates, args.exposure, args.y_link)
    else:
        xs = tuple(covariates)
        spec = ModelSpec(exposure=args.exposure, az=xs, a=xs, z=(TREATMENT_TOKEN, *xs) if
                         args.exposure == "factorized" else xs, y=(TREATMENT_TOKEN, *xs),
                         y_link=args.y_link, w0=xs, wa=(), wz=(), waz=(), r=(TREATMENT_TOKEN,))
    changes = {}
    for b in BLOCKS:
        text = getattr(args, f"formula_{b}")
        if text is None:
            continue
        changes[b] = None if (b == "waz" and text.strip().lower() == "none") else _csv_list(text)
    if "waz" not in changes and spec.waz is not None and ("wa" in changes or "wz" in changes):
        # keep only interaction terms that survive the new wa/wz lists
        wa, wz = changes.get("wa", spec.wa), changes.get("wz", spec.wz)
        changes["waz"] = tuple(t for t in spec.waz if t in wa and t in wz)
    return spec.replace(**changes).validate(covariates)


def _metadata(args, extra: dict | None = None) -> dict:
    meta = {"package_version": __version__, "command": args.command,
            "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "verbose")}}
    meta.update(extra or {})
    return meta


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _tsv(rows: list[dict], meta: dict) -> str:
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
    cols = list(EstimateReport.COLUMNS)
    buf.write("\t".join(cols) + "\n")
    for r in rows:
        buf.write("\t".join("" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else str(r[c]))
                            for c in cols) + "\n")
    return buf.getvalue()


def _gmm_report(data, spec, target, level, rank_tol) -> EstimateReport:
    target = target or min(data.n_z, data.n_w)
    cs = enumerate_coarsenings(data.z_coding, data.w_coding, target)
    res = gmm_combine(data, spec, cs, "mr")
    rep = EstimateReport("gmm", res.delta, None, None, data.n, level, se=res.se)
    rep.ci = wald_interval(res.delta, res.se, level)
    rep.p_value = wald_test(res.delta, res.se)
    rep.theta = {"coarsenings": [{"z": list(c.z_map), "w": list(c.w_map)} for c in cs],
                 "weights": res.weights.tolist(), "per_coarsening": res.per_coarsening}
    return rep


# ---------------------------------------------------------------- commands

def cmd_estimate(args) -> int:
    estimators = _csv_list(args.estimators)
    bad = [e for e in estimators if e not in ESTIMATOR_CHOICES]
    if bad or not estimators:
        raise ValidationError(f"unknown estimator(s) {bad}; choose from {ESTIMATOR_CHOICES}")
    if not 0 < args.density_floor < 1:
        raise ValidationError("--density-floor must lie in (0, 1)")
    data = load_dataset(args.data, _schema(args))
    spec = model_spec_from_args(args, data.covariate_names)
    reports = []
    routes = [e for e in estimators if e != "gmm"]
    if routes:
        cache = FitCache(data, spec)
        for r in routes:
            reports.append(report(data, cache.theta(r), r, args.level, True, cache.index, args.density_floor))
    if "gmm" in estimators:
        reports.append(_gmm_report(data, spec, args.gmm_target, args.level, args.rank_tol))
    meta = _metadata(args, {"n": data.n, "model_spec": spec.to_dict(),
                            "z_levels": list(data.z_coding.levels), "w_levels": list(data.w_coding.levels),
                            "z_reference": data.z_coding.levels[data.z_coding.reference],
                            "w_reference": data.w_coding.levels[data.w_coding.reference],
                            "tolerances": {"density_floor": args.density_floor, "rank_tol": args.rank_tol}})
    if args.format == "json":
        doc = {"schema": REPORT_SCHEMA, "metadata": meta,
               "estimates": [r.row() for r in reports],
               "theta": {r.estimator: r.theta for r in reports}}
        _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    else:
        _emit(_tsv([r.row() for r in reports], {"schema": REPORT_SCHEMA, **meta}), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulate import run_study

    if args.reps < 1:
        raise ValidationError(f"--reps must be positive, got {args.reps}")
    if args.threads < 1:
        raise ValidationError(f"--threads must be positive, got {args.threads}")
    oc = run_study(args.scenario, args.reps, args.n, args.seed, _csv_list(args.estimators),
                   args.level, args.threads)
    if args.out:
        for path in oc.write(args.out, args.format):
            log.info("wrote %s", path)
    elif args.format == "json":
        sys.stdout.write(json.dumps(oc.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(oc.table_tsv())
    return EXIT_OK


def _identify_target(args):
    if args.law:
        law = DiscreteLaw.load(args.law)
        return law, law.observed()
    missing = [f"--{f}" for f in ("outcome", "treatment", "nce", "nco") if getattr(args, f) is None]
    if missing:
        raise ValidationError(f"--data needs {', '.join(missing)}")
    return None, ObservedLaw.from_dataset(load_dataset(args.data, _schema(args)))


def cmd_identify(args) -> int:
    law, obs = _identify_target(args)
    m = obs.matrices()
    strata, failures = [], []
    for x in range(m.pw.shape[0]):
        for a in (0, 1):
            entry = {"x": x, "a": a, "rank": numerical_rank(m.pw[x, a], args.rank_tol)}
            try:
                b = solve_bridge(m, a, x, args.rank_tol)
                entry.update(method=b.method, residual=b.residual)
            except NumericalError as exc:
                entry["error"] = str(exc)
                failures.append(entry)
            strata.append(entry)
    u_hat = infer_latent_cardinality(m, args.rank_tol)
    out = {"schema": "negctrl-identify/1", "package_version": __version__,
           "rank_tol": args.rank_tol, "strata": strata, "inferred_latent_cardinality": u_hat,
           "nce_levels": int(obs.shape[2]), "nco_levels": int(obs.shape[3])}
    if u_hat <= 1:
        print("warning: P(W|Z,a,x) has rank 1 in every stratum; the negative controls are "
              "uninformative about the latent confounder", file=sys.stderr)
    if not failures:
        out["ate_identification"] = ate_by_identification(m, args.rank_tol).delta
        if obs.shape[2] == obs.shape[3] and u_hat == obs.shape[2]:
            rp = ate_by_reparameterization(obs)
            out["ate_reparameterization"] = {"delta": rp.delta, "confounded": rp.delta_confounded,
                                             "bias": rp.delta_bias}
        if law is not None:
            out["latent_ate"] = law.latent_ate()
            out["abs_error"] = abs(out["ate_identification"] - out["latent_ate"])
    _emit(json.dumps(out, indent=2, sort_keys=True) + "\n", args.out)
    if failures:
        for f in failures:
            print(f"error: stratum x={f['x']}, a={f['a']}: {f['error']}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "identify": cmd_identify}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NegCtrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
