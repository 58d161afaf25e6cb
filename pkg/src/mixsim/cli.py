"""Command-line interface: ``mixsim {simulate,report,balance,fit}``."""
from __future__ import annotations

import argparse
import json
import sys

from mixsim import report
from mixsim.balance import dataset_balance
from mixsim.bayesfit import NutsConfig, fit_bayes
from mixsim.design import model_matrices, read_dataset_csv
from mixsim.diagnostics import PAPER_TOL, classify_frequentist_convergence
from mixsim.freqfit import fit_glmm_logistic, fit_lmm
from mixsim.runner import ExperimentConfig, load_records, resolve_workers, resume_experiment, run_experiment
from mixsim.stochastic import RngStream


def _fits(value: str) -> set[str]:
    parts = {p.strip() for p in value.split(",") if p.strip()}
    if not parts or not parts <= {"freq", "bayes"}:
        raise argparse.ArgumentTypeError("--fit takes a comma list of freq,bayes")
    return parts


def _nuts_args(p):
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--delta", type=float, default=0.99)
    p.add_argument("--max-depth", type=int, default=10)


def _nuts_config(a) -> NutsConfig:
    return NutsConfig(chains=a.chains, warmup=a.warmup, draws=a.draws, delta=a.delta, max_depth=a.max_depth)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixsim", description="Mixed-model convergence simulations.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run (or resume) a simulation experiment")
    s.add_argument("--design", choices=["simple", "complex"], required=True)
    s.add_argument("--family", choices=["gaussian", "logistic"], required=True)
    s.add_argument("--n-sims", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--tol", type=float, default=PAPER_TOL)
    s.add_argument("--fit", type=_fits, default={"freq"})
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: $MIXSIM_WORKERS or 1)")
    s.add_argument("--fresh", action="store_true", help="discard existing output instead of resuming")
    s.add_argument("--canonical", action="store_true", help="write null wall times (byte-reproducible output)")
    s.add_argument("--dump-draws", metavar="DIR", default=None,
                   help="write posterior draws per Bayesian fit as CSV (chain, draw, parameter, value)")
    _nuts_args(s)

    r = sub.add_parser("report", help="aggregate records into a table")
    r.add_argument("--in", dest="indir", required=True)
    r.add_argument("--table", choices=["rates", "rank", "rank-regression", "error-by-balance"], required=True)
    r.add_argument("--bins", type=int, default=10)
    r.add_argument("--tol", type=float, default=None,
                   help="re-classify frequentist fits at this gradient tolerance")
    r.add_argument("--format", choices=["csv", "json"], default="csv")

    b = sub.add_parser("balance", help="balance summary of a dataset CSV")
    b.add_argument("csv")

    f = sub.add_parser("fit", help="fit a mixed model to a dataset CSV")
    f.add_argument("csv")
    f.add_argument("--family", choices=["gaussian", "logistic"], required=True)
    f.add_argument("--method", choices=["freq", "bayes"], default="freq")
    f.add_argument("--tol", type=float, default=PAPER_TOL)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--dump-draws", metavar="CSV", default=None)
    _nuts_args(f)
    return ap


def _cmd_simulate(a) -> int:
    cfg = ExperimentConfig(
        design=a.design, family=a.family, n_sims=a.n_sims, base_seed=a.seed, output_dir=a.out,
        tol=a.tol, fit_freq="freq" in a.fit, fit_bayes="bayes" in a.fit,
        workers=resolve_workers(a.workers), nuts=_nuts_config(a), canonical=a.canonical,
        draws_dir=a.dump_draws)
    recs = run_experiment(cfg) if a.fresh else resume_experiment(cfg)
    rates = report.nonconvergence_rates(recs)
    for row in rates.rows:
        print(f"{row['design']} {row['family']} {row['fitter']}: "
              f"{row['unconverged']}/{row['n']} unconverged ({row['nonconvergence']:.1%})")
    return 0


def _cmd_report(a) -> int:
    recs = load_records(a.indir)
    if a.table == "rates":
        rows = report.nonconvergence_rates(recs, a.tol).rows
    elif a.table == "rank":
        rows = report.rank_table_rows(report.rank_deficiency_table(recs, a.tol))
    elif a.table == "rank-regression":
        rows = report.rank_logistic_regression(recs, a.tol).rows()
    else:
        rows = report.error_by_balance(recs, a.bins, a.tol)
    sys.stdout.write(report.to_csv(rows) if a.format == "csv" else report.to_json(rows))
    return 0


def _cmd_balance(a) -> int:
    print(json.dumps(dataset_balance(read_dataset_csv(a.csv)).to_dict(), indent=2))
    return 0


def _cmd_fit(a) -> int:
    ds = read_dataset_csv(a.csv)
    if ds.y is None:
        raise SystemExit("dataset has no y column")
    mm = model_matrices(ds)
    if a.method == "freq":
        fit = fit_lmm(mm, ds.y) if a.family == "gaussian" else fit_glmm_logistic(mm, ds.y)
        out = fit.to_dict()
        out["convergence"] = classify_frequentist_convergence(fit, a.tol).to_dict()
    else:
        res, chains = fit_bayes(mm, ds.y, a.family, _nuts_config(a), RngStream(a.seed))
        out = res.to_dict()
        if a.dump_draws:
            chains.to_csv(a.dump_draws)
    print(json.dumps(out, indent=2))
    return 0


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    return {"simulate": _cmd_simulate, "report": _cmd_report,
            "balance": _cmd_balance, "fit": _cmd_fit}[a.command](a)


if __name__ == "__main__":
    sys.exit(main())
