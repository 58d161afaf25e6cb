"""Experiment orchestration: generate, fit, diagnose and persist one record per simulation.

Output layout in ``output_dir``::

    header.json     configuration, base seed and package version
    records.jsonl   one JSON object per simulation, in sim_id order

Every record depends only on ``(base_seed, sim_id, config)``, so a run can be
resumed after interruption and gives the same file under any worker count.
"""
from __future__ import annotations

import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mixsim import __version__
from mixsim.balance import dataset_balance
from mixsim.bayesfit import NutsConfig, fit_bayes
from mixsim.design import (ItemManipulation, SimpleDesignConfig, gen_complex_design,
                           gen_simple_design, model_matrices)
from mixsim.diagnostics import (PAPER_TOL, Reason, ConvergenceStatus, classify_frequentist_convergence,
                                estimate_vector, parameter_errors, rank_of_covariance,
                                summarize_true_model, truth_vector)
from mixsim.freqfit import CollinearityError, fit_glmm_logistic, fit_lmm
from mixsim.stochastic import RngStream
from mixsim.truemodel import (Family, extreme_fraction, generate_response, realize,
                              sample_true_complex, sample_true_simple, standardize_truth)

HEADER = "header.json"
RECORDS = "records.jsonl"
WORKERS_ENV = "MIXSIM_WORKERS"

SIMPLE_CONDITIONS = [
    {"n_items": n, "item_manipulation": m.value, "h0_true": h}
    for n, m, h in itertools.product((12, 24), (ItemManipulation.BETWEEN, ItemManipulation.WITHIN),
                                     (False, True))
]


class SeedMismatchError(ValueError):
    """An existing output directory was produced with a different seed or configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    design: str
    family: str
    n_sims: int
    base_seed: int
    output_dir: str
    tol: float = PAPER_TOL
    fit_freq: bool = True
    fit_bayes: bool = False
    workers: int = 1
    nuts: NutsConfig = field(default_factory=NutsConfig)
    canonical: bool = False
    draws_dir: str | None = None

    def __post_init__(self):
        if self.design not in ("simple", "complex"):
            raise ValueError("design must be 'simple' or 'complex'")
        Family(self.family)
        if self.n_sims < 1:
            raise ValueError("n_sims must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def header(self) -> dict:
        """Identity of the run: everything that changes record contents (not workers or n_sims)."""
        return {
            "format": "mixsim-records/1",
            "version": __version__,
            "design": self.design,
            "family": self.family,
            "base_seed": self.base_seed,
            "tol": self.tol,
            "fit_freq": self.fit_freq,
            "fit_bayes": self.fit_bayes,
            "nuts": asdict(self.nuts) if self.fit_bayes else None,
            "canonical": self.canonical,
        }


def resolve_workers(cli_value: int | None = None) -> int:
    if cli_value is not None:
        return cli_value
    env = os.environ.get(WORKERS_ENV, "").strip()
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# one simulation


def _generate(config: ExperimentConfig, sim_id: int):
    rng = RngStream(config.base_seed, sim_id)
    condition = None
    if config.design == "complex":
        ds = gen_complex_design(rng)
        mm = model_matrices(ds)
        truth = sample_true_complex(config.family, rng)
    else:
        condition = SIMPLE_CONDITIONS[(sim_id - 1) % len(SIMPLE_CONDITIONS)]
        cfg = SimpleDesignConfig(n_items=condition["n_items"],
                                 item_manipulation=ItemManipulation(condition["item_manipulation"]),
                                 h0_true=condition["h0_true"])
        ds = gen_simple_design(cfg, rng)
        mm = model_matrices(ds)
        truth = sample_true_simple(config.family, cfg.h0_true, cfg.item_manipulation, rng)
    truth = realize(truth, mm, rng)
    y = generate_response(mm, truth, rng)
    return rng, condition, ds, mm, truth, y


def _failed(exc: Exception) -> dict:
    reason = Reason.UNIDENTIFIABLE if isinstance(exc, CollinearityError) else Reason.OPTIMIZER_FAILURE
    return {"error": f"{type(exc).__name__}: {exc}", "convergence": ConvergenceStatus([reason]).to_dict()}


def _freq_block(config, mm, y, truth_vec) -> dict:
    try:
        fit = fit_lmm(mm, y) if config.family == "gaussian" else fit_glmm_logistic(mm, y)
    except Exception as exc:  # recorded, never fatal
        return _failed(exc)
    est = estimate_vector(fit.beta_hat, fit.sigma_hat, fit.omega_hat, fit.sigma_eps_hat)
    return {
        "regression": "frequentist",
        "estimates": est,
        "squared_errors": parameter_errors(truth_vec, est),
        "convergence": classify_frequentist_convergence(fit, config.tol).to_dict(),
        "rank": rank_of_covariance(fit.chol_hat["subject"]).to_dict(),
        "fit": fit.to_dict(),
        "wall_time": fit.wall_time,
    }


def _bayes_block(config, mm, y, truth_vec, sim_id) -> dict:
    try:
        out, chains = fit_bayes(mm, y, config.family, config.nuts, RngStream(config.base_seed, sim_id))
    except Exception as exc:
        return _failed(exc)
    if config.draws_dir:
        Path(config.draws_dir).mkdir(parents=True, exist_ok=True)
        chains.to_csv(Path(config.draws_dir) / f"draws_{sim_id:06d}.csv")
    est = out.estimates()
    block = out.to_dict()
    block.pop("estimates")
    return {
        "regression": "bayes",
        "estimates": est,
        "squared_errors": parameter_errors(truth_vec, est),
        "convergence": block.pop("convergence"),
        "rank": None,
        "fit": block,
        "wall_time": out.wall_time,
    }


def _canonicalize(obj):
    if isinstance(obj, dict):
        return {k: (None if k == "wall_time" else _canonicalize(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonicalize(v) for v in obj]
    return obj


def simulate_one(config: ExperimentConfig, sim_id: int) -> dict:
    """Generate, fit and diagnose simulation ``sim_id``; returns its record."""
    t0 = time.perf_counter()
    rng, condition, ds, mm, truth, y = _generate(config, sim_id)
    truth_cmp = standardize_truth(truth, y)
    tv = truth_vector(truth_cmp)
    min_var, total_corr = summarize_true_model(truth_cmp)
    balance = dataset_balance(ds).B if ds.x2 is not None else None
    record = {
        "sim_id": sim_id,
        "design": config.design,
        "family": config.family,
        "condition": condition,
        "S": int(ds.S),
        "n": int(ds.n),
        "balance": balance,
        "extreme_fraction": extreme_fraction(truth.eta),
        "min_variance": min_var,
        "total_correlation": total_corr,
        "truth": tv,
        "truth_raw": truth.to_dict(),
        "fits": {
            "freq": _freq_block(config, mm, y, tv) if config.fit_freq else None,
            "bayes": _bayes_block(config, mm, y, tv, sim_id) if config.fit_bayes else None,
        },
        "wall_time": time.perf_counter() - t0,
    }
    return _canonicalize(record) if config.canonical else record


def _encode(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _simulate_line(args) -> str:
    config, sim_id = args
    return _encode(simulate_one(config, sim_id))


# ---------------------------------------------------------------------------
# persistence


def _read_valid_records(path: Path) -> tuple[list[dict], int]:
    """Parse complete records; returns them and the byte length of the valid prefix."""
    records, valid = [], 0
    if not path.exists():
        return records, 0
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0:
            break  # unterminated trailing record
        try:
            rec = json.loads(data[pos:end])
        except json.JSONDecodeError:
            break
        if rec.get("sim_id") != len(records) + 1:
            break
        records.append(rec)
        pos = end + 1
        valid = pos
    return records, valid


def load_records(output_dir) -> list[dict]:
    return _read_valid_records(Path(output_dir) / RECORDS)[0]


def load_header(output_dir) -> dict:
    with open(Path(output_dir) / HEADER) as fh:
        return json.load(fh)


def _run(config: ExperimentConfig, resume: bool) -> list[dict]:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = config.header()
    hpath, rpath = out / HEADER, out / RECORDS
    done: list[dict] = []
    if resume and hpath.exists():
        old = load_header(out)
        if old.get("base_seed") != header["base_seed"]:
            raise SeedMismatchError(f"output was produced with seed {old.get('base_seed')}, not {config.base_seed}")
        if old != header:
            diff = sorted(k for k in set(old) | set(header) if old.get(k) != header.get(k))
            raise SeedMismatchError(f"output was produced with a different configuration: {diff}")
        done, valid = _read_valid_records(rpath)
        if rpath.exists() and rpath.stat().st_size != valid:
            with open(rpath, "r+b") as fh:
                fh.truncate(valid)
    else:
        hpath.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
        rpath.write_bytes(b"")
    todo = list(range(len(done) + 1, config.n_sims + 1))
    if not todo:
        return done[:config.n_sims]
    with open(rpath, "a") as fh:
        if config.workers == 1:
            lines = (_simulate_line((config, i)) for i in todo)
            for line in lines:
                fh.write(line)
                fh.flush()
                done.append(json.loads(line))
        else:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                # map() yields in submission order, which serializes writes by sim_id
                for line in pool.map(_simulate_line, [(config, i) for i in todo], chunksize=1):
                    fh.write(line)
                    fh.flush()
                    done.append(json.loads(line))
    return done


def run_experiment(config: ExperimentConfig) -> list[dict]:
    """Run all simulations from scratch, replacing any previous output in ``output_dir``."""
    return _run(config, resume=False)


def resume_experiment(config: ExperimentConfig) -> list[dict]:
    """Complete a partial run: keep valid records, truncate a corrupt tail, run the rest."""
    return _run(config, resume=True)
