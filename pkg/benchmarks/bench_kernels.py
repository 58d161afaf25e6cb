"""Compare the compiled and pure-Python kernel backends.

Times each hot path on a generated complex-design dataset and prints one
line per (operation, backend) with the per-call time and the speedup::

    python3 benchmarks/bench_kernels.py [--repeat 3] [--seed 1]
"""
import argparse
import time

import numpy as np

from mixsim import kernels
from mixsim.bayesfit import BayesModel, NutsConfig, nuts_run
from mixsim.design import gen_complex_design, model_matrices
from mixsim.freqfit import fit_glmm_logistic, fit_lmm
from mixsim.stochastic import RngStream
from mixsim.truemodel import generate_response, realize, sample_true_complex


def _data(family, seed):
    rng = RngStream(seed, 1)
    mm = model_matrices(gen_complex_design(rng))
    y = generate_response(mm, realize(sample_true_complex(family, rng), mm, rng), rng)
    return mm, y


def _best(fn, repeat, number):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t) / number)
    return best


def cases(seed):
    mm_g, y_g = _data("gaussian", seed)
    mm_l, y_l = _data("logistic", seed)
    x_g = np.random.default_rng(seed).uniform(-1, 1, BayesModel(mm_g, y_g, "gaussian").dim)
    x_l = np.random.default_rng(seed).uniform(-1, 1, BayesModel(mm_l, y_l, "logistic").dim)
    short = NutsConfig(chains=1, warmup=50, draws=50)
    return [
        ("lmm fit (REML)", lambda: fit_lmm(mm_g, y_g), 1),
        ("glmm fit (Laplace)", lambda: fit_glmm_logistic(mm_l, y_l), 1),
        ("target build + eval, gaussian", lambda: BayesModel(mm_g, y_g, "gaussian").target()(x_g), 20),
        ("target build + eval, logistic", lambda: BayesModel(mm_l, y_l, "logistic").target()(x_l), 20),
        ("NUTS 50+50 draws, gaussian", lambda: nuts_run(mm_g, y_g, "gaussian", short, RngStream(seed)), 1),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1)
    a = ap.parse_args(argv)
    try:
        kernels.backend_module("cython")
    except ImportError:
        raise SystemExit("compiled extension not built; run `python3 setup.py build_ext --inplace`")
    print(f"{'operation':34s} {'python':>12s} {'cython':>12s} {'speedup':>8s}")
    for name, fn, number in cases(a.seed):
        t = {}
        for backend in ("python", "cython"):
            with kernels.use_backend(backend):
                t[backend] = _best(fn, a.repeat, number)
        print(f"{name:34s} {t['python'] * 1e3:10.3f}ms {t['cython'] * 1e3:10.3f}ms {t['python'] / t['cython']:7.1f}x")


if __name__ == "__main__":
    main()
