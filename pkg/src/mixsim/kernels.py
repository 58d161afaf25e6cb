"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise (or when the
environment variable ``MIXSIM_PURE_PYTHON`` is set to a non-empty value other
than ``0``) the numpy implementations are used.  Both expose the same
kernel functions, the mixed-model target and the NUTS engine.
"""
import contextlib
import os
import sys

from mixsim import _kernels_py

GAUSSIAN = _kernels_py.GAUSSIAN
LOGISTIC = _kernels_py.LOGISTIC

_force_py = os.environ.get("MIXSIM_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from mixsim import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

mixed_loglik_grad = _impl.mixed_loglik_grad
block_reml_terms = _impl.block_reml_terms
block_pirls_logistic = _impl.block_pirls_logistic
bayes_logpost_grad = _impl.bayes_logpost_grad
MixedModelTarget = _impl.MixedModelTarget
NutsEngine = _impl.NutsEngine


_EXPORTS = ("mixed_loglik_grad", "block_reml_terms", "block_pirls_logistic",
            "bayes_logpost_grad", "MixedModelTarget", "NutsEngine")


def backend_module(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"`` (ImportError if unavailable)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from mixsim import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route every kernel through backend ``name`` (for benchmarks and tests)."""
    mod = sys.modules[__name__]
    impl = backend_module(name)
    saved = {k: getattr(mod, k) for k in _EXPORTS + ("BACKEND",)}
    try:
        for k in _EXPORTS:
            setattr(mod, k, getattr(impl, k))
        mod.BACKEND = name
        yield impl
    finally:
        for k, v in saved.items():
            setattr(mod, k, v)
