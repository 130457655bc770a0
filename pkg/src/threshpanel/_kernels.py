"""Backend selection for the hot kernels.

The compiled ``_core`` extension is used when it imports; otherwise the
numpy fallback. Set ``THRESHPANEL_BACKEND=python`` to force the fallback
(``compiled`` makes a missing extension an ImportError).
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_requested = os.environ.get("THRESHPANEL_BACKEND", "auto").lower()
if _requested not in ("auto", "python", "compiled"):
    raise ImportError(f"THRESHPANEL_BACKEND must be auto, python or compiled, not {_requested!r}")
if _requested == "compiled" and _core is None:
    raise ImportError("THRESHPANEL_BACKEND=compiled but threshpanel._core is not built")

_active = "python" if (_requested == "python" or _core is None) else "compiled"


def backend() -> str:
    """Name of the active backend: ``"compiled"`` or ``"python"``."""
    return _active


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _core is not None else [])


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch backend (for benchmarks and equivalence tests)."""
    global _active
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available")
    prev, _active = _active, name
    try:
        yield
    finally:
        _active = prev


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def gram(st, w) -> np.ndarray:
    w = _f64(w)
    if _active == "compiled":
        return _core.gram(st.dense, st.codes, st.vals, st.offsets, w, st.K)
    return _fallback.gram(st.dense, st.codes, st.vals, st.offsets, w, st.K, X=st.X)


def xtv(st, w, v) -> np.ndarray:
    w, v = _f64(w), _f64(v)
    if _active == "compiled":
        return _core.xtv(st.dense, st.codes, st.vals, st.offsets, w, v, st.K)
    return _fallback.xtv(st.dense, st.codes, st.vals, st.offsets, w, v, st.K, X=st.X)


def matvec(st, beta) -> np.ndarray:
    beta = _f64(beta)
    if _active == "compiled":
        return _core.matvec(st.dense, st.codes, st.vals, st.offsets, beta)
    return _fallback.matvec(st.dense, st.codes, st.vals, st.offsets, beta, X=st.X)


def group_sum(M, gid, G: int) -> np.ndarray:
    M = _f64(M)
    gid = np.ascontiguousarray(gid, dtype=np.intp)
    if _active == "compiled":
        return _core.group_sum(M, gid, G)
    return _fallback.group_sum(M, gid, G)


def binomial_loglik(s, n, eta) -> float:
    s, n, eta = _f64(s), _f64(n), _f64(eta)
    if _active == "compiled":
        return _core.binomial_loglik(s, n, eta)
    return _fallback.binomial_loglik(s, n, eta)


def logit_working(s, n, eta):
    s, n, eta = _f64(s), _f64(n), _f64(eta)
    if _active == "compiled":
        return _core.logit_working(s, n, eta)
    return _fallback.logit_working(s, n, eta)
