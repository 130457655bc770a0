"""Compiled vs pure-Python kernels on the strong-break baseline design.

    python benchmarks/bench_kernels.py [--repeat 20] [--search]

Times each kernel on the 3,000-row design with controls and state/period
dummies, checks that both backends agree, and optionally times a full
likelihood grid search per backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from threshpanel import _kernels
from threshpanel.design import BaseDesign, ModelSpec
from threshpanel.estimators import binomial_logit_fit
from threshpanel.search import SearchConfig, search_cutoff
from threshpanel.synth import SynthConfig, generate_synthetic

CONTROLS = ("poverty_rate", "ln_mhi", "unemployment_rate")


def _best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--search", action="store_true", help="also time a full grid search")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    ds = generate_synthetic(SynthConfig(seed=args.seed))
    spec = ModelSpec(controls=CONTROLS)
    dm = BaseDesign(ds, spec).with_terms(70.0)
    st = dm.structure
    rng = np.random.default_rng(0)
    w = rng.uniform(0.5, 2.0, dm.n_rows)
    v = rng.standard_normal(dm.n_rows)
    beta = rng.standard_normal(dm.n_cols) * 0.1
    s = ds.successes.astype(float)
    n = ds.inspections.astype(float)
    eta = _kernels.matvec(st, beta)
    st.X  # materialise the dense fallback matrix outside the timings

    cases = {
        "gram": lambda: _kernels.gram(st, w),
        "xtv": lambda: _kernels.xtv(st, w, v),
        "matvec": lambda: _kernels.matvec(st, beta),
        "binomial_loglik": lambda: _kernels.binomial_loglik(s, n, eta),
        "logit_working": lambda: _kernels.logit_working(s, n, eta),
        "logit_fit": lambda: binomial_logit_fit(dm, s, n),
    }
    backends = _kernels.available_backends()
    print(f"design: N={dm.n_rows} K={dm.n_cols} blocks={st.codes.shape[0]}; backends: {', '.join(backends)}")
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is timed")

    results: dict[str, dict[str, float]] = {}
    outputs: dict[str, dict[str, object]] = {}
    for be in backends:
        with _kernels.use_backend(be):
            results[be] = {k: _best_of(f, args.repeat) for k, f in cases.items()}
            out = {k: f() for k, f in cases.items()}
            out["logit_fit"] = out["logit_fit"].coefficients
            outputs[be] = out

    head = f"{'kernel':<18}" + "".join(f"{be + ' [ms]':>16}" for be in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10}{'max |diff|':>14}"
    print(head)
    for k in cases:
        row = f"{k:<18}" + "".join(f"{1e3 * results[be][k]:>16.3f}" for be in backends)
        if len(backends) == 2:
            a, b = outputs["python"][k], outputs["compiled"][k]
            diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in
                       zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
            row += f"{results['python'][k] / results['compiled'][k]:>10.2f}{diff:>14.2e}"
        print(row)

    if args.search:
        cfg = SearchConfig()
        times = {}
        for be in backends:
            with _kernels.use_backend(be):
                t = time.perf_counter()
                est, prof = search_cutoff(ds, spec, cfg)
                times[be] = time.perf_counter() - t
            print(f"search [{be}]: {times[be]:.2f} s over {prof.candidates.size} candidates, c_hat={est.c_hat}")
        if len(times) == 2:
            print(f"search speedup: {times['python'] / times['compiled']:.2f}x")


if __name__ == "__main__":
    main()
