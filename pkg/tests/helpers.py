"""Shared fixtures: grid-search oracle for two-class MLE instances and
finite-difference gradient checks used across the estimator and predictor
suites."""

import numpy as np

from labelshift import (
    GaussianMixtureSpec,
    LabeledDataset,
    LabelMarginal,
    ProbabilityMatrix,
    equidistant_means,
    gen_gaussian_mixture,
    make_marginal,
    uniform_marginal,
)
from labelshift.estimators import empirical_objective

GRID_STEP = 1e-5


def grid_oracle_m2(preds: ProbabilityMatrix, tr: LabelMarginal):
    """Best feasible two-class ratio by brute force.

    Feasible ratios for m=2 form the segment r(t) = (t/tr0, (1-t)/tr1) with
    t in [0, 1]; scanning t at GRID_STEP resolution bounds the distance to
    the true maximizer by GRID_STEP/min(tr). Evaluated in chunks so the
    (n x grid) product stays in memory.
    """
    t0, t1 = float(tr.probs[0]), float(tr.probs[1])
    rows = preds.rows
    ts = np.arange(0.0, 1.0 + GRID_STEP / 2, GRID_STEP)
    best_obj = -np.inf
    best_t = 0.0
    for lo in range(0, ts.size, 20000):
        chunk = ts[lo : lo + 20000]
        mix = np.outer(rows[:, 0], chunk / t0) + np.outer(rows[:, 1], (1 - chunk) / t1)
        objs = np.log(np.maximum(mix, 1e-300)).mean(axis=0)
        j = int(objs.argmax())
        if objs[j] > best_obj:
            best_obj = float(objs[j])
            best_t = float(chunk[j])
    return np.array([best_t / t0, (1 - best_t) / t1]), best_obj


def central_diff(f, x, step=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        g[i] = (f(hi) - f(lo)) / (2 * step)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


def random_preds(rng, n, m=2, conc=1.5) -> ProbabilityMatrix:
    return ProbabilityMatrix.from_rows(rng.dirichlet(np.full(m, conc), size=n))


def random_marginal(rng, m=2) -> LabelMarginal:
    p = np.clip(rng.dirichlet(np.full(m, 3.0)), 0.05, 0.95)
    return LabelMarginal(p / p.sum())


def tiny_mixture(m=3, d=2, separation=3.0) -> GaussianMixtureSpec:
    return GaussianMixtureSpec(equidistant_means(m, d, separation), 1.0)


def tiny_dataset(seed=0, n=64, m=3, d=2, separation=3.0) -> LabeledDataset:
    return gen_gaussian_mixture(tiny_mixture(m, d, separation), uniform_marginal(m), n, seed=seed)


def marginal(*probs) -> LabelMarginal:
    return LabelMarginal(np.array(probs, dtype=np.float64))


def counts_marginal(*counts) -> LabelMarginal:
    return make_marginal(np.array(counts))


def batch_objective(rows, r):
    return float(np.log(np.maximum(rows @ np.asarray(r), 1e-300)).mean())


def assert_feasible(ratio, tr, tol=1e-6):
    r = np.asarray(ratio.ratios if hasattr(ratio, "ratios") else ratio)
    assert np.all(r >= 0)
    assert abs(float(r @ tr.probs) - 1.0) <= tol


__all__ = [
    "GRID_STEP",
    "assert_feasible",
    "batch_objective",
    "central_diff",
    "counts_marginal",
    "grid_oracle_m2",
    "marginal",
    "random_marginal",
    "random_preds",
    "rel_err",
    "tiny_dataset",
    "tiny_mixture",
    "empirical_objective",
]
