"""Label-shift ratio estimators on top of predictor outputs.

Two families:

* Likelihood maximizers (estimate_mlls_em, estimate_mlls_gd) that maximize
  the mean log of predicted test likelihoods mean_j log(preds_j . r) over
  the feasible set {r >= 0, sum_c r_c p_tr(c) = 1}.
* Moment matchers (estimate_bbse, estimate_rlls) that solve a hard-label
  confusion system, optionally with a ridge term.

estimate_vrls composes predictor training with a likelihood maximizer, so
the penalty strength in the predictor config selects between plain and
confidence-regularized estimation.
"""

from dataclasses import dataclass, replace

import numpy as np

from .predictor import PredictorConfig, predict_proba, train_predictor
from .types import LabeledDataset, LabelMarginal, PROB_FLOOR, ProbabilityMatrix, RatioVector

METHODS = ("mlls_em", "mlls_gd", "bbse", "rlls")

COND_LIMIT = 1e12


@dataclass(frozen=True)
class EstimatorOptions:
    method: str = "mlls_em"
    max_iters: int = 1000
    tol: float = 1e-6
    step_size: float = 0.05
    rlls_lambda: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not (self.tol > 0):
            raise ValueError("tol must be positive")
        if not (self.step_size > 0):
            raise ValueError("step_size must be positive")
        if self.rlls_lambda < 0:
            raise ValueError("rlls_lambda must be nonnegative")


@dataclass(frozen=True)
class EstimateReport:
    """Estimate plus solver diagnostics.

    final_objective is the mean log-likelihood for the maximizing methods and
    None for the moment matchers. objective_trace records the objective
    before the first update and after every subsequent one.
    """

    ratio: RatioVector
    iterations_used: int
    final_objective: float | None
    converged: bool
    objective_trace: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio.ratios.tolist(),
            "train_marginal": self.ratio.train_marginal.probs.tolist(),
            "iterations_used": self.iterations_used,
            "final_objective": self.final_objective,
            "converged": self.converged,
        }


def _ratio_values(r) -> np.ndarray:
    return np.asarray(getattr(r, "ratios", r), dtype=np.float64)


def empirical_objective(r, preds: ProbabilityMatrix) -> float:
    """Mean over test samples of log(preds_j . r), with floored arguments."""
    rv = _ratio_values(r)
    if rv.size != preds.m:
        raise ValueError("ratio length does not match prediction columns")
    if np.any(rv < 0) or not np.all(np.isfinite(rv)):
        raise ValueError("ratios must be finite and nonnegative")
    like = preds.rows @ rv
    return float(np.log(np.maximum(like, PROB_FLOOR)).mean())


def empirical_objective_gradient(r, preds: ProbabilityMatrix) -> np.ndarray:
    """Gradient of empirical_objective in r: mean_j preds_j / (preds_j . r)."""
    rv = _ratio_values(r)
    like = preds.rows @ rv
    live = like > PROB_FLOOR  # floored rows have zero slope
    denom = np.maximum(like, PROB_FLOOR)
    return (preds.rows * (live / denom)[:, None]).mean(axis=0)


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto {q >= 0, sum q = 1} (sort-based)."""
    q = np.asarray(v, dtype=np.float64)
    srt = np.sort(q)[::-1]
    css = np.cumsum(srt) - 1.0
    ks = np.arange(1, q.size + 1)
    mask = srt - css / ks > 0
    rho = int(np.nonzero(mask)[0][-1])
    theta = css[rho] / (rho + 1)
    return np.maximum(q - theta, 0.0)


def _support(preds: ProbabilityMatrix, tr: LabelMarginal):
    if preds.m != tr.m:
        raise ValueError("prediction columns do not match the marginal")
    sup = tr.probs > 0
    return preds.rows[:, sup], tr.probs[sup], sup


def _embed(r_sup: np.ndarray, sup: np.ndarray, tr: LabelMarginal) -> RatioVector:
    full = np.zeros(sup.size)
    full[sup] = r_sup
    return RatioVector(full, tr)


def estimate_mlls_em(
    preds_te: ProbabilityMatrix, tr: LabelMarginal, opts: EstimatorOptions = EstimatorOptions()
) -> EstimateReport:
    """Fixed-point iteration for the likelihood maximizer.

    Starting from the training marginal, each step computes responsibilities
    proportional to preds * r and averages them. Classes with zero training
    mass are excluded and reported with ratio zero.
    """
    p, t, sup = _support(preds_te, tr)
    r = np.ones(t.size)
    like = p @ r
    trace = [float(np.log(np.maximum(like, PROB_FLOOR)).mean())]
    converged = False
    iters = 0
    for iters in range(1, opts.max_iters + 1):
        w = p * r
        w /= np.maximum(w.sum(axis=1, keepdims=True), PROB_FLOOR)
        q = w.mean(axis=0)
        r_new = q / t
        delta = float(np.max(np.abs(r_new - r)))
        r = r_new
        like = p @ r
        trace.append(float(np.log(np.maximum(like, PROB_FLOOR)).mean()))
        if delta < opts.tol:
            converged = True
            break
    q = r * t
    r = (q / q.sum()) / t  # tidy feasibility against accumulated rounding
    return EstimateReport(
        ratio=_embed(r, sup, tr),
        iterations_used=iters,
        final_objective=trace[-1],
        converged=converged,
        objective_trace=tuple(trace),
    )


def estimate_mlls_gd(
    preds_te: ProbabilityMatrix, tr: LabelMarginal, opts: EstimatorOptions = EstimatorOptions()
) -> EstimateReport:
    """Projected gradient ascent on the same objective as estimate_mlls_em.

    The feasible set becomes the probability simplex under q = r * p_tr, so
    the ascent runs in q: the ratio gradient mean_j preds_j / (preds_j . r)
    turns into its q-space counterpart by the chain rule, and each iterate is
    projected back onto the simplex. The step is halved until the objective
    does not decrease, which keeps the trace monotone.
    """
    p, t, sup = _support(preds_te, tr)
    q = t.copy()  # r = all-ones
    r = np.ones(t.size)
    like = p @ r
    obj = float(np.log(np.maximum(like, PROB_FLOOR)).mean())
    trace = [obj]
    converged = False
    iters = 0
    for iters in range(1, opts.max_iters + 1):
        live = like > PROB_FLOOR
        grad_r = (p * (live / np.maximum(like, PROB_FLOOR))[:, None]).mean(axis=0)
        grad_q = grad_r / t
        step = opts.step_size
        moved = False
        while True:
            q_try = project_to_simplex(q + step * grad_q)
            s = q_try.sum()
            if not (np.isfinite(s) and s > 0):
                raise RuntimeError("diverged: non-finite iterate")
            q_try /= s
            r_try = q_try / t
            like_try = p @ r_try
            obj_try = float(np.log(np.maximum(like_try, PROB_FLOOR)).mean())
            if not np.isfinite(obj_try):
                raise RuntimeError("diverged: non-finite objective")
            if obj_try >= obj - 1e-12:
                moved = True
                break
            step *= 0.5
            if step < 1e-14:
                break
        if not moved:  # projected gradient vanished: stationary point
            converged = True
            break
        delta = float(np.max(np.abs(r_try - r)))
        q, r, like, obj = q_try, r_try, like_try, obj_try
        trace.append(obj)
        if delta < opts.tol:
            converged = True
            break
    return EstimateReport(
        ratio=_embed(r, sup, tr),
        iterations_used=iters,
        final_objective=obj,
        converged=converged,
        objective_trace=tuple(trace),
    )


def _confusion_system(preds_val, labels_val, preds_te, tr):
    m = tr.m
    if preds_val.m != m or preds_te.m != m:
        raise ValueError("prediction columns do not match the marginal")
    labels_val = np.asarray(labels_val, dtype=np.int64)
    if labels_val.ndim != 1 or labels_val.size != preds_val.n:
        raise ValueError("labels_val must be one per validation row")
    if labels_val.size and (labels_val.min() < 0 or labels_val.max() >= m):
        raise ValueError(f"labels must lie in [0, {m})")
    zv = preds_val.rows.argmax(axis=1)
    zt = preds_te.rows.argmax(axis=1)
    a = np.zeros((m, m))
    np.add.at(a, (zv, labels_val), 1.0)
    a /= labels_val.size
    b = np.bincount(zt, minlength=m) / preds_te.n
    if np.linalg.cond(a) > COND_LIMIT:
        raise ValueError("ill-conditioned confusion matrix")
    return a, b


def _clip_normalize(w: np.ndarray, tr: LabelMarginal) -> RatioVector:
    w = np.maximum(w, 0.0)
    s = float(w @ tr.probs)
    if s <= 0:
        raise ValueError("degenerate ratio estimate: all components clipped")
    return RatioVector(w / s, tr)


def estimate_bbse(
    preds_val: ProbabilityMatrix, labels_val, preds_te: ProbabilityMatrix, tr: LabelMarginal
) -> EstimateReport:
    """Confusion-matrix inversion on hard labels.

    A[j, c] holds the joint frequency of (predicted j, actual c) on the
    validation split; b holds the hard-label frequencies on test. Solves
    A w = b, clips negatives, and renormalizes to feasibility.
    """
    a, b = _confusion_system(preds_val, labels_val, preds_te, tr)
    w = np.linalg.solve(a, b)
    return EstimateReport(
        ratio=_clip_normalize(w, tr), iterations_used=1, final_objective=None, converged=True
    )


def estimate_rlls(
    preds_val: ProbabilityMatrix,
    labels_val,
    preds_te: ProbabilityMatrix,
    tr: LabelMarginal,
    lam: float = 0.0,
) -> EstimateReport:
    """Ridge-regularized variant of the confusion-matrix system.

    Solves min_theta |A(1 + theta) - b|^2 + lam |theta|^2 through the normal
    equations; lam = 0 reproduces estimate_bbse up to clipping, large lam
    shrinks toward the all-ones ratio.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    a, b = _confusion_system(preds_val, labels_val, preds_te, tr)
    rhs = a.T @ (b - a.sum(axis=1))
    theta = np.linalg.solve(a.T @ a + lam * np.eye(tr.m), rhs)
    return EstimateReport(
        ratio=_clip_normalize(1.0 + theta, tr),
        iterations_used=1,
        final_objective=None,
        converged=True,
    )


def estimate_vrls(
    train: LabeledDataset,
    test_features,
    pcfg: PredictorConfig,
    opts: EstimatorOptions = EstimatorOptions(),
) -> EstimateReport:
    """Train a predictor on the labeled source data, score the unlabeled test
    features, and maximize the resulting likelihood.

    opts.method picks the solver (mlls_em or mlls_gd); the training marginal
    is the empirical label distribution of the training set.
    """
    if opts.method not in ("mlls_em", "mlls_gd"):
        raise ValueError("estimate_vrls requires a likelihood-maximizing method")
    pred = train_predictor(train, pcfg)
    preds_te = predict_proba(pred, test_features)
    tr = train.empirical_marginal()
    solver = estimate_mlls_em if opts.method == "mlls_em" else estimate_mlls_gd
    return solver(preds_te, tr, opts)


def solve_mlls(
    preds_te: ProbabilityMatrix, tr: LabelMarginal, opts: EstimatorOptions
) -> EstimateReport:
    """Dispatch to the likelihood maximizer named in opts.method."""
    if opts.method == "mlls_em":
        return estimate_mlls_em(preds_te, tr, opts)
    if opts.method == "mlls_gd":
        return estimate_mlls_gd(preds_te, tr, opts)
    raise ValueError(f"not a likelihood-maximizing method: {opts.method!r}")


def unregularized(pcfg: PredictorConfig) -> PredictorConfig:
    """The same training setup with the confidence penalty switched off."""
    return replace(pcfg, zeta=0.0)
