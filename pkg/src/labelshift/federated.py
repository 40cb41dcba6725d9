"""Multi-node importance-weighted training simulator.

Three phases mirror the deployment story:

1. Each node estimates its own test marginal from local data only
   (local_test_marginal / exchange_marginals).
2. The estimated marginals are shared once; node k turns them into per-class
   weights w_k(y) = sum_j p_j_te(y) / p_k_tr(y) (aggregate_ratios). The only
   values that ever cross a node boundary are these K vectors of length m.
3. A shared model is trained on weighted cross-entropy, with per-round node
   sampling and a server-side optimizer (train_global).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import child_seed, stream
from .data import GaussianMixtureSpec, gen_gaussian_mixture
from .estimators import EstimateReport, EstimatorOptions, estimate_vrls, solve_mlls
from .predictor import (
    Predictor,
    PredictorConfig,
    _forward,
    _loss_and_grad,
    init_predictor,
    predict_proba,
    train_predictor,
)
from .types import LabeledDataset, LabelMarginal, ProbabilityMatrix

SCENARIOS = ("no_ls", "ls_single", "ls_both", "ls_multi")
WEIGHTINGS = ("none", "true_ratios", "estimated_ratios")


@dataclass(frozen=True)
class NodeSpec:
    train_marginal: LabelMarginal
    test_marginal: LabelMarginal
    n_tr: int
    n_te: int
    seed: int = 0

    def __post_init__(self):
        if self.train_marginal.m != self.test_marginal.m:
            raise ValueError("train and test marginals have different class counts")
        if self.n_tr < 1 or self.n_te < 1:
            raise ValueError("each node needs at least one train and test sample")


@dataclass(frozen=True)
class ServerOptimizer:
    kind: str = "adam"
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown server optimizer {self.kind!r}")
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not (self.eps > 0):
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class FederationConfig:
    """Scenario, schedule, and model settings for one simulated federation.

    ratio_predictor and ratio_solver drive the per-node estimation used by
    weighting="estimated_ratios". normalize_weights divides every weight
    vector by the node count, which rescales the loss without moving the
    minimizer.
    """

    nodes: tuple[NodeSpec, ...]
    global_model: PredictorConfig
    scenario: str = "ls_multi"
    rounds: int = 100
    local_steps: int = 1
    sample_nodes_per_round: int = 0  # 0 means all nodes every round
    server_optimizer: ServerOptimizer = ServerOptimizer()
    weighting: str = "none"
    ratio_predictor: PredictorConfig = field(
        default_factory=lambda: PredictorConfig(architecture="mlp", hidden_units=32)
    )
    ratio_solver: EstimatorOptions = EstimatorOptions()
    normalize_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("need at least one node")
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")
        k = len(self.nodes)
        if self.sample_nodes_per_round < 0 or self.sample_nodes_per_round > k:
            raise ValueError("sample_nodes_per_round must lie in [0, node count]")
        m = self.nodes[0].train_marginal.m
        if any(n.train_marginal.m != m for n in self.nodes):
            raise ValueError("all nodes must share one class count")

    @property
    def k(self) -> int:
        return len(self.nodes)

    @property
    def nodes_per_round(self) -> int:
        return self.sample_nodes_per_round or len(self.nodes)


@dataclass(frozen=True)
class FederationNode:
    spec: NodeSpec
    train: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class Federation:
    cfg: FederationConfig
    mix: GaussianMixtureSpec
    nodes: tuple[FederationNode, ...]

    @property
    def m(self) -> int:
        return self.mix.m


@dataclass(frozen=True)
class FederationResult:
    """Outcome of one federated run.

    node_weights holds the per-class weight vectors actually used (the
    estimated ones under weighting="estimated_ratios"). loss_trace and
    accuracy_trace both have one entry per round.
    """

    predictor: Predictor
    per_node_accuracy: tuple[float, ...]
    avg_accuracy: float
    node_weights: np.ndarray
    loss_trace: tuple[float, ...]
    accuracy_trace: tuple[float, ...]

    def __post_init__(self):
        w = np.array(self.node_weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "node_weights", w)


def _marginals_equal(a: LabelMarginal, b: LabelMarginal) -> bool:
    return bool(np.all(np.abs(a.probs - b.probs) <= 1e-9))


def _validate_scenario(cfg: FederationConfig) -> None:
    tag = cfg.scenario
    if tag == "ls_both" and cfg.k != 2:
        raise ValueError("scenario ls_both expects exactly two nodes")
    if tag == "ls_single" and cfg.k < 2:
        raise ValueError("scenario ls_single expects at least two nodes")
    # Tags pin down which nodes must keep train == test; the rest may shift.
    if tag == "no_ls":
        fixed = range(cfg.k)
    elif tag == "ls_single":
        fixed = range(1, cfg.k)
    else:
        fixed = ()
    for i in fixed:
        node = cfg.nodes[i]
        if not _marginals_equal(node.train_marginal, node.test_marginal):
            raise ValueError(
                f"scenario {tag} requires train marginal == test marginal on node {i}"
            )


def build_federation(cfg: FederationConfig, mix: GaussianMixtureSpec) -> Federation:
    """Materialize every node's train and test split from the shared mixture."""
    _validate_scenario(cfg)
    if cfg.nodes[0].train_marginal.m != mix.m:
        raise ValueError("node marginals do not match the mixture class count")
    nodes = []
    for i, spec in enumerate(cfg.nodes):
        train = gen_gaussian_mixture(
            mix, spec.train_marginal, spec.n_tr, seed=child_seed(cfg.seed, i, spec.seed, 0)
        )
        test = gen_gaussian_mixture(
            mix, spec.test_marginal, spec.n_te, seed=child_seed(cfg.seed, i, spec.seed, 1)
        )
        nodes.append(FederationNode(spec, train, test))
    return Federation(cfg, mix, tuple(nodes))


def local_test_marginal(
    node: FederationNode,
    pcfg: PredictorConfig,
    opts: EstimatorOptions = EstimatorOptions(),
    posterior_fn=None,
) -> LabelMarginal:
    """One node's estimate of its own test label marginal.

    Uses only the node's local train split and unlabeled test features.
    posterior_fn substitutes an oracle posterior for the trained predictor
    (same shape contract as predict_proba).
    """
    tr = node.train.empirical_marginal()
    if posterior_fn is None:
        report = estimate_vrls(node.train, node.test.features, pcfg, opts)
    else:
        preds = ProbabilityMatrix.from_rows(posterior_fn(node.test.features))
        report = solve_mlls(preds, tr, opts)
    q = report.ratio.ratios * tr.probs
    return LabelMarginal(q / q.sum())


def exchange_marginals(
    fed: Federation, pcfg: PredictorConfig | None = None, posterior_fn=None
) -> tuple[LabelMarginal, ...]:
    """The single communication round before training: every node publishes
    one length-m marginal estimate and nothing else."""
    cfg = fed.cfg
    base = pcfg if pcfg is not None else cfg.ratio_predictor
    out = []
    for i, node in enumerate(fed.nodes):
        node_pcfg = replace(base, seed=child_seed(base.seed, cfg.seed, i, node.spec.seed))
        out.append(
            local_test_marginal(node, node_pcfg, cfg.ratio_solver, posterior_fn=posterior_fn)
        )
    return tuple(out)


def aggregate_ratios(k: int, test_marginals, tr_k: LabelMarginal) -> np.ndarray:
    """Weight vector for node k: sum over nodes of p_j_te(y) / p_k_tr(y).

    Unnormalized by convention, so the entries sum to the node count when
    integrated against tr_k.
    """
    marginals = list(test_marginals)
    if not marginals:
        raise ValueError("need at least one test marginal")
    if not 0 <= k < len(marginals):
        raise ValueError("node index out of range")
    total = np.zeros(tr_k.m)
    for mg in marginals:
        if mg.m != tr_k.m:
            raise ValueError("marginal class counts disagree")
        total += mg.probs
    if np.any((tr_k.probs == 0) & (total > 0)):
        raise ValueError("unsupported class: test mass where node train mass is zero")
    safe = np.where(tr_k.probs > 0, tr_k.probs, 1.0)
    return np.where(tr_k.probs > 0, total / safe, 0.0)


def true_weight_vectors(cfg: FederationConfig) -> np.ndarray:
    """Weights computed from the configured marginals, one row per node."""
    marginals = [n.test_marginal for n in cfg.nodes]
    return np.stack(
        [aggregate_ratios(k, marginals, cfg.nodes[k].train_marginal) for k in range(cfg.k)]
    )


def estimated_weight_vectors(fed: Federation, posterior_fn=None) -> tuple[np.ndarray, tuple]:
    """Weights from locally estimated marginals, plus the exchanged marginals."""
    marginals = exchange_marginals(fed, posterior_fn=posterior_fn)
    rows = [
        aggregate_ratios(k, marginals, fed.nodes[k].train.empirical_marginal())
        for k in range(fed.cfg.k)
    ]
    return np.stack(rows), marginals


def _local_pseudograd(params, node, w_vec, cfg: FederationConfig, rng):
    """One sampled node's contribution for a round.

    With one local step this is exactly the weighted minibatch gradient;
    with more, the node takes SGD steps at the model learning rate and
    reports the parameter displacement divided by that rate.
    """
    gm = cfg.global_model
    x, y = node.train.features, node.train.labels
    b = min(gm.batch_size, node.train.n)
    hidden = gm.hidden_units if gm.architecture == "mlp" else 0

    def batch_grad(theta):
        idx = rng.choice(node.train.n, size=b, replace=False)
        w = w_vec[y[idx]]
        total, _, grad = _loss_and_grad(
            theta, gm.architecture, hidden, node.train.m, node.train.d,
            x[idx], y[idx], 0.0, weights=w,
        )
        if gm.weight_decay:
            grad = grad + gm.weight_decay * theta
        return total, grad

    if cfg.local_steps == 1:
        loss, grad = batch_grad(params)
        return grad, loss
    theta = params.copy()
    losses = []
    for _ in range(cfg.local_steps):
        loss, grad = batch_grad(theta)
        losses.append(loss)
        theta -= gm.learning_rate * grad
    return (params - theta) / gm.learning_rate, float(np.mean(losses))


def train_global(fed: Federation, weights, cfg: FederationConfig) -> FederationResult:
    """Round-based training of the shared model under per-node label weights.

    Each round samples nodes without replacement, collects their (pseudo)
    gradients in node-index order, averages, and applies the server
    optimizer. weighting semantics live in the caller; this function just
    consumes one weight vector per node.
    """
    k = len(fed.nodes)
    m, d = fed.nodes[0].train.m, fed.nodes[0].train.d
    w_all = np.array(weights, dtype=np.float64)
    if w_all.shape != (k, m):
        raise ValueError(f"weights must have shape ({k}, {m})")
    if np.any(w_all < 0) or not np.all(np.isfinite(w_all)):
        raise ValueError("weights must be finite and nonnegative")
    if cfg.normalize_weights:
        w_all = w_all / k

    gm = cfg.global_model
    params = init_predictor(gm, m, d).parameters.copy()
    hidden = gm.hidden_units if gm.architecture == "mlp" else 0
    sample_rng = stream(cfg.seed, 0x5A)
    node_rngs = [stream(cfg.seed, 0x5B, i) for i in range(k)]
    srv = cfg.server_optimizer
    adam_m = np.zeros_like(params)
    adam_v = np.zeros_like(params)
    loss_trace = []
    acc_trace = []
    for rnd in range(cfg.rounds):
        chosen = np.sort(sample_rng.choice(k, size=cfg.nodes_per_round, replace=False))
        grads = np.zeros_like(params)
        losses = []
        for i in chosen:
            g, loss = _local_pseudograd(params, fed.nodes[i], w_all[i], cfg, node_rngs[i])
            grads += g
            losses.append(loss)
        grads /= chosen.size
        if not np.all(np.isfinite(grads)):
            raise RuntimeError(f"diverged at round {rnd}")
        if srv.kind == "sgd":
            params -= srv.learning_rate * grads
        else:
            b1, b2 = srv.betas
            adam_m = b1 * adam_m + (1 - b1) * grads
            adam_v = b2 * adam_v + (1 - b2) * grads**2
            mh = adam_m / (1 - b1 ** (rnd + 1))
            vh = adam_v / (1 - b2 ** (rnd + 1))
            params -= srv.learning_rate * mh / (np.sqrt(vh) + srv.eps)
        loss_trace.append(float(np.mean(losses)))
        pred = Predictor(params.copy(), gm.architecture, hidden, m, d)
        acc_trace.append(evaluate(pred, fed)[1])
    pred = Predictor(params, gm.architecture, hidden, m, d)
    per_node, avg = evaluate(pred, fed)
    return FederationResult(
        predictor=pred,
        per_node_accuracy=per_node,
        avg_accuracy=avg,
        node_weights=w_all,
        loss_trace=tuple(loss_trace),
        accuracy_trace=tuple(acc_trace),
    )


def evaluate(pred: Predictor, fed: Federation) -> tuple[tuple[float, ...], float]:
    """Top-1 accuracy on every node's test split, plus the unweighted mean."""
    accs = []
    for node in fed.nodes:
        logp, _ = _forward(
            pred.parameters, pred.architecture, pred.hidden_units, pred.m, pred.d,
            node.test.features,
        )
        accs.append(float((logp.argmax(axis=1) == node.test.labels).mean()))
    return tuple(accs), float(np.mean(accs))


def run_federation(
    cfg: FederationConfig, mix: GaussianMixtureSpec, posterior_fn=None
) -> FederationResult:
    """Build the federation, derive weights per cfg.weighting, and train."""
    fed = build_federation(cfg, mix)
    if cfg.weighting == "none":
        w = np.ones((cfg.k, mix.m))
    elif cfg.weighting == "true_ratios":
        w = true_weight_vectors(cfg)
    else:
        w, _ = estimated_weight_vectors(fed, posterior_fn=posterior_fn)
    return train_global(fed, w, cfg)


def crossnode_listing_ratios(
    fed: Federation, pcfg: PredictorConfig | None = None
) -> np.ndarray:
    """Cross-node aggregation variant for fidelity experiments.

    Node k's estimator is applied to every node's test features; the
    resulting matrix combines estimates against the other nodes' train
    marginals. Unlike the marginal exchange, this ships raw features across
    nodes, so it stays an opt-in diagnostic rather than a training path.
    """
    cfg = fed.cfg
    base = pcfg if pcfg is not None else cfg.ratio_predictor
    k, m = cfg.k, fed.m
    est = np.zeros((k, k, m))
    marg = np.stack([node.train.empirical_marginal().probs for node in fed.nodes])
    if np.any(marg == 0):
        raise ValueError("cross-node aggregation needs every class on every node")
    for a in range(k):
        node_pcfg = replace(base, seed=child_seed(base.seed, cfg.seed, a, fed.nodes[a].spec.seed))
        predictor = train_predictor(fed.nodes[a].train, node_pcfg)
        tr_a = fed.nodes[a].train.empirical_marginal()
        for b in range(k):
            preds = predict_proba(predictor, fed.nodes[b].test.features)
            est[a, b] = solve_mlls(preds, tr_a, cfg.ratio_solver).ratio.ratios
    values = marg[None, :, :] * est
    aggregated = values.sum(axis=1)
    return aggregated / marg
