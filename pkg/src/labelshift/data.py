"""Synthetic Gaussian-mixture data with exact posteriors, label-shift
samplers, feature perturbations, and IDX file ingestion."""

import struct
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from .types import LabeledDataset, LabelMarginal, make_marginal

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Isotropic Gaussian class conditionals sharing one scale.

    means: (m, d) matrix of class means, pairwise distinct.
    sigma: common standard deviation of every component.
    """

    means: np.ndarray
    sigma: float

    def __post_init__(self):
        mu = np.array(self.means, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] < 2:
            raise ValueError("need an (m, d) mean matrix with m >= 2")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        diff = mu[:, None, :] - mu[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        if np.any(dist[~np.eye(mu.shape[0], dtype=bool)] == 0):
            raise ValueError("class means must be pairwise distinct")
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError("sigma must be positive")
        mu.setflags(write=False)
        object.__setattr__(self, "means", mu)

    @property
    def m(self) -> int:
        return int(self.means.shape[0])

    @property
    def d(self) -> int:
        return int(self.means.shape[1])


@dataclass(frozen=True)
class ShiftSpec:
    """Dirichlet label-shift intensity: small alpha means spiky test marginals."""

    alpha: float
    n_te: int
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError("alpha must be positive")
        if self.n_te < 1:
            raise ValueError("n_te must be at least 1")


@dataclass(frozen=True)
class RelaxedShiftSpec:
    """Per-sample feature corruption: with probability apply_prob a sample
    gets additive Gaussian noise (scale drawn uniformly from
    noise_sigma_range) plus a constant brightness offset drawn uniformly
    from [-brightness_delta, +brightness_delta]."""

    apply_prob: float
    noise_sigma_range: tuple[float, float]
    brightness_delta: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must lie in [0, 1]")
        lo, hi = self.noise_sigma_range
        if not (0.0 <= lo <= hi):
            raise ValueError("noise_sigma_range must satisfy 0 <= lo <= hi")
        if self.brightness_delta < 0:
            raise ValueError("brightness_delta must be nonnegative")
        object.__setattr__(self, "noise_sigma_range", (float(lo), float(hi)))


def relaxed_preset(seed: int = 0) -> RelaxedShiftSpec:
    """Mild corruption: 30% of samples, noise scale 0.1-0.5, brightness 0.1."""
    return RelaxedShiftSpec(0.3, (0.1, 0.5), 0.1, seed=seed)


def relax_m_preset(seed: int = 0) -> RelaxedShiftSpec:
    """Heavier corruption: 50% of samples, noise scale 0.1-0.7, brightness 0.2."""
    return RelaxedShiftSpec(0.5, (0.1, 0.7), 0.2, seed=seed)


def equidistant_means(m: int, d: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex in R^d with pairwise distance separation.

    Requires d >= m - 1. The construction centers the m standard basis
    vectors and rotates them into the first m - 1 coordinates.
    """
    if m < 2:
        raise ValueError("need at least two means")
    if d < m - 1:
        raise ValueError("dimension too small for equidistant means")
    if not (separation > 0):
        raise ValueError("separation must be positive")
    centered = np.eye(m) - 1.0 / m
    # Rows span an (m-1)-dimensional subspace; SVD exposes an orthonormal basis.
    _, _, vt = np.linalg.svd(centered)
    coords = centered @ vt[: m - 1].T
    coords *= separation / np.sqrt(2.0)
    means = np.zeros((m, d))
    means[:, : m - 1] = coords
    return means


def gen_gaussian_mixture(
    spec: GaussianMixtureSpec, marginal: LabelMarginal, n: int, seed: int
) -> LabeledDataset:
    """Draw n labeled samples: labels from the marginal, features from the
    matching component."""
    if marginal.m != spec.m:
        raise ValueError("marginal class count does not match the mixture")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = stream(seed)
    labels = rng.choice(spec.m, size=n, p=marginal.probs)
    feats = spec.means[labels] + spec.sigma * rng.standard_normal((n, spec.d))
    return LabeledDataset(feats, labels, spec.m)


def posterior_matrix(
    spec: GaussianMixtureSpec, marginal: LabelMarginal, features
) -> np.ndarray:
    """Exact class posteriors for a batch of points, one row per sample."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != spec.d:
        raise ValueError("feature dimension does not match the mixture")
    sq = ((x[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore"):
        logw = np.log(marginal.probs)[None, :] - sq / (2.0 * spec.sigma**2)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def true_posterior(spec: GaussianMixtureSpec, marginal: LabelMarginal, x) -> np.ndarray:
    """Exact posterior p(y | x) for a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a single d-vector")
    return posterior_matrix(spec, marginal, x[None, :])[0]


def sample_dirichlet_marginal(alpha: float, m: int, seed: int) -> LabelMarginal:
    """Symmetric Dirichlet(alpha) draw via normalized Gamma variables."""
    if not (alpha > 0 and np.isfinite(alpha)):
        raise ValueError("alpha must be positive")
    if m < 2:
        raise ValueError("need at least two classes")
    rng = stream(seed)
    g = rng.gamma(alpha, 1.0, size=m)
    while g.sum() <= 0:  # all-underflow is possible for very small alpha
        g = rng.gamma(alpha, 1.0, size=m)
    return LabelMarginal(g / g.sum())


def resample_by_marginal(
    pool: LabeledDataset, marginal: LabelMarginal, n: int, seed: int
) -> LabeledDataset:
    """Label-conditional bootstrap: draw labels from the marginal, then
    features uniformly (with replacement) from the pool rows of that class.
    Class conditionals are preserved exactly."""
    if marginal.m != pool.m:
        raise ValueError("marginal class count does not match the pool")
    if n < 1:
        raise ValueError("need at least one sample")
    counts = pool.class_counts()
    needed = np.nonzero(marginal.probs > 0)[0]
    missing = needed[counts[needed] == 0]
    if missing.size:
        raise ValueError(f"unsupported class: {int(missing[0])} absent from pool")
    rng = stream(seed)
    labels = rng.choice(pool.m, size=n, p=marginal.probs)
    rows = np.empty(n, dtype=np.int64)
    for c in range(pool.m):  # fixed class order keeps draws reproducible
        here = np.nonzero(labels == c)[0]
        if here.size == 0:
            continue
        members = np.nonzero(pool.labels == c)[0]
        rows[here] = rng.choice(members, size=here.size, replace=True)
    return LabeledDataset(pool.features[rows], labels, pool.m)


def perturb_relaxed(data: LabeledDataset, spec: RelaxedShiftSpec) -> LabeledDataset:
    """Apply the corruption in spec to a copy of the dataset's features.

    Rows that the coin flip skips are carried over bit for bit, so
    apply_prob = 0 returns an identical dataset.
    """
    rng = stream(spec.seed)
    n, d = data.n, data.d
    hit = rng.random(n) < spec.apply_prob
    lo, hi = spec.noise_sigma_range
    sigmas = rng.uniform(lo, hi, size=n)
    offsets = rng.uniform(-spec.brightness_delta, spec.brightness_delta, size=n)
    noise = rng.standard_normal((n, d))
    feats = data.features.copy()
    idx = np.nonzero(hit)[0]
    if idx.size:
        feats[idx] += noise[idx] * sigmas[idx, None] + offsets[idx, None]
    return LabeledDataset(feats, data.labels, data.m)


def _read_exact(f, count: int, path: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated IDX file: {path}")
    return buf


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label file pair into a dataset.

    Pixels are scaled from bytes to [0, 1] and flattened to one row per
    image. Big-endian headers per the classic format: magic 2051 for images
    (then n, rows, cols), magic 2049 for labels (then n).
    """
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, str(images_path)))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad IDX image magic {magic} in {images_path}")
        raw = _read_exact(f, n * rows * cols, str(images_path))
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">ii", _read_exact(f, 8, str(labels_path)))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad IDX label magic {magic} in {labels_path}")
        raw_labels = _read_exact(f, n_labels, str(labels_path))
    if n != n_labels:
        raise ValueError(f"count mismatch: {n} images vs {n_labels} labels")
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise ValueError(
            f"label {int(labels.max())} out of range for {num_classes} classes"
        )
    feats = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols) / 255.0
    return LabeledDataset(feats, labels, num_classes)


def uniform_marginal(m: int) -> LabelMarginal:
    return make_marginal(np.ones(m))
