"""Downstream evaluation and numerical checks of the generalization bounds.

The two-sided bound checked by :func:`bounds_report` is

    L_nce - sqrt(V) - V/2 - A(M)  <=  L_ce_mu + log(M/K)  <=  L_nce + sqrt(V) + A(M)

with V the conditional feature variance and A(M) the Monte-Carlo
log-sum-exp error.  The O(M^-1/2) constants are unknown, so the slack is
calibrated from measurable noise: 3 standard errors of the InfoNCE estimate
plus the empirical A(M).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from augoverlap.encoder import EncoderParams, forward, infonce_from_embeddings
from augoverlap.sphere import LabeledSphereDataset, augment_batch

log = logging.getLogger(__name__)

NUMERIC_TOL = 1e-9


@dataclass
class FeatureTable:
    ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    renormalized: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.labels = np.asarray(self.labels, dtype=int)
        feats = np.asarray(self.features, dtype=float)
        norms = np.linalg.norm(feats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            feats = feats / np.where(norms > 0, norms, 1.0)[:, None]
            self.renormalized = True
            log.info("feature rows re-normalized to unit norm")
        self.features = feats

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    @classmethod
    def from_encoder(cls, params: EncoderParams, dataset: LabeledSphereDataset) -> "FeatureTable":
        return cls(np.arange(dataset.n), dataset.labels, _encode(params, dataset.points))

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        """Read an ``id,label,z0,...`` dump (the encoder's feature format)."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:2] != ["id", "label"] or not all(h.startswith("z") for h in header[2:]):
            raise ValueError(f"{path}: expected header id,label,z0,..., got {header[:3]}...")
        arr = np.array(body, dtype=float)
        return cls(arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2:])


def _class_index(labels: np.ndarray, K: int | None = None):
    K = int(labels.max()) + 1 if K is None else K
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise ValueError(f"empty class(es): {np.flatnonzero(counts == 0).tolist()}")
    return K, counts


def class_means(t: FeatureTable, K: int | None = None) -> np.ndarray:
    """Raw (not re-normalized) per-class mean features, shape (K, m)."""
    K, counts = _class_index(t.labels, K)
    sums = np.zeros((K, t.features.shape[1]))
    np.add.at(sums, t.labels, t.features)
    return sums / counts[:, None]


def mean_ce_loss(t: FeatureTable, K: int | None = None) -> float:
    mu = class_means(t, K)
    logits = t.features @ mu.T
    return float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(len(logits)), t.labels]))


def conditional_variance(t: FeatureTable, K: int | None = None) -> float:
    """E_y E_{x|y} ||f(x) - mu_y||^2 with empirical class weights."""
    mu = class_means(t, K)
    dev = t.features - mu[t.labels]
    return float(np.mean(np.sum(dev**2, axis=1)))


@dataclass
class ProbeConfig:
    max_iter: int = 5000
    tol: float = 1e-5
    learning_rate: float | None = None


@dataclass
class ProbeResult:
    weights: np.ndarray
    train_acc: float
    test_acc: float
    train_loss: float
    iterations: int


def _ce_and_grad(W, Z, Y):
    logits = Z @ W.T
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - np.sum(logits * Y, axis=1)))
    P = np.exp(logits - lse[:, None])
    return loss, (P - Y).T @ Z / len(Z)


def predict(W: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the smallest class index
    return np.argmax(Z @ W.T, axis=1)


def linear_probe(train: FeatureTable, test: FeatureTable, config: ProbeConfig | None = None) -> ProbeResult:
    """Multinomial logistic regression g(z) = W z by full-batch gradient descent.

    The step size defaults to 1/L with L = lambda_max(Z^T Z / n) / 2, a bound
    on the curvature of the softmax cross-entropy.
    """
    config = config or ProbeConfig()
    if len(np.unique(train.labels)) < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError("train and test features have different dimensions")
    K = max(train.n_classes, test.n_classes)
    Z = train.features
    Y = np.eye(K)[train.labels]
    lr = config.learning_rate
    if lr is None:
        lam = float(np.linalg.eigvalsh(Z.T @ Z / len(Z))[-1])
        lr = 2.0 / max(lam, 1e-12)
    W = np.zeros((K, Z.shape[1]))
    it = 0
    for it in range(1, config.max_iter + 1):
        loss, g = _ce_and_grad(W, Z, Y)
        if np.linalg.norm(g) < config.tol:
            break
        W -= lr * g
    loss, _ = _ce_and_grad(W, Z, Y)
    return ProbeResult(
        weights=W,
        train_acc=float(np.mean(predict(W, Z) == train.labels)),
        test_acc=float(np.mean(predict(W, test.features) == test.labels)),
        train_loss=loss,
        iterations=it,
    )


def _encode(encoder, X: np.ndarray) -> np.ndarray:
    return forward(encoder, X) if isinstance(encoder, EncoderParams) else np.asarray(encoder(X))


def alignment_error(encoder, dataset: LabeledSphereDataset, r: float, n_pairs: int, rng) -> dict:
    """Max and mean of ||f(x) - f(x+)|| over sampled positive pairs.

    The max is an estimate of the weak-alignment constant epsilon, whose true
    value is a supremum over the augmentation distribution.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    X = dataset.points[rng.integers(0, dataset.n, n_pairs)]
    Xp = augment_batch(X, r, rng)
    gaps = np.linalg.norm(_encode(encoder, X) - _encode(encoder, Xp), axis=1)
    return {"max_eps": float(gaps.max()), "mean_eps": float(gaps.mean()), "estimate": True}


def empirical_infonce(
    encoder, dataset: LabeledSphereDataset, r: float, M: int, n_batches: int, rng, batch_size: int = 256
) -> tuple[float, float]:
    """Monte-Carlo InfoNCE risk and its standard error.

    Each batch draws anchors uniformly from the dataset, one fresh positive
    per anchor and one fresh pool of M augmented negatives; the standard
    error comes from the spread of the independent batch means.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    means = []
    for _ in range(n_batches):
        X = dataset.points[rng.integers(0, dataset.n, batch_size)]
        Xp = augment_batch(X, r, rng)
        Xn = augment_batch(dataset.points[rng.integers(0, dataset.n, M)], r, rng)
        losses, _ = infonce_from_embeddings(_encode(encoder, X), _encode(encoder, Xp), _encode(encoder, Xn))
        means.append(losses.mean())
    means = np.array(means)
    se = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else math.inf
    return float(means.mean()), se


def lse_approximation_error(t: FeatureTable, M_list, trials: int, rng, anchors: np.ndarray | None = None) -> dict:
    """Mean |LSE_M - LSE| per M.

    LSE is log of the exact mean of exp(f(x).f(x')) over every row of ``t``;
    LSE_M replaces that mean by M rows drawn uniformly with replacement.
    Anchors default to the rows of ``t``.
    """
    pool = t.features
    A = pool if anchors is None else np.atleast_2d(anchors)
    out = {}
    idx_anchor = rng.integers(0, len(A), trials)
    sims_full = A[idx_anchor] @ pool.T
    exact = logsumexp(sims_full, axis=1) - math.log(len(pool))
    for M in M_list:
        if M > len(pool):
            raise ValueError(f"M={M} exceeds the table size {len(pool)}")
        pick = rng.integers(0, len(pool), (trials, M))
        approx = logsumexp(np.take_along_axis(sims_full, pick, axis=1), axis=1) - math.log(M)
        out[int(M)] = float(np.mean(np.abs(approx - exact)))
    return out


def loglog_slope(errors: dict) -> float:
    Ms = np.array(sorted(errors), dtype=float)
    errs = np.array([errors[int(m)] for m in Ms])
    return float(np.polyfit(np.log(Ms), np.log(errs), 1)[0])


@dataclass
class BoundsReport:
    L_nce: float
    L_nce_se: float
    L_ce_mu: float
    var_cond: float
    M: int
    K: int
    log_M_over_K: float
    epsilon: float
    epsilon_mean: float
    diameter_D: float
    lse_error_estimate: float
    upper_slack: float
    lower_slack: float
    upper_bound: float
    lower_bound: float
    upper_holds: bool
    lower_holds: bool
    weak_upper_bound: float | None
    weak_lower_bound: float | None
    weak_upper_holds: bool | None
    weak_lower_holds: bool | None
    gap: float
    slack_note: str = "slack = 3*SE(L_nce) + empirical A(M); epsilon is a sampled estimate"

    @property
    def lhs(self) -> float:
        return self.L_ce_mu + self.log_M_over_K

    def to_dict(self) -> dict:
        return asdict(self)


def bounds_report(
    encoder,
    dataset: LabeledSphereDataset,
    r: float,
    M: int,
    K: int | None = None,
    graph=None,
    rng=None,
    n_batches: int = 40,
    batch_size: int = 256,
    n_pairs: int = 10_000,
    lse_trials: int = 2000,
) -> BoundsReport:
    """Evaluate every quantity of the two-sided InfoNCE / mean-CE bound.

    Violations are reported through the ``*_holds`` flags, never raised.
    """
    from augoverlap.graph import intra_class_diameter

    rng = np.random.default_rng() if rng is None else rng
    K = dataset.n_classes if K is None else K
    table = FeatureTable(np.arange(dataset.n), dataset.labels, _encode(encoder, dataset.points))
    L_ce = mean_ce_loss(table, K)
    var = conditional_variance(table, K)
    L_nce, se = empirical_infonce(encoder, dataset, r, M, n_batches, rng, batch_size)
    eps = alignment_error(encoder, dataset, r, n_pairs, rng)

    # A(M): negatives are augmented views, anchors are natural samples
    views = augment_batch(dataset.points, r, rng)
    view_table = FeatureTable(np.arange(dataset.n), dataset.labels, _encode(encoder, views))
    A_M = lse_approximation_error(view_table, [M], lse_trials, rng, anchors=table.features)[M] if M <= dataset.n else 0.0

    D = intra_class_diameter(graph)[1] if graph is not None else math.inf
    slack = 3.0 * se + A_M + NUMERIC_TOL
    lhs = L_ce + math.log(M / K)
    upper = L_nce + math.sqrt(var)
    lower = L_nce - math.sqrt(var) - 0.5 * var
    weak_up = weak_lo = None
    if math.isfinite(D):
        weak_up = L_nce + D * eps["max_eps"]
        weak_lo = L_nce - D * eps["max_eps"] - 0.5 * (D * eps["max_eps"]) ** 2
    return BoundsReport(
        L_nce=L_nce,
        L_nce_se=se,
        L_ce_mu=L_ce,
        var_cond=var,
        M=M,
        K=K,
        log_M_over_K=math.log(M / K),
        epsilon=eps["max_eps"],
        epsilon_mean=eps["mean_eps"],
        diameter_D=D,
        lse_error_estimate=A_M,
        upper_slack=slack,
        lower_slack=slack,
        upper_bound=upper,
        lower_bound=lower,
        upper_holds=bool(lhs <= upper + slack),
        lower_holds=bool(lhs >= lower - slack),
        weak_upper_bound=weak_up,
        weak_lower_bound=weak_lo,
        weak_upper_holds=None if weak_up is None else bool(lhs <= weak_up + slack),
        weak_lower_holds=None if weak_lo is None else bool(lhs >= weak_lo - slack),
        gap=lhs - L_nce,
    )


def uniform_counterexample(N: int, K: int, m: int, seed: int, test_fraction: float = 0.2, probe: ProbeConfig | None = None) -> dict:
    """Perfectly aligned, uniformly spread features with random labels.

    Each sample's positive maps to its own row, so alignment is perfect and
    the rows are uniform on S^(m-1); the linear probe still cannot beat
    roughly 1/K on held-out rows.
    """
    if N < 100 * K:
        raise ValueError("need N >= 100*K")
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((N, m))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    y = rng.integers(0, K, N)
    table = FeatureTable(np.arange(N), y, Z)
    n_test = int(round(test_fraction * N))
    train = FeatureTable(np.arange(N - n_test), y[n_test:], Z[n_test:])
    test = FeatureTable(np.arange(n_test), y[:n_test], Z[:n_test])
    res = linear_probe(train, test, probe)
    return {
        "table": table,
        "probe_acc": res.test_acc,
        "train_acc": res.train_acc,
        "chance": 1.0 / K,
        "var_cond": conditional_variance(table, K),
        "N": N,
        "K": K,
        "m": m,
    }
