"""Single-hidden-layer encoder onto the unit sphere, InfoNCE and its training loop.

f(x) = normalize(W2 . act(W1 x + b1) + b2), with the InfoNCE objective at
temperature 1 and the positive excluded from the log-sum-exp.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from augoverlap._io import atomic_write_text, write_csv
from augoverlap.sphere import LabeledSphereDataset, augment_batch

log = logging.getLogger(__name__)

ACTIVATIONS = ("softmax", "tanh", "relu")
DEGENERATE_NORM = 1e-12
# softmax weights below e^-50 relative to the largest are dropped; their total
# is under 1e-17 for any practical width, i.e. below double precision
SOFTMAX_CUTOFF = 50.0
SPARSE_DENSITY = 0.25


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "softmax"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        h, d_in = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[1] != h or self.b2.shape != (self.W2.shape[0],):
            raise ValueError("inconsistent encoder parameter shapes")

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def with_arrays(self, arrays) -> "EncoderParams":
        return EncoderParams(*[np.array(a, dtype=float) for a in arrays], activation=self.activation)

    def copy(self) -> "EncoderParams":
        return self.with_arrays(self.arrays())

    def save(self, path) -> None:
        """JSON checkpoint with a shape header; ``d`` is the sphere dimension."""
        blob = {
            "h": self.hidden,
            "d": self.d_in - 1,
            "m": self.out_dim,
            "activation": self.activation,
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.tolist(),
            "b2": self.b2.tolist(),
        }
        atomic_write_text(Path(path), json.dumps(blob))

    @classmethod
    def load(cls, path) -> "EncoderParams":
        blob = json.loads(Path(path).read_text())
        p = cls(*(np.asarray(blob[k], dtype=float) for k in ("W1", "b1", "W2", "b2")), activation=blob["activation"])
        if (p.hidden, p.d_in - 1, p.out_dim) != (blob["h"], blob["d"], blob["m"]):
            raise ValueError("checkpoint arrays disagree with their shape header")
        return p


def init_params(
    d_in: int,
    hidden: int,
    out_dim: int,
    rng: np.random.Generator,
    activation: str = "softmax",
    init: str = "uniform",
    hidden_scale: float = 1.0,
) -> EncoderParams:
    """Random encoder.

    ``uniform``: every entry i.i.d. on [-s, s] with s = 1/sqrt(fan_in), and
    the first layer multiplied by ``hidden_scale``.
    ``directions``: first-layer rows are ``hidden_scale`` times uniform unit
    directions with zero bias, second-layer entries standard normal and a
    zero output bias.  With a softmax activation and a large scale each
    hidden unit owns one Voronoi cell of the input sphere, and the network
    acts as a trainable lookup table over those cells.
    """
    s1 = 1.0 / math.sqrt(d_in)
    s2 = 1.0 / math.sqrt(hidden)
    if init == "uniform":
        W1 = hidden_scale * rng.uniform(-s1, s1, (hidden, d_in))
        b1 = hidden_scale * rng.uniform(-s1, s1, hidden)
    elif init == "directions":
        W1 = rng.standard_normal((hidden, d_in))
        W1 *= hidden_scale / np.linalg.norm(W1, axis=1, keepdims=True)
        b1 = np.zeros(hidden)
        return EncoderParams(W1, b1, rng.standard_normal((out_dim, hidden)), np.zeros(out_dim), activation)
    else:
        raise ValueError(f"unknown init {init!r}")
    W2 = rng.uniform(-s2, s2, (out_dim, hidden))
    b2 = rng.uniform(-s2, s2, out_dim)
    return EncoderParams(W1, b1, W2, b2, activation)


def _softmax(a: np.ndarray):
    """Row softmax; sharply peaked rows come back as a CSR matrix."""
    e = a - a.max(axis=-1, keepdims=True)
    keep = e > -SOFTMAX_CUTOFF
    if a.ndim == 2 and keep.mean() < SPARSE_DENSITY:
        rows, cols = np.nonzero(keep)
        vals = np.exp(e[rows, cols])
        vals /= np.bincount(rows, vals, minlength=len(a))[rows]
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=len(a)))])
        return sparse.csr_matrix((vals, cols, indptr), shape=a.shape)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def _activate(a: np.ndarray, kind: str):
    if kind == "softmax":
        return _softmax(a)
    if kind == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _forward(p: EncoderParams, X: np.ndarray):
    X = np.atleast_2d(X)
    if X.shape[1] != p.d_in:
        raise ValueError(f"input dimension {X.shape[1]} does not match encoder ({p.d_in})")
    a = X @ p.W1.T + p.b1
    s = _activate(a, p.activation)
    u = np.asarray(s @ p.W2.T) + p.b2
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    degenerate = nu[:, 0] < DEGENERATE_NORM
    z = u / np.where(degenerate[:, None], 1.0, nu)
    if degenerate.any():
        z[degenerate] = 0.0
        z[degenerate, 0] = 1.0
    return X, a, s, nu, z, degenerate


def forward(p: EncoderParams, X) -> np.ndarray:
    """Unit-norm embeddings, one row per input row (or a vector for a vector)."""
    X = np.asarray(X, dtype=float)
    z = _forward(p, X)[4]
    return z[0] if X.ndim == 1 else z


def forward_jacobian(p: EncoderParams, x) -> np.ndarray:
    """d f(x) / d x as an (m, d_in) matrix."""
    _, a, s, nu, z, degenerate = _forward(p, np.asarray(x, dtype=float)[None, :])
    if degenerate[0]:
        return np.zeros((p.out_dim, p.d_in))
    if sparse.issparse(s):
        s = s.toarray()
    a, s, z, nu = a[0], s[0], z[0], nu[0, 0]
    if p.activation == "softmax":
        ds_da = np.diag(s) - np.outer(s, s)
    elif p.activation == "tanh":
        ds_da = np.diag(1.0 - s**2)
    else:
        ds_da = np.diag((a > 0).astype(float))
    proj = (np.eye(p.out_dim) - np.outer(z, z)) / nu
    return proj @ p.W2 @ ds_da @ p.W1


def _backward(p: EncoderParams, cache, gz: np.ndarray) -> list[np.ndarray]:
    X, a, s, nu, z, degenerate = cache
    du = (gz - z * np.sum(z * gz, axis=1, keepdims=True)) / nu
    du[degenerate] = 0.0
    gb2 = du.sum(axis=0)
    if sparse.issparse(s):
        return _backward_sparse(p, X, s, du) + [np.asarray((s.T @ du).T), gb2]
    gW2 = du.T @ s
    ds = du @ p.W2
    if p.activation == "softmax":
        da = ds
        da -= np.einsum("ij,ij->i", s, ds)[:, None]
        da *= s
    elif p.activation == "tanh":
        da = ds * (1.0 - s**2)
    else:
        da = ds * (a > 0)
    return [da.T @ X, da.sum(axis=0), gW2, gb2]


def _backward_sparse(p: EncoderParams, X, s, du) -> list[np.ndarray]:
    # softmax backward restricted to the stored entries of s
    rows = np.repeat(np.arange(s.shape[0]), np.diff(s.indptr))
    cols = s.indices
    ds = np.einsum("ij,ji->i", du[rows], p.W2[:, cols])
    da = s.data * (ds - np.bincount(rows, s.data * ds, minlength=s.shape[0])[rows])
    gW1 = np.asarray(sparse.csr_matrix((da, cols, s.indptr), shape=s.shape).T @ X)
    gb1 = np.bincount(cols, da, minlength=s.shape[1])
    return [gW1, gb1]


def infonce_from_embeddings(z: np.ndarray, zp: np.ndarray, zn: np.ndarray):
    """Per-anchor InfoNCE terms and the softmax weights over negatives.

    ``zn`` is (M, m) when one negative pool is shared by every anchor, or
    (B, M, m) for per-anchor negatives.
    """
    if zn.shape[-2] == 0:
        raise ValueError("InfoNCE needs at least one negative (M >= 1)")
    sim = z @ zn.T if zn.ndim == 2 else np.einsum("bm,bjm->bj", z, zn)
    top = sim.max(axis=1, keepdims=True)
    w = np.exp(sim - top)
    total = w.sum(axis=1, keepdims=True)
    lse = np.log(total[:, 0]) + top[:, 0]
    losses = -np.sum(z * zp, axis=1) + lse
    return losses, w / total


def infonce_loss(p: EncoderParams, anchors, positives, negatives) -> float:
    """Mean over anchors of -f(x).f(x+) + log sum_i exp(f(x).f(x-_i))."""
    negatives = np.asarray(negatives, dtype=float)
    if negatives.shape[-2] == 0:
        raise ValueError("InfoNCE needs at least one negative (M >= 1)")
    z = forward(p, np.atleast_2d(anchors))
    zp = forward(p, np.atleast_2d(positives))
    if negatives.ndim == 3:
        B, M, _ = negatives.shape
        zn = forward(p, negatives.reshape(B * M, -1)).reshape(B, M, -1)
    else:
        zn = forward(p, negatives)
    return float(infonce_from_embeddings(z, zp, zn)[0].mean())


def infonce_grad(p: EncoderParams, anchors, positives, negatives) -> tuple[float, EncoderParams]:
    """Batch InfoNCE loss and its exact gradient w.r.t. every parameter."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    negatives = np.asarray(negatives, dtype=float)
    shared = negatives.ndim == 2
    B = len(anchors)
    ca = _forward(p, anchors)
    cp = _forward(p, np.atleast_2d(positives))
    flat = negatives if shared else negatives.reshape(-1, negatives.shape[-1])
    cn = _forward(p, flat)
    z, zp = ca[4], cp[4]
    zn = cn[4] if shared else cn[4].reshape(B, -1, p.out_dim)
    losses, w = infonce_from_embeddings(z, zp, zn)
    if shared:
        gz = (-zp + w @ zn) / B
        gn = (w.T @ z) / B
    else:
        gz = (-zp + np.einsum("bj,bjm->bm", w, zn)) / B
        gn = (w[:, :, None] * z[:, None, :]).reshape(-1, p.out_dim) / B
    gp = -z / B
    grads = [ga + gb + gc for ga, gb, gc in zip(_backward(p, ca, gz), _backward(p, cp, gp), _backward(p, cn, gn))]
    return float(losses.mean()), p.with_arrays(grads)


@dataclass
class TrainConfig:
    r: float = 0.1
    M: int = 255
    batch_size: int = 256
    epochs: int = 200
    learning_rate: float = 0.05
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    seed: int = 0
    hidden_width: int = 128
    output_dim: int = 16
    activation: str = "softmax"
    init: str = "uniform"
    hidden_scale: float = 1.0
    symmetric: bool = False
    freeze_output_bias: bool = False
    acr_eval_every: int = 0
    acr_C: int = 10
    acr_k: int = 1
    acr_sources: int = 500
    eps_pairs: int = 1000

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= self.r <= math.pi:
            raise ValueError("r must lie in [0, pi]")


@dataclass
class EpochRecord:
    epoch: int
    infonce_loss: float
    acr: float | None = None
    eps: float | None = None


@dataclass
class TrainingTrace:
    records: list[EpochRecord] = field(default_factory=list)
    acr_init: float | None = None

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("trace epochs must increase")
        if not math.isfinite(rec.infonce_loss):
            raise ValueError("trace loss must be finite")
        self.records.append(rec)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.infonce_loss for r in self.records])

    def to_csv(self, path) -> None:
        rows = [
            [r.epoch, r.infonce_loss, "" if r.acr is None else r.acr, "" if r.eps is None else r.eps]
            for r in self.records
        ]
        write_csv(path, ["epoch", "loss", "acr", "eps"], rows)


def _monitor(params: EncoderParams, dataset: LabeledSphereDataset, config: TrainConfig, epoch: int):
    from augoverlap.evaluation import alignment_error
    from augoverlap.metrics import build_augmented_features, confusion_ratio_all

    rng = np.random.default_rng([config.seed, epoch, 17])
    n_src = min(config.acr_sources, dataset.n)
    sub = rng.choice(dataset.n, n_src, replace=False) if n_src < dataset.n else np.arange(dataset.n)
    subset = LabeledSphereDataset(dataset.points[sub], dataset.labels[sub], dataset.caps)
    feats = build_augmented_features(params, subset, config.acr_C, config.r, rng, k=config.acr_k)
    acr = confusion_ratio_all(feats).acr
    eps = alignment_error(params, dataset, config.r, config.eps_pairs, rng)["max_eps"]
    return acr, eps


def train(dataset: LabeledSphereDataset, config: TrainConfig, callback=None):
    """Mini-batch InfoNCE training; returns ``(params, trace)``.

    Each step draws one fresh positive per anchor and a fresh pool of M
    augmented negatives (shared by the anchors of the step).  Monitoring uses
    its own random streams so it never changes the optimization path.
    """
    rng = np.random.default_rng(config.seed)
    X = dataset.points
    n = len(X)
    params = init_params(
        X.shape[1], config.hidden_width, config.output_dim, rng,
        activation=config.activation, init=config.init, hidden_scale=config.hidden_scale,
    )
    velocity = [np.zeros_like(a) for a in params.arrays()]
    mu = config.momentum if config.optimizer == "sgd_momentum" else 0.0
    trace = TrainingTrace()
    if config.acr_eval_every:
        trace.acr_init = _monitor(params, dataset, config, 0)[0]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            anchors = X[order[start : start + config.batch_size]]
            positives = augment_batch(anchors, config.r, rng)
            if config.symmetric:
                anchors = augment_batch(anchors, config.r, rng)
            negatives = augment_batch(X[rng.integers(0, n, config.M)], config.r, rng)
            loss, grads = infonce_grad(params, anchors, positives, negatives)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite InfoNCE loss at epoch {epoch}")
            if config.freeze_output_bias:
                grads.b2[:] = 0.0
            for a, v, g in zip(params.arrays(), velocity, grads.arrays()):
                v *= mu
                v -= config.learning_rate * g
                a += v
            total += loss
            batches += 1
        if not all(np.isfinite(a).all() for a in params.arrays()):
            raise TrainingDiverged(f"non-finite parameters at epoch {epoch}")
        rec = EpochRecord(epoch, total / batches)
        if config.acr_eval_every and epoch % config.acr_eval_every == 0:
            rec.acr, rec.eps = _monitor(params, dataset, config, epoch)
        trace.append(rec)
        log.debug("epoch %d loss %.5f", epoch, rec.infonce_loss)
        if callback is not None:
            callback(epoch, params, rec)
    return params, trace


def write_features_csv(Z: np.ndarray, labels, path, ids=None) -> None:
    ids = range(len(Z)) if ids is None else ids
    header = ["id", "label"] + [f"z{j}" for j in range(Z.shape[1])]
    rows = ([int(i), int(y)] + [float(v) for v in z] for i, y, z in zip(ids, labels, Z))
    write_csv(path, header, rows)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
