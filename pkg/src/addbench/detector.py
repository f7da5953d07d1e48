"""Desk-scale detectors.

* A two-class diagonal GMM scored by the frame-averaged log-likelihood ratio.
* A one-hidden-layer classifier on pooled feature statistics, trained with
  Adam on the binary cross-entropy, with early stopping on validation loss.

Scores from both follow one convention: higher means more bonafide.
Training labels use y = 1 for fake, y = 0 for bonafide.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .corpus import label_to_y
from .errors import BadLength, ClassMissing, DimMismatch, KindMismatch, LengthMismatch, TooFewFrames
from .features import KINDS, FeatureMatrix

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-4
PROB_CLIP = 1e-7
MODEL_MAGIC = b"ADDM"
MODEL_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


# --------------------------------------------------------------------- GMM

@dataclass(eq=False)
class Gmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    trace: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    def component_loglik(self, X: np.ndarray) -> np.ndarray:
        """(n, K) log w_k + log N(x | mu_k, diag var_k)."""
        X = np.asarray(X, dtype=np.float64)
        prec = 1.0 / self.variances
        const = -0.5 * (self.D * _LOG_2PI + np.log(self.variances).sum(axis=1)
                        + (self.means ** 2 * prec).sum(axis=1))
        quad = -0.5 * (X ** 2) @ prec.T + X @ (self.means * prec).T
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return quad + const + logw

    def loglik(self, X: np.ndarray) -> np.ndarray:
        """Per-frame log p(x)."""
        return logsumexp(self.component_loglik(X), axis=1)


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def gmm_fit(frames, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4,
            var_floor: float = VAR_FLOOR) -> Gmm:
    """Diagonal-covariance EM from a seeded k-means++ start.

    Stops when the average log-likelihood gains less than ``tol`` or after
    ``max_iter`` iterations. The per-iteration average log-likelihood is kept
    in ``Gmm.trace``; flooring variances is the constrained M-step, so the
    trace stays non-decreasing.
    """
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2:
        raise DimMismatch(f"frames must be (n, D), got {X.shape}")
    n, D = X.shape
    if n < K:
        raise TooFewFrames(f"{n} frames cannot support {K} components")
    rng = np.random.default_rng(seed)
    means = _kmeanspp(X, K, rng)
    variances = np.tile(np.maximum(X.var(axis=0), var_floor), (K, 1))
    g = Gmm(np.full(K, 1.0 / K), means, variances)
    prev = -np.inf
    for _ in range(max_iter):
        comp = g.component_loglik(X)
        ll = logsumexp(comp, axis=1)
        avg = float(ll.mean())
        g.trace.append(avg)
        if avg - prev < tol:
            break
        prev = avg
        resp = np.exp(comp - ll[:, None])
        nk = resp.sum(axis=0)
        alive = nk > 1e-10
        weights = nk / nk.sum()
        weights[~alive] = 0.0
        safe = np.where(alive, nk, 1.0)[:, None]
        new_means = resp.T @ X / safe
        new_vars = resp.T @ (X ** 2) / safe - new_means ** 2
        means = np.where(alive[:, None], new_means, g.means)
        variances = np.where(alive[:, None], np.maximum(new_vars, var_floor), g.variances)
        g = Gmm(weights / weights.sum(), means, variances, g.trace)
    return g


@dataclass(eq=False)
class GmmModel:
    bonafide: Gmm
    fake: Gmm
    kind: str

    def swapped(self) -> GmmModel:
        return GmmModel(self.fake, self.bonafide, self.kind)


def gmm_score(model: GmmModel, f: FeatureMatrix) -> float:
    """Mean over frames of log p(x | bonafide) - log p(x | fake)."""
    if f.kind != model.kind:
        raise KindMismatch(f"model trained on {model.kind}, got {f.kind} features")
    X = f.frames()
    return float(np.mean(model.bonafide.loglik(X) - model.fake.loglik(X)))


def _subsample_frames(feats, max_frames, rng):
    X = np.vstack([f.frames() for f in feats])
    if max_frames is not None and X.shape[0] > max_frames:
        X = X[np.sort(rng.choice(X.shape[0], max_frames, replace=False))]
    return X


def train_gmm(features, labels, K: int = 64, seed: int = 0, max_frames: int | None = 50000,
              max_iter: int = 100) -> GmmModel:
    """Fit one GMM per class on the pooled frames of its utterances."""
    ys = np.array([label_to_y(l) for l in labels])
    if not (ys == 0).any() or not (ys == 1).any():
        raise ClassMissing("both bonafide and fake utterances are required")
    kinds = {f.kind for f in features}
    if len(kinds) != 1:
        raise KindMismatch(f"mixed feature kinds {sorted(kinds)}")
    rng = np.random.default_rng(seed)
    per_class = []
    for y in (0, 1):
        X = _subsample_frames([f for f, v in zip(features, ys) if v == y], max_frames, rng)
        per_class.append(gmm_fit(X, K, seed=seed + y, max_iter=max_iter))
        log.info("GMM class %d: %d frames, %d EM iterations", y, X.shape[0], len(per_class[-1].trace))
    return GmmModel(per_class[0], per_class[1], kinds.pop())


# ----------------------------------------------------------- classifier

def cross_entropy(y, y_hat) -> float:
    """Binary cross-entropy averaged over samples; ``y_hat`` is P(y = 1)."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(y_hat, dtype=np.float64)
    if y.shape != p.shape:
        raise LengthMismatch(f"{y.shape} labels vs {p.shape} probabilities")
    p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 3
    val_fraction: float = 0.2
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass(eq=False)
class MlpModel:
    W1: np.ndarray  # (d_in, H)
    b1: np.ndarray
    W2: np.ndarray  # (H, 2); column 0 bonafide, column 1 fake
    b2: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    kind: str = "lfcc"

    PARAMS = ("W1", "b1", "W2", "b2")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.PARAMS}

    def with_params(self, params: dict) -> MlpModel:
        m = copy.copy(self)
        for k, v in params.items():
            setattr(m, k, np.array(v, dtype=np.float64))
        return m

    def swapped(self) -> MlpModel:
        return self.with_params({"W2": self.W2[:, ::-1], "b2": self.b2[::-1]})

    def forward(self, X):
        """Returns (hidden activations, standardized input, class probabilities)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.input_dim:
            raise DimMismatch(f"expected {self.input_dim}-dim input, got {X.shape[1]}")
        Z = (X - self.mean) / self.std
        A = np.tanh(Z @ self.W1 + self.b1)
        logits = A @ self.W2 + self.b2
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return A, Z, e / e.sum(axis=1, keepdims=True)


def init_mlp(input_dim: int, hidden: int, seed: int, mean=None, std=None, kind="lfcc") -> MlpModel:
    rng = np.random.default_rng(seed)
    l1 = np.sqrt(6.0 / (input_dim + hidden))
    l2 = np.sqrt(6.0 / (hidden + 2))
    return MlpModel(
        rng.uniform(-l1, l1, (input_dim, hidden)), np.zeros(hidden),
        rng.uniform(-l2, l2, (hidden, 2)), np.zeros(2),
        np.zeros(input_dim) if mean is None else np.asarray(mean, dtype=np.float64),
        np.ones(input_dim) if std is None else np.asarray(std, dtype=np.float64),
        kind,
    )


def mlp_loss_grad(model: MlpModel, X, y):
    """Cross-entropy on P(fake) and its exact gradients w.r.t. W1, b1, W2, b2."""
    y = np.asarray(y, dtype=np.float64)
    A, Z, P = model.forward(X)
    loss = cross_entropy(y, P[:, 1])
    J = y.shape[0]
    onehot = np.stack([1.0 - y, y], axis=1)
    d_logits = (P - onehot) / J
    dA = d_logits @ model.W2.T
    dH = dA * (1.0 - A ** 2)
    grads = {
        "W2": A.T @ d_logits,
        "b2": d_logits.sum(axis=0),
        "W1": Z.T @ dH,
        "b1": dH.sum(axis=0),
    }
    return loss, grads


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs in a row."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def mlp_train(samples, cfg: TrainConfig | None = None, kind: str = "lfcc"):
    """Train on ``(pooled_vector, label)`` pairs.

    Returns ``(model, history)``; the model holds the parameters from the
    epoch with the lowest validation loss.
    """
    from .datasetgen import split_train_val

    cfg = cfg or TrainConfig()
    X = np.array([np.asarray(v, dtype=np.float64) for v, _ in samples])
    y = np.array([label_to_y(l) for _, l in samples], dtype=np.float64)
    if (y == 0).sum() < 2 or (y == 1).sum() < 2:
        raise ClassMissing("need at least two samples of each class")
    tr, va = split_train_val(list(range(len(y))), 1.0 - cfg.val_fraction, cfg.seed,
                             label_of=lambda i: y[i])
    tr, va = np.array(tr), np.array(va)
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    model = init_mlp(X.shape[1], cfg.hidden, cfg.seed, mean, std, kind)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    stopper = EarlyStopping(cfg.patience)
    rng = np.random.default_rng(cfg.seed)
    best = model
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = tr[rng.permutation(tr.size)]
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = mlp_loss_grad(model, X[b], y[b])
            model = model.with_params(opt.step(model.params(), grads))
            losses.append(loss * b.size)
        val_loss = cross_entropy(y[va], model.forward(X[va])[2][:, 1])
        history.append({"epoch": epoch, "train_loss": float(np.sum(losses) / order.size),
                        "val_loss": val_loss})
        if val_loss < stopper.best:
            best = model
        stop = stopper.update(epoch, val_loss)
        log.info("epoch %d train %.5f val %.5f", epoch, history[-1]["train_loss"], val_loss)
        if stop:
            break
    return best, history


def mlp_score(model: MlpModel, pooled) -> float:
    """P(bonafide) - P(fake)."""
    _, _, P = model.forward(np.asarray(pooled, dtype=np.float64)[None, :])
    return float(P[0, 0] - P[0, 1])


def mlp_scores(model: MlpModel, X) -> np.ndarray:
    _, _, P = model.forward(X)
    return P[:, 0] - P[:, 1]


# ----------------------------------------------------------- model files

def _pack_arrays(*arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def save_model(path, model) -> Path:
    """Binary container: magic, version, model kind, feature kind, dims, float64 LE params."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, GmmModel):
        b, f = model.bonafide, model.fake
        head = struct.pack("<4sHBB", MODEL_MAGIC, MODEL_VERSION, 0, KINDS.index(model.kind))
        head += struct.pack("<III", b.K, f.K, b.D)
        body = _pack_arrays(b.weights, b.means, b.variances, f.weights, f.means, f.variances)
    elif isinstance(model, MlpModel):
        head = struct.pack("<4sHBB", MODEL_MAGIC, MODEL_VERSION, 1, KINDS.index(model.kind))
        head += struct.pack("<II", model.input_dim, model.hidden)
        body = _pack_arrays(model.W1, model.b1, model.W2, model.b2, model.mean, model.std)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(head + body)
    tmp.replace(path)
    return path


def model_header(path):
    raw = Path(path).read_bytes()[:8]
    if len(raw) < 8:
        raise BadLength(f"{path}: truncated model file")
    magic, version, mkind, fkind = struct.unpack("<4sHBB", raw)
    if magic != MODEL_MAGIC or version != MODEL_VERSION or mkind > 1 or fkind >= len(KINDS):
        raise BadLength(f"{path}: not an addbench model file")
    return ("gmm", "mlp")[mkind], KINDS[fkind]


def load_model(path):
    raw = Path(path).read_bytes()
    mkind, fkind = model_header(path)
    pos = 8

    def take(*shape):
        nonlocal pos
        n = int(np.prod(shape))
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        return a

    try:
        if mkind == "gmm":
            kb, kf, D = struct.unpack_from("<III", raw, pos)
            pos += 12
            bona = Gmm(take(kb), take(kb, D), take(kb, D))
            fake = Gmm(take(kf), take(kf, D), take(kf, D))
            model = GmmModel(bona, fake, fkind)
        else:
            d, H = struct.unpack_from("<II", raw, pos)
            pos += 8
            model = MlpModel(take(d, H), take(H), take(H, 2), take(2), take(d), take(d), fkind)
    except (ValueError, struct.error) as exc:
        raise BadLength(f"{path}: corrupt model file ({exc})") from exc
    if pos != len(raw):
        raise BadLength(f"{path}: {len(raw) - pos} trailing bytes")
    return model
