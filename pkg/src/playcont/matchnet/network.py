"""Feature-based playlist-song match classifier.

The network has two parts. A feature transformation ``f`` maps every song
vector, both the playlist's songs and the candidate, through the same stack
of ``dense -> batch-norm -> rectify -> dropout`` blocks. The playlist's
hidden rows are mean-pooled into one vector, concatenated with the
candidate's hidden vector and passed to the discriminator ``g``:
``dense -> batch-norm -> rectify -> dropout -> dense(1) -> logistic``.

Batches are flattened: all playlist rows of all examples are stacked into
one matrix with segment offsets, followed by the candidate rows. Batch-norm
statistics in ``f`` are taken over every song row of the batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .._validation import check_matrix, check_vector

CLIP_EPS = 1e-7

TRAIN = "train"
INFERENCE = "inference"


@dataclass
class MatchNetConfig:
    input_dim: int
    hidden_dim: int = 128
    f_blocks: int = 2
    g_hidden: int = 128
    dropout_rate: float = 0.5
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9
    use_batchnorm: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "f_blocks", "g_hidden", "batch_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            setattr(self, name, int(value))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not self.bn_epsilon > 0:
            raise ValueError("bn_epsilon must be positive")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")

    @property
    def f_widths(self) -> list[int]:
        """Output width of each ``f`` block; the last one is the hidden size."""
        return [2 * self.hidden_dim] * (self.f_blocks - 1) + [self.hidden_dim]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchNetConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ValueError(f"unknown config field {key!r}")
            kwargs[key] = value
        return cls(**kwargs)


def parameter_shapes(config: MatchNetConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter and running statistic, in the fixed serialization order."""
    shapes: dict[str, tuple[int, ...]] = {}
    fan_in = config.input_dim
    for i, width in enumerate(config.f_widths):
        shapes[f"f{i}.W"] = (fan_in, width)
        shapes[f"f{i}.b"] = (width,)
        shapes[f"f{i}.gamma"] = (width,)
        shapes[f"f{i}.beta"] = (width,)
        shapes[f"f{i}.mean"] = (width,)
        shapes[f"f{i}.var"] = (width,)
        fan_in = width
    shapes["g.W1"] = (2 * config.hidden_dim, config.g_hidden)
    shapes["g.b1"] = (config.g_hidden,)
    shapes["g.gamma"] = (config.g_hidden,)
    shapes["g.beta"] = (config.g_hidden,)
    shapes["g.mean"] = (config.g_hidden,)
    shapes["g.var"] = (config.g_hidden,)
    shapes["g.W2"] = (config.g_hidden, 1)
    shapes["g.b2"] = (1,)
    return shapes


def is_running_stat(name: str) -> bool:
    return name.endswith(".mean") or name.endswith(".var")


class MatchNet:
    """Parameter container plus the train/inference mode flag."""

    def __init__(self, config: MatchNetConfig, params: dict[str, np.ndarray], mode: str = TRAIN):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.set_mode(mode)

    def set_mode(self, mode: str) -> "MatchNet":
        if mode not in (TRAIN, INFERENCE):
            raise ValueError(f"mode must be {TRAIN!r} or {INFERENCE!r}")
        self.mode = mode
        return self

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.params if not is_running_stat(n)]

    def copy(self) -> "MatchNet":
        return MatchNet(self.config, {k: v.copy() for k, v in self.params.items()}, self.mode)


def init(config: MatchNetConfig, rng_seed: int = 0) -> MatchNet:
    """Glorot-uniform dense weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(rng_seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        kind = name.split(".")[1]
        if kind.startswith("W"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind in ("gamma", "var"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return MatchNet(config, params, TRAIN)


# -- batches -----------------------------------------------------------------


@dataclass
class PairBatch:
    """Flattened batch: playlist rows with segment offsets, one candidate row per example."""

    playlist_rows: np.ndarray
    offsets: np.ndarray
    songs: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.songs.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)


def canonical_rows(X: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically, so any row permutation maps to the same matrix."""
    if X.shape[0] < 2:
        return X
    return X[np.lexsort(X.T[::-1])]


def make_batch(playlists, songs, labels=None, canonical: bool = True) -> PairBatch:
    """Batch from a list of ``T_i x D`` playlist matrices and a ``B x D`` candidate matrix."""
    mats = [canonical_rows(np.asarray(X, dtype=np.float64)) if canonical else np.asarray(X, dtype=np.float64)
            for X in playlists]
    if not mats:
        raise ValueError("empty batch")
    for X in mats:
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("every playlist needs at least one song row")
    lengths = np.array([X.shape[0] for X in mats])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    songs = np.asarray(songs, dtype=np.float64)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64)
    return PairBatch(np.vstack(mats), offsets, songs, labels)


def _check_batch(net: MatchNet, batch: PairBatch) -> None:
    D = net.config.input_dim
    check_matrix(batch.playlist_rows, "playlist features", D)
    check_matrix(batch.songs, "song features", D)
    if batch.songs.shape[0] != len(batch.offsets) - 1:
        raise ValueError("batch has mismatched playlist and song counts")
    if np.any(batch.lengths < 1):
        raise ValueError("every playlist needs at least one song row")


# -- forward / backward --------------------------------------------------------


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _dropout_mask(rng, shape, rate):
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _bn_forward(z, gamma, beta, mean, var, eps, use_batch):
    if use_batch:
        mu = z.mean(axis=0)
        sigma2 = z.var(axis=0)
    else:
        mu, sigma2 = mean, var
    inv_std = 1.0 / np.sqrt(sigma2 + eps)
    xhat = (z - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mu, sigma2)


def _bn_backward(dy, xhat, inv_std, gamma):
    n = dy.shape[0]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * gamma
    dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dz, dgamma, dbeta


def forward_batch(
    net: MatchNet,
    batch: PairBatch,
    rng: np.random.Generator | None = None,
    dropout: bool = True,
    update_stats: bool = False,
    return_cache: bool = False,
):
    """Logits and probabilities for every example of ``batch``.

    In train mode batch-norm uses batch statistics and dropout is drawn from
    ``rng`` (one mask per call). ``update_stats`` folds the batch statistics
    into the running ones with the configured momentum.
    """
    _check_batch(net, batch)
    cfg, P = net.config, net.params
    training = net.mode == TRAIN
    use_dropout = training and dropout and cfg.dropout_rate > 0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    B = len(batch)
    n_rows = batch.playlist_rows.shape[0]
    cache = {"f": [], "batch": batch}

    a = np.vstack([batch.playlist_rows, batch.songs])
    for i in range(cfg.f_blocks):
        a_in = a
        z = a_in @ P[f"f{i}.W"] + P[f"f{i}.b"]
        bn = None
        if cfg.use_batchnorm:
            z, bn = _bn_forward(z, P[f"f{i}.gamma"], P[f"f{i}.beta"], P[f"f{i}.mean"],
                                P[f"f{i}.var"], cfg.bn_epsilon, training)
            if training and update_stats:
                _update_running(net, f"f{i}", bn[2], bn[3])
        relu = z > 0
        a = z * relu
        mask = _dropout_mask(rng, a.shape, cfg.dropout_rate) if use_dropout else None
        if mask is not None:
            a = a * mask
        cache["f"].append((a_in, bn, relu, mask))

    hidden_rows, h_s = a[:n_rows], a[n_rows:]
    lengths = batch.lengths
    h_p = np.add.reduceat(hidden_rows, batch.offsets[:-1], axis=0) / lengths[:, None]
    c = np.hstack([h_p, h_s])

    z1 = c @ P["g.W1"] + P["g.b1"]
    bn_g = None
    if cfg.use_batchnorm:
        z1, bn_g = _bn_forward(z1, P["g.gamma"], P["g.beta"], P["g.mean"], P["g.var"],
                               cfg.bn_epsilon, training)
        if training and update_stats:
            _update_running(net, "g", bn_g[2], bn_g[3])
    relu_g = z1 > 0
    a1 = z1 * relu_g
    mask_g = _dropout_mask(rng, a1.shape, cfg.dropout_rate) if use_dropout else None
    if mask_g is not None:
        a1 = a1 * mask_g
    logits = (a1 @ P["g.W2"] + P["g.b2"]).reshape(B)
    probs = _sigmoid(logits)
    if not return_cache:
        return logits, probs
    cache.update(c=c, bn_g=bn_g, relu_g=relu_g, mask_g=mask_g, a1=a1, n_rows=n_rows)
    return logits, probs, cache


def _update_running(net, prefix, mu, sigma2):
    m = net.config.bn_momentum
    net.params[f"{prefix}.mean"] = m * net.params[f"{prefix}.mean"] + (1 - m) * mu
    net.params[f"{prefix}.var"] = m * net.params[f"{prefix}.var"] + (1 - m) * sigma2


def bce(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example binary cross-entropy with probabilities clipped to ``[eps, 1 - eps]``."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(probs, CLIP_EPS, 1.0 - CLIP_EPS)
    return -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))


def loss(net: MatchNet, batch: PairBatch, rng=None, dropout: bool = True) -> tuple[float, float]:
    """Total and mean cross-entropy of ``batch``."""
    if batch.labels is None:
        raise ValueError("batch has no labels")
    _, probs = forward_batch(net, batch, rng=rng, dropout=dropout)
    per_example = bce(probs, batch.labels)
    return float(per_example.sum()), float(per_example.mean())


def backward(
    net: MatchNet,
    batch: PairBatch,
    rng: np.random.Generator | None = None,
    dropout: bool = True,
    reduction: str = "sum",
    update_stats: bool = False,
) -> tuple[dict[str, np.ndarray], float]:
    """Exact gradient of the batch cross-entropy for every trainable parameter.

    Returns ``(grads, loss)`` where ``loss`` uses the same ``reduction``
    (``"sum"`` or ``"mean"``). Gradients flow through the batch-norm batch
    statistics and through the shared ``f`` into every playlist row and the
    candidate row.
    """
    if net.mode != TRAIN:
        raise RuntimeError("backward requires a net in train mode")
    if batch.labels is None:
        raise ValueError("batch has no labels")
    if reduction not in ("sum", "mean"):
        raise ValueError("reduction must be 'sum' or 'mean'")
    cfg, P = net.config, net.params
    logits, probs, cache = forward_batch(net, batch, rng=rng, dropout=dropout,
                                         update_stats=update_stats, return_cache=True)
    y = batch.labels
    per_example = bce(probs, y)
    scale = 1.0 if reduction == "sum" else 1.0 / len(batch)
    inside = (probs > CLIP_EPS) & (probs < 1.0 - CLIP_EPS)
    dlogits = ((probs - y) * inside * scale).reshape(-1, 1)

    grads: dict[str, np.ndarray] = {}
    grads["g.W2"] = cache["a1"].T @ dlogits
    grads["g.b2"] = dlogits.sum(axis=0)
    da1 = dlogits @ P["g.W2"].T
    if cache["mask_g"] is not None:
        da1 = da1 * cache["mask_g"]
    dz1 = da1 * cache["relu_g"]
    if cfg.use_batchnorm:
        xhat, inv_std, _, _ = cache["bn_g"]
        dz1, grads["g.gamma"], grads["g.beta"] = _bn_backward(dz1, xhat, inv_std, P["g.gamma"])
    else:
        grads["g.gamma"] = np.zeros_like(P["g.gamma"])
        grads["g.beta"] = np.zeros_like(P["g.beta"])
    grads["g.W1"] = cache["c"].T @ dz1
    grads["g.b1"] = dz1.sum(axis=0)
    dc = dz1 @ P["g.W1"].T

    H = cfg.hidden_dim
    dh_p, dh_s = dc[:, :H], dc[:, H:]
    lengths = batch.lengths
    da = np.vstack([np.repeat(dh_p / lengths[:, None], lengths, axis=0), dh_s])

    for i in reversed(range(cfg.f_blocks)):
        a_in, bn, relu, mask = cache["f"][i]
        if mask is not None:
            da = da * mask
        dz = da * relu
        if cfg.use_batchnorm:
            xhat, inv_std, _, _ = bn
            dz, grads[f"f{i}.gamma"], grads[f"f{i}.beta"] = _bn_backward(dz, xhat, inv_std, P[f"f{i}.gamma"])
        else:
            grads[f"f{i}.gamma"] = np.zeros_like(P[f"f{i}.gamma"])
            grads[f"f{i}.beta"] = np.zeros_like(P[f"f{i}.beta"])
        grads[f"f{i}.W"] = a_in.T @ dz
        grads[f"f{i}.b"] = dz.sum(axis=0)
        if i > 0:
            da = dz @ P[f"f{i}.W"].T

    ordered = {name: grads[name] for name in net.trainable}
    return ordered, float(per_example.sum() * scale)


def forward(net: MatchNet, playlist_features, song_feature) -> float:
    """Match probability of one playlist-song pair."""
    D = net.config.input_dim
    X = check_matrix(playlist_features, "playlist features", D)
    if X.shape[0] < 1:
        raise ValueError("playlist must contain at least one song")
    x = check_vector(song_feature, "song feature", D)
    batch = make_batch([X], x.reshape(1, -1))
    _, probs = forward_batch(net, batch, dropout=False)
    return float(probs[0])


# -- inference helpers used for ranking ---------------------------------------


def transform_songs(net: MatchNet, X: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Apply ``f`` row-wise with running statistics (inference only)."""
    if net.mode != INFERENCE:
        raise RuntimeError("transform_songs requires inference mode")
    cfg, P = net.config, net.params
    X = check_matrix(X, "song features", cfg.input_dim)
    out = []
    for start in range(0, max(X.shape[0], 1), chunk):
        a = X[start:start + chunk]
        for i in range(cfg.f_blocks):
            z = a @ P[f"f{i}.W"] + P[f"f{i}.b"]
            if cfg.use_batchnorm:
                z, _ = _bn_forward(z, P[f"f{i}.gamma"], P[f"f{i}.beta"], P[f"f{i}.mean"],
                                   P[f"f{i}.var"], cfg.bn_epsilon, False)
            a = np.maximum(z, 0.0)
        out.append(a)
    return np.vstack(out) if out else np.zeros((0, cfg.hidden_dim))


def pool_playlist(net: MatchNet, playlist_features: np.ndarray) -> np.ndarray:
    """Mean of the transformed playlist rows, order-independent to the last bit."""
    X = canonical_rows(check_matrix(playlist_features, "playlist features", net.config.input_dim))
    hidden = transform_songs(net, X)
    return np.add.reduceat(hidden, [0], axis=0)[0] / X.shape[0]


def discriminate(net: MatchNet, h_p: np.ndarray, h_songs: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Logits of ``g`` for one pooled playlist against many transformed candidates."""
    if net.mode != INFERENCE:
        raise RuntimeError("discriminate requires inference mode")
    cfg, P = net.config, net.params
    H = cfg.hidden_dim
    W1p, W1s = P["g.W1"][:H], P["g.W1"][H:]
    base = h_p @ W1p + P["g.b1"]
    out = []
    for start in range(0, h_songs.shape[0], chunk):
        z1 = h_songs[start:start + chunk] @ W1s + base
        if cfg.use_batchnorm:
            z1, _ = _bn_forward(z1, P["g.gamma"], P["g.beta"], P["g.mean"], P["g.var"],
                                cfg.bn_epsilon, False)
        a1 = np.maximum(z1, 0.0)
        out.append((a1 @ P["g.W2"] + P["g.b2"]).reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)


def sigmoid(z) -> np.ndarray:
    return _sigmoid(np.asarray(z, dtype=np.float64))
