"""Mini-batch training with Adam and validation-cost model selection, plus candidate ranking."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..dataset import FeatureTable
from ..sampling import LabeledPair
from .network import (
    INFERENCE,
    TRAIN,
    MatchNet,
    MatchNetConfig,
    PairBatch,
    backward,
    bce,
    discriminate,
    forward_batch,
    pool_playlist,
    sigmoid,
    transform_songs,
)

_log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainReport:
    train_costs: list[float]
    val_costs: list[float]
    best_epoch: int
    seconds: float = field(default=0.0, compare=False)

    @property
    def best_val_cost(self) -> float:
        return self.val_costs[self.best_epoch - 1]

    def to_dict(self) -> dict:
        # wall-clock time is left out so persisted reports are reproducible
        return {
            "best_epoch": self.best_epoch,
            "train_costs": self.train_costs,
            "val_costs": self.val_costs,
        }


class PairEncoder:
    """Turns labeled pairs into flattened feature batches."""

    def __init__(self, pairs: Sequence[LabeledPair], features: FeatureTable):
        if len(pairs) == 0:
            raise ValueError("no pairs to encode")
        index = features.index
        self.features = features
        self.playlist_idx: list[np.ndarray] = []
        song_idx = []
        for pair in pairs:
            if not pair.playlist_songs:
                raise ValueError(f"pair for candidate {pair.candidate!r} has an empty playlist")
            try:
                self.playlist_idx.append(np.array([index[s] for s in pair.playlist_songs]))
                song_idx.append(index[pair.candidate])
            except KeyError as exc:
                raise KeyError(f"song {exc.args[0]!r} has no feature vector") from None
        self.song_idx = np.array(song_idx)
        self.labels = np.array([p.label for p in pairs], dtype=np.float64)
        self.lengths = np.array([len(i) for i in self.playlist_idx])

    def __len__(self) -> int:
        return len(self.song_idx)

    def batch(self, which: np.ndarray) -> PairBatch:
        M = self.features.matrix
        rows = np.concatenate([self.playlist_idx[i] for i in which])
        offsets = np.concatenate([[0], np.cumsum(self.lengths[which])])
        return PairBatch(M[rows], offsets, M[self.song_idx[which]], self.labels[which])


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / corr1
            vhat = self.v[name] / corr2
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def mean_cost(net: MatchNet, encoder: PairEncoder, chunk: int = 1024) -> float:
    """Mean cross-entropy over all pairs with the net in inference mode."""
    mode = net.mode
    net.set_mode(INFERENCE)
    try:
        total = 0.0
        for start in range(0, len(encoder), chunk):
            which = np.arange(start, min(start + chunk, len(encoder)))
            batch = encoder.batch(which)
            _, probs = forward_batch(net, batch)
            total += float(bce(probs, batch.labels).sum())
    finally:
        net.set_mode(mode)
    return total / len(encoder)


def train(
    net: MatchNet,
    train_pairs: Sequence[LabeledPair],
    val_pairs: Sequence[LabeledPair],
    feature_table: FeatureTable,
    config: MatchNetConfig | None = None,
    rng_seed: int = 0,
    refresh_pairs: Callable[[int], Sequence[LabeledPair]] | None = None,
) -> TrainReport:
    """Fit ``net`` in place and leave it holding the best-validation snapshot.

    Training controls (learning rate, batch size, epochs, patience) come from
    ``config``, defaulting to ``net.config``. Training stops once
    ``patience`` consecutive epochs fail to improve the validation cost, or
    after ``max_epochs``. ``refresh_pairs(epoch)``, if given, supplies a new
    training pair list from the second epoch on (negative resampling).
    The net is returned in inference mode.
    """
    cfg = config or net.config
    if len(train_pairs) == 0 or len(val_pairs) == 0:
        raise ValueError("training and validation pairs must be non-empty")
    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x7472]))
    encoder = PairEncoder(train_pairs, feature_table)
    val_encoder = PairEncoder(val_pairs, feature_table)
    opt = Adam(lr=cfg.learning_rate)
    trainable = net.trainable

    train_costs: list[float] = []
    val_costs: list[float] = []
    best_epoch, best_cost, best_params = 0, np.inf, None
    for epoch in range(1, cfg.max_epochs + 1):
        if refresh_pairs is not None and epoch > 1:
            encoder = PairEncoder(refresh_pairs(epoch), feature_table)
        net.set_mode(TRAIN)
        order = rng.permutation(len(encoder))
        epoch_total, n_seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            which = order[start:start + cfg.batch_size]
            if len(which) < 2 and len(order) > 1:
                # batch-norm statistics are undefined for a single example
                continue
            batch = encoder.batch(which)
            grads, batch_loss = backward(net, batch, rng=rng, reduction="mean", update_stats=True)
            if not np.isfinite(batch_loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss or gradient at epoch {epoch}, batch starting {start}"
                )
            opt.step(net.params, {k: grads[k] for k in trainable})
            epoch_total += batch_loss * len(which)
            n_seen += len(which)
        train_cost = epoch_total / max(n_seen, 1)
        val_cost = mean_cost(net, val_encoder)
        if not np.isfinite(val_cost):
            raise TrainingDiverged(f"non-finite validation cost at epoch {epoch}")
        train_costs.append(train_cost)
        val_costs.append(val_cost)
        _log.info("epoch %d: train %.5f val %.5f", epoch, train_cost, val_cost)
        if val_cost < best_cost:
            best_epoch, best_cost = epoch, val_cost
            best_params = {k: v.copy() for k, v in net.params.items()}
        if epoch - best_epoch >= cfg.patience:
            break

    net.params = best_params
    net.set_mode(INFERENCE)
    return TrainReport(train_costs, val_costs, best_epoch, time.perf_counter() - started)


def _check_ranking_inputs(playlist, candidates, features: FeatureTable):
    playlist = list(playlist)
    candidates = list(candidates)
    if not playlist:
        raise ValueError("playlist must contain at least one song")
    overlap = set(playlist) & set(candidates)
    if overlap:
        raise ValueError(f"candidates overlap the playlist: {sorted(overlap)[:3]}")
    for s in (*playlist, *candidates):
        if s not in features:
            raise KeyError(f"song {s!r} has no feature vector")
    return playlist, candidates


def sort_scored(ids: Sequence[str], keys: np.ndarray, scores: np.ndarray) -> list[tuple[str, float]]:
    """Descending by ``keys``, ties broken by ascending song id."""
    order = sorted(range(len(ids)), key=lambda i: (-keys[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order]


def rank_candidates(
    net: MatchNet,
    playlist: Iterable[str],
    candidates: Iterable[str],
    feature_table: FeatureTable,
    song_embeddings: np.ndarray | None = None,
) -> list[tuple[str, float]]:
    """Rank ``candidates`` for ``playlist`` by predicted match probability.

    The pooled playlist representation is computed once and reused for
    every candidate. ``song_embeddings`` may hold ``f`` applied to every row
    of ``feature_table`` (see :func:`transform_songs`) to skip recomputing
    candidate representations. Ordering uses the logit so saturated
    probabilities still rank consistently.
    """
    playlist, candidates = _check_ranking_inputs(playlist, candidates, feature_table)
    if net.mode != INFERENCE:
        raise RuntimeError("rank_candidates requires inference mode")
    h_p = pool_playlist(net, feature_table.rows(playlist))
    if song_embeddings is None:
        h_c = transform_songs(net, feature_table.rows(candidates))
    else:
        h_c = song_embeddings[[feature_table.index[c] for c in candidates]]
    logits = discriminate(net, h_p, h_c)
    return sort_scored(candidates, logits, sigmoid(logits))
