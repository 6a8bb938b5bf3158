from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..dataset import FeatureTable, Playlist
from ..sampling import LabeledPair, derive_pairs, resample_mismatches
from . import io
from .network import INFERENCE, MatchNetConfig, forward_batch, init, make_batch, transform_songs
from .training import PairEncoder, rank_candidates, train


def split_validation_pairs(pairs: Sequence[LabeledPair], fraction: float, rng_seed: int):
    """Random pair-level validation split; returns ``(train, validation)``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation_fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x76616C]))
    n_val = max(1, int(round(fraction * len(pairs))))
    if n_val >= len(pairs):
        raise ValueError("too few pairs for a validation split")
    val_idx = set(rng.choice(len(pairs), size=n_val, replace=False).tolist())
    train_pairs = [p for i, p in enumerate(pairs) if i not in val_idx]
    val_pairs = [p for i, p in enumerate(pairs) if i in val_idx]
    return train_pairs, val_pairs


class MatchNetRecommender(BaseEstimator):
    """Hybrid playlist continuation model with a scikit-learn style interface.

    ``fit`` derives balanced match/mismatch pairs from the training
    playlists, carves a pair-level validation set and trains the network,
    keeping the epoch with the lowest validation cost. Any playlist and any
    song with a feature vector can be scored afterwards.

    Parameters
    ----------
    hidden_dim, f_blocks, g_hidden, dropout_rate : network architecture.
    learning_rate, batch_size, max_epochs, patience : training controls.
    validation_fraction : share of derived pairs used for model selection.
    resample_negatives : redraw mismatches at every epoch.
    random_state : master seed; pair derivation, validation split,
        initialization and training each get a derived seed.
    """

    supported_modes = ("weak", "strong")

    def __init__(
        self,
        hidden_dim=128,
        f_blocks=2,
        g_hidden=128,
        dropout_rate=0.5,
        learning_rate=1e-3,
        batch_size=64,
        max_epochs=50,
        patience=5,
        validation_fraction=0.1,
        resample_negatives=False,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.f_blocks = f_blocks
        self.g_hidden = g_hidden
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.resample_negatives = resample_negatives
        self.random_state = random_state

    def _config(self, input_dim: int) -> MatchNetConfig:
        return MatchNetConfig(
            input_dim=input_dim,
            hidden_dim=self.hidden_dim,
            f_blocks=self.f_blocks,
            g_hidden=self.g_hidden,
            dropout_rate=self.dropout_rate,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
        )

    def fit(self, playlists: Sequence[Playlist], features: FeatureTable, universe: Iterable[str] | None = None):
        playlists = list(playlists)
        if not playlists:
            raise ValueError("no training playlists")
        self.universe_ = tuple(universe) if universe is not None else features.ids
        seed = int(self.random_state)
        config = self._config(features.dim)
        pairs = derive_pairs(playlists, self.universe_, rng_seed=seed, features=features)
        pairs = [p for p in pairs if p.playlist_songs]
        train_pairs, val_pairs = split_validation_pairs(pairs, self.validation_fraction, seed + 1)
        refresh = None
        if self.resample_negatives:
            def refresh(epoch):
                return resample_mismatches(train_pairs, self.universe_, playlists, rng_seed=seed * 1000 + epoch)
        self.net_ = init(config, rng_seed=seed + 2)
        self.report_ = train(self.net_, train_pairs, val_pairs, features, config, rng_seed=seed + 3,
                             refresh_pairs=refresh)
        self.features_ = features
        self._embeddings = None
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("MatchNetRecommender is not fitted yet")

    @property
    def validation_cost_(self) -> float:
        self._check_fitted()
        return self.report_.best_val_cost

    def predict_proba(self, pairs: Sequence[LabeledPair] | Sequence[tuple], features: FeatureTable | None = None):
        """Match probability for each ``(playlist_songs, candidate)`` pair."""
        self._check_fitted()
        features = features or self.features_
        pairs = [p if isinstance(p, LabeledPair) else LabeledPair(tuple(p[0]), p[1], 0) for p in pairs]
        enc = PairEncoder(pairs, features)
        self.net_.set_mode(INFERENCE)
        out = []
        for start in range(0, len(enc), 1024):
            which = np.arange(start, min(start + 1024, len(enc)))
            b = enc.batch(which)
            mats = np.split(b.playlist_rows, b.offsets[1:-1])
            _, probs = forward_batch(self.net_, make_batch(mats, b.songs))
            out.append(probs)
        return np.concatenate(out)

    def song_embeddings(self) -> np.ndarray:
        """``f`` applied to every song of the training feature table (cached)."""
        self._check_fitted()
        if self._embeddings is None:
            self._embeddings = transform_songs(self.net_.set_mode(INFERENCE), self.features_.matrix)
        return self._embeddings

    def rank(self, playlist: Playlist, candidates: Iterable[str]) -> list[tuple[str, float]]:
        self._check_fitted()
        return rank_candidates(self.net_, playlist.songs, candidates, self.features_,
                               song_embeddings=self.song_embeddings())

    def save(self, path, meta: dict | None = None) -> None:
        self._check_fitted()
        io.save(self.net_, path, meta)

    @classmethod
    def from_file(cls, path, features: FeatureTable) -> "MatchNetRecommender":
        net = io.load(path, expected_input_dim=features.dim)
        cfg = net.config
        est = cls(hidden_dim=cfg.hidden_dim, f_blocks=cfg.f_blocks, g_hidden=cfg.g_hidden,
                  dropout_rate=cfg.dropout_rate, learning_rate=cfg.learning_rate,
                  batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, patience=cfg.patience)
        est.net_ = net
        est.features_ = features
        est.universe_ = features.ids
        est._embeddings = None
        return est
