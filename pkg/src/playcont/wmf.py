"""Collaborative-filtering and random baselines.

Weighted matrix factorization for binary playlist-song data: every observed
cell gets confidence ``alpha``, every unobserved cell confidence 1, and the
factors minimize

    sum_{u,s} c_us (r_us - x_u . y_s)^2 + lambda (sum ||x_u||^2 + sum ||y_s||^2)

by alternating exact least-squares solves over playlist and song rows.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import _container
from ._container import ModelFormatError
from ._validation import derive_seed
from .dataset import Playlist

_log = logging.getLogger(__name__)

MAGIC = b"PWMF"


@dataclass
class WmfConfig:
    factors: int = 64
    alpha: float = 40.0
    regularization: float = 0.1
    sweeps: int = 15
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.factors, bool) or int(self.factors) != self.factors or self.factors < 1:
            raise ValueError(f"factors must be a positive integer, got {self.factors!r}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")
        if not self.regularization >= 0:
            raise ValueError(f"regularization must be non-negative, got {self.regularization!r}")
        if int(self.sweeps) != self.sweeps or self.sweeps < 0:
            raise ValueError("sweeps must be a non-negative integer")
        self.factors = int(self.factors)
        self.sweeps = int(self.sweeps)


@dataclass
class InteractionMatrix:
    matrix: sp.csr_matrix
    playlist_ids: list[str]
    song_ids: list[str]

    @property
    def playlist_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.playlist_ids)}

    @property
    def song_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.song_ids)}


@dataclass
class WmfModel:
    playlist_factors: np.ndarray
    song_factors: np.ndarray
    playlist_index: dict[str, int]
    song_index: dict[str, int]
    config: WmfConfig
    objective_trace: list[float] = field(default_factory=list)


def build_interaction_matrix(train_playlists: Iterable[Playlist]) -> InteractionMatrix:
    """Binary playlist x song matrix; columns are the songs of the training playlists, sorted."""
    playlists = list(train_playlists)
    if not playlists:
        raise ValueError("no training playlists")
    song_ids = sorted({s for p in playlists for s in p.songs})
    col = {s: j for j, s in enumerate(song_ids)}
    indptr = [0]
    indices: list[int] = []
    for p in playlists:
        indices.extend(sorted(col[s] for s in p.songs))
        indptr.append(len(indices))
    data = np.ones(len(indices))
    mat = sp.csr_matrix((data, np.array(indices, dtype=np.int64), np.array(indptr)),
                        shape=(len(playlists), len(song_ids)))
    return InteractionMatrix(mat, [p.id for p in playlists], song_ids)


def objective(R: sp.spmatrix, U: np.ndarray, V: np.ndarray, alpha: float, reg: float) -> float:
    """Weighted regularized squared error without forming the dense product."""
    R = sp.csr_matrix(R)
    rows, cols = R.nonzero()
    x_obs = np.einsum("ij,ij->i", U[rows], V[cols])
    dense_sq = float(np.sum((U.T @ U) * (V.T @ V)))
    observed = float(np.sum(alpha * (1.0 - x_obs) ** 2 - x_obs ** 2))
    return dense_sq + observed + reg * (float(np.sum(U * U)) + float(np.sum(V * V)))


def _solve_rows(R: sp.csr_matrix, other: np.ndarray, alpha: float, reg: float) -> np.ndarray:
    """Exact minimizer for every row of ``R`` given the factors of the other side."""
    k = other.shape[1]
    gram = other.T @ other
    reg_eye = reg * np.eye(k)
    out = np.empty((R.shape[0], k))
    for i in range(R.shape[0]):
        cols = R.indices[R.indptr[i]:R.indptr[i + 1]]
        Vo = other[cols]
        A = gram + (alpha - 1.0) * (Vo.T @ Vo) + reg_eye
        b = alpha * Vo.sum(axis=0)
        try:
            out[i] = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                "singular normal equations in ALS; use a positive regularization weight"
            ) from None
    if not np.all(np.isfinite(out)):
        raise np.linalg.LinAlgError("non-finite ALS solution; use a positive regularization weight")
    return out


def initial_factors(shape: tuple[int, int], config: WmfConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 0x574D46]))
    n_rows, n_cols = shape
    U = rng.normal(0.0, 0.01, size=(n_rows, config.factors))
    V = rng.normal(0.0, 0.01, size=(n_cols, config.factors))
    return U, V


def als_fit(
    matrix: InteractionMatrix | sp.spmatrix,
    config: WmfConfig,
    initial: tuple[np.ndarray, np.ndarray] | None = None,
    track_objective: bool = True,
) -> WmfModel:
    """Alternating least squares; playlists are solved first in every sweep.

    ``objective_trace`` holds the objective at initialization and after every
    half-sweep when ``track_objective`` is set.
    """
    if isinstance(matrix, InteractionMatrix):
        R = matrix.matrix
        playlist_ids, song_ids = matrix.playlist_ids, matrix.song_ids
    else:
        R = matrix
        playlist_ids = [str(i) for i in range(R.shape[0])]
        song_ids = [str(j) for j in range(R.shape[1])]
    R = sp.csr_matrix(R, dtype=np.float64)
    if R.shape[0] == 0 or R.shape[1] == 0:
        raise ValueError("interaction matrix is empty")
    Rt = sp.csr_matrix(R.T)
    U, V = initial if initial is not None else initial_factors(R.shape, config)
    U, V = np.array(U, dtype=np.float64), np.array(V, dtype=np.float64)
    alpha, reg = float(config.alpha), float(config.regularization)
    trace = [objective(R, U, V, alpha, reg)] if track_objective else []
    for sweep in range(config.sweeps):
        U = _solve_rows(R, V, alpha, reg)
        if track_objective:
            trace.append(objective(R, U, V, alpha, reg))
        V = _solve_rows(Rt, U, alpha, reg)
        if track_objective:
            trace.append(objective(R, U, V, alpha, reg))
            _log.debug("sweep %d: objective %.6g", sweep + 1, trace[-1])
    return WmfModel(
        U, V,
        {p: i for i, p in enumerate(playlist_ids)},
        {s: j for j, s in enumerate(song_ids)},
        config, trace,
    )


def _order(ids: Sequence[str], scores: np.ndarray) -> list[tuple[str, float]]:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order]


def wmf_rank(model: WmfModel, playlist_id: str, candidates: Iterable[str]) -> list[tuple[str, float]]:
    """Rank by inner product; candidates without a column follow, by id, scored NaN."""
    if playlist_id not in model.playlist_index:
        raise KeyError(
            f"playlist {playlist_id!r} has no factors; WMF only extends training playlists"
        )
    candidates = list(candidates)
    known = [c for c in candidates if c in model.song_index]
    unknown = sorted(c for c in candidates if c not in model.song_index)
    u = model.playlist_factors[model.playlist_index[playlist_id]]
    scores = model.song_factors[[model.song_index[c] for c in known]] @ u if known else np.zeros(0)
    return _order(known, scores) + [(c, math.nan) for c in unknown]


def random_rank(candidates: Iterable[str], rng_seed: int = 0) -> list[tuple[str, float]]:
    """I.i.d. uniform scores, descending."""
    candidates = list(candidates)
    scores = np.random.default_rng(rng_seed).random(len(candidates))
    return _order(candidates, scores)


# -- model files ---------------------------------------------------------------


def save_model(model: WmfModel, path, meta: dict | None = None) -> None:
    cfg = model.config
    header = {
        "k": cfg.factors,
        "alpha": repr(float(cfg.alpha)),
        "lambda": repr(float(cfg.regularization)),
        "sweeps": cfg.sweeps,
        "seed": cfg.rng_seed,
    }
    for key, value in (meta or {}).items():
        header[f"meta.{key}"] = str(value)
    playlists = sorted(model.playlist_index, key=model.playlist_index.get)
    songs = sorted(model.song_index, key=model.song_index.get)
    blocks = [
        ("playlists", "\n".join(playlists)),
        ("songs", "\n".join(songs)),
        ("playlist_factors", model.playlist_factors),
        ("song_factors", model.song_factors),
    ]
    Path(path).write_bytes(_container.dump(MAGIC, header, blocks))


def load_model(path) -> WmfModel:
    header, blocks = _container.load(Path(path).read_bytes(), MAGIC)
    try:
        config = WmfConfig(
            factors=int(header["k"]),
            alpha=float(header["alpha"]),
            regularization=float(header["lambda"]),
            sweeps=int(header["sweeps"]),
            rng_seed=int(header["seed"]),
        )
        playlists = blocks["playlists"].split("\n") if blocks["playlists"] else []
        songs = blocks["songs"].split("\n") if blocks["songs"] else []
        U, V = blocks["playlist_factors"], blocks["song_factors"]
    except KeyError as exc:
        raise ModelFormatError(f"model file is missing {exc.args[0]!r}") from None
    if U.shape != (len(playlists), config.factors) or V.shape != (len(songs), config.factors):
        raise _container.ShapeError("factor matrices do not match the index maps")
    return WmfModel(U, V, {p: i for i, p in enumerate(playlists)},
                    {s: j for j, s in enumerate(songs)}, config)


# -- estimators ----------------------------------------------------------------


class WMFRecommender(BaseEstimator):
    """Weighted matrix factorization baseline (weak generalization only)."""

    supported_modes = ("weak",)

    def __init__(self, factors=64, alpha=40.0, regularization=0.1, sweeps=15, random_state=0):
        self.factors = factors
        self.alpha = alpha
        self.regularization = regularization
        self.sweeps = sweeps
        self.random_state = random_state

    def fit(self, playlists: Sequence[Playlist], features=None):
        config = WmfConfig(self.factors, self.alpha, self.regularization, self.sweeps,
                           int(self.random_state))
        self.model_ = als_fit(build_interaction_matrix(playlists), config, track_objective=False)
        return self

    def rank(self, playlist: Playlist, candidates: Iterable[str]) -> list[tuple[str, float]]:
        if not hasattr(self, "model_"):
            raise NotFittedError("WMFRecommender is not fitted yet")
        return wmf_rank(self.model_, playlist.id, candidates)

    def save(self, path, meta: dict | None = None) -> None:
        save_model(self.model_, path, meta)

    @classmethod
    def from_file(cls, path) -> "WMFRecommender":
        model = load_model(path)
        c = model.config
        est = cls(c.factors, c.alpha, c.regularization, c.sweeps, c.rng_seed)
        est.model_ = model
        return est


class RandomRecommender(BaseEstimator):
    """Scores every candidate with an independent uniform draw."""

    supported_modes = ("weak", "strong")

    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit(self, playlists=None, features=None):
        return self

    def rank(self, playlist: Playlist, candidates: Iterable[str]) -> list[tuple[str, float]]:
        seed = int(derive_seed(int(self.random_state), "random", playlist.id).integers(2**63))
        return random_rank(candidates, seed)
