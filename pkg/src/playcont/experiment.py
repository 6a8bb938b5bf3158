"""Model selection helpers and the synthetic end-to-end experiment."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

from .dataset import FeatureTable, SplitBundle, generate_synthetic, split_strong, split_weak
from .evaluation import EvalReport, run_experiment
from .matchnet import MatchNetRecommender
from .wmf import RandomRecommender, WMFRecommender

_log = logging.getLogger(__name__)


@dataclass
class GridResult:
    params: dict
    score: float
    estimator: object = field(repr=False, default=None)


def grid_search_matchnet(
    playlists,
    features: FeatureTable,
    grid: dict[str, Sequence],
    base: dict | None = None,
    universe=None,
) -> tuple[MatchNetRecommender, list[GridResult]]:
    """Fit every grid point and keep the one with the lowest validation cost."""
    log = []
    best = None
    for params in _grid_points(grid):
        est = MatchNetRecommender(**{**(base or {}), **params}).fit(playlists, features, universe)
        entry = GridResult(params, est.validation_cost_, est)
        log.append(entry)
        _log.info("matchnet %s: validation cost %.6f", params, entry.score)
        if best is None or entry.score < best.score:
            best = entry
    for entry in log:
        if entry is not best:
            entry.estimator = None
    return best.estimator, log


def grid_search_wmf(
    playlists,
    universe: Sequence[str],
    grid: dict[str, Sequence],
    base: dict | None = None,
    validation_fraction: float = 0.2,
    rng_seed: int = 0,
) -> tuple[WMFRecommender, list[GridResult]]:
    """Select WMF hyperparameters by MAP on continuations withheld from the training playlists.

    The winner is refit on the complete training playlists.
    """
    val_bundle = split_weak(playlists, validation_fraction, rng_seed, universe=universe)
    log = []
    best = None
    for params in _grid_points(grid):
        est = WMFRecommender(**{**(base or {}), **params}).fit(val_bundle.train_playlists)
        score = run_experiment(val_bundle, est).map
        log.append(GridResult(params, score))
        _log.info("wmf %s: validation MAP %.6f", params, score)
        if best is None or score > best.score:
            best = log[-1]
    winner = WMFRecommender(**{**(base or {}), **best.params}).fit(playlists)
    return winner, log


def _grid_points(grid: dict[str, Sequence]):
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, values))


# -- synthetic end-to-end ------------------------------------------------------

SYNTHETIC_DEFAULTS = dict(
    n_clusters=5,
    songs_per_cluster=200,
    n_playlists=400,
    playlist_len=15,
    dim=32,
    noise_sd=0.3,
    cross_cluster_prob=0.05,
    taste_sharpness=40.0,
)

MATCHNET_DEFAULTS = dict(
    hidden_dim=64,
    g_hidden=64,
    dropout_rate=0.1,
    max_epochs=40,
    patience=8,
    resample_negatives=True,
)

WMF_GRID = {"alpha": (1.0, 10.0, 40.0, 100.0), "regularization": (0.01, 0.1, 1.0)}


@dataclass
class SyntheticResults:
    weak: dict[str, EvalReport]
    strong: dict[str, EvalReport]
    bundles: dict[str, SplitBundle]
    features: FeatureTable


def run_synthetic_experiment(
    seed: int = 0,
    synthetic: dict | None = None,
    matchnet: dict | None = None,
    wmf_grid: dict | None = None,
    wmf_factors: int = 8,
) -> SyntheticResults:
    """Generate data, split both ways, fit every model and evaluate.

    Returns weak-setting reports for ``matchnet``, ``wmf`` and ``random`` and
    strong-setting reports for ``matchnet`` and ``random``.
    """
    playlists, features = generate_synthetic(**{**SYNTHETIC_DEFAULTS, **(synthetic or {})}, rng_seed=seed)
    weak = split_weak(playlists, 0.2, seed, universe=features.ids)
    strong = split_strong(playlists, 0.2, 0.2, seed, universe=features.ids)
    mn_params = {**MATCHNET_DEFAULTS, **(matchnet or {}), "random_state": seed}

    weak_reports = {}
    mn = MatchNetRecommender(**mn_params).fit(weak.train_playlists, features, weak.universe)
    weak_reports["matchnet"] = run_experiment(weak, mn)
    cf, _ = grid_search_wmf(weak.train_playlists, weak.universe, wmf_grid or WMF_GRID,
                            base={"factors": wmf_factors, "random_state": seed}, rng_seed=seed)
    weak_reports["wmf"] = run_experiment(weak, cf)
    weak_reports["random"] = run_experiment(weak, RandomRecommender(seed))

    strong_reports = {}
    mn_strong = MatchNetRecommender(**mn_params).fit(strong.train_playlists, features, strong.universe)
    strong_reports["matchnet"] = run_experiment(strong, mn_strong)
    strong_reports["random"] = run_experiment(strong, RandomRecommender(seed))
    return SyntheticResults(weak_reports, strong_reports, {"weak": weak, "strong": strong}, features)
