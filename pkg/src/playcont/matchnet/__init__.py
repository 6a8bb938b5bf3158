"""Playlist-song match classifier: network, training, ranking and model files."""
from .estimator import MatchNetRecommender, split_validation_pairs
from .io import load, save
from .network import (
    INFERENCE,
    TRAIN,
    MatchNet,
    MatchNetConfig,
    PairBatch,
    backward,
    bce,
    forward,
    forward_batch,
    init,
    loss,
    make_batch,
    parameter_shapes,
    transform_songs,
)
from .training import PairEncoder, TrainingDiverged, TrainReport, mean_cost, rank_candidates, train

__all__ = [
    "INFERENCE",
    "TRAIN",
    "MatchNet",
    "MatchNetConfig",
    "MatchNetRecommender",
    "PairBatch",
    "PairEncoder",
    "TrainReport",
    "TrainingDiverged",
    "backward",
    "bce",
    "forward",
    "forward_batch",
    "init",
    "load",
    "loss",
    "make_batch",
    "mean_cost",
    "parameter_shapes",
    "rank_candidates",
    "save",
    "split_validation_pairs",
    "train",
    "transform_songs",
]
