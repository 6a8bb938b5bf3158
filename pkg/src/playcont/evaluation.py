"""Offline continuation experiment: ranks, average precision, recall@K and frequency buckets."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .dataset import Playlist, SplitBundle

DEFAULT_CUTOFFS = (10, 30, 100)


class UnsupportedModeError(ValueError):
    pass


class Scorer(Protocol):
    supported_modes: tuple[str, ...]

    def rank(self, playlist: Playlist, candidates: Iterable[str]) -> list[tuple[str, float]]: ...


@dataclass(frozen=True)
class Bucket:
    label: str
    low: int
    high: float

    def __contains__(self, freq: int) -> bool:
        return self.low <= freq <= self.high


DEFAULT_BUCKETS = (
    Bucket("0", 0, 0),
    Bucket("1", 1, 1),
    Bucket("2", 2, 2),
    Bucket("3-4", 3, 4),
    Bucket(">=5", 5, math.inf),
)


def parse_buckets(spec: str) -> tuple[Bucket, ...]:
    """Parse ``"0,1,2,3-4,5+"`` into contiguous buckets covering every frequency."""
    buckets = []
    for item in spec.split(","):
        item = item.strip()
        if item.endswith("+"):
            low = int(item[:-1])
            buckets.append(Bucket(f">={low}", low, math.inf))
        elif "-" in item:
            lo, hi = (int(x) for x in item.split("-"))
            buckets.append(Bucket(f"{lo}-{hi}", lo, hi))
        else:
            buckets.append(Bucket(item, int(item), int(item)))
    expected = 0
    for b in buckets:
        if b.low != expected or b.high < b.low:
            raise ValueError(f"buckets must be contiguous from 0, got {spec!r}")
        expected = b.high + 1
    if buckets[-1].high != math.inf:
        raise ValueError("the last bucket must be open-ended, e.g. '5+'")
    return tuple(buckets)


@dataclass
class ContinuationResult:
    playlist_id: str
    ranks: dict[str, int]
    average_precision: float
    recall_at: dict[int, float]
    candidate_count: int


@dataclass
class BucketRow:
    label: str
    n: int
    median_rank: float
    recall_at_100: float


@dataclass
class EvalReport:
    median_rank: float
    map: float
    mean_recall_at: dict[int, float]
    n_playlists: int
    n_withheld_songs: int
    bucket_table: list[BucketRow]
    results: list[ContinuationResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def evaluate_continuation(
    ranked: Sequence,
    withheld: Iterable[str],
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    playlist_id: str = "",
) -> ContinuationResult:
    """Score one ranked candidate list against the withheld continuation.

    ``ranked`` holds song ids, or ``(song, score)`` pairs, best first.
    """
    ids = [r[0] if isinstance(r, tuple) else r for r in ranked]
    position = {}
    for i, s in enumerate(ids, start=1):
        if s in position:
            raise ValueError(f"song {s!r} appears twice in the ranked list")
        position[s] = i
    withheld = sorted(set(withheld))
    if not withheld:
        raise ValueError("withheld continuation is empty")
    ranks = {}
    for s in withheld:
        if s not in position:
            raise ValueError(f"withheld song {s!r} is not among the candidates")
        ranks[s] = position[s]
    hit_positions = sorted(ranks.values())
    ap = sum((j + 1) / pos for j, pos in enumerate(hit_positions)) / len(withheld)
    recall = {int(k): sum(pos <= k for pos in hit_positions) / len(withheld) for k in cutoffs}
    return ContinuationResult(playlist_id, ranks, ap, recall, len(ids))


def median(values: Sequence[float]) -> float:
    """Median; the mean of the two central values for an even count, NaN when empty."""
    if len(values) == 0:
        return math.nan
    return float(np.median(np.asarray(values, dtype=np.float64)))


def bucket_breakdown(
    results: Sequence[ContinuationResult],
    training_frequency: Mapping[str, int],
    buckets: Sequence[Bucket] = DEFAULT_BUCKETS,
) -> list[BucketRow]:
    """Median rank and per-song recall@100 of withheld songs grouped by training frequency."""
    grouped: dict[str, list[int]] = {b.label: [] for b in buckets}
    for res in results:
        for song, rank in res.ranks.items():
            freq = int(training_frequency.get(song, 0))
            for b in buckets:
                if freq in b:
                    grouped[b.label].append(rank)
                    break
            else:
                raise ValueError(f"frequency {freq} is not covered by any bucket")
    rows = []
    for b in buckets:
        ranks = grouped[b.label]
        recall = float(np.mean([r <= 100 for r in ranks])) if ranks else math.nan
        rows.append(BucketRow(b.label, len(ranks), median(ranks), recall))
    return rows


def aggregate(
    results: Sequence[ContinuationResult],
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
) -> tuple[float, float, dict[int, float]]:
    """Pooled median rank, MAP and mean recall@K over per-playlist results."""
    results = sorted(results, key=lambda r: r.playlist_id)
    pooled = [rank for r in results for rank in r.ranks.values()]
    mean_ap = float(np.mean([r.average_precision for r in results])) if results else math.nan
    recalls = {int(k): float(np.mean([r.recall_at[int(k)] for r in results])) if results else math.nan
               for k in cutoffs}
    return median(pooled), mean_ap, recalls


def candidates_for(bundle: SplitBundle, query: Playlist) -> list[str]:
    retained = query.song_set
    return [s for s in bundle.universe if s not in retained]


def run_experiment(
    bundle: SplitBundle,
    scorer: Scorer,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    buckets: Sequence[Bucket] = DEFAULT_BUCKETS,
    config: dict | None = None,
) -> EvalReport:
    """Rank every query playlist's candidates and evaluate against its continuation.

    Candidates are the universe minus the playlist's retained songs; songs
    withheld from other playlists stay in the pool.
    """
    modes = getattr(scorer, "supported_modes", ("weak", "strong"))
    if bundle.mode not in modes:
        raise UnsupportedModeError(
            f"{type(scorer).__name__} cannot operate in the {bundle.mode} generalization setting"
        )
    cutoffs = tuple(int(k) for k in cutoffs)
    results = []
    for q in bundle.query_playlists:
        ranked = scorer.rank(q, candidates_for(bundle, q))
        results.append(
            evaluate_continuation(ranked, bundle.continuations[q.id].songs, cutoffs, q.id)
        )
    results.sort(key=lambda r: r.playlist_id)
    med, mean_ap, recalls = aggregate(results, cutoffs)
    table = bucket_breakdown(results, bundle.training_frequency(), buckets)
    return EvalReport(
        median_rank=med,
        map=mean_ap,
        mean_recall_at=recalls,
        n_playlists=len(results),
        n_withheld_songs=sum(len(r.ranks) for r in results),
        bucket_table=table,
        results=results,
        config=dict(config or {}),
    )


# -- report files --------------------------------------------------------------


def _g6(x: float):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return float(f"{x:.6g}")


def _fmt(x: float) -> str:
    return "nan" if x is None or math.isnan(x) else f"{x:.6g}"


def _aggregate_record(report: EvalReport) -> dict:
    return {
        "type": "aggregate",
        "median_rank": _g6(report.median_rank),
        "map": _g6(report.map),
        "mean_recall_at": {str(k): _g6(v) for k, v in sorted(report.mean_recall_at.items())},
        "n_playlists": report.n_playlists,
        "n_withheld_songs": report.n_withheld_songs,
        "buckets": [
            {"label": b.label, "n": b.n, "median_rank": _g6(b.median_rank),
             "recall_at_100": _g6(b.recall_at_100)}
            for b in report.bucket_table
        ],
        "config": report.config,
    }


def _result_record(res: ContinuationResult) -> dict:
    return {
        "type": "playlist",
        "playlist_id": res.playlist_id,
        "candidate_count": res.candidate_count,
        "average_precision": _g6(res.average_precision),
        "recall_at": {str(k): _g6(v) for k, v in sorted(res.recall_at.items())},
        "ranks": dict(sorted(res.ranks.items())),
    }


def write_report(report: EvalReport, path, format: str = "json-lines") -> None:
    """Write the report as JSON lines (aggregate first) or as per-playlist CSV.

    CSV columns: ``playlist_id, candidate_count, n_withheld,
    average_precision, recall@K..., ranks`` where ``ranks`` is
    ``song=rank`` entries joined by ``;``.
    """
    if format == "json-lines":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(_aggregate_record(report), sort_keys=False) + "\n")
            for res in report.results:
                fh.write(json.dumps(_result_record(res)) + "\n")
    elif format == "csv":
        cutoffs = sorted(report.mean_recall_at)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["playlist_id", "candidate_count", "n_withheld", "average_precision",
                        *[f"recall@{k}" for k in cutoffs], "ranks"])
            for r in report.results:
                w.writerow([r.playlist_id, r.candidate_count, len(r.ranks), _fmt(r.average_precision),
                            *[_fmt(r.recall_at[k]) for k in cutoffs],
                            ";".join(f"{s}={k}" for s, k in sorted(r.ranks.items()))])
    else:
        raise ValueError(f"unknown report format {format!r}")


def write_bucket_table(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "n", "median_rank", "recall@100"])
        for b in report.bucket_table:
            w.writerow([b.label, b.n, _fmt(b.median_rank), _fmt(b.recall_at_100)])


def _nan(x):
    return math.nan if x is None else float(x)


def read_report(path) -> EvalReport:
    """Parse a JSON-lines report written by :func:`write_report`."""
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("type") != "aggregate":
        raise ValueError("report must start with an aggregate record")
    agg = records[0]
    results = [
        ContinuationResult(
            r["playlist_id"],
            {s: int(k) for s, k in r["ranks"].items()},
            _nan(r["average_precision"]),
            {int(k): _nan(v) for k, v in r["recall_at"].items()},
            int(r["candidate_count"]),
        )
        for r in records[1:]
    ]
    return EvalReport(
        median_rank=_nan(agg["median_rank"]),
        map=_nan(agg["map"]),
        mean_recall_at={int(k): _nan(v) for k, v in agg["mean_recall_at"].items()},
        n_playlists=int(agg["n_playlists"]),
        n_withheld_songs=int(agg["n_withheld_songs"]),
        bucket_table=[BucketRow(b["label"], int(b["n"]), _nan(b["median_rank"]), _nan(b["recall_at_100"]))
                      for b in agg["buckets"]],
        results=results,
        config=agg.get("config", {}),
    )
