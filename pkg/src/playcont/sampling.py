"""Balanced match / mismatch playlist-song pairs for training the match classifier.

Every song ``s`` of a playlist ``p`` yields the match ``(p minus s, s, 1)``
and one mismatch ``(p minus s, s_neg, 0)`` where ``s_neg`` is drawn
uniformly from the songs of the universe that are not in ``p``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import derive_seed
from .dataset import Playlist


@dataclass(frozen=True)
class LabeledPair:
    playlist_songs: tuple[str, ...]
    candidate: str
    label: int
    source: str | None = None


class _ComplementSampler:
    """Uniform draws from ``universe`` minus a small excluded set."""

    def __init__(self, universe: Sequence[str]):
        self.universe = list(universe)
        self.position = {s: i for i, s in enumerate(self.universe)}
        if len(self.position) != len(self.universe):
            raise ValueError("universe contains duplicate songs")

    def complement(self, excluded: Iterable[str]) -> list[str]:
        excluded = set(excluded)
        return [s for s in self.universe if s not in excluded]

    def draw(self, excluded: set[str], size: int, rng: np.random.Generator) -> list[str]:
        n = len(self.universe)
        n_excl = sum(1 for s in excluded if s in self.position)
        if n_excl >= n:
            raise ValueError("no mismatch candidates: playlist covers the whole universe")
        if n_excl <= n // 2:
            # rejection sampling is exactly uniform over the complement
            out = []
            while len(out) < size:
                for i in rng.integers(n, size=size - len(out)):
                    s = self.universe[i]
                    if s not in excluded:
                        out.append(s)
            return out
        pool = self.complement(excluded)
        return [pool[i] for i in rng.integers(len(pool), size=size)]


def derive_pairs(
    playlists: Iterable[Playlist],
    universe: Sequence[str],
    rng_seed: int = 0,
    features: Mapping | None = None,
) -> list[LabeledPair]:
    """Derive one match and one mismatch per playlist song.

    Output order is playlist by playlist, song by song, match before its
    mismatch. Each playlist draws from its own substream keyed by its id, so
    the result does not depend on the order of ``playlists``. Mismatches are
    drawn with replacement across songs. With ``features`` given, any pair
    touching a song without a feature vector raises ``KeyError``.
    """
    sampler = _ComplementSampler(universe)
    if features is not None:
        for s in sampler.universe:
            if s not in features:
                raise KeyError(f"song {s!r} has no feature vector")
    pairs: list[LabeledPair] = []
    for p in playlists:
        members = p.song_set
        outside = members - sampler.position.keys()
        if outside:
            raise ValueError(f"playlist {p.id!r} has songs outside the universe: {sorted(outside)[:3]}")
        rng = derive_seed(rng_seed, "pairs", p.id)
        negatives = sampler.draw(members, len(p), rng)
        for s, neg in zip(p.songs, negatives):
            shortened = tuple(x for x in p.songs if x != s)
            pairs.append(LabeledPair(shortened, s, 1, p.id))
            pairs.append(LabeledPair(shortened, neg, 0, p.id))
    return pairs


def resample_mismatches(
    pairs: Sequence[LabeledPair],
    universe: Sequence[str],
    source_playlists: Iterable[Playlist],
    rng_seed: int = 0,
) -> list[LabeledPair]:
    """Redraw every mismatch candidate; matches are returned untouched."""
    sampler = _ComplementSampler(universe)
    sources = {p.id: p.song_set for p in source_playlists}
    by_source: dict[str | None, list[int]] = {}
    for i, pair in enumerate(pairs):
        if pair.label == 0:
            by_source.setdefault(pair.source, []).append(i)
    out = list(pairs)
    for src, idx in by_source.items():
        if src not in sources:
            raise ValueError(f"mismatch pair has unknown source playlist {src!r}")
        rng = derive_seed(rng_seed, "resample", src)
        draws = sampler.draw(sources[src], len(idx), rng)
        for i, neg in zip(idx, draws):
            old = pairs[i]
            out[i] = LabeledPair(old.playlist_songs, neg, 0, old.source)
    return out


def write_pairs(pairs: Iterable[LabeledPair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(f"{pair.label}\t{pair.candidate}\t{','.join(pair.playlist_songs)}\n")


def read_pairs(path) -> list[LabeledPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"line {lineno}: malformed pair record")
            songs = tuple(parts[2].split(",")) if parts[2] else ()
            pairs.append(LabeledPair(songs, parts[1], int(parts[0])))
    return pairs
