"""Playlist collections and song feature tables.

Loading, validation, the filtering rules used to discard artist-themed and
short playlists, weak/strong generalization splits, and a synthetic
clustered generator used for desk-scale experiments.

File formats
------------
Playlist file (UTF-8), one playlist per line::

    <playlist_id>\\t<song_id>:<artist_id>,<song_id>:<artist_id>,...

Feature file (UTF-8), a ``D=<int>`` header followed by one song per line::

    <song_id>\\t<v1> <v2> ... <vD>
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import (
    check_fraction,
    check_positive_int,
    check_song_id,
    derive_seed,
)

_log = logging.getLogger(__name__)

WEAK = "weak"
STRONG = "strong"


class FormatError(ValueError):
    """Raised for malformed playlist, feature or bundle files."""


@dataclass(frozen=True)
class Playlist:
    """A playlist viewed as a set of songs.

    ``songs`` keeps the input order only so iteration is reproducible;
    ``artists[i]`` is the artist of ``songs[i]``.
    """

    id: str
    songs: tuple[str, ...]
    artists: tuple[str, ...]

    def __post_init__(self):
        check_song_id(self.id, "playlist id")
        if len(self.songs) == 0:
            raise ValueError(f"playlist {self.id!r} is empty")
        if len(self.artists) != len(self.songs):
            raise ValueError(f"playlist {self.id!r}: every song needs an artist")
        if len(set(self.songs)) != len(self.songs):
            raise ValueError(f"playlist {self.id!r} has repeated songs")

    def __len__(self) -> int:
        return len(self.songs)

    def __contains__(self, song) -> bool:
        return song in self.song_set

    @property
    def song_set(self) -> frozenset[str]:
        return frozenset(self.songs)

    @property
    def artist_of(self) -> dict[str, str]:
        return dict(zip(self.songs, self.artists))

    def subset(self, keep: Iterable[str]) -> "Playlist":
        """Same playlist restricted to ``keep``, in the original order."""
        keep = set(keep)
        pairs = [(s, a) for s, a in zip(self.songs, self.artists) if s in keep]
        return Playlist(self.id, tuple(s for s, _ in pairs), tuple(a for _, a in pairs))


class FeatureTable:
    """Map from song id to a ``dim``-dimensional feature vector.

    Stored as one contiguous float64 matrix; ``ids[i]`` owns row ``i``.
    """

    def __init__(self, ids: Sequence[str], matrix):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError("feature matrix must have one row per song id")
        if matrix.shape[1] < 1:
            raise ValueError("feature dimension must be positive")
        if not np.all(np.isfinite(matrix)):
            bad = int(np.nonzero(~np.all(np.isfinite(matrix), axis=1))[0][0])
            raise ValueError(f"non-finite feature value for song {ids[bad]!r}")
        self.ids: tuple[str, ...] = tuple(ids)
        self.index: dict[str, int] = {}
        for i, sid in enumerate(self.ids):
            check_song_id(sid)
            if sid in self.index:
                raise ValueError(f"duplicate song id {sid!r} in feature table")
            self.index[sid] = i
        matrix.setflags(write=False)
        self.matrix = matrix

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, song) -> bool:
        return song in self.index

    def __getitem__(self, song: str) -> np.ndarray:
        return self.matrix[self.index[song]]

    def rows(self, songs: Iterable[str]) -> np.ndarray:
        """Stack the vectors of ``songs``; raises ``KeyError`` naming the first missing song."""
        idx = []
        for s in songs:
            try:
                idx.append(self.index[s])
            except KeyError:
                raise KeyError(f"song {s!r} has no feature vector") from None
        return self.matrix[idx]

    def __eq__(self, other):
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.matrix, other.matrix)

    def __repr__(self):
        return f"FeatureTable(n_songs={len(self)}, dim={self.dim})"


@dataclass
class SplitBundle:
    """Training playlists, query playlists and their withheld continuations."""

    mode: str
    train_playlists: list[Playlist]
    query_playlists: list[Playlist]
    continuations: dict[str, Playlist]
    universe: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (WEAK, STRONG):
            raise ValueError(f"mode must be 'weak' or 'strong', got {self.mode!r}")
        universe = set(self.universe)
        for q in self.query_playlists:
            cont = self.continuations.get(q.id)
            if cont is None:
                raise ValueError(f"query playlist {q.id!r} has no continuation")
            if q.song_set & cont.song_set:
                raise ValueError(f"continuation of {q.id!r} overlaps its retained songs")
        train_ids = [p.id for p in self.train_playlists]
        query_ids = [p.id for p in self.query_playlists]
        if self.mode == WEAK and train_ids != query_ids:
            raise ValueError("weak bundle must use the training playlists as queries")
        if self.mode == STRONG and set(train_ids) & set(query_ids):
            raise ValueError("strong bundle has playlists shared by train and query sets")
        for p in [*self.train_playlists, *self.query_playlists, *self.continuations.values()]:
            missing = p.song_set - universe
            if missing:
                raise ValueError(f"playlist {p.id!r} has songs outside the universe: {sorted(missing)[:3]}")

    def training_frequency(self) -> Counter:
        """Number of training playlists each song occurs in."""
        counts: Counter = Counter()
        for p in self.train_playlists:
            counts.update(p.songs)
        return counts


# -- playlist files ----------------------------------------------------------


def parse_playlists(lines: Iterable[str]) -> tuple[list[Playlist], int]:
    """Parse playlist-file lines; returns the playlists and the number of collapsed duplicates."""
    playlists: list[Playlist] = []
    seen_ids: set[str] = set()
    n_duplicates = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: expected 2 tab-separated fields, got {len(parts)}")
        pid, body = parts
        if not body:
            raise FormatError(f"line {lineno}: playlist {pid!r} is empty")
        if pid in seen_ids:
            raise FormatError(f"line {lineno}: duplicate playlist id {pid!r}")
        seen_ids.add(pid)
        songs: list[str] = []
        artists: list[str] = []
        present: set[str] = set()
        for item in body.split(","):
            bits = item.split(":")
            if len(bits) != 2 or not bits[0] or not bits[1]:
                raise FormatError(f"line {lineno}: malformed entry {item!r}, expected song:artist")
            song, artist = bits
            if song in present:
                n_duplicates += 1
                continue
            present.add(song)
            songs.append(song)
            artists.append(artist)
        try:
            playlists.append(Playlist(pid, tuple(songs), tuple(artists)))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    return playlists, n_duplicates


def load_playlists(path) -> list[Playlist]:
    with open(path, encoding="utf-8") as fh:
        playlists, n_dup = parse_playlists(fh)
    if n_dup:
        _log.warning("%s: collapsed %d duplicate song entries", path, n_dup)
    return playlists


def format_playlist(playlist: Playlist) -> str:
    body = ",".join(f"{s}:{a}" for s, a in zip(playlist.songs, playlist.artists))
    return f"{playlist.id}\t{body}\n"


def write_playlists(playlists: Iterable[Playlist], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in playlists:
            fh.write(format_playlist(p))


# -- feature files -----------------------------------------------------------


def parse_features(lines: Iterable[str]) -> FeatureTable:
    it = iter(enumerate(lines, start=1))
    try:
        _, header = next(it)
    except StopIteration:
        raise FormatError("feature file is empty") from None
    header = header.strip()
    if not header.startswith("D="):
        raise FormatError(f"line 1: expected 'D=<int>' header, got {header!r}")
    try:
        dim = int(header[2:])
    except ValueError:
        raise FormatError(f"line 1: bad dimension in header {header!r}") from None
    if dim < 1:
        raise FormatError("line 1: dimension must be positive")
    ids: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    for lineno, raw in it:
        line = raw.rstrip("\n").rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: expected 2 tab-separated fields")
        sid, body = parts
        if sid in seen:
            raise FormatError(f"line {lineno}: duplicate song id {sid!r}")
        seen.add(sid)
        try:
            values = [float(v) for v in body.split(" ")]
        except ValueError:
            raise FormatError(f"line {lineno}: unparsable value for song {sid!r}") from None
        if len(values) != dim:
            raise FormatError(
                f"line {lineno}: song {sid!r} has {len(values)} values, expected D={dim}"
            )
        if not all(math.isfinite(v) for v in values):
            raise FormatError(f"line {lineno}: non-finite value for song {sid!r}")
        ids.append(sid)
        rows.append(values)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    try:
        return FeatureTable(ids, matrix)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def load_features(path) -> FeatureTable:
    with open(path, encoding="utf-8") as fh:
        return parse_features(fh)


def write_features(table: FeatureTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"D={table.dim}\n")
        for sid, row in zip(table.ids, table.matrix):
            fh.write(sid + "\t" + " ".join(repr(float(v)) for v in row) + "\n")


# -- filtering ---------------------------------------------------------------


@dataclass
class FilterStats:
    n_input: int = 0
    rejected_artists: int = 0
    rejected_short: int = 0
    dropped_songs: int = 0
    rejected_final: int = 0
    n_output: int = 0


def filter_collection(
    playlists: Iterable[Playlist],
    features: FeatureTable | Mapping,
    min_artists: int = 7,
    max_per_artist: int = 2,
    min_linked: int = 14,
    min_final: int = 5,
) -> tuple[list[Playlist], FilterStats]:
    """Apply the four filtering rules in order; returns survivors and per-rule counts.

    1. at least ``min_artists`` unique artists and no artist with more than
       ``max_per_artist`` songs;
    2. at least ``min_linked`` songs;
    3. songs without a feature vector are dropped;
    4. playlists left with fewer than ``min_final`` songs are rejected.
    """
    stats = FilterStats()
    kept: list[Playlist] = []
    for p in playlists:
        stats.n_input += 1
        per_artist = Counter(p.artists)
        if len(per_artist) < min_artists or max(per_artist.values()) > max_per_artist:
            stats.rejected_artists += 1
            continue
        if len(p) < min_linked:
            stats.rejected_short += 1
            continue
        featured = [s for s in p.songs if s in features]
        stats.dropped_songs += len(p) - len(featured)
        if len(featured) < min_final:
            stats.rejected_final += 1
            continue
        kept.append(p.subset(featured) if len(featured) < len(p) else p)
    stats.n_output = len(kept)
    return kept, stats


# -- splits ------------------------------------------------------------------


def holdout_size(length: int, holdout_fraction: float) -> int:
    """Number of withheld songs: round-half-up of ``fraction * length``, at least 1."""
    return max(1, int(math.floor(holdout_fraction * length + 0.5)))


def _song_split(p: Playlist, holdout_fraction: float, rng: np.random.Generator):
    k = holdout_size(len(p), holdout_fraction)
    if k >= len(p):
        raise ValueError(f"playlist {p.id!r} of length {len(p)} is too short to split")
    withheld_idx = rng.choice(len(p), size=k, replace=False)
    withheld = {p.songs[i] for i in withheld_idx}
    retained = p.subset(s for s in p.songs if s not in withheld)
    return retained, p.subset(withheld)


def _universe_for(playlists: Iterable[Playlist], universe) -> tuple[str, ...]:
    songs = set()
    for p in playlists:
        songs.update(p.songs)
    if universe is None:
        return tuple(sorted(songs))
    universe = tuple(universe)
    missing = songs - set(universe)
    if missing:
        raise ValueError(f"{len(missing)} playlist songs are outside the universe")
    return universe


def split_weak(
    playlists: Sequence[Playlist],
    holdout_fraction: float = 0.2,
    rng_seed: int = 0,
    universe: Iterable[str] | None = None,
) -> SplitBundle:
    """Withhold about ``holdout_fraction`` of every playlist as its continuation.

    The retained part of each playlist serves both as training playlist and as
    query. ``universe`` defaults to the songs occurring in ``playlists``.
    """
    holdout_fraction = check_fraction(holdout_fraction, "holdout_fraction")
    uni = _universe_for(playlists, universe)
    train, continuations = [], {}
    for p in playlists:
        retained, withheld = _song_split(p, holdout_fraction, derive_seed(rng_seed, "weak", p.id))
        train.append(retained)
        continuations[p.id] = withheld
    meta = {"mode": WEAK, "holdout_fraction": holdout_fraction, "seed": int(rng_seed)}
    return SplitBundle(WEAK, train, list(train), continuations, uni, meta)


def split_strong(
    playlists: Sequence[Playlist],
    playlist_fraction: float = 0.2,
    holdout_fraction: float = 0.2,
    rng_seed: int = 0,
    universe: Iterable[str] | None = None,
) -> SplitBundle:
    """Playlist-disjoint split: ``ceil(playlist_fraction * |P|)`` playlists become queries."""
    playlist_fraction = check_fraction(playlist_fraction, "playlist_fraction")
    holdout_fraction = check_fraction(holdout_fraction, "holdout_fraction")
    playlists = list(playlists)
    if len(playlists) < 2:
        raise ValueError("strong split needs at least 2 playlists")
    n_query = math.ceil(playlist_fraction * len(playlists))
    if n_query >= len(playlists):
        raise ValueError("playlist_fraction leaves no training playlists")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x5742]))
    query_idx = set(rng.choice(len(playlists), size=n_query, replace=False).tolist())
    uni = _universe_for(playlists, universe)
    train, queries, continuations = [], [], {}
    for i, p in enumerate(playlists):
        if i not in query_idx:
            train.append(p)
            continue
        retained, withheld = _song_split(p, holdout_fraction, derive_seed(rng_seed, "strong", p.id))
        queries.append(retained)
        continuations[p.id] = withheld
    meta = {
        "mode": STRONG,
        "playlist_fraction": playlist_fraction,
        "holdout_fraction": holdout_fraction,
        "seed": int(rng_seed),
    }
    return SplitBundle(STRONG, train, queries, continuations, uni, meta)


# -- bundle persistence ------------------------------------------------------

_BUNDLE_FILES = ("train.pls", "query.pls", "continuations.pls", "universe.txt", "meta.json")


def save_bundle(bundle: SplitBundle, directory) -> Path:
    """Write a bundle directory; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_playlists(bundle.train_playlists, directory / "train.pls")
    write_playlists(bundle.query_playlists, directory / "query.pls")
    write_playlists(
        [bundle.continuations[q.id] for q in bundle.query_playlists],
        directory / "continuations.pls",
    )
    with open(directory / "universe.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(s + "\n" for s in bundle.universe)
    meta = dict(bundle.meta)
    meta["mode"] = bundle.mode
    with open(directory / "meta.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return directory


def load_bundle(directory) -> SplitBundle:
    directory = Path(directory)
    for name in _BUNDLE_FILES:
        if not (directory / name).is_file():
            raise FormatError(f"bundle {directory} is missing {name}")
    with open(directory / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(directory / "universe.txt", encoding="utf-8") as fh:
        universe = tuple(line.rstrip("\n") for line in fh if line.strip())
    train = load_playlists(directory / "train.pls")
    queries = load_playlists(directory / "query.pls")
    conts = {p.id: p for p in load_playlists(directory / "continuations.pls")}
    mode = meta.get("mode")
    if mode == WEAK:
        queries = train
    return SplitBundle(mode, train, queries, conts, universe, meta)


def bundle_checksum(directory) -> str:
    """SHA-256 over the bundle files in a fixed order."""
    h = hashlib.sha256()
    for name in _BUNDLE_FILES:
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


# -- synthetic data ----------------------------------------------------------


def generate_synthetic(
    n_clusters: int = 5,
    songs_per_cluster: int = 200,
    n_playlists: int = 400,
    playlist_len: int = 15,
    dim: int = 32,
    noise_sd: float = 0.3,
    cross_cluster_prob: float = 0.1,
    rng_seed: int = 0,
    songs_per_artist: int = 1,
    taste_sharpness: float = 0.0,
    return_clusters: bool = False,
):
    """Clustered playlists with matching song features.

    Every cluster gets a random unit-norm centroid and each song is its
    centroid plus isotropic Gaussian noise with standard deviation
    ``noise_sd``. A playlist picks a home cluster and fills each slot from it
    with probability ``1 - cross_cluster_prob``, otherwise from another
    cluster chosen uniformly.

    Within a cluster, songs are drawn with weights
    ``exp(taste_sharpness * cos(noise_s, taste_p))`` where ``taste_p`` is a
    random direction drawn per playlist; ``taste_sharpness=0`` draws
    uniformly. Consecutive songs of a cluster share an artist in groups of
    ``songs_per_artist``.

    Returns ``(playlists, features)``, plus a ``song -> cluster`` dict when
    ``return_clusters`` is set.
    """
    n_clusters = check_positive_int(n_clusters, "n_clusters")
    songs_per_cluster = check_positive_int(songs_per_cluster, "songs_per_cluster")
    n_playlists = check_positive_int(n_playlists, "n_playlists")
    playlist_len = check_positive_int(playlist_len, "playlist_len")
    dim = check_positive_int(dim, "dim")
    songs_per_artist = check_positive_int(songs_per_artist, "songs_per_artist")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if not 0.0 <= cross_cluster_prob <= 1.0:
        raise ValueError("cross_cluster_prob must lie in [0, 1]")
    n_songs = n_clusters * songs_per_cluster
    if playlist_len > n_songs:
        raise ValueError(f"playlist_len {playlist_len} exceeds the {n_songs} available songs")

    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x53594E]))
    centroids = rng.standard_normal((n_clusters, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    z = rng.standard_normal((n_clusters, songs_per_cluster, dim))
    vectors = centroids[:, None, :] + noise_sd * z
    directions = z / np.maximum(np.linalg.norm(z, axis=2, keepdims=True), 1e-300)

    cw = len(str(n_clusters - 1))
    sw = len(str(songs_per_cluster - 1))
    song_ids = [[f"c{k:0{cw}d}s{j:0{sw}d}" for j in range(songs_per_cluster)] for k in range(n_clusters)]
    artist_ids = [
        [f"a{k:0{cw}d}_{j // songs_per_artist:0{sw}d}" for j in range(songs_per_cluster)]
        for k in range(n_clusters)
    ]

    pw = len(str(n_playlists - 1))
    playlists = []
    for i in range(n_playlists):
        prng = derive_seed(rng_seed, "synthetic-playlist", i)
        home = int(prng.integers(n_clusters))
        taste = prng.standard_normal(dim)
        taste /= np.linalg.norm(taste)
        available = np.ones((n_clusters, songs_per_cluster), dtype=bool)
        weights = np.exp(taste_sharpness * (directions @ taste))
        chosen: list[tuple[int, int]] = []
        for _ in range(playlist_len):
            cluster = home
            if n_clusters > 1 and prng.random() < cross_cluster_prob:
                cluster = int(prng.integers(n_clusters - 1))
                cluster += cluster >= home
            if not available[cluster].any():
                cluster = int(np.nonzero(available.any(axis=1))[0][0])
            w = weights[cluster] * available[cluster]
            j = int(prng.choice(songs_per_cluster, p=w / w.sum()))
            available[cluster, j] = False
            chosen.append((cluster, j))
        playlists.append(
            Playlist(
                f"pl{i:0{pw}d}",
                tuple(song_ids[k][j] for k, j in chosen),
                tuple(artist_ids[k][j] for k, j in chosen),
            )
        )

    flat_ids = [sid for ids in song_ids for sid in ids]
    features = FeatureTable(flat_ids, vectors.reshape(n_songs, dim))
    if return_clusters:
        clusters = {sid: k for k, ids in enumerate(song_ids) for sid in ids}
        return playlists, features, clusters
    return playlists, features
