import numpy as np
import pytest

from playcont.dataset import FeatureTable, Playlist


def make_playlist(pid, songs, artists=None):
    songs = tuple(songs)
    if artists is None:
        artists = tuple(f"art_{s}" for s in songs)
    return Playlist(pid, songs, tuple(artists))


@pytest.fixture
def small_collection():
    """Three playlists over a ten-song universe with random 4-d features."""
    rng = np.random.default_rng(7)
    ids = [f"s{i}" for i in range(10)]
    features = FeatureTable(ids, rng.standard_normal((10, 4)))
    playlists = [
        make_playlist("p1", ["s0", "s1", "s2", "s3"]),
        make_playlist("p2", ["s2", "s4", "s5"]),
        make_playlist("p3", ["s6", "s7", "s8", "s9", "s0"]),
    ]
    return playlists, features
