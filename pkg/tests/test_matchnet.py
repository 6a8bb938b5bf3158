import math
import time

import numpy as np
import pytest

from playcont._container import ChecksumError, ShapeError
from playcont.dataset import FeatureTable, generate_synthetic
from playcont.matchnet import (
    INFERENCE,
    MatchNetConfig,
    MatchNetRecommender,
    PairEncoder,
    backward,
    bce,
    forward,
    forward_batch,
    init,
    load,
    loss,
    make_batch,
    mean_cost,
    parameter_shapes,
    rank_candidates,
    save,
    train,
    transform_songs,
)
from playcont.matchnet import io as mn_io
from playcont.sampling import derive_pairs

from conftest import make_playlist


def perturbed_net(cfg, seed=1, scale=0.3):
    """Initialized net with every trainable parameter jittered, so no gradient is trivially zero."""
    net = init(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name in net.trainable:
        net.params[name] = net.params[name] + scale * rng.standard_normal(net.params[name].shape)
    return net


def random_batch(rng, n, dim, labels=True):
    mats = [rng.standard_normal((int(rng.integers(1, 6)), dim)) for _ in range(n)]
    y = rng.integers(0, 2, size=n) if labels else None
    return make_batch(mats, rng.standard_normal((n, dim)), y, canonical=False)


def numerical_gradient(net, batch, name, step=1e-5):
    p = net.params[name]
    out = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + step
        up = loss(net, batch, dropout=False)[0]
        p[idx] = old - step
        down = loss(net, batch, dropout=False)[0]
        p[idx] = old
        out[idx] = (up - down) / (2 * step)
    return out


def gradient_check(seed=0):
    """Largest elementwise relative error between analytic and central-difference gradients."""
    cfg = MatchNetConfig(input_dim=6, hidden_dim=4, f_blocks=2, g_hidden=4, dropout_rate=0.0)
    net = perturbed_net(cfg, seed=seed + 1)
    batch = random_batch(np.random.default_rng(seed), 5, 6)
    grads, _ = backward(net, batch, dropout=False)
    worst = 0.0
    for name in net.trainable:
        num = numerical_gradient(net, batch, name)
        # the 1e-6 floor covers parameters whose exact gradient is zero
        # (dense biases feeding batch-norm)
        denom = np.maximum(np.maximum(np.abs(grads[name]), np.abs(num)), 1e-6)
        worst = max(worst, float(np.max(np.abs(grads[name] - num) / denom)))
    return worst


# -- configuration and init ------------------------------------------------------


def test_default_layer_sizes():
    shapes = parameter_shapes(MatchNetConfig(input_dim=600))
    assert shapes["f0.W"] == (600, 256)
    assert shapes["f1.W"] == (256, 128)
    assert shapes["g.W1"] == (256, 128)
    assert shapes["g.W2"] == (128, 1)


@pytest.mark.parametrize("field,value", [("hidden_dim", 0), ("dropout_rate", 1.0), ("f_blocks", 0),
                                         ("bn_momentum", 1.0), ("learning_rate", 0.0)])
def test_invalid_config(field, value):
    with pytest.raises(ValueError):
        MatchNetConfig(input_dim=3, **{field: value})


def test_init_is_seeded_and_glorot():
    cfg = MatchNetConfig(input_dim=10, hidden_dim=8, g_hidden=6)
    a, b = init(cfg, 3), init(cfg, 3)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    bound = math.sqrt(6 / (10 + 16))
    assert np.abs(a.params["f0.W"]).max() <= bound
    assert np.all(a.params["f0.b"] == 0) and np.all(a.params["f0.var"] == 1)
    assert np.all(a.params["g.gamma"] == 1) and np.all(a.params["g.mean"] == 0)
    assert not np.array_equal(a.params["f0.W"], init(cfg, 4).params["f0.W"])


def test_untrained_net_predicts_near_half():
    cfg = MatchNetConfig(input_dim=8, hidden_dim=16, g_hidden=16)
    net = init(cfg, 0).set_mode(INFERENCE)
    rng = np.random.default_rng(1)
    probs = [forward(net, rng.uniform(-1, 1, (5, 8)), rng.uniform(-1, 1, 8)) for _ in range(200)]
    assert np.max(np.abs(np.array(probs) - 0.5)) < 0.15


# -- forward ------------------------------------------------------------------------


def test_zeroed_output_layer_gives_exactly_half():
    cfg = MatchNetConfig(input_dim=5, hidden_dim=4, g_hidden=3)
    net = perturbed_net(cfg).set_mode(INFERENCE)
    net.params["g.W2"][:] = 0.0
    net.params["g.b2"][:] = 0.0
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert forward(net, rng.standard_normal((4, 5)), rng.standard_normal(5)) == 0.5


def test_identical_rows_equal_single_row():
    cfg = MatchNetConfig(input_dim=5, hidden_dim=4, g_hidden=3)
    net = perturbed_net(cfg).set_mode(INFERENCE)
    rng = np.random.default_rng(2)
    x, s = rng.standard_normal(5), rng.standard_normal(5)
    single = forward(net, x[None, :], s)
    assert forward(net, np.tile(x, (7, 1)), s) == pytest.approx(single, abs=1e-15)


def permutation_invariance_failures(n_fixtures=100, seed=0):
    """Number of fixtures whose forward score changes under a playlist-row permutation."""
    cfg = MatchNetConfig(input_dim=7, hidden_dim=5, g_hidden=4)
    net = perturbed_net(cfg, seed=seed).set_mode(INFERENCE)
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_fixtures):
        X = rng.standard_normal((int(rng.integers(2, 20)), 7))
        s = rng.standard_normal(7)
        perm = rng.permutation(X.shape[0])
        failures += forward(net, X, s) != forward(net, X[perm], s)
    return failures


def test_permutation_invariance_exact():
    assert permutation_invariance_failures() == 0


def test_forward_validates_input():
    net = init(MatchNetConfig(input_dim=3, hidden_dim=2, g_hidden=2), 0).set_mode(INFERENCE)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4)), np.zeros(3))
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        forward(net, np.zeros((0, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        forward(net, np.array([[0.0, np.nan, 0.0]]), np.zeros(3))


def test_output_strictly_inside_unit_interval():
    cfg = MatchNetConfig(input_dim=3, hidden_dim=2, g_hidden=2)
    net = perturbed_net(cfg, scale=50.0).set_mode(INFERENCE)
    rng = np.random.default_rng(0)
    batch = random_batch(rng, 50, 3)
    _, probs = forward_batch(net, batch)
    assert np.all(np.isfinite(probs))
    assert np.all(np.isfinite(bce(probs, batch.labels)))


# -- loss -----------------------------------------------------------------------------


def test_loss_values():
    assert bce(np.array([0.5, 0.5]), np.array([0, 1])) == pytest.approx([math.log(2)] * 2, abs=1e-12)
    assert bce(np.array([0.8]), np.array([1]))[0] == pytest.approx(-math.log(0.8), abs=1e-12)
    assert bce(np.array([0.8]), np.array([1]))[0] == pytest.approx(0.223144, abs=1e-6)


def test_loss_is_additive():
    cfg = MatchNetConfig(input_dim=4, hidden_dim=3, g_hidden=3)
    net = perturbed_net(cfg).set_mode(INFERENCE)
    batch = random_batch(np.random.default_rng(3), 2, 4)
    total, mean = loss(net, batch)
    _, probs = forward_batch(net, batch)
    a, b = bce(probs, batch.labels)
    assert total == pytest.approx(a + b, rel=1e-14)
    assert mean == pytest.approx((a + b) / 2, rel=1e-14)


def test_loss_clipping_and_errors():
    assert bce(np.array([0.0]), np.array([1]))[0] == pytest.approx(-math.log(1e-7))
    with pytest.raises(ValueError):
        bce(np.array([]), np.array([]))
    with pytest.raises(ValueError):
        bce(np.array([0.5]), np.array([2]))


def untrained_balanced_loss(n_pairs=1000, seed=0):
    playlists, features = generate_synthetic(5, 40, 60, 10, 16, rng_seed=seed)
    pairs = derive_pairs(playlists, features.ids, rng_seed=seed)[:n_pairs]
    net = init(MatchNetConfig(input_dim=16), seed)
    return mean_cost(net, PairEncoder(pairs, features)), len(pairs)


def test_untrained_loss_near_ln2():
    cost, n = untrained_balanced_loss()
    assert n == 1000
    assert abs(cost - math.log(2)) < 0.05


# -- backward ------------------------------------------------------------------------


def test_gradient_check():
    assert gradient_check() < 1e-4


def test_gradient_check_without_batchnorm():
    cfg = MatchNetConfig(input_dim=6, hidden_dim=4, g_hidden=4, dropout_rate=0.0, use_batchnorm=False)
    net = perturbed_net(cfg, seed=5)
    batch = random_batch(np.random.default_rng(5), 5, 6)
    grads, _ = backward(net, batch, dropout=False)
    for name in ("f0.W", "f1.b", "g.W1", "g.W2"):
        num = numerical_gradient(net, batch, name)
        np.testing.assert_allclose(grads[name], num, rtol=1e-6, atol=1e-8)


def test_gradient_vanishes_at_clipped_optimum():
    cfg = MatchNetConfig(input_dim=4, hidden_dim=3, g_hidden=3, dropout_rate=0.0)
    net = perturbed_net(cfg)
    net.params["g.W2"][:] = 0.0
    net.params["g.b2"][:] = 100.0
    batch = random_batch(np.random.default_rng(0), 4, 4)
    batch.labels[:] = 1.0
    grads, _ = backward(net, batch, dropout=False)
    assert math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) < 1e-6


def test_duplicate_example_adds_its_gradient_without_batchnorm():
    cfg = MatchNetConfig(input_dim=5, hidden_dim=3, g_hidden=3, dropout_rate=0.0, use_batchnorm=False)
    net = perturbed_net(cfg, seed=2)
    rng = np.random.default_rng(9)
    X1, X2 = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
    s1, s2 = rng.standard_normal(5), rng.standard_normal(5)
    once, _ = backward(net, make_batch([X1, X2], np.vstack([s1, s2]), [1, 0]), dropout=False)
    twice, _ = backward(net, make_batch([X1, X2, X2], np.vstack([s1, s2, s2]), [1, 0, 0]), dropout=False)
    alone, _ = backward(net, make_batch([X2], s2[None, :], [0]), dropout=False)
    for name in net.trainable:
        np.testing.assert_allclose(twice[name], once[name] + alone[name], rtol=1e-10, atol=1e-13)


def test_backward_requires_train_mode():
    net = init(MatchNetConfig(input_dim=3, hidden_dim=2, g_hidden=2), 0).set_mode(INFERENCE)
    batch = random_batch(np.random.default_rng(0), 3, 3)
    with pytest.raises(RuntimeError):
        backward(net, batch)


def test_mean_reduction_scales_gradient():
    cfg = MatchNetConfig(input_dim=4, hidden_dim=3, g_hidden=3, dropout_rate=0.0)
    net = perturbed_net(cfg)
    batch = random_batch(np.random.default_rng(1), 6, 4)
    g_sum, l_sum = backward(net, batch, dropout=False)
    g_mean, l_mean = backward(net, batch, dropout=False, reduction="mean")
    assert l_mean == pytest.approx(l_sum / 6)
    for name in g_sum:
        np.testing.assert_allclose(g_mean[name], g_sum[name] / 6, rtol=1e-12, atol=1e-15)


def test_dropout_mask_is_seeded():
    cfg = MatchNetConfig(input_dim=4, hidden_dim=8, g_hidden=8, dropout_rate=0.5)
    net = perturbed_net(cfg)
    batch = random_batch(np.random.default_rng(1), 6, 4)
    a, _ = backward(net, batch, rng=np.random.default_rng(7))
    b, _ = backward(net, batch, rng=np.random.default_rng(7))
    c, _ = backward(net, batch, rng=np.random.default_rng(8))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


# -- training -------------------------------------------------------------------------


def separable_fixture():
    """Two playlists drawn from two well separated song groups."""
    rng = np.random.default_rng(0)
    ids = [f"a{i}" for i in range(10)] + [f"b{i}" for i in range(10)]
    centre = np.array([2.0, 0.0, 0.0, 0.0])
    X = np.vstack([centre + 0.1 * rng.standard_normal((10, 4)), -centre + 0.1 * rng.standard_normal((10, 4))])
    features = FeatureTable(ids, X)
    playlists = [make_playlist("pa", ids[:10]), make_playlist("pb", ids[10:])]
    return playlists, features


def train_separable(max_epochs=200):
    playlists, features = separable_fixture()
    pairs = derive_pairs(playlists, features.ids, rng_seed=0)
    cfg = MatchNetConfig(input_dim=4, hidden_dim=8, g_hidden=8, dropout_rate=0.0, batch_size=8,
                         max_epochs=max_epochs, patience=max_epochs, learning_rate=1e-2)
    net = init(cfg, 0)
    report = train(net, pairs, pairs, features, rng_seed=0)
    return net, report, pairs, features


def test_separable_fixture_is_learned():
    net, report, pairs, features = train_separable()
    assert len(report.train_costs) <= 200
    assert min(report.train_costs) < 0.1
    assert mean_cost(net, PairEncoder(pairs, features)) < 0.1


def test_best_snapshot_is_returned():
    playlists, features = generate_synthetic(3, 20, 30, 8, 6, rng_seed=1)
    pairs = derive_pairs(playlists, features.ids, rng_seed=1)
    cfg = MatchNetConfig(input_dim=6, hidden_dim=8, g_hidden=8, max_epochs=8, patience=8)
    net = init(cfg, 0)
    report = train(net, pairs[:200], pairs[200:], features, rng_seed=0)
    assert net.mode == INFERENCE
    assert report.best_val_cost == min(report.val_costs)
    assert mean_cost(net, PairEncoder(pairs[200:], features)) == pytest.approx(report.best_val_cost, rel=1e-12)


def test_patience_zero_runs_one_epoch():
    playlists, features = separable_fixture()
    pairs = derive_pairs(playlists, features.ids, rng_seed=0)
    cfg = MatchNetConfig(input_dim=4, hidden_dim=4, g_hidden=4, max_epochs=10, patience=0)
    report = train(init(cfg, 0), pairs, pairs, features)
    assert len(report.train_costs) == 1
    assert report.best_epoch == 1


def test_training_is_deterministic():
    a = train_separable(max_epochs=5)
    b = train_separable(max_epochs=5)
    assert a[1] == b[1]
    for name in a[0].params:
        np.testing.assert_array_equal(a[0].params[name], b[0].params[name])


def test_training_rejects_empty_inputs():
    playlists, features = separable_fixture()
    pairs = derive_pairs(playlists, features.ids, rng_seed=0)
    net = init(MatchNetConfig(input_dim=4, hidden_dim=4, g_hidden=4), 0)
    with pytest.raises(ValueError):
        train(net, pairs, [], features)


def test_training_divergence_is_reported():
    from playcont.matchnet import TrainingDiverged

    playlists, features = separable_fixture()
    pairs = derive_pairs(playlists, features.ids, rng_seed=0)
    net = init(MatchNetConfig(input_dim=4, hidden_dim=4, g_hidden=4, max_epochs=2), 0)
    net.params["g.W2"][:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(net, pairs, pairs, features)


# -- ranking -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ranking_setup():
    playlists, features = generate_synthetic(4, 50, 40, 10, 8, rng_seed=2)
    est = MatchNetRecommender(hidden_dim=8, g_hidden=8, max_epochs=3, random_state=0).fit(playlists, features)
    return est, playlists, features


def test_single_candidate_ranks_first(ranking_setup):
    est, playlists, features = ranking_setup
    p = playlists[0]
    cand = next(s for s in features.ids if s not in p)
    ranked = rank_candidates(est.net_, p.songs, [cand], features)
    assert [s for s, _ in ranked] == [cand]


def test_ranking_is_repeatable_and_sorted(ranking_setup):
    est, playlists, features = ranking_setup
    p = playlists[1]
    cands = [s for s in features.ids if s not in p]
    first = rank_candidates(est.net_, p.songs, cands, features)
    assert first == rank_candidates(est.net_, p.songs, cands, features)
    scores = [sc for _, sc in first]
    assert scores == sorted(scores, reverse=True)
    assert sorted(s for s, _ in first) == sorted(cands)


def test_cached_matches_naive_forward(ranking_setup):
    est, playlists, features = ranking_setup
    p = playlists[2]
    cands = [s for s in features.ids if s not in p][:60]
    cached = dict(est.rank(p, cands))
    X_p = features.rows(p.songs)
    for s in cands:
        assert cached[s] == pytest.approx(forward(est.net_, X_p, features[s]), rel=1e-12, abs=1e-15)


def test_cached_ranking_beats_per_candidate_forward(ranking_setup):
    est, playlists, features = ranking_setup
    p = playlists[3]
    cands = [s for s in features.ids if s not in p]
    start = time.perf_counter()
    est.rank(p, cands)
    cached = time.perf_counter() - start
    X_p = features.rows(p.songs)
    start = time.perf_counter()
    for s in cands:
        forward(est.net_, X_p, features[s])
    naive = time.perf_counter() - start
    assert cached < naive


def test_ranking_errors(ranking_setup):
    est, playlists, features = ranking_setup
    p = playlists[0]
    with pytest.raises(ValueError, match="overlap"):
        rank_candidates(est.net_, p.songs, [p.songs[0]], features)
    with pytest.raises(KeyError, match="'nosuch'"):
        rank_candidates(est.net_, p.songs, ["nosuch"], features)
    with pytest.raises(ValueError):
        rank_candidates(est.net_, [], ["c0s00"], features)


def test_ties_broken_by_song_id():
    cfg = MatchNetConfig(input_dim=2, hidden_dim=2, g_hidden=2)
    net = init(cfg, 0).set_mode(INFERENCE)
    net.params["g.W2"][:] = 0.0
    features = FeatureTable(["z", "b", "a", "m"], np.arange(8.0).reshape(4, 2))
    ranked = rank_candidates(net, ["m"], ["z", "b", "a"], features)
    assert [s for s, _ in ranked] == ["a", "b", "z"]


def rank_time_r_squared(sizes=(1000, 2000, 4000, 8000), repeats=7):
    """R^2 of a least-squares line through (candidate count, best-of-N ranking time)."""
    rng = np.random.default_rng(0)
    n = max(sizes) + 10
    features = FeatureTable([f"s{i}" for i in range(n)], rng.standard_normal((n, 32)))
    net = init(MatchNetConfig(input_dim=32), 0).set_mode(INFERENCE)
    playlist = features.ids[:10]
    times = []
    for size in sizes:
        cands = features.ids[10:10 + size]
        best = math.inf
        for _ in range(repeats):
            start = time.perf_counter()
            rank_candidates(net, playlist, cands, features)
            best = min(best, time.perf_counter() - start)
        times.append(best)
    x, y = np.array(sizes, dtype=float), np.array(times)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())


def test_ranking_time_is_linear():
    assert rank_time_r_squared() >= 0.99


def test_song_embeddings_match_transform(ranking_setup):
    est, _, features = ranking_setup
    np.testing.assert_array_equal(est.song_embeddings(), transform_songs(est.net_, features.matrix))


# -- model files ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    cfg = MatchNetConfig(input_dim=6, hidden_dim=5, g_hidden=4, f_blocks=3, dropout_rate=0.25)
    net = perturbed_net(cfg).set_mode(INFERENCE)
    save(net, tmp_path / "m.pmn", meta={"note": "x"})
    back = load(tmp_path / "m.pmn")
    assert back.config == cfg
    for name in net.params:
        np.testing.assert_array_equal(back.params[name], net.params[name])
    rng = np.random.default_rng(0)
    for _ in range(100):
        X, s = rng.standard_normal((int(rng.integers(1, 6)), 6)), rng.standard_normal(6)
        assert forward(back, X, s) == forward(net, X, s)
    assert mn_io.read_meta(tmp_path / "m.pmn") == {"note": "x"}


def test_model_file_layout(tmp_path):
    net = init(MatchNetConfig(input_dim=3, hidden_dim=2, g_hidden=2), 0)
    data = mn_io.dumps(net)
    assert data[:4] == b"PMN1"


def test_corrupted_byte_fails_checksum(tmp_path):
    net = init(MatchNetConfig(input_dim=3, hidden_dim=2, g_hidden=2), 0)
    data = bytearray(mn_io.dumps(net))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        mn_io.loads(bytes(data))


def test_truncated_file_rejected():
    from playcont._container import ModelFormatError

    data = mn_io.dumps(init(MatchNetConfig(input_dim=3, hidden_dim=2, g_hidden=2), 0))
    with pytest.raises(ModelFormatError):
        mn_io.loads(data[:-10])


def test_dimension_mismatch_is_shape_error(tmp_path):
    net = init(MatchNetConfig(input_dim=3, hidden_dim=2, g_hidden=2), 0)
    save(net, tmp_path / "m.pmn")
    with pytest.raises(ShapeError):
        load(tmp_path / "m.pmn", expected_input_dim=4)


# -- estimator -------------------------------------------------------------------------------


def test_estimator_params_and_refit_determinism(ranking_setup):
    est, playlists, features = ranking_setup
    params = est.get_params()
    assert params["hidden_dim"] == 8 and params["random_state"] == 0
    again = MatchNetRecommender(**params).fit(playlists, features)
    assert again.report_ == est.report_


def test_estimator_round_trip(tmp_path, ranking_setup):
    est, playlists, features = ranking_setup
    est.save(tmp_path / "m.pmn")
    back = MatchNetRecommender.from_file(tmp_path / "m.pmn", features)
    p = playlists[0]
    cands = [s for s in features.ids if s not in p]
    assert back.rank(p, cands) == est.rank(p, cands)


def test_predict_proba_matches_forward(ranking_setup):
    est, playlists, features = ranking_setup
    p = playlists[0]
    probs = est.predict_proba([(p.songs, "c3s49"), (p.songs[:2], "c0s00")])
    assert probs[0] == pytest.approx(forward(est.net_, features.rows(p.songs), features["c3s49"]), rel=1e-12)


def test_unfitted_estimator_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        MatchNetRecommender().rank(make_playlist("p", ["a"]), ["b"])
