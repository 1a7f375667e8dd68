import numpy as np
import pytest

from hoifit.errors import FlaggedNumericalFault
from hoifit.fieldnet import (MLP, FeatureGrid, FieldNet, LearnedFieldProvider, TrainBatch,
                             TrainConfig, build_training_data, dataset_loss, decode, encode, feature_dim,
                             init_decoder, load_checkpoint, loss_and_gradients, make_targets,
                             query_features, sample_training_points, save_checkpoint, train, yaw_scene)
from hoifit.geometry import HUMAN, OBJECT, LabeledPointCloud
from hoifit.gradcheck import central_difference, relative_error

BOUNDS = (np.zeros(3), np.ones(3))


def _cloud(points, labels):
    return LabeledPointCloud(np.asarray(points, float), np.asarray(labels))


def _random_cloud(rng, n=400):
    return _cloud(rng.random((n, 3)), rng.integers(0, 2, n))


# ---------------------------------------------------------------- encoder


def test_single_point_pooling():
    G = 8
    centre = (np.array([3, 5, 2]) + 0.5) / G
    cloud = _cloud([centre, [0.95, 0.95, 0.95]], [HUMAN, OBJECT])
    grid = encode(cloud, BOUNDS, levels=2, resolution=G)
    assert grid.levels[0][3, 5, 2, 0] == 1.0
    assert grid.levels[1][1, 2, 1, 0] == pytest.approx(1 / 8)
    assert grid.levels[0][..., 0].sum() == 1.0


def test_one_cell_shift_translates_features(rng):
    G = 16
    pts = 0.25 + 0.5 * rng.random((300, 3))
    lab = rng.integers(0, 2, 300)
    a = encode(_cloud(pts, lab), BOUNDS, levels=1, resolution=G).levels[0]
    b = encode(_cloud(pts + np.array([1.0, 0, 0]) / G, lab), BOUNDS, levels=1, resolution=G).levels[0]
    np.testing.assert_array_equal(b[1:], a[:-1])


def test_coarse_level_is_block_average(rng):
    grid = encode(_random_cloud(rng), BOUNDS, levels=3, resolution=16)
    fine = grid.levels[0]
    coarse = np.zeros((8, 8, 8, fine.shape[-1]))
    for i in range(8):
        for j in range(8):
            for k in range(8):
                coarse[i, j, k] = fine[2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2].mean(axis=(0, 1, 2))
    np.testing.assert_allclose(grid.levels[1], coarse, atol=1e-15)
    assert all(0 <= g[..., :2].min() and g[..., :2].max() <= 1 for g in grid.levels)


def test_encode_rejects_missing_label_and_far_points(rng):
    with pytest.raises(ValueError):
        encode(_cloud(rng.random((10, 3)), np.zeros(10)), BOUNDS)
    pts = rng.random((100, 3))
    pts[:5] += 3.0
    with pytest.raises(ValueError):
        encode(_cloud(pts, rng.integers(0, 2, 100) | (np.arange(100) < 2)), BOUNDS)


def test_encode_is_permutation_invariant(rng):
    cloud = _random_cloud(rng)
    perm = rng.permutation(len(cloud.points))
    a = encode(cloud, BOUNDS, levels=2, resolution=8)
    b = encode(_cloud(cloud.points[perm], cloud.labels[perm]), BOUNDS, levels=2, resolution=8)
    for x, y in zip(a.levels, b.levels):
        np.testing.assert_array_equal(x, y)


# ---------------------------------------------------------------- trilinear features


def _grid(rng, G=8, levels=2):
    lv = [rng.random((G, G, G, 4))]
    for _ in range(1, levels):
        g = lv[-1]
        r = g.shape[0] // 2
        lv.append(g.reshape(r, 2, r, 2, r, 2, 4).mean(axis=(1, 3, 5)))
    return FeatureGrid(np.zeros(3), np.ones(3), lv)


def test_cell_centre_and_midpoint(rng):
    grid = _grid(rng, levels=1)
    G = 8
    p = (np.array([[2, 3, 4]]) + 0.5) / G
    F, _ = query_features(grid, p)
    np.testing.assert_allclose(F[0, :4], grid.levels[0][2, 3, 4], atol=1e-15)
    mid = p + np.array([0.5 / G, 0, 0])
    F, _ = query_features(grid, mid)
    np.testing.assert_allclose(F[0, :4], 0.5 * (grid.levels[0][2, 3, 4] + grid.levels[0][3, 3, 4]),
                               atol=1e-15)
    np.testing.assert_allclose(F[0, 4:], 2 * mid[0] - 1, atol=1e-15)


def _naive_trilinear(values, p):
    R = values.shape[0]
    u = np.clip(p * R - 0.5, 0, R - 1)
    out = np.zeros(values.shape[-1])
    for corner in np.ndindex(2, 2, 2):
        i = np.minimum(np.floor(u).astype(int), R - 2) + np.array(corner)
        w = np.prod([1 - abs(u[d] - i[d]) for d in range(3)])
        out += w * values[tuple(i)]
    return out


def test_trilinear_matches_explicit_corners(rng):
    grid = _grid(rng, levels=2)
    pts = rng.random((50, 3))
    F, outside = query_features(grid, pts)
    assert not outside.any()
    for p, f in zip(pts, F):
        want = np.concatenate([_naive_trilinear(lv, p) for lv in grid.levels] + [2 * p - 1])
        np.testing.assert_allclose(f, want, atol=1e-9)


def test_outside_points_are_clamped_and_flagged(rng):
    grid = _grid(rng, levels=1)
    F, outside = query_features(grid, np.array([[1.5, 0.5, 0.5], [0.5, 0.5, 0.5]]))
    assert outside.tolist() == [True, False]
    F2, _ = query_features(grid, np.array([[1.0, 0.5, 0.5]]))
    np.testing.assert_allclose(F[0], F2[0])


def test_feature_gradient_matches_finite_difference(rng):
    grid = _grid(rng, levels=2)
    p = 0.1 + 0.8 * rng.random((5, 3))
    _, _, dF = query_features(grid, p, "axes", grad=True)
    for j in range(len(p)):
        num = central_difference(lambda q: query_features(grid, q[None], "axes")[0][0], p[j], 1e-7)
        assert relative_error(dF[j], num) < 1e-6


# ---------------------------------------------------------------- decoders


def test_zero_params_decode():
    p = init_decoder(7, (5, 4), seed=0, delta=0.2).zeros_like()
    s = decode(p, np.ones((3, 7)))
    np.testing.assert_allclose(s.u_h, 0.2 * np.log(2.0), atol=1e-15)
    np.testing.assert_allclose(s.u_o, 0.2 * np.log(2.0), atol=1e-15)
    assert np.all(s.c == 0) and np.all(s.a == 0)


def test_single_layer_selects_input_slice(rng):
    p = init_decoder(10, (), seed=0)
    W = np.zeros((3, 10))
    W[:, 4:7] = np.eye(3)
    p.corr = MLP([W], [np.zeros(3)])
    x = rng.normal(size=(6, 10))
    np.testing.assert_array_equal(decode(p, x).c, x[:, 4:7])


def _naive_mlp(mlp, x):
    h = list(x)
    for k, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = [sum(W[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(len(b))]
        h = [np.log1p(np.exp(v)) for v in z] if k < len(mlp.weights) - 1 else z
    return np.array(h)


def test_decode_matches_naive_loops(rng):
    p = init_decoder(6, (5, 4), seed=3, delta=0.2)
    for mlp in (p.udf, p.corr, p.orient):
        for b in mlp.biases:
            b[:] = rng.normal(size=b.shape)
    x = rng.normal(size=(4, 6))
    s = decode(p, x)
    for i in range(len(x)):
        u = 0.2 * np.log1p(np.exp(_naive_mlp(p.udf, x[i])))
        np.testing.assert_allclose([s.u_h[i], s.u_o[i]], u, atol=1e-9)
        np.testing.assert_allclose(s.c[i], _naive_mlp(p.corr, x[i]), atol=1e-9)
        np.testing.assert_allclose(s.a[i], _naive_mlp(p.orient, x[i]), atol=1e-9)


def test_udf_nonnegative_and_dimension_check(rng):
    p = init_decoder(6, (8,), seed=0)
    p.udf.weights[-1] *= 1e3
    s = decode(p, rng.normal(size=(200, 6)) * 10)
    assert np.all(s.u_h >= 0) and np.all(s.u_o >= 0)
    with pytest.raises(ValueError):
        decode(p, np.zeros((2, 5)))


def test_non_finite_output_is_flagged():
    p = init_decoder(3, (4,), seed=0)
    p.corr.biases[-1][0] = np.nan
    with pytest.raises(FlaggedNumericalFault):
        decode(p, np.zeros((1, 3)))


# ---------------------------------------------------------------- loss


def _batch(rng, grid, n=40, eps=0.02, near=True):
    pts = 0.1 + 0.8 * rng.random((n, 3))
    u_o = rng.random(n) * 0.1 if near else 0.05 + rng.random(n)
    return TrainBatch(pts, rng.random(n) * 0.2, u_o, rng.normal(size=(n, 3)), rng.normal(size=(n, 9)), eps)


def test_perfect_predictions_give_zero_loss(rng):
    grid = _grid(rng)
    p = init_decoder(feature_dim(2, "point"), (6,), seed=1)
    b = _batch(rng, grid)
    s = decode(p, query_features(grid, b.points)[0])
    perfect = TrainBatch(b.points, s.u_h, s.u_o, s.c, s.a, b.eps)
    loss, g, _ = loss_and_gradients(p, grid, perfect)
    assert loss == 0.0
    assert np.all(g.to_vector() == 0.0)


def test_orientation_term_masked(rng):
    grid = _grid(rng)
    p = init_decoder(feature_dim(2, "point"), (6,), seed=1)
    b = _batch(rng, grid, near=False)
    _, g, parts = loss_and_gradients(p, grid, b)
    assert parts["orient"] == 0.0
    assert all(np.all(t == 0) for t in g.orient.tensors())
    q = p.copy()
    q.orient.weights[-1][:] = rng.normal(size=q.orient.weights[-1].shape)
    assert loss_and_gradients(q, grid, b)[0] == loss_and_gradients(p, grid, b)[0]


def test_parameter_gradients_match_finite_difference(rng):
    grid = _grid(rng)
    p = init_decoder(feature_dim(2, "axes"), (6, 5), seed=2)
    b = _batch(rng, grid)
    assert b.mask.any()
    _, g, _ = loss_and_gradients(p, grid, b, 0.7, 1.3, "axes")
    x = p.to_vector()
    num = central_difference(lambda v: loss_and_gradients(p.with_vector(v), grid, b, 0.7, 1.3, "axes")[0],
                             x, 1e-5)
    assert relative_error(g.to_vector(), num) < 1e-4


# ---------------------------------------------------------------- training


def _tiny_config(**kw):
    base = dict(levels=2, resolution=16, stencil="axes", hidden=(32, 32), points_per_scene=1500,
                batch_size=256, steps=600, lr=3e-3, lr_final=3e-4, log_every=100)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_run(grasp_frame):
    cfg = _tiny_config()
    data = build_training_data([grasp_frame], cfg)
    return cfg, data, train([], cfg, data=data)


def test_training_loss_drops_ninety_percent(tiny_run):
    cfg, data, res = tiny_run
    init = init_decoder(data.features.shape[1], cfg.hidden, cfg.seed, cfg.delta)
    before = dataset_loss(init, data, cfg)["total"]
    after = dataset_loss(res.params, data, cfg)["total"]
    assert after <= 0.1 * before
    assert res.curve[0]["step"] == 1 and res.curve[-1]["step"] == cfg.steps


def test_training_is_deterministic(tiny_run):
    cfg, data, res = tiny_run
    cfg2 = _tiny_config(steps=50)
    a = train([], cfg2, data=data).params.to_vector()
    b = train([], cfg2, data=data).params.to_vector()
    assert a.tobytes() == b.tobytes()


def test_training_rejects_empty_input():
    with pytest.raises(ValueError):
        train([], _tiny_config())
    with pytest.raises(ValueError):
        TrainConfig(steps=-1).check()


def test_yaw_augmentation_preserves_targets(grasp_frame):
    f = grasp_frame
    scene = yaw_scene(f, 0.7)
    pts = sample_training_points(f.body_mesh, f.object_mesh, (f.cloud.points.min(0), f.cloud.points.max(0)),
                                 200, seed=0)
    lo, hi = f.cloud.points.min(axis=0), f.cloud.points.max(axis=0)
    centre = 0.5 * (lo + hi)
    centre[1] = 0.0
    c, s = np.cos(0.7), np.sin(0.7)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    moved = (pts - centre) @ R.T + centre
    a, b = make_targets(pts, f), make_targets(moved, scene)
    np.testing.assert_allclose(b.u_h, a.u_h, atol=1e-9)
    np.testing.assert_allclose(b.u_o, a.u_o, atol=1e-9)
    np.testing.assert_allclose(b.c, a.c, atol=1e-6)
    assert len(build_training_data([f], _tiny_config(augment=2, points_per_scene=100)).features) == 300


def test_checkpoint_round_trip(tiny_run, tmp_path, grasp_frame):
    cfg, _, res = tiny_run
    path = tmp_path / "decoder.bin"
    save_checkpoint(path, res.params, cfg)
    params, cfg2 = load_checkpoint(path)
    assert params.to_vector().tobytes() == res.params.to_vector().tobytes()
    assert (cfg2.levels, cfg2.resolution, cfg2.stencil, cfg2.hidden) == (cfg.levels, cfg.resolution,
                                                                          cfg.stencil, cfg.hidden)
    pts = grasp_frame.cloud.points[:20]
    a = LearnedFieldProvider(res.params, grasp_frame.cloud, cfg).query(pts)
    b = LearnedFieldProvider(params, grasp_frame.cloud, cfg2).query(pts)
    np.testing.assert_array_equal(a.c, b.c)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nonsense")
    with pytest.raises(Exception):
        load_checkpoint(bad)


def test_provider_input_gradients(tiny_run, grasp_frame):
    cfg, _, res = tiny_run
    prov = LearnedFieldProvider(res.params, grasp_frame.cloud, cfg)
    p = grasp_frame.object_mesh.vertices[:4] + 0.01
    s = prov.query(p, grad=True)
    for j in range(len(p)):
        num = central_difference(lambda q: np.concatenate([prov.query(q[None]).u_h, prov.query(q[None]).u_o]),
                                 p[j], 1e-7)
        assert relative_error(np.stack([s.grad_u_h[j], s.grad_u_o[j]]), num) < 1e-5


def test_fieldnet_estimator(grasp_frame, tmp_path):
    net = FieldNet(_tiny_config(steps=30))
    assert net.get_params()["config"].steps == 30
    with pytest.raises(Exception):
        net.predict(grasp_frame.cloud, grasp_frame.cloud.points[:3])
    net.fit([grasp_frame])
    s = net.predict(grasp_frame.cloud, grasp_frame.cloud.points[:3])
    assert s.c.shape == (3, 3)
    assert np.isfinite(net.score([grasp_frame]))
    net.save(tmp_path / "n.bin")
    other = FieldNet.load(tmp_path / "n.bin")
    np.testing.assert_array_equal(other.predict(grasp_frame.cloud, grasp_frame.cloud.points[:3]).c, s.c)
