import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoifit import manifest
from hoifit.cli import main
from hoifit.errors import HoifitError
from hoifit.fitting import FitConfig
from hoifit.geometry import TriMesh, box_mesh, brute_force_closest
from hoifit.metrics import annotate_contacts, contact_metrics, v2v
from hoifit.pipeline import JointRegistration, fitted_meshes, oracle_provider, track_sequence
from hoifit.rotation import random_rotation
from hoifit.synth import make_sequence, random_scene_spec


# ---------------------------------------------------------------- v2v


def test_v2v_examples(rng):
    m = box_mesh((1, 1, 1), spacing=0.25)
    assert v2v(m, m) == 0.0
    moved = m.transformed(np.eye(3), [0.03, 0, 0])
    assert v2v(moved, m) == pytest.approx(0.03, abs=1e-15)
    assert v2v(moved, m, aligned=True) < 1e-9
    with pytest.raises(ValueError):
        v2v(m, box_mesh((1, 1, 1), spacing=0.5))


def test_v2v_matches_noise_expectation(rng):
    sigma = 0.01
    gt = rng.random((10_000, 3))
    noisy = gt + rng.normal(0.0, sigma, gt.shape)
    # mean norm of an isotropic 3D Gaussian: sigma * sqrt(8 / pi)
    assert v2v(noisy, gt) == pytest.approx(sigma * np.sqrt(8 / np.pi), rel=0.05)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_aligned_v2v_is_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = rng.random((60, 3))
    fit = gt + rng.normal(0, 0.02, gt.shape)
    R = random_rotation(rng)
    moved = fit @ R.T + rng.normal(0, 1.0, 3)
    assert abs(v2v(moved, gt, aligned=True) - v2v(fit, gt, aligned=True)) < 1e-9


# ---------------------------------------------------------------- annotation


def test_annotate_facing_cubes():
    a = box_mesh((1, 1, 1), center=(0, 0, 0), spacing=0.1)
    b = box_mesh((1, 1, 1), center=(1.01, 0, 0), spacing=0.1)
    lab = annotate_contacts(a, b)
    facing = np.isclose(b.vertices[:, 0], 0.51)
    np.testing.assert_array_equal(lab.labels, facing)
    d = brute_force_closest(b.vertices, a).distances
    np.testing.assert_array_equal(lab.labels, d < 0.02)
    np.testing.assert_allclose(lab.body_points[facing][:, 0], 0.5)
    far = box_mesh((1, 1, 1), center=(1.10, 0, 0), spacing=0.1)
    assert not annotate_contacts(a, far).labels.any()


def test_annotate_zero_threshold():
    a = box_mesh((1, 1, 1), spacing=0.5)
    touching = box_mesh((1, 1, 1), center=(1.0, 0, 0), spacing=0.5)
    lab = annotate_contacts(a, touching, threshold=0.0)
    np.testing.assert_array_equal(lab.labels, np.isclose(touching.vertices[:, 0], 0.5))
    apart = box_mesh((1, 1, 1), center=(1.01, 0, 0), spacing=0.5)
    assert not annotate_contacts(a, apart, threshold=0.0).labels.any()


# ---------------------------------------------------------------- contact metrics


def _plate_pair():
    body = box_mesh((1, 0.1, 1), spacing=0.25)
    obj = box_mesh((1, 0.1, 1), center=(0, 0.11, 0), spacing=0.25)
    return body, obj


def test_contact_metrics_examples():
    body, obj = _plate_pair()
    gt = np.zeros(obj.n_vertices, bool)
    gt[:5] = True
    s = contact_metrics(np.arange(5), gt, body, obj)
    assert s.precision == 1.0 and s.recall == 1.0
    s = contact_metrics([], gt, body, obj)
    assert s.precision is None and s.recall == 0.0
    s = contact_metrics([1, 2], np.zeros(obj.n_vertices, bool), body, obj)
    assert s.recall is None and s.mean_gap is None and s.precision == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_contact_metrics_match_counts(seed):
    body, obj = _plate_pair()
    rng = np.random.default_rng(seed)
    n = obj.n_vertices
    gt = rng.random(n) < 0.3
    pred = np.flatnonzero(rng.random(n) < 0.3)
    s = contact_metrics(pred, gt, body, obj)
    tp = len(set(pred) & set(np.flatnonzero(gt)))
    if len(pred):
        assert s.precision == tp / len(pred)
    if gt.any():
        assert s.recall == tp / gt.sum()
        want = brute_force_closest(obj.vertices[gt], body).distances.mean()
        assert s.mean_gap == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------- tracking


@pytest.fixture(scope="module")
def static_frames():
    return make_sequence(random_scene_spec("grasp", 3), "static", 5)


def test_static_track_is_stationary(static_frames):
    est = JointRegistration(config=FitConfig())
    assert est.get_params()["warm_start"] is True
    est.fit(static_frames)
    assert est.init_modes_ == ["scratch"] + ["warm"] * 4
    ref = est.results_[0]
    tpl, otpl = static_frames[0].template, static_frames[0].object_template
    b0, o0 = fitted_meshes(ref, tpl, otpl)
    for res in est.results_[1:]:
        b, o = fitted_meshes(res, tpl, otpl)
        assert v2v(b, b0) < 1e-3 and v2v(o, o0) < 1e-3
    assert len(est.reports_) == 5 and np.isfinite(est.score())
    assert len(est.predict()) == 5


class _Broken:
    def query(self, points, grad=False):
        raise HoifitError("provider offline")


def test_failed_frame_is_recorded_and_next_starts_fresh(static_frames):
    frames = static_frames[:3]
    cfg = FitConfig(n_query=1000, stage_iters=(3, 3, 3))

    def factory(frame):
        return _Broken() if frame is frames[1] else oracle_provider(frame)

    out = track_sequence(frames, factory, frames[0].template, frames[0].object_template, cfg)
    assert out.results[1] is None and "provider offline" in out.errors[1]
    assert out.init_modes == ["scratch", "failed", "scratch"]
    assert out.results[2] is not None and len(out.reports) == 2
    with pytest.raises(ValueError):
        track_sequence([], factory, frames[0].template, frames[0].object_template)


# ---------------------------------------------------------------- manifests


def test_frame_manifest_round_trip(tmp_path, grasp_frame):
    f = grasp_frame
    manifest.write_frame(tmp_path / "frame", f)
    g = manifest.read_frame(tmp_path / "frame")
    np.testing.assert_array_equal(g.cloud.points, f.cloud.points)
    np.testing.assert_array_equal(g.cloud.labels, f.cloud.labels)
    np.testing.assert_array_equal(g.body_params.to_vector(), f.body_params.to_vector())
    np.testing.assert_array_equal(g.object_pose.R, f.object_pose.R)
    np.testing.assert_array_equal(g.body_mesh.vertices, f.body_mesh.vertices)
    np.testing.assert_array_equal(g.contacts.labels, f.contacts.labels)
    for a, b in zip(g.joints2d, f.joints2d):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(g.cameras, f.cameras):
        np.testing.assert_array_equal(a.K, b.K)
        np.testing.assert_array_equal(a.R, b.R)


# ---------------------------------------------------------------- command line


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_fit_and_eval(tmp_path, capsys):
    code, out, _ = _run(capsys, "synth", "--workdir", tmp_path, "--kind", "grasp", "--seed", "3",
                        "--out", "toy")
    assert code == 0 and json.loads(out.splitlines()[-1])["status"] == "ok"
    code, out, err = _run(capsys, "fit", "--workdir", tmp_path, "--frame", "toy", "--provider", "oracle",
                          "--out", "res")
    assert code == 0, err
    for name in ("result.txt", "body.obj", "object.obj", "contacts.csv", "energy.csv"):
        assert (tmp_path / "res" / name).is_file()
    code, out, err = _run(capsys, "eval", "--workdir", tmp_path, "--result", "res", "--gt", "toy",
                          "--out", "m.csv")
    assert code == 0, err
    header, row = (tmp_path / "m.csv").read_text().splitlines()[:2]
    metrics = dict(zip(header.split(","), row.split(",")))
    assert float(metrics["body_v2v"]) < 0.01
    assert float(metrics["object_v2v"]) < 0.01

    code, _, err = _run(capsys, "eval", "--workdir", tmp_path, "--result", "toy", "--gt", "toy",
                        "--out", "gt.csv")
    assert code == 0, err
    header, row = (tmp_path / "gt.csv").read_text().splitlines()[:2]
    m = dict(zip(header.split(","), row.split(",")))
    for k in ("body_v2v", "object_v2v", "body_chamfer", "object_chamfer"):
        assert float(m[k]) == 0.0
    assert float(m["contact_precision"]) == 1.0 and float(m["contact_recall"]) == 1.0

    code, _, err = _run(capsys, "annotate", "--workdir", tmp_path, "--body", "toy/meshes/body.obj",
                        "--object", "toy/meshes/object.obj", "--out", "ann.csv")
    assert code == 0, err
    assert len((tmp_path / "ann.csv").read_text().splitlines()) > 1


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    code, _, err = _run(capsys, "fit", "--workdir", tmp_path, "--frame", "missing", "--out", "r")
    assert code != 0
    line = json.loads(err.strip().splitlines()[-1])
    assert line["status"] == "error" and line["command"] == "fit"
    assert not (tmp_path / "r").exists()
    code, _, err = _run(capsys, "bogus")
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["type"] == "UsageError"
    (tmp_path / "bad.cfg").write_text("w_nonsense = 1\n")
    code, _, err = _run(capsys, "synth", "--workdir", tmp_path, "--seed", "3", "--out", "toy")
    code, _, err = _run(capsys, "fit", "--workdir", tmp_path, "--frame", "toy", "--config", "bad.cfg",
                        "--out", "r2")
    assert code == 1 and "w_nonsense" in json.loads(err.strip().splitlines()[-1])["message"]
    assert not (tmp_path / "r2").exists()


def test_cli_synth_sequence(tmp_path, capsys):
    code, _, err = _run(capsys, "synth", "--workdir", tmp_path, "--kind", "grasp", "--seed", "3",
                        "--frames", "3", "--script", "static", "--out", "seq")
    assert code == 0, err
    assert manifest.is_sequence(tmp_path / "seq")
    assert len(manifest.read_sequence(tmp_path / "seq")) == 3


def test_cli_train_then_fit_with_learned_provider(tmp_path, capsys):
    (tmp_path / "tiny.cfg").write_text("levels = 2\nresolution = 16\nhidden = 8 8\n"
                                       "points_per_scene = 300\nbatch_size = 64\n")
    (tmp_path / "quick.cfg").write_text("n_query = 1000\nstage_iters = 3 3 3\n")
    code, _, err = _run(capsys, "train", "--workdir", tmp_path, "--scenes", "2", "--steps", "5",
                        "--config", "tiny.cfg", "--out", "net")
    assert code == 0, err
    assert (tmp_path / "net" / "decoder.bin").is_file()
    assert len((tmp_path / "net" / "loss.csv").read_text().splitlines()) > 1
    _run(capsys, "synth", "--workdir", tmp_path, "--seed", "3", "--out", "toy")
    code, out, err = _run(capsys, "fit", "--workdir", tmp_path, "--frame", "toy", "--provider", "net",
                          "--config", "quick.cfg", "--out", "res")
    assert code == 0, err
    assert (tmp_path / "res" / "result.txt").is_file()
