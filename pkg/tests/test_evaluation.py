import csv

import numpy as np
import pytest

from affordance import evaluation as ev, model, synthgen
from affordance.dataspec import AffordanceSample, Dataset, image_channel, trajectory_channel
from affordance.model import ChannelPrediction


def toy():
    ch = [image_channel("object", 8, 8), trajectory_channel("effect", 1, "newtons", length=5),
          trajectory_channel("arm", 2, "radians", agent="arm", length=5)]
    rng = np.random.default_rng(0)
    samples = [AffordanceSample({"object": rng.uniform(size=(8, 8)), "effect": rng.normal(size=(5, 1)),
                                 "arm": rng.normal(size=(5, 2))}, {"object_id": str(i)})
               for i in range(3)]
    return Dataset(ch, samples)


@pytest.fixture(scope="module")
def params():
    d = toy()
    return model.init_params(d.channels, {"latent_dim": 4, "hidden": 4, "conv_widths": [2, 2, 2],
                                          "T": 5}, dataset=d)


def test_configurations_enumerate_all_subsets():
    d = toy()
    cfgs = ev.configurations(d.channels)
    assert len(cfgs) == 2 ** 3 - 1
    assert len(set(cfgs)) == 7
    assert ev.configurations(d.channels, [["arm", "object"], "effect"]) == \
        [("object", "arm"), ("effect",)]
    with pytest.raises(KeyError):
        ev.configurations(d.channels, [["ghost"]])
    with pytest.raises(ValueError):
        ev.configurations(d.channels, [[]])


def oracle_predictor(dataset, sigma=1e-4):
    """Looks the sample up by its observed arm/effect/object payload."""
    def predict(params, request):
        for s in dataset.samples:
            for name, obs in request.observed.items():
                if name not in s.values:
                    break
                ref = model.full_observation(params.channel(name), s.values[name])
                if not np.array_equal(np.asarray(obs), ref):
                    break
            else:
                return {n: ChannelPrediction(s.values[n].copy(),
                                             sigma if n == "object" else np.full(s.values[n].shape, sigma))
                        for n in request.outputs}
        raise AssertionError("oracle could not find sample")
    return predict


def test_rms_table_oracle_is_zero(params):
    d = toy()
    rep = ev.rms_table(params, d, "all", predictor=oracle_predictor(d))
    assert len(rep.rows) == 7 * 3
    for r in rep.rows:
        assert r.rms == 0.0 and r.count == 3
        assert r.mean_sigma == pytest.approx(1e-4)


def test_rms_table_known_offset(params):
    d = toy()

    def off_by_one(p, request):
        out = oracle_predictor(d)(p, request)
        out["arm"].mean += 1.0
        return out

    rep = ev.rms_table(params, d, [["effect"]], predictor=off_by_one)
    assert rep.rms(("effect",), "arm") == pytest.approx(1.0)
    assert rep.rms(("effect",), "effect") == 0.0


def test_rms_table_against_truth_and_csv(params, tmp_path):
    d = toy()
    noisy = Dataset(d.channels, [AffordanceSample({k: v + (0.5 if k == "effect" else 0.0)
                                                   for k, v in s.values.items()}) for s in d.samples])
    pred = oracle_predictor(noisy)
    rep = ev.rms_table(params, noisy, [["object"]], truth=d, predictor=pred)
    assert rep.rms(("object",), "effect") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        ev.rms_table(params, noisy, "all", truth=Dataset(d.channels, d.samples[:1]), predictor=pred)
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert rows[0]["configuration"] == "object" and float(rows[1]["rms"]) == pytest.approx(0.5)
    assert rep.summary()["object"]["effect"]["units"] == "newtons"


def test_rms_table_skips_unavailable_configs(params):
    d = toy()
    d.samples[0].values.pop("arm")
    rep = ev.rms_table(params, d, [["arm"]], predictor=oracle_predictor(d))
    assert rep.get(("arm",), "effect").count == 2


def test_ambiguity_sigma_floor_stub(params):
    d = toy()
    scores = ev.ambiguity_scores(params, d, "all", predictor=oracle_predictor(d, 1e-4))
    assert all(v == pytest.approx(1e-4) for row in scores.values() for v in row.values())


def test_ambiguity_scores_are_mean_sigma(params):
    d = toy()
    scores = ev.ambiguity_scores(params, d, [["effect"]], predictor=oracle_predictor(d, 0.25))
    assert scores[("effect",)]["arm"] == pytest.approx(0.25)


# --- PCA / latent geometry

def test_pca_degenerate():
    proj, degenerate = ev.pca_2d(np.ones((5, 4)) * 3.0)
    assert degenerate and not proj.any()


def test_pca_rank_one_line():
    t = np.linspace(-1, 1, 7)
    X = np.outer(t, [3.0, 4.0, 0.0])
    proj, degenerate = ev.pca_2d(X)
    assert not degenerate
    np.testing.assert_allclose(np.abs(proj[:, 0]), np.abs(5.0 * t), atol=1e-12)
    np.testing.assert_allclose(proj[:, 1], 0.0, atol=1e-12)


def test_pca_rank_two_preserves_distances():
    rng = np.random.default_rng(4)
    coords = rng.normal(size=(9, 2)) * [3.0, 1.0]
    basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    proj, _ = ev.pca_2d(coords @ basis.T + 1.5)
    d_in = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    d_out = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-10)


def test_pca_sign_convention():
    X = np.random.default_rng(0).normal(size=(20, 3)) * [5.0, 1.0, 0.1]
    a, _ = ev.pca_2d(X)
    b, _ = ev.pca_2d(X * [-1.0, 1.0, 1.0])
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-10)


def test_silhouette_separated_and_collapsed():
    pts = np.array([[0, 0], [0, 0.01], [10, 0], [10, 0.01]])
    assert ev.silhouette(pts, ["a", "a", "b", "b"]) > 0.99
    assert ev.silhouette(np.zeros((4, 2)), ["a", "a", "b", "b"]) == 0.0
    with pytest.raises(ValueError):
        ev.silhouette(pts, ["a"] * 4)


def test_intra_class_distance():
    pts = np.array([[0, 0], [3, 4], [10, 0], [10, 2]])
    assert ev.intra_class_distance(pts, [0, 0, 1, 1]) == pytest.approx((5 + 2) / 2)


def test_latent_trace_shapes(params):
    d = toy()
    for i, s in enumerate(d.samples):
        s.meta["outcome"] = "x" if i else "y"
    trace = ev.latent_trace([(0, params), (1, params)], d, n_points=3)
    assert trace.points.shape == (2, 3, 2)
    np.testing.assert_array_equal(trace.points[0], trace.points[1])
    assert trace.labels == ["y", "x", "x"]
    with pytest.raises(ValueError):
        ev.latent_trace([(0, params)], d)


# --- curvature

def test_curvature_examples():
    flat = np.full((8, 8), 0.5)
    assert ev.mean_curvature(flat) == 0.0
    plateau = flat.copy()
    plateau[2:6, 2:6] = 0.8
    # interior 2x2 has Laplacian 0; each of the 8 edge pixels has one
    # background neighbour (|lap| 0.3) and each of the 4 corners two (0.6)
    assert ev.mean_curvature(plateau) == pytest.approx((8 * 0.3 + 4 * 0.6) / 16)
    # below the threshold nothing counts as object
    assert ev.mean_curvature(flat + 0.04) == 0.0


def test_curvature_translation_invariant():
    img = np.full((16, 16), 0.5)
    img[3:7, 4:9] = [[0.7, 0.8, 0.9, 0.8, 0.7]] * 4
    moved = np.roll(img, (5, 3), axis=(0, 1))
    assert ev.mean_curvature(moved) == ev.mean_curvature(img)


def test_sphere_render_curvier_than_cuboid():
    assert ev.mean_curvature(synthgen.render_shape("sphere")) > \
        ev.mean_curvature(synthgen.render_shape("cuboid"))


# --- transfer protocol plumbing

def test_effect_class():
    t = np.linspace(0, 1, 100)
    assert ev.effect_class(synthgen.push_displacement(t, "left", True), "left")
    assert not ev.effect_class(synthgen.push_displacement(t, "left", False), "left")
    assert type(ev.effect_class(synthgen.push_displacement(t, "left", True), "left")) is bool


def entry(**kw):
    e = {"name": "p", "initial": ["cuboid"], "new": "cone", "demo_agent": "kuka",
         "demo_direction": "left", "expected": {"transfer": True}}
    e.update(kw)
    return e


def test_load_protocols_validation():
    good = {"version": 1, "pretrain_iterations": 1, "continue_iterations": 1, "protocols": [entry()]}
    assert ev.load_protocols(good)["protocols"][0]["new"] == "cone"
    for bad in (dict(good, extra=1), dict(good, version=2), dict(good, scenario="graspability"),
                dict(good, protocols=[entry(new="pyramid")]),
                dict(good, protocols=[entry(demo_agent="baxter")]),
                dict(good, protocols=[entry(demo_direction="up")]),
                dict(good, protocols=[entry(colour="red")])):
        with pytest.raises(ValueError):
            ev.load_protocols(bad)


def test_transfer_result_matches():
    r = ev.TransferResult("p", [], "cone", True, False, {"transfer": True, "direction": False}, {})
    assert r.matches
    r.direction = True
    assert not r.matches
