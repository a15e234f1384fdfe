import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from affordance import model, numerics as nx, synthgen
from affordance.dataspec import (AffordanceSample, Dataset, GenerationRequest,
                                 image_channel, trajectory_channel)

SMALL = {"latent_dim": 6, "hidden": 8, "conv_widths": [2, 2, 2], "kernel": 4,
         "T": 5, "max_context": 3, "n_targets": 4}


def channels():
    return [image_channel("object", 8, 8),
            trajectory_channel("effect", 1, "newtons", length=5),
            trajectory_channel("a1", 2, "radians", agent="a1", length=5),
            trajectory_channel("a2", 3, "radians", agent="a2", length=5)]


def dataset(n=4, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        values = {"object": rng.uniform(0.5, 1.0, (8, 8)), "effect": rng.normal(size=(5, 1)),
                  "a1": rng.normal(size=(5, 2))}
        if i % 2:
            values["a2"] = rng.normal(size=(5, 3))
        samples.append(AffordanceSample(values, {"split": "train"}))
    return Dataset(channels(), samples)


@pytest.fixture(scope="module")
def params():
    return model.init_params(channels(), SMALL, seed=1, dataset=dataset())


def latents(params, sample):
    P = model._tensors(params)
    out = {}
    for c in params.channels:
        if c.name in sample.values:
            obs = model.full_observation(c, sample.values[c.name])
            out[c.name] = model.encode_channel(P, c, obs)
    return out


# --- shapes and initialization

def test_expected_shapes_cover_arrays(params):
    shapes = model.expected_shapes(params.hyper, params.channels)
    assert set(shapes) == set(params.arrays)
    for k, v in params.arrays.items():
        assert v.shape == tuple(shapes[k])
    assert shapes["enc.object.fc.W"] == (2, 6)  # 8 -> 4 -> 2 -> 1 px, 2 channels
    assert shapes["dec.a2.2.W"] == (8, 6)  # mean and std per dim


def test_normalization_is_frozen_training_statistics(params):
    d = dataset()
    eff = np.concatenate([s.values["effect"] for s in d.samples])
    np.testing.assert_allclose(params.arrays["norm.effect.offset"], eff.mean(axis=0))
    assert not model.is_trainable("norm.effect.offset")
    assert model.is_trainable("enc.effect.0.W")


def test_time_kinks_inside_unit_interval(params):
    W, b = params.arrays["dec.effect.0.W"], params.arrays["dec.effect.0.b"]
    switch = -b / W[-1]
    assert np.all((switch >= 0) & (switch <= 1))
    W, b = params.arrays["enc.a1.0.W"], params.arrays["enc.a1.0.b"]
    assert np.all((-b / W[0] >= 0) & (-b / W[0] <= 1))


def test_init_deterministic():
    a = model.init_params(channels(), SMALL, seed=3, dataset=dataset())
    b = model.init_params(channels(), SMALL, seed=3, dataset=dataset())
    c = model.init_params(channels(), SMALL, seed=4, dataset=dataset())
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    assert not np.array_equal(a.arrays["enc.a1.1.W"], c.arrays["enc.a1.1.W"])


# --- encoders

def test_observation_order_invariance(params):
    c = params.channel("a1")
    P = model._tensors(params)
    obs = np.array([[0.0, 1.0, 2.0], [0.5, -1.0, 0.3], [1.0, 0.2, 0.1]])
    z1 = model.encode_channel(P, c, obs).data
    z2 = model.encode_channel(P, c, obs[::-1]).data
    np.testing.assert_allclose(z1, z2, rtol=0, atol=1e-14)


def test_duplicate_observation_is_idempotent(params):
    c = params.channel("a1")
    P = model._tensors(params)
    obs = np.array([[0.25, 1.0, 2.0]])
    # equal up to BLAS choosing a different kernel for 1 vs 2 rows
    np.testing.assert_allclose(model.encode_channel(P, c, obs).data,
                               model.encode_channel(P, c, np.vstack([obs, obs])).data,
                               rtol=1e-12, atol=1e-15)


def test_encoder_errors(params):
    P = model._tensors(params)
    with pytest.raises(ValueError):
        model.encode_channel(P, params.channel("a1"), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        model.encode_channel(P, params.channel("a1"), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        model.encode_channel(P, params.channel("a1"), np.array([[1.5, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        model.encode_channel(P, params.channel("object"), np.zeros((4, 4)))


# --- blending

def test_one_hot_blend_is_bitwise_channel_latent(params):
    s = dataset().samples[1]
    lat = latents(params, s)
    for name in lat:
        w = model.BlendWeights.flat({name: 1.0}, params.channels)
        z = model.blend({name: lat[name]}, w, params.channels).data
        assert z.tobytes() == lat[name].data.tobytes()


def test_hierarchical_blend_value(params):
    s = dataset().samples[1]
    lat = latents(params, s)
    w = model.BlendWeights({"a1": 0.25, "a2": 0.75, "effect": 1.0, "object": 1.0},
                           {"action": 0.5, "effect": 0.3, "object": 0.2})
    z = model.blend(lat, w, params.channels).data
    expect = 0.5 * (0.25 * lat["a1"].data + 0.75 * lat["a2"].data) \
        + 0.3 * lat["effect"].data + 0.2 * lat["object"].data
    np.testing.assert_allclose(z, expect, rtol=0, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_sampled_blend_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    names = ["object", "effect", "a1", "a2"]
    w = model.sample_blend_weights(names, channels(), rng)
    w.validate(channels(), set(names))
    eff = w.effective(channels())
    assert all(v >= 0 for v in eff.values())
    assert sum(eff.values()) == pytest.approx(1.0, abs=1e-12)


def test_blend_weight_validation(params):
    lat = latents(params, dataset().samples[0])
    ch = params.channels
    bad = [
        model.BlendWeights({"effect": 1.0}, {"effect": 0.7}),
        model.BlendWeights({"effect": 1.5}, {"effect": 1.0}),
        model.BlendWeights({"a2": 1.0}, {"action": 1.0}),  # a2 missing from sample 0
        model.BlendWeights({"a1": 0.5}, {"action": 1.0}),
    ]
    for w in bad:
        with pytest.raises(ValueError):
            model.blend(lat, w, ch)


# --- NLL

@pytest.mark.parametrize("mu,sigma,y,expected", [
    (0.0, 1.0, 0.0, 0.9189385332),
    (1.0, 1.0, 0.0, 1.4189385332),
    (0.0, 1e-4, 0.0, -8.2914018),  # log(1e-4) + 0.5 log(2 pi)
])
def test_nll_values(mu, sigma, y, expected):
    pred = {"x": (nx.Tensor(np.array([[mu]])), nx.Tensor(np.array([[sigma]])))}
    assert float(model.nll_loss(pred, {"x": np.array([[y]])}).data) == pytest.approx(expected, abs=1e-7)


def test_nll_averages_channels():
    one = {"a": (nx.Tensor(np.zeros((1, 1))), nx.Tensor(np.ones((1, 1))))}
    two = dict(one, b=(nx.Tensor(np.ones((1, 1))), nx.Tensor(np.ones((1, 1)))))
    v = float(model.nll_loss(two, {"a": np.zeros((1, 1)), "b": np.zeros((1, 1))}).data)
    assert v == pytest.approx((0.9189385332 + 1.4189385332) / 2)


def test_sigma_floor(params):
    P = model._tensors(params)
    z = nx.Tensor(np.full(6, -1e6))
    _, sigma = model.decode_channel(P, params.channel("a1"), z, np.linspace(0, 1, 5))
    # softplus underflows to 0, leaving exactly the floor (added after scaling)
    np.testing.assert_array_equal(sigma.data, 1e-4)


# --- generation

def test_generate_shapes_and_determinism(params):
    s = dataset().samples[1]
    req = model.request_from_sample(params, s, ["object", "effect"], ["a1", "a2", "object"])
    a = model.generate(params, req)
    b = model.generate(params, req)
    assert a["a1"].mean.shape == (5, 2) and a["a2"].std.shape == (5, 3)
    assert a["object"].mean.shape == (8, 8) and isinstance(a["object"].std, float)
    for k in a:
        assert a[k].mean.tobytes() == b[k].mean.tobytes()


def test_generate_custom_times(params):
    s = dataset().samples[0]
    req = model.request_from_sample(params, s, ["effect"], ["a1"], times=np.array([0.0, 0.3]))
    assert model.generate(params, req)["a1"].mean.shape == (2, 2)


def test_generate_rejects_empty_and_unknown(params):
    with pytest.raises(ValueError):
        model.generate(params, GenerationRequest({}, ["a1"]))
    with pytest.raises(KeyError):
        model.generate(params, GenerationRequest({"effect": np.zeros((1, 2))}, ["nope"]))


# --- training

def test_draw_subset_rules(params):
    trainer = model.Trainer(params)
    only_effect = AffordanceSample({"effect": np.zeros((5, 1))})
    ctx, w, tgt = trainer.draw(only_effect, np.random.default_rng(0))
    assert set(ctx) == {"effect"} and set(tgt) == {"effect"}
    s = dataset().samples[1]
    rng = np.random.default_rng(0)
    full = 0
    for _ in range(400):
        ctx, w, tgt = trainer.draw(s, rng)
        assert ctx and set(tgt) == set(s.values)
        for n, obs in ctx.items():
            if n != "object":
                assert 1 <= len(obs) <= SMALL["max_context"]
        full += set(ctx) == set(s.values)
    # P(full) = 0.5 + 0.5 / 15
    assert 0.45 < full / 400 < 0.62


def test_zero_iterations_unchanged(params):
    final, snaps, losses = model.train(params, dataset(), model.TrainConfig(iterations=0))
    assert len(losses) == 0 and len(snaps) == 1
    assert all(np.array_equal(final.arrays[k], params.arrays[k]) for k in params.arrays)


def test_snapshot_count(params):
    _, snaps, _ = model.train(params, dataset(),
                              model.TrainConfig(iterations=100, snapshot_every=10))
    assert [s for s, _ in snaps] == list(range(0, 100, 10)) + [100]


def test_training_is_deterministic(params):
    cfg = model.TrainConfig(iterations=20, snapshot_every=0, seed=5)
    a, _, la = model.train(params, dataset(), cfg)
    b, _, lb = model.train(params, dataset(), cfg)
    assert np.array_equal(la, lb)
    assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)


def test_frozen_arrays_stay_fixed(params):
    final, _, _ = model.train(params, dataset(), model.TrainConfig(iterations=10, snapshot_every=0))
    for k in params.arrays:
        same = np.array_equal(final.arrays[k], params.arrays[k])
        if k.startswith("norm."):
            assert same, k
        elif k.startswith(("enc.a1.", "dec.a1.", "dec.effect.")):
            assert not same, k


def test_channel_mismatch_rejected(params):
    other = Dataset([image_channel("object", 8, 8)], [AffordanceSample({"object": np.zeros((8, 8))})])
    with pytest.raises(ValueError):
        model.train(params, other, model.TrainConfig(iterations=1))


def test_lr_schedule():
    cfg = model.TrainConfig(iterations=100, lr=1.0, decay_start=0.5)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(49) == 1.0
    assert cfg.lr_at(50) == 1.0 and cfg.lr_at(75) == 0.5 and cfg.lr_at(99) == pytest.approx(0.02)
    assert model.TrainConfig(iterations=10, decay_start=1.0).lr_at(9) == 3e-4


def test_continue_training_replays_both_pools(params):
    seen = []
    old, new = dataset(2, seed=1), dataset(2, seed=2)
    ids = {id(s): "old" for s in old.samples}
    ids.update({id(s): "new" for s in new.samples})
    orig = model.Trainer.step

    def spy(self, sample, rng):
        seen.append(ids[id(sample)])
        return orig(self, sample, rng)

    model.Trainer.step = spy
    try:
        model.continue_training(params, old, new, model.TrainConfig(iterations=60, snapshot_every=0))
    finally:
        model.Trainer.step = orig
    assert 15 < seen.count("old") < 45 and seen.count("new") == 60 - seen.count("old")


@pytest.mark.slow
def test_loss_decreases_on_insertability():
    d = synthgen.generate(synthgen.ScenarioConfig("insertability", seed=0, noise=0.0)).split("train")
    p = model.init_params(d.channels, seed=0, dataset=d)
    _, _, losses = model.train(p, d, model.TrainConfig(iterations=2000, snapshot_every=0))
    assert losses[-200:].mean() < losses[:200].mean()
