"""Concatenation baseline: a next-step predictor over per-channel embeddings.

Each channel's current state is embedded by its own encoder, embeddings are
randomly dropped (each with probability ``drop_prob``, at least one kept),
concatenated, and a shared trunk predicts every channel's state one grid step
later. Four variants: NLL or MSE loss, with or without the time input.

All states are handled in the same standardized units as the main model; the
statistics and the mean start state of each trajectory channel are stored as
non-trainable arrays (``norm.*``, ``init.*``).
"""
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dataspec import CANONICAL_T, ModelParameters, uniform_times
from .model import (ChannelPrediction, TrainConfig, augment_image, channel_statistics,
                    spread_time_kinks)

VARIANTS = {
    "nll-with-time": ("nll", True),
    "nll-without-time": ("nll", False),
    "mse-with-time": ("mse", True),
    "mse-without-time": ("mse", False),
}

DEFAULT_HYPER = {
    "embed_dim": 128,
    "hidden": 128,
    "conv_widths": [16, 32, 64],
    "kernel": 4,
    "T": CANONICAL_T,
    "batch": 10,
    "drop_prob": 0.5,
    "sigma_floor": 1e-4,
    # same input conditioning as the main model, so the comparison is fair
    "time_init_scale": 4.0,
    "image_jitter": 0.05,
}


@dataclass
class BaselineConfig:
    iterations: int = 30000
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_start: float = 0.5  # same schedule as the main model

    lr_at = TrainConfig.lr_at


def variant_of(hyper):
    name = hyper["variant"]
    if name not in VARIANTS:
        raise ValueError(f"unknown baseline variant {name!r}; valid: {', '.join(VARIANTS)}")
    return VARIANTS[name]


def expected_shapes(hyper, channels):
    loss, with_time = variant_of(hyper)
    E, H, k = hyper["embed_dim"], hyper["hidden"], hyper["kernel"]
    extra = 1 if with_time else 0
    out_mult = 2 if loss == "nll" else 1
    shapes = {}
    for c in channels:
        p = c.name
        if c.kind == "trajectory":
            dims = [(c.dim + extra, H), (H, H), (H, E)]
            for i, (a, b) in enumerate(dims):
                shapes[f"enc.{p}.{i}.W"], shapes[f"enc.{p}.{i}.b"] = (a, b), (b,)
            shapes[f"head.{p}.W"], shapes[f"head.{p}.b"] = (H, out_mult * c.dim), (out_mult * c.dim,)
            shapes[f"norm.{p}.offset"] = shapes[f"norm.{p}.scale"] = (c.dim,)
            shapes[f"init.{p}"] = (c.dim,)
        else:
            widths = list(hyper["conv_widths"])
            h, w = c.height >> len(widths), c.width >> len(widths)
            cin = 1
            for i, cout in enumerate(widths):
                shapes[f"enc.{p}.conv{i}.W"], shapes[f"enc.{p}.conv{i}.b"] = (cout, cin, k, k), (cout,)
                cin = cout
            flat = widths[-1] * h * w
            shapes[f"enc.{p}.fc.W"], shapes[f"enc.{p}.fc.b"] = (flat + extra, E), (E,)
            shapes[f"dec.{p}.fc.W"], shapes[f"dec.{p}.fc.b"] = (H, flat), (flat,)
            cin = widths[-1]
            for i, cout in enumerate(list(reversed(widths[:-1])) + [1]):
                shapes[f"dec.{p}.deconv{i}.W"], shapes[f"dec.{p}.deconv{i}.b"] = (cin, cout, k, k), (cout,)
                cin = cout
            if loss == "nll":
                shapes[f"dec.{p}.sigma.W"], shapes[f"dec.{p}.sigma.b"] = (H, 1), (1,)
            shapes[f"norm.{p}.offset"] = shapes[f"norm.{p}.scale"] = (1,)
    n = len(channels)
    shapes["trunk.0.W"], shapes["trunk.0.b"] = (n * E, H), (H,)
    shapes["trunk.1.W"], shapes["trunk.1.b"] = (H, H), (H,)
    return shapes


def is_trainable(name):
    return not (name.startswith("norm.") or name.startswith("init."))


def init_params(channels, variant, hyper=None, seed=0, dataset=None):
    hyper = dict(DEFAULT_HYPER, **(hyper or {}), variant=variant)
    variant_of(hyper)
    rng = np.random.default_rng(seed)
    stats = channel_statistics(channels, dataset)
    arrays = {}
    for name, shape in expected_shapes(hyper, channels).items():
        parts = name.split(".")
        if parts[0] == "norm":
            arrays[name] = stats[parts[1]][0 if parts[2] == "offset" else 1].copy()
        elif parts[0] == "init":
            starts = [s.values[parts[1]][0] for s in (dataset.samples if dataset else [])
                      if parts[1] in s.values]
            arrays[name] = np.mean(starts, axis=0) if starts else stats[parts[1]][0].copy()
        elif name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            if ".deconv" in name:
                fan_in = shape[0] * shape[2] * shape[3] // 4
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            arrays[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if VARIANTS[variant][1]:
        for c in channels:
            if c.kind == "trajectory":
                spread_time_kinks(arrays[f"enc.{c.name}.0.W"], arrays[f"enc.{c.name}.0.b"],
                                  -1, hyper["time_init_scale"], rng)
    return ModelParameters(hyper, list(channels), arrays, kind="baseline")


def _normalize(params, name, v):
    return (v - params.arrays[f"norm.{name}.offset"]) / params.arrays[f"norm.{name}.scale"]


def _denormalize(params, name, v):
    return v * params.arrays[f"norm.{name}.scale"] + params.arrays[f"norm.{name}.offset"]


# --------------------------------------------------------------------------
# forward pass

def _embed(P, hyper, channel, state, t, with_time):
    """(B, E) embedding of a channel's state at times ``t`` (B,)."""
    p = channel.name
    B = t.shape[0]
    if channel.kind == "trajectory":
        x = np.concatenate([state, t[:, None]], axis=1) if with_time else state
        for i in range(3):
            x = nx.linear(x, P[f"enc.{p}.{i}.W"], P[f"enc.{p}.{i}.b"])
            if i < 2:
                x = nx.relu(x)
        return x
    x = state.reshape(1, 1, *channel.shape)
    n_conv = len(hyper["conv_widths"])
    for i in range(n_conv):
        x = nx.relu(nx.conv2d(x, P[f"enc.{p}.conv{i}.W"], P[f"enc.{p}.conv{i}.b"],
                              stride=2, pad=1))
    feats = nx.repeat_rows(nx.reshape(x, (-1,)), B)
    if with_time:
        feats = nx.concat_cols([feats, t[:, None]])
    return nx.linear(feats, P[f"enc.{p}.fc.W"], P[f"enc.{p}.fc.b"])


def _forward(P, hyper, channels, states, t, mask):
    """Next-step predictions in standardized units.

    ``states`` maps channel name to (B, dim) arrays (or an H x W image);
    ``mask`` is (B, n_channels) of 0/1 keep flags. Returns name -> (mu, sigma)
    with sigma None for the MSE variants; images come out as (1, H*W),
    decoded from the first row only.
    """
    loss, with_time = variant_of(hyper)
    E = hyper["embed_dim"]
    B = t.shape[0]
    embs = []
    for j, c in enumerate(channels):
        if c.name in states:
            e = _embed(P, hyper, c, states[c.name], t, with_time)
            embs.append(nx.mul(e, np.repeat(mask[:, j:j + 1], E, axis=1)))
        else:
            embs.append(nx.Tensor(np.zeros((B, E))))
    h = nx.concat_cols(embs)
    for i in range(2):
        h = nx.relu(nx.linear(h, P[f"trunk.{i}.W"], P[f"trunk.{i}.b"]))
    floor = hyper["sigma_floor"]
    out = {}
    for c in channels:
        p = c.name
        if c.kind == "trajectory":
            y = nx.linear(h, P[f"head.{p}.W"], P[f"head.{p}.b"])
            if loss == "nll":
                sigma = nx.add_const(nx.softplus(nx.take_cols(y, c.dim, 2 * c.dim)), floor)
                out[p] = (nx.take_cols(y, 0, c.dim), sigma)
            else:
                out[p] = (y, None)
            continue
        # the image is static, so only the first transition of the batch
        # decodes it (a selector matmul keeps this differentiable)
        h0 = nx.matmul(np.eye(1, B), h)
        x = nx.relu(nx.linear(h0, P[f"dec.{p}.fc.W"], P[f"dec.{p}.fc.b"]))
        c0 = P[f"dec.{p}.deconv0.W"].shape[0]
        side = int(round(np.sqrt(x.shape[1] // c0)))
        x = nx.reshape(x, (1, c0, side, side))
        n_deconv = len(hyper["conv_widths"])
        for i in range(n_deconv):
            x = nx.deconv2d(x, P[f"dec.{p}.deconv{i}.W"], P[f"dec.{p}.deconv{i}.b"],
                            stride=2, pad=1)
            if i < n_deconv - 1:
                x = nx.relu(x)
        mu = nx.reshape(x, (1, c.height * c.width))
        sigma = None
        if loss == "nll":
            s = nx.add_const(nx.softplus(nx.linear(h0, P[f"dec.{p}.sigma.W"],
                                                   P[f"dec.{p}.sigma.b"])), floor)
            sigma = nx.matmul(s, np.ones((1, c.height * c.width)))
        out[p] = (mu, sigma)
    return out


def _loss(preds, targets, loss):
    terms = []
    for name, y in targets.items():
        mu, sigma = preds[name]
        terms.append(nx.gaussian_nll(mu, sigma, y) if loss == "nll" else nx.mse(mu, y))
    return terms[0] if len(terms) == 1 else nx.mean_scalars(terms)


def draw_mask(rng, rows, available, drop_prob):
    """(rows, C) keep flags; each row keeps at least one available channel."""
    mask = np.zeros((rows, len(available)))
    for r in range(rows):
        while True:
            keep = (rng.random(len(available)) >= drop_prob) & available
            if keep.any():
                break
        mask[r] = keep
    return mask


class BaselineTrainer:
    def __init__(self, params, config=None):
        self.config = config or BaselineConfig()
        self.base = params
        self.hyper = dict(params.hyper)
        self.channels = list(params.channels)
        self.loss_kind, self.with_time = variant_of(self.hyper)
        self.frozen = {k: v for k, v in params.arrays.items() if not is_trainable(k)}
        self.pset = nx.ParameterSet({k: v for k, v in params.arrays.items() if is_trainable(k)})
        c = self.config
        self.adam = nx.AdamState.for_size(len(self.pset), lr=c.lr, beta1=c.beta1,
                                          beta2=c.beta2, eps=c.eps)

    def params(self):
        arrays = {k: (self.frozen[k] if k in self.frozen else self.pset[k].data).copy()
                  for k in self.base.arrays}
        return ModelParameters(dict(self.hyper), list(self.channels), arrays, kind="baseline")

    def draw(self, sample, rng):
        T, B = self.hyper["T"], self.hyper["batch"]
        idx = rng.integers(0, T - 1, size=B)
        grid = uniform_times(T)
        available = np.array([c.name in sample.values for c in self.channels])
        mask = draw_mask(rng, B, available, self.hyper["drop_prob"])
        states, targets = {}, {}
        for c in self.channels:
            if c.name not in sample.values:
                continue
            v = _normalize(self.base, c.name, sample.values[c.name])
            if c.kind == "trajectory":
                states[c.name], targets[c.name] = v[idx], v[idx + 1]
            else:
                raw = augment_image(sample.values[c.name], self.hyper, rng)
                states[c.name] = _normalize(self.base, c.name, raw)
                targets[c.name] = v.reshape(1, -1)
        return states, grid[idx], mask, targets

    def loss(self, draw):
        states, t, mask, targets = draw
        P = dict(self.pset.tensors)
        preds = _forward(P, self.hyper, self.channels, states, t, mask)
        return _loss(preds, targets, self.loss_kind)

    def step(self, sample, rng):
        d = self.draw(sample, rng)
        tape = self.pset.bind()
        loss = self.loss(d)
        tape.backward(loss)
        nx.adam_step(self.pset.flat, self.pset.flat_grad, self.adam)
        self.pset.detach()
        return float(loss.data)


def baseline_train(dataset, variant, config=None, hyper=None, callback=None):
    """Train one baseline variant; returns ``(params, losses)``."""
    config = config or BaselineConfig()
    params = init_params(dataset.channels, variant, hyper, seed=config.seed, dataset=dataset)
    if config.iterations > 0 and not dataset.samples:
        raise ValueError("no training samples")
    trainer = BaselineTrainer(params, config)
    rng = np.random.default_rng(config.seed)
    losses = []
    for it in range(config.iterations):
        sample = dataset.samples[int(rng.integers(len(dataset.samples)))]
        trainer.adam.lr = config.lr_at(it)
        losses.append(trainer.step(sample, rng))
        if callback is not None:
            callback(it + 1, losses[-1])
    return trainer.params(), np.array(losses)


def _on_grid(obs, T):
    """Observed ``[t, values]`` rows interpolated onto the canonical grid."""
    obs = np.asarray(obs, dtype=np.float64)
    order = np.argsort(obs[:, 0], kind="stable")
    t, v = obs[order, 0], obs[order, 1:]
    grid = uniform_times(T)
    return np.stack([np.interp(grid, t, v[:, d]) for d in range(v.shape[1])], axis=1)


def baseline_rollout(params, request):
    """Autoregressive T-step rollout.

    Observed trajectory channels are teacher-forced with their (grid
    interpolated) values; an observed image is embedded at every step. Every
    other trajectory channel starts from the training-set mean start state and
    is fed its own predictions afterwards; an unobserved image is dropped.
    Returns name -> :class:`ChannelPrediction` with (T, dim) trajectories and
    the final predicted image.
    """
    request.validate(params.channels)
    hyper = params.hyper
    loss, _ = variant_of(hyper)
    T = hyper["T"]
    grid = uniform_times(T)
    channels = params.channels
    P = {k: nx.Tensor(v, name=k) for k, v in params.arrays.items()}
    forced, traj = {}, {}
    for c in channels:
        if c.kind != "trajectory":
            continue
        if c.name in request.observed:
            forced[c.name] = _normalize(params, c.name, _on_grid(request.observed[c.name], T))
            traj[c.name] = [forced[c.name][0]]
        else:
            traj[c.name] = [_normalize(params, c.name, params.arrays[f"init.{c.name}"])]
    sig = {name: [np.zeros_like(rows[0])] for name, rows in traj.items()}
    image_obs = {c.name: _normalize(params, c.name, np.asarray(request.observed[c.name]))
                 for c in channels if c.kind == "image" and c.name in request.observed}
    mask = np.array([[1.0 if (c.kind == "trajectory" or c.name in image_obs) else 0.0
                      for c in channels]])
    image_pred = {}
    for i in range(T - 1):
        states = {n: rows[-1][None, :] for n, rows in traj.items()}
        states.update(image_obs)
        preds = _forward(P, hyper, channels, states, grid[i:i + 1], mask)
        for c in channels:
            mu, sigma = preds[c.name]
            if c.kind == "image":
                image_pred[c.name] = (mu.data[0], None if sigma is None else float(sigma.data[0, 0]))
                continue
            nxt = forced[c.name][i + 1] if c.name in forced else mu.data[0]
            traj[c.name].append(nxt)
            sig[c.name].append(np.zeros(c.dim) if sigma is None else sigma.data[0])
    out = {}
    for name in request.outputs:
        c = params.channel(name)
        scale = params.arrays[f"norm.{name}.scale"]
        if c.kind == "image":
            mu, s = image_pred[name]
            out[name] = ChannelPrediction(_denormalize(params, name, mu.reshape(c.shape)),
                                          0.0 if s is None else s * float(scale[0]))
        else:
            mean = _denormalize(params, name, np.array(traj[name]))
            std = np.array(sig[name]) * scale
            if request.times is not None:
                t = np.asarray(request.times, dtype=np.float64)
                mean = np.stack([np.interp(t, grid, mean[:, d]) for d in range(c.dim)], axis=1)
                std = np.stack([np.interp(t, grid, std[:, d]) for d in range(c.dim)], axis=1)
            out[name] = ChannelPrediction(mean, std)
    return out


__all__ = ["VARIANTS", "BaselineConfig", "BaselineTrainer", "baseline_rollout",
           "baseline_train", "draw_mask", "expected_shapes", "init_params"]
