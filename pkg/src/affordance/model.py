"""Per-channel encoders, convex latent blending and Gaussian decoders.

Trajectory channels are encoded point-wise from ``[t, value]`` rows and the
encodings averaged; the object image is encoded once. Channel latents are
blended hierarchically (agents within the action modality, then the
action/effect/object modalities) into one affordance latent, from which
every channel is decoded as a Gaussian at query times.

Values are standardized per channel with statistics frozen at
initialization; decoded means and standard deviations are returned in
channel units, with ``sigma = softplus(raw) * scale + sigma_floor``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dataspec import CANONICAL_T, GenerationRequest, ModelParameters, uniform_times

MODALITIES = ("action", "effect", "object")

DEFAULT_HYPER = {
    "latent_dim": 128,
    "hidden": 128,
    "conv_widths": [16, 32, 64],
    "kernel": 4,
    "T": CANONICAL_T,
    "max_context": 10,
    "n_targets": 10,
    "sigma_floor": 1e-4,
    "full_set_prob": 0.5,
    "time_init_scale": 4.0,
    "image_jitter": 0.05,
    "output_init_scale": 0.1,
}


@dataclass
class TrainConfig:
    iterations: int = 30000
    snapshot_every: int = 500
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_start: float = 0.5  # fraction of iterations after which lr decays linearly to 0

    def lr_at(self, it):
        """Learning rate for 0-based step ``it``."""
        start = int(self.decay_start * self.iterations)
        if it < start or self.iterations <= start:
            return self.lr
        return self.lr * (self.iterations - it) / (self.iterations - start)


@dataclass
class ChannelPrediction:
    mean: np.ndarray
    std: np.ndarray  # per (time, dim) for trajectories; scalar for images


# --------------------------------------------------------------------------
# parameters

def _conv_geometry(hyper, channel):
    widths = list(hyper["conv_widths"])
    h, w = channel.height, channel.width
    for _ in widths:
        h, w = h // 2, w // 2
    return widths, h, w


def expected_shapes(hyper, channels):
    """Every named array implied by ``hyper`` and ``channels``."""
    L, H, k = hyper["latent_dim"], hyper["hidden"], hyper["kernel"]
    shapes = {}
    for c in channels:
        p = c.name
        if c.kind == "trajectory":
            D = c.dim
            dims = [(D + 1, H), (H, H), (H, L)]
            for i, (a, b) in enumerate(dims):
                shapes[f"enc.{p}.{i}.W"], shapes[f"enc.{p}.{i}.b"] = (a, b), (b,)
            dims = [(L + 1, H), (H, H), (H, 2 * D)]
            for i, (a, b) in enumerate(dims):
                shapes[f"dec.{p}.{i}.W"], shapes[f"dec.{p}.{i}.b"] = (a, b), (b,)
            shapes[f"norm.{p}.offset"] = shapes[f"norm.{p}.scale"] = (D,)
        else:
            widths, h, w = _conv_geometry(hyper, c)
            cin = 1
            for i, cout in enumerate(widths):
                shapes[f"enc.{p}.conv{i}.W"], shapes[f"enc.{p}.conv{i}.b"] = (cout, cin, k, k), (cout,)
                cin = cout
            flat = widths[-1] * h * w
            shapes[f"enc.{p}.fc.W"], shapes[f"enc.{p}.fc.b"] = (flat, L), (L,)
            shapes[f"dec.{p}.fc.W"], shapes[f"dec.{p}.fc.b"] = (L, flat), (flat,)
            outs = list(reversed(widths[:-1])) + [1]
            cin = widths[-1]
            for i, cout in enumerate(outs):
                shapes[f"dec.{p}.deconv{i}.W"], shapes[f"dec.{p}.deconv{i}.b"] = (cin, cout, k, k), (cout,)
                cin = cout
            shapes[f"dec.{p}.sigma.W"], shapes[f"dec.{p}.sigma.b"] = (L, 1), (1,)
            shapes[f"norm.{p}.offset"] = shapes[f"norm.{p}.scale"] = (1,)
    return shapes


def is_trainable(name):
    return not name.startswith("norm.")


def channel_statistics(channels, dataset):
    """Per-dim mean/std of trajectories, scalar mean/std of images."""
    stats = {}
    for c in channels:
        vals = [s.values[c.name] for s in dataset.samples if c.name in s.values] if dataset else []
        if not vals:
            n = c.dim if c.kind == "trajectory" else 1
            stats[c.name] = (np.zeros(n), np.ones(n))
            continue
        if c.kind == "trajectory":
            stack = np.concatenate(vals, axis=0)
            mean, std = stack.mean(axis=0), stack.std(axis=0)
            std = np.maximum(std, max(0.1 * std.max(), 1e-3))
        else:
            stack = np.stack(vals)
            mean, std = np.array([stack.mean()]), np.array([max(stack.std(), 1e-3)])
        stats[c.name] = (mean, std)
    return stats


def init_params(channels, hyper=None, seed=0, dataset=None):
    """He-normal weights, zero biases, normalization from ``dataset``."""
    hyper = dict(DEFAULT_HYPER, **(hyper or {}))
    rng = np.random.default_rng(seed)
    shapes = expected_shapes(hyper, channels)
    stats = channel_statistics(channels, dataset)
    arrays = {}
    for name, shape in shapes.items():
        if name.startswith("norm."):
            ch, which = name.split(".")[1:]
            arrays[name] = stats[ch][0 if which == "offset" else 1].astype(np.float64).copy()
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
    # small output layers start every sigma near softplus(0) * scale; with
    # plain He init some start near the floor and the first NLL values explode
    for c in channels:
        last = [f"dec.{c.name}.2.W"] if c.kind == "trajectory" else [f"dec.{c.name}.sigma.W"]
        for name in last:
            arrays[name] *= hyper["output_init_scale"]
    for c in channels:
        if c.kind == "trajectory":
            spread_time_kinks(arrays[f"enc.{c.name}.0.W"], arrays[f"enc.{c.name}.0.b"],
                              0, hyper["time_init_scale"], rng)
            spread_time_kinks(arrays[f"dec.{c.name}.0.W"], arrays[f"dec.{c.name}.0.b"],
                              -1, hyper["time_init_scale"], rng)
    return ModelParameters(hyper, list(channels), arrays)


def spread_time_kinks(W, b, row, scale, rng):
    """Re-initialize the time-input row of a first layer in place.

    With He init and zero biases almost every relu unit switches at a time
    outside [0, 1], so the net starts nearly linear in t and learns the sharp
    profile changes very slowly. Drawing the time weights with std ``scale``
    and setting ``b = -w * u`` with ``u ~ U(0, 1)`` puts each unit's switch
    point at ``u``.
    """
    if not scale:
        return
    w = rng.standard_normal(W.shape[1]) * scale
    W[row] = w
    b[:] = -w * rng.uniform(0.0, 1.0, size=W.shape[1])


def _tensors(params):
    """Constant (tape-free) tensors for inference."""
    return {k: nx.Tensor(v, name=k) for k, v in params.arrays.items()}


# --------------------------------------------------------------------------
# encoders / decoders

def _mlp(P, prefix, x, depth=3):
    for i in range(depth):
        x = nx.linear(x, P[f"{prefix}.{i}.W"], P[f"{prefix}.{i}.b"])
        if i < depth - 1:
            x = nx.relu(x)
    return x


def _norm(P, channel):
    return P[f"norm.{channel.name}.offset"].data, P[f"norm.{channel.name}.scale"].data


def encode_channel(P, channel, observations):
    """Channel latent from ``(n, 1 + dim)`` ``[t, values]`` rows or an image.

    Trajectory encodings of the individual rows are averaged.
    """
    offset, scale = _norm(P, channel)
    if channel.kind == "image":
        img = np.asarray(observations, dtype=np.float64)
        if img.shape != channel.shape:
            raise ValueError(f"image for {channel.name!r} must be {channel.shape}")
        x = ((img - offset[0]) / scale[0]).reshape(1, 1, *channel.shape)
        n_conv = sum(1 for k in P if k.startswith(f"enc.{channel.name}.conv") and k.endswith(".W"))
        for i in range(n_conv):
            x = nx.relu(nx.conv2d(x, P[f"enc.{channel.name}.conv{i}.W"],
                                  P[f"enc.{channel.name}.conv{i}.b"], stride=2, pad=1))
        x = nx.reshape(x, (1, -1))
        z = nx.linear(x, P[f"enc.{channel.name}.fc.W"], P[f"enc.{channel.name}.fc.b"])
        return nx.reshape(z, (z.shape[1],))
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise ValueError(f"no observations for channel {channel.name!r}")
    if obs.shape[1] != channel.dim + 1:
        raise ValueError(f"observations for {channel.name!r} must have {channel.dim + 1} columns")
    t = obs[:, :1]
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(f"observation time outside [0, 1] for {channel.name!r}")
    x = np.concatenate([t, (obs[:, 1:] - offset) / scale], axis=1)
    return nx.mean_rows(_mlp(P, f"enc.{channel.name}", x))


def decode_channel(P, channel, latent, times=None, sigma_floor=1e-4):
    """(mean, std) tensors: (n, dim) for trajectories, (H, W) and scalar for images."""
    offset, scale = _norm(P, channel)
    if channel.kind == "image":
        pre = f"dec.{channel.name}"
        z = nx.reshape(latent, (1, -1))
        h = nx.relu(nx.linear(z, P[f"{pre}.fc.W"], P[f"{pre}.fc.b"]))
        n_deconv = sum(1 for k in P if k.startswith(f"{pre}.deconv") and k.endswith(".W"))
        c0 = P[f"{pre}.deconv0.W"].shape[0]
        side = int(round(np.sqrt(h.shape[1] // c0)))
        x = nx.reshape(h, (1, c0, side, side))
        for i in range(n_deconv):
            x = nx.deconv2d(x, P[f"{pre}.deconv{i}.W"], P[f"{pre}.deconv{i}.b"], stride=2, pad=1)
            if i < n_deconv - 1:
                x = nx.relu(x)
        mu = nx.reshape(x, channel.shape)
        mu = nx.affine_const(mu, np.full(channel.width, scale[0]), np.full(channel.width, offset[0]))
        raw = nx.linear(z, P[f"{pre}.sigma.W"], P[f"{pre}.sigma.b"])
        sigma = nx.add_const(nx.scale(nx.softplus(nx.reshape(raw, ())), scale[0]), sigma_floor)
        return mu, sigma
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size == 0:
        raise ValueError("no target times")
    if times.min() < 0.0 or times.max() > 1.0:
        raise ValueError("target times outside [0, 1]")
    rows = nx.concat_cols([nx.repeat_rows(latent, times.size), times[:, None]])
    out = _mlp(P, f"dec.{channel.name}", rows)
    D = channel.dim
    mu = nx.affine_const(nx.take_cols(out, 0, D), scale, offset)
    sigma = nx.affine_const(nx.softplus(nx.take_cols(out, D, 2 * D)), scale,
                            np.full(D, sigma_floor))
    return mu, sigma


# --------------------------------------------------------------------------
# blending

@dataclass
class BlendWeights:
    """Within-modality channel weights plus modality weights.

    ``channel`` maps channel name to its weight inside its modality;
    ``modality`` maps 'action'/'effect'/'object' to the outer weight.
    """
    channel: dict
    modality: dict
    tol: float = field(default=1e-9, repr=False)

    @classmethod
    def flat(cls, weights, channels):
        """From per-channel effective weights (must sum to one)."""
        by_name = {c.name: c for c in channels}
        groups = {}
        for name, w in weights.items():
            if name not in by_name:
                raise KeyError(f"unknown channel {name!r}")
            groups.setdefault(by_name[name].modality, {})[name] = float(w)
        modality, channel = {}, {}
        for m, members in groups.items():
            total = sum(members.values())
            modality[m] = total
            for name, w in members.items():
                channel[name] = w / total if total > 0 else 0.0
        return cls(channel, modality)

    @classmethod
    def equal(cls, names, channels):
        return cls.flat({n: 1.0 / len(names) for n in names}, channels)

    def validate(self, channels, available):
        by_name = {c.name: c for c in channels}
        for w in list(self.channel.values()) + list(self.modality.values()):
            if not (-self.tol <= w <= 1.0 + self.tol):
                raise ValueError(f"blend weight {w} outside [0, 1]")
        if abs(sum(self.modality.values()) - 1.0) > self.tol:
            raise ValueError(f"modality weights sum to {sum(self.modality.values())}, not 1")
        for name, w in self.channel.items():
            if name not in by_name:
                raise KeyError(f"unknown channel {name!r}")
            if w > 0 and name not in available:
                raise ValueError(f"nonzero weight on missing channel {name!r}")
        for m, wm in self.modality.items():
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}")
            inner = [w for n, w in self.channel.items() if by_name[n].modality == m]
            if wm > 0 and abs(sum(inner) - 1.0) > self.tol:
                raise ValueError(f"{m} channel weights sum to {sum(inner)}, not 1")

    def effective(self, channels):
        by_name = {c.name: c for c in channels}
        return {n: w * self.modality.get(by_name[n].modality, 0.0)
                for n, w in self.channel.items()}


def blend(latents, weights, channels):
    """Hierarchical convex combination of channel latents.

    Agent latents form the action latent first, then the modalities are
    combined. Zero-weighted terms are skipped, so one-hot weights return the
    selected latent bitwise.
    """
    weights.validate(channels, set(latents))
    by_name = {c.name: c for c in channels}
    parts, outer = [], []
    for m in MODALITIES:
        wm = weights.modality.get(m, 0.0)
        if wm <= 0:
            continue
        names = [n for n in latents if by_name[n].modality == m and weights.channel.get(n, 0.0) > 0]
        inner = nx.weighted_sum([latents[n] for n in names], [weights.channel[n] for n in names])
        parts.append(inner)
        outer.append(wm)
    if not parts:
        raise ValueError("blend has no positively weighted channel")
    return nx.weighted_sum(parts, outer)


def sample_blend_weights(names, channels, rng):
    """Dirichlet(1, ..., 1) weights, per modality then across modalities."""
    by_name = {c.name: c for c in channels}
    groups = {}
    for n in names:
        groups.setdefault(by_name[n].modality, []).append(n)
    present = [m for m in MODALITIES if m in groups]
    outer = rng.dirichlet(np.ones(len(present))) if len(present) > 1 else np.ones(1)
    channel = {}
    for m in present:
        members = groups[m]
        inner = rng.dirichlet(np.ones(len(members))) if len(members) > 1 else np.ones(1)
        channel.update(zip(members, inner.tolist()))
    return BlendWeights(channel, dict(zip(present, outer.tolist())))


def nll_loss(predictions, targets):
    """Mean Gaussian NLL per channel, then averaged over channels.

    ``predictions`` maps channel name to (mean, std) tensors; ``targets``
    maps the same names to arrays.
    """
    losses = []
    for name, (mu, sigma) in predictions.items():
        y = np.asarray(targets[name], dtype=np.float64)
        if sigma.data.shape == () and y.ndim:
            sigma = nx.broadcast_scalar(sigma, y.shape)
        losses.append(nx.gaussian_nll(mu, sigma, y))
    if len(losses) == 1:
        return losses[0]
    return nx.mean_scalars(losses)


# --------------------------------------------------------------------------
# training

def augment_image(img, hyper, rng):
    """Gaussian pixel jitter on encoder inputs (never on decoder targets).

    The object images of one scenario are few and noise free; without jitter
    the conv encoder memorizes them and places unseen sizes far from both
    classes.
    """
    jitter = hyper.get("image_jitter", 0.0)
    if jitter:
        img = img + rng.normal(0.0, jitter, img.shape)
    return img


class Trainer:
    """Owns the flat parameter buffer and Adam state for one training run."""

    def __init__(self, params, config=None):
        self.config = config or TrainConfig()
        self.hyper = dict(params.hyper)
        self.channels = list(params.channels)
        self.by_name = {c.name: c for c in self.channels}
        self.frozen = {k: v.copy() for k, v in params.arrays.items() if not is_trainable(k)}
        self.order = list(params.arrays)
        trainable = {k: v for k, v in params.arrays.items() if is_trainable(k)}
        self.pset = nx.ParameterSet(trainable)
        self.consts = {k: nx.Tensor(v, name=k) for k, v in self.frozen.items()}
        c = self.config
        self.adam = nx.AdamState.for_size(len(self.pset), lr=c.lr, beta1=c.beta1,
                                          beta2=c.beta2, eps=c.eps)
        self.steps = 0

    def params(self):
        arrays = {}
        for k in self.order:
            arrays[k] = self.frozen[k].copy() if k in self.frozen else self.pset[k].data.copy()
        return ModelParameters(dict(self.hyper), list(self.channels), arrays)

    def _lookup(self):
        P = dict(self.consts)
        P.update(self.pset.tensors)
        return P

    def draw(self, sample, rng):
        """Random conditioning/targets for one step (pure function of ``rng``)."""
        available = [c.name for c in self.channels if c.name in sample.values]
        if not available:
            raise ValueError("sample has no available channel")
        if len(available) == 1 or rng.random() < self.hyper["full_set_prob"]:
            subset = available
        else:
            bits = int(rng.integers(1, 2 ** len(available)))
            subset = [n for i, n in enumerate(available) if bits >> i & 1]
        weights = sample_blend_weights(subset, self.channels, rng)
        grid = uniform_times(self.hyper["T"])
        context = {}
        for n in subset:
            c = self.by_name[n]
            v = sample.values[n]
            if c.kind == "image":
                context[n] = augment_image(v, self.hyper, rng)
            else:
                k = int(rng.integers(1, self.hyper["max_context"] + 1))
                idx = rng.choice(c.length, size=min(k, c.length), replace=False)
                context[n] = np.concatenate([grid[idx, None], v[idx]], axis=1)
        targets = {}
        for n in available:
            c = self.by_name[n]
            v = sample.values[n]
            if c.kind == "image":
                targets[n] = (None, v)
            else:
                m = min(self.hyper["n_targets"], c.length)
                idx = rng.choice(c.length, size=m, replace=False)
                targets[n] = (grid[idx], v[idx])
        return context, weights, targets

    def loss(self, P, context, weights, targets):
        latents = {n: encode_channel(P, self.by_name[n], obs) for n, obs in context.items()}
        z = blend(latents, weights, self.channels)
        preds, ys = {}, {}
        floor = self.hyper["sigma_floor"]
        for n, (times, y) in targets.items():
            preds[n] = decode_channel(P, self.by_name[n], z, times, floor)
            ys[n] = y
        return nll_loss(preds, ys)

    def step(self, sample, rng):
        context, weights, targets = self.draw(sample, rng)
        tape = self.pset.bind()
        loss = self.loss(self._lookup(), context, weights, targets)
        tape.backward(loss)
        nx.adam_step(self.pset.flat, self.pset.flat_grad, self.adam)
        self.pset.detach()
        self.steps += 1
        return float(loss.data)

    def loss_fn(self, sample, seed=0):
        """Deterministic loss closure over ``pset`` (for gradient checks)."""
        draw = self.draw(sample, np.random.default_rng(seed))

        def fn(pset):
            pset.bind()
            return self.loss(self._lookup(), *draw)

        return fn


def train_step(trainer, sample, rng):
    """One Adam step on ``sample``; returns the pre-update loss."""
    return trainer.step(sample, rng)


def _check_channels(params, dataset):
    model = [c.to_json() for c in params.channels]
    data = [c.to_json() for c in dataset.channels]
    if model != data:
        raise ValueError(
            f"dataset channels {dataset.channel_names} do not match model channels "
            f"{[c.name for c in params.channels]}"
        )


def train(params, dataset, config=None, callback=None):
    """Train on uniformly drawn samples.

    Returns ``(params, snapshots, losses)``; ``snapshots`` is a list of
    ``(step, ModelParameters)`` taken at step 0, every ``snapshot_every``
    steps, and after the final step.
    """
    config = config or TrainConfig()
    _check_channels(params, dataset)
    return _run(params, [dataset.samples], [1.0], config, callback)


def continue_training(params, old, new, config=None, callback=None):
    """Replay training: each step picks old or new data with equal probability."""
    config = config or TrainConfig()
    _check_channels(params, old)
    _check_channels(params, new)
    pools = [p for p in (old.samples, new.samples) if p]
    return _run(params, pools, [1.0 / len(pools)] * len(pools), config, callback)


def _run(params, pools, probs, config, callback):
    trainer = Trainer(params, config)
    rng = np.random.default_rng(config.seed)
    snapshots, losses = [], []
    every = config.snapshot_every
    if config.iterations > 0 and not any(pools):
        raise ValueError("no training samples")
    for it in range(config.iterations):
        if every and it % every == 0:
            snapshots.append((it, trainer.params()))
        k = 0 if len(pools) == 1 else int(rng.random() >= probs[0])
        pool = pools[k]
        sample = pool[int(rng.integers(len(pool)))]
        trainer.adam.lr = config.lr_at(it)
        losses.append(trainer.step(sample, rng))
        if callback is not None:
            callback(it + 1, losses[-1])
    final = trainer.params() if config.iterations > 0 else params.copy()
    snapshots.append((config.iterations, final))
    return final, snapshots, np.array(losses)


# --------------------------------------------------------------------------
# inference

def encode_observed(params, observed):
    P = _tensors(params)
    return {n: encode_channel(P, params.channel(n), obs) for n, obs in observed.items()}, P


def affordance_latent(params, observed, weights=None):
    """Blend of the observed channels' latents (equal weights by default)."""
    latents, _ = encode_observed(params, observed)
    weights = weights or BlendWeights.equal(list(observed), params.channels)
    return blend(latents, weights, params.channels).data.copy()


def generate(params, request):
    """Decode requested channels from equally weighted observed channels."""
    request.validate(params.channels)
    latents, P = encode_observed(params, request.observed)
    z = blend(latents, BlendWeights.equal(list(request.observed), params.channels),
              params.channels)
    floor = params.hyper["sigma_floor"]
    out = {}
    for name in request.outputs:
        c = params.channel(name)
        times = request.times if request.times is not None else uniform_times(c.length)
        mu, sigma = decode_channel(P, c, z, times, floor)
        std = float(sigma.data) if c.kind == "image" else sigma.data.copy()
        out[name] = ChannelPrediction(mu.data.copy(), std)
    return out


def full_observation(channel, values):
    """All grid points of a stored payload as conditioning rows."""
    if channel.kind == "image":
        return np.asarray(values, dtype=np.float64)
    t = np.linspace(0.0, 1.0, channel.length)[:, None]
    return np.concatenate([t, values], axis=1)


def request_from_sample(params, sample, observed, outputs, times=None):
    obs = {n: full_observation(params.channel(n), sample.values[n]) for n in observed}
    return GenerationRequest(obs, list(outputs), times)


__all__ = [
    "BlendWeights", "ChannelPrediction", "TrainConfig", "Trainer",
    "affordance_latent", "blend", "continue_training", "decode_channel",
    "encode_channel", "expected_shapes", "generate", "init_params", "nll_loss",
    "request_from_sample", "sample_blend_weights", "train", "train_step",
]
