"""Experiment harness: masked-input RMS tables, latent traces, ambiguity
scores, depth-image curvature and the transfer/generalization matrix."""
import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import silhouette_score

from . import model, synthgen
from .dataspec import Dataset, uniform_times


def configurations(channels, spec="all"):
    """Input configurations as tuples of channel names in declared order.

    ``spec`` is "all" (every nonempty subset) or an iterable of name lists.
    """
    names = [c.name for c in channels]
    if spec == "all":
        return [combo for r in range(1, len(names) + 1)
                for combo in itertools.combinations(names, r)]
    out = []
    for cfg in spec:
        cfg = [cfg] if isinstance(cfg, str) else list(cfg)
        if not cfg:
            raise ValueError("empty input configuration")
        unknown = [n for n in cfg if n not in names]
        if unknown:
            raise KeyError(f"configuration references unknown channel(s) {unknown}")
        out.append(tuple(n for n in names if n in cfg))
    return out


@dataclass
class ReportRow:
    configuration: tuple
    channel: str
    units: str
    rms: float
    mean_sigma: float
    count: int


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)

    def get(self, configuration, channel):
        configuration = tuple(configuration)
        for r in self.rows:
            if set(r.configuration) == set(configuration) and r.channel == channel:
                return r
        raise KeyError((configuration, channel))

    def rms(self, configuration, channel):
        return self.get(configuration, channel).rms

    def sigma(self, configuration, channel):
        return self.get(configuration, channel).mean_sigma

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["configuration", "channel", "units", "rms", "mean_sigma", "count"])
            for r in self.rows:
                w.writerow(["+".join(r.configuration), r.channel, r.units,
                            repr(r.rms), repr(r.mean_sigma), r.count])

    def summary(self):
        table = {}
        for r in self.rows:
            table.setdefault("+".join(r.configuration), {})[r.channel] = {
                "units": r.units, "rms": r.rms, "mean_sigma": r.mean_sigma, "count": r.count}
        return table


def _truth_samples(dataset, truth):
    if truth is None:
        return dataset.samples
    if len(truth.samples) != len(dataset.samples):
        raise ValueError("truth dataset must align sample-for-sample with the dataset")
    return truth.samples


def rms_table(params, dataset, configs="all", truth=None, predictor=None, outputs=None):
    """Per configuration x output channel RMS and mean decoded sigma.

    Each test sample whose configuration channels are all available is
    conditioned on its full observed trajectories/image with equal weights;
    every channel with ground truth is decoded on the canonical grid.
    ``truth`` is an aligned dataset of noise-free values (defaults to
    ``dataset`` itself); ``predictor(params, request)`` defaults to
    :func:`model.generate`.
    """
    predictor = predictor or model.generate
    names = [c.name for c in params.channels]
    for c in dataset.channels:
        if c.name not in names:
            raise ValueError(f"dataset channel {c.name!r} is not declared by the model")
    configs = configurations(dataset.channels, configs)
    truths = _truth_samples(dataset, truth)
    report = EvaluationReport()
    for cfg in configs:
        errs, sigs = {}, {}
        for s, gt in zip(dataset.samples, truths):
            if not all(n in s.values for n in cfg):
                continue
            wanted = [n for n in names if n in gt.values and (outputs is None or n in outputs)]
            if not wanted:
                continue
            req = model.request_from_sample(params, s, cfg, wanted)
            pred = predictor(params, req)
            for n in wanted:
                y = gt.values[n]
                errs.setdefault(n, []).append(float(np.sqrt(np.mean((pred[n].mean - y) ** 2))))
                sigs.setdefault(n, []).append(float(np.mean(pred[n].std)))
        for n in names:
            if n in errs:
                report.rows.append(ReportRow(cfg, n, params.channel(n).units,
                                             float(np.mean(errs[n])), float(np.mean(sigs[n])),
                                             len(errs[n])))
    return report


def ambiguity_scores(params, dataset, configs="all", predictor=None, outputs=None):
    """Mean decoded sigma per configuration and output channel."""
    report = rms_table(params, dataset, configs, predictor=predictor, outputs=outputs)
    out = {}
    for r in report.rows:
        out.setdefault(r.configuration, {})[r.channel] = r.mean_sigma
    return out


# --------------------------------------------------------------------------
# latent traces

@dataclass
class LatentTrace:
    steps: list            # training step of each snapshot
    object_ids: list
    labels: list           # outcome class per object
    points: np.ndarray     # (n_snapshots, n_objects, 2)
    degenerate: bool = False

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["snapshot", "step", "object_id", "label", "pc1", "pc2"])
            for i, step in enumerate(self.steps):
                for j, oid in enumerate(self.object_ids):
                    w.writerow([i, step, oid, self.labels[j],
                                repr(float(self.points[i, j, 0])), repr(float(self.points[i, j, 1]))])


def pca_2d(X, tol=1e-12):
    """Project rows of ``X`` onto the top two principal axes.

    Returns ``(projections, degenerate)``; a (numerically) zero covariance
    is flagged and projected onto zeros. Axis signs are fixed so the
    largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    if vals[-1] <= tol * max(1.0, float(np.abs(X).max(initial=0.0)) ** 2):
        return np.zeros((X.shape[0], 2)), True
    axes = vecs[:, ::-1][:, :2].copy()
    for k in range(axes.shape[1]):
        if axes[np.argmax(np.abs(axes[:, k])), k] < 0:
            axes[:, k] = -axes[:, k]
    return Xc @ axes, False


def _object_representatives(dataset):
    """First sample of each object id, in dataset order."""
    reps = {}
    for s in dataset.samples:
        reps.setdefault(s.meta.get("object_id"), s)
    return reps


def latent_trace(snapshots, dataset, n_points=10, seed=0):
    """Equal-weight affordance latents per snapshot and object, pooled PCA.

    ``snapshots`` is a list of ``(step, ModelParameters)``. For each object
    its first sample is observed through every available channel; trajectory
    channels contribute ``n_points`` grid points drawn once (seeded) and
    reused across snapshots so only the parameters change.
    """
    if len(snapshots) < 2:
        raise ValueError("latent_trace needs at least two snapshots")
    reps = _object_representatives(dataset)
    rng = np.random.default_rng(seed)
    observed = []
    for oid, s in reps.items():
        obs = {}
        for c in dataset.channels:
            if c.name not in s.values:
                continue
            v = s.values[c.name]
            if c.kind == "image":
                obs[c.name] = v
            else:
                idx = np.sort(rng.choice(c.length, size=min(n_points, c.length), replace=False))
                obs[c.name] = np.concatenate([uniform_times(c.length)[idx, None], v[idx]], axis=1)
        observed.append(obs)
    latents = np.stack([
        np.stack([model.affordance_latent(p, obs) for obs in observed])
        for _, p in snapshots
    ])
    S, O, L = latents.shape
    proj, degenerate = pca_2d(latents.reshape(S * O, L))
    labels = [s.meta.get("outcome") for s in reps.values()]
    return LatentTrace([step for step, _ in snapshots], list(reps), labels,
                       proj.reshape(S, O, 2), degenerate)


def silhouette(points, labels):
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ValueError("silhouette needs at least two classes")
    if np.allclose(points, points[0]):
        return 0.0
    return float(silhouette_score(np.asarray(points), labels))


def intra_class_distance(points, labels):
    """Mean pairwise distance within classes, averaged over classes."""
    labels = np.asarray(labels)
    means = []
    for lab in sorted(set(labels.tolist())):
        P = np.asarray(points)[labels == lab]
        if len(P) < 2:
            continue
        d = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(-1))
        means.append(d[np.triu_indices(len(P), 1)].mean())
    return float(np.mean(means)) if means else 0.0


# --------------------------------------------------------------------------
# curvature

def mean_curvature(image, background=synthgen.BACKGROUND, threshold=0.05):
    """Mean |4-neighbour Laplacian| over pixels deviating from the background."""
    img = np.asarray(image, dtype=np.float64)
    region = np.abs(img - background) > threshold
    if not region.any():
        return 0.0
    p = np.pad(img, 1, mode="edge")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * img
    return float(np.abs(lap[region]).mean())


# --------------------------------------------------------------------------
# transfer / generalization

PROTOCOL_KEYS = {"version", "scenario", "seed", "noise", "samples_per_object", "cone_rolls",
                 "pretrain_iterations", "continue_iterations", "hyper", "protocols"}
ENTRY_KEYS = {"name", "initial", "new", "demo_agent", "demo_direction", "expected"}


def load_protocols(path_or_dict):
    d = path_or_dict
    if not isinstance(d, dict):
        with open(d) as fh:
            d = json.load(fh)
    extra = set(d) - PROTOCOL_KEYS
    if extra:
        raise ValueError(f"unknown protocol keys {sorted(extra)}")
    if d.get("version", 1) != 1:
        raise ValueError(f"unsupported protocol version {d.get('version')}")
    if d.get("scenario", "rollability") != "rollability":
        raise ValueError("transfer protocols are defined for the rollability scenario")
    for e in d["protocols"]:
        extra = set(e) - ENTRY_KEYS
        if extra:
            raise ValueError(f"unknown keys {sorted(extra)} in protocol {e.get('name')!r}")
        for shape in list(e["initial"]) + [e["new"]]:
            if shape not in synthgen.ROLL_SHAPES:
                raise ValueError(f"protocol {e.get('name')!r} references unknown object {shape!r}")
        if e["demo_agent"] not in ("kuka", "ur10"):
            raise ValueError(f"unknown demonstrating agent {e['demo_agent']!r}")
        if e["demo_direction"] not in synthgen.DIRECTIONS:
            raise ValueError(f"unknown direction {e['demo_direction']!r}")
    return d


def effect_class(effect, direction):
    """Nearest closed-form class for a generated displacement trajectory."""
    final = np.asarray(effect)[-1]
    d_roll = np.linalg.norm(final - synthgen.final_displacement(direction, True))
    d_stay = np.linalg.norm(final - synthgen.final_displacement(direction, False))
    return bool(d_roll < d_stay)


@dataclass
class TransferResult:
    name: str
    initial: list
    new: str
    transfer: bool
    direction: bool
    expected: dict
    details: dict
    retention: dict = field(default_factory=dict)

    @property
    def matches(self):
        exp = self.expected or {}
        return all(getattr(self, k) == v for k, v in exp.items())


def _scenario(proto, shapes, agents=None, directions=None, seed_offset=0):
    cfg = synthgen.ScenarioConfig(
        "rollability", objects=list(shapes), agents=agents,
        noise=proto.get("noise", 0.01), seed=proto.get("seed", 0) + seed_offset,
        samples_per_object=proto.get("samples_per_object", 20),
        cone_rolls=proto.get("cone_rolls", True))
    if directions is not None:
        cfg.directions = list(directions)
    return synthgen.generate(cfg)


def _generated_classes(params, image, observed_channel, actions, direction):
    """Rolled/not per action trajectory when conditioning on (image, action)."""
    out = []
    for act in actions:
        t = uniform_times(len(act))[:, None]
        req = model.GenerationRequest({"object": image,
                                       observed_channel: np.concatenate([t, act], axis=1)},
                                      ["effect"])
        out.append(effect_class(model.generate(params, req)["effect"].mean, direction))
    return out


def run_protocol(entry, proto, pretrained=None, callback=None):
    """Pretrain (or reuse), continue with the single demonstration, test.

    Transfer: the other-agent actions (both ur10 styles when kuka
    demonstrated, kuka when ur10 did) in the demonstrated direction.
    Direction: the demonstrating agent in every other direction.
    A test passes when every generated effect lands in the correct class.
    """
    seed = proto.get("seed", 0)
    hyper = proto.get("hyper")
    initial = list(entry["initial"])
    if pretrained is None:
        old = _scenario(proto, initial)
        p0 = model.init_params(old.channels, hyper, seed=seed, dataset=old)
        pretrained, _, _ = model.train(p0, old, model.TrainConfig(
            iterations=proto["pretrain_iterations"], snapshot_every=0, seed=seed),
            callback=callback)
    old = _scenario(proto, initial)
    agent, d0 = entry["demo_agent"], entry["demo_direction"]
    new = _scenario(proto, [entry["new"]], agents=[agent], directions=[d0], seed_offset=1)
    if agent == "ur10":
        new = new.subset(lambda s: s.meta["style"] == "fingers")
    params, _, _ = model.continue_training(pretrained, old, new, model.TrainConfig(
        iterations=proto["continue_iterations"], snapshot_every=0, seed=seed + 1),
        callback=callback)
    cone_rolls = proto.get("cone_rolls", True)
    image = synthgen.render_shape(entry["new"])
    t = uniform_times(model.CANONICAL_T)
    phase = synthgen.min_jerk(t / 0.6)
    other = "ur10" if agent == "kuka" else "kuka"
    styles = synthgen.UR10_STYLES if other == "ur10" else ("push",)
    acts = [synthgen.joint_trajectory(other, f"{st}-{d0}", phase) for st in styles]
    truth = synthgen.rolls(entry["new"], d0, cone_rolls)
    got = _generated_classes(params, image, other, acts, d0)
    transfer = all(g == truth for g in got)
    details = {"transfer": {"agent": other, "direction": d0, "expected_rolled": truth,
                            "generated_rolled": got}}
    dir_ok = []
    own_style = "push" if agent == "kuka" else "fingers"
    for d in synthgen.DIRECTIONS:
        if d == d0:
            continue
        act = synthgen.joint_trajectory(agent, f"{own_style}-{d}", phase)
        truth_d = synthgen.rolls(entry["new"], d, cone_rolls)
        g = _generated_classes(params, image, agent, [act], d)[0]
        dir_ok.append(g == truth_d)
        details[f"direction-{d}"] = {"expected_rolled": truth_d, "generated_rolled": g}
    return TransferResult(entry.get("name", entry["new"]), initial, entry["new"], transfer,
                          all(dir_ok), entry.get("expected", {}), details), pretrained, params


def old_object_rms(params, proto, initial, configs=(("object", "kuka"), ("object", "ur10"))):
    """Effect RMS on the initial objects (noise-free truth), averaged over configs."""
    noisy = _scenario(proto, initial)
    clean_proto = dict(proto, noise=0.0)
    clean = _scenario(clean_proto, initial)
    rep = rms_table(params, noisy, configs, truth=clean, outputs=["effect"])
    return float(np.mean([r.rms for r in rep.rows]))


def transfer_matrix(protocols, callback=None, retention=True):
    """Run every protocol; pretraining is shared between equal initial sets."""
    proto = load_protocols(protocols)
    cache = {}
    results = []
    for entry in proto["protocols"]:
        key = tuple(sorted(entry["initial"]))
        res, pre, params = run_protocol(entry, proto, cache.get(key), callback)
        cache[key] = pre
        if retention:
            before = old_object_rms(pre, proto, entry["initial"])
            after = old_object_rms(params, proto, entry["initial"])
            res.retention = {"before": before, "after": after,
                             "degradation": (after - before) / before if before > 0 else 0.0}
        results.append(res)
    return results


def write_transfer_report(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protocol", "initial", "new", "transfer", "direction",
                    "expected_transfer", "expected_direction", "matches",
                    "retention_before", "retention_after"])
        for r in results:
            w.writerow([r.name, "+".join(r.initial), r.new, int(r.transfer), int(r.direction),
                        r.expected.get("transfer", ""), r.expected.get("direction", ""),
                        int(r.matches), r.retention.get("before", ""),
                        r.retention.get("after", "")])


def subset_by_outcome(dataset: Dataset, outcome):
    return dataset.subset(lambda s: s.meta.get("outcome") == outcome)


__all__ = [
    "EvaluationReport", "LatentTrace", "ReportRow", "TransferResult", "ambiguity_scores",
    "configurations", "effect_class", "intra_class_distance", "latent_trace", "load_protocols",
    "mean_curvature", "pca_2d", "rms_table", "run_protocol", "silhouette", "transfer_matrix",
    "write_transfer_report",
]
