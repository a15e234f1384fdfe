"""Channel and sample types plus the binary dataset/model containers.

Both file kinds share one envelope::

    magic        4 bytes   b"AFFD" (dataset) | b"AFFM" (model) | b"AFFB" (baseline)
    version      u32 LE
    meta_len     u64 LE    length of the UTF-8 JSON metadata block
    meta         meta_len bytes
    payload      little-endian float64 values

Dataset payload: for every sample, for every channel in declared order, one
availability byte (0/1) followed (if 1) by the channel values row-major.
Model payload: the named arrays concatenated in metadata order.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1
DATASET_MAGIC = b"AFFD"
MODEL_MAGIC = b"AFFM"
BASELINE_MAGIC = b"AFFB"
CANONICAL_T = 100
UNITS = ("radians", "newtons", "meters", "normalized-depth")


class FormatError(ValueError):
    """Malformed or inconsistent dataset/model file."""


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    kind: str  # "trajectory" | "image"
    dim: int  # per-step width, or H*W for images
    length: int  # T for trajectories, 1 for images
    units: str
    agent: str = None
    height: int = None
    width: int = None

    def __post_init__(self):
        if self.kind not in ("trajectory", "image"):
            raise ValueError(f"channel {self.name!r}: unknown kind {self.kind!r}")
        if self.units not in UNITS:
            raise ValueError(f"channel {self.name!r}: unknown units {self.units!r}")
        if self.kind == "trajectory" and self.length < 2:
            raise ValueError(f"channel {self.name!r}: trajectories need length >= 2")
        if self.kind == "image":
            if self.length != 1:
                raise ValueError(f"channel {self.name!r}: image channels have length 1")
            if self.height is None or self.width is None or self.height * self.width != self.dim:
                raise ValueError(f"channel {self.name!r}: dim must equal height*width")
        if self.dim < 1:
            raise ValueError(f"channel {self.name!r}: dim must be positive")

    @property
    def modality(self):
        """'action' for agent channels, 'object' for images, else 'effect'."""
        if self.kind == "image":
            return "object"
        return "action" if self.agent else "effect"

    @property
    def shape(self):
        if self.kind == "image":
            return (self.height, self.width)
        return (self.length, self.dim)

    @property
    def size(self):
        return self.length * self.dim

    def to_json(self):
        d = {"name": self.name, "kind": self.kind, "dim": self.dim,
             "length": self.length, "units": self.units, "agent": self.agent}
        if self.kind == "image":
            d["height"], d["width"] = self.height, self.width
        return d

    @classmethod
    def from_json(cls, d):
        return cls(name=d["name"], kind=d["kind"], dim=int(d["dim"]),
                   length=int(d["length"]), units=d["units"], agent=d.get("agent"),
                   height=d.get("height"), width=d.get("width"))


def trajectory_channel(name, dim, units, agent=None, length=CANONICAL_T):
    return ChannelSpec(name, "trajectory", dim, length, units, agent)


def image_channel(name, height=32, width=32):
    return ChannelSpec(name, "image", height * width, 1, "normalized-depth",
                       None, height, width)


def check_channels(channels):
    names = [c.name for c in channels]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate channel names in {names}")
    return list(channels)


@dataclass
class AffordanceSample:
    """One interaction record.

    ``values`` maps channel name to its payload (T x dim trajectory or H x W
    image); a channel is available iff it is a key. ``meta`` carries
    evaluation-only labels (scenario, object id/parameter, outcome class,
    split, ...) and is never fed to a model.
    """
    values: dict
    meta: dict = field(default_factory=dict)

    def available(self, name):
        return name in self.values

    def mask(self, channels):
        return [c.name in self.values for c in channels]

    def validate(self, channels):
        by_name = {c.name: c for c in channels}
        unknown = set(self.values) - set(by_name)
        if unknown:
            raise ValueError(f"sample has undeclared channels {sorted(unknown)}")
        if not self.values:
            raise ValueError("sample has no available channel")
        for name, arr in self.values.items():
            spec = by_name[name]
            if np.shape(arr) != spec.shape:
                raise ValueError(
                    f"channel {name!r}: payload shape {np.shape(arr)} != {spec.shape}"
                )


@dataclass
class Dataset:
    channels: list
    samples: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def channel(self, name):
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def channel_names(self):
        return [c.name for c in self.channels]

    def subset(self, predicate):
        return Dataset(self.channels, [s for s in self.samples if predicate(s)],
                       dict(self.meta))

    def split(self, name):
        return self.subset(lambda s: s.meta.get("split") == name)


@dataclass
class GenerationRequest:
    """Conditioning for :func:`affordance.model.generate`.

    ``observed`` maps trajectory channels to a ``(n, 1 + dim)`` array of
    ``[t, values...]`` rows and image channels to an ``H x W`` array.
    ``times`` defaults to the canonical uniform grid.
    """
    observed: dict
    outputs: list
    times: np.ndarray = None

    def validate(self, channels):
        by_name = {c.name: c for c in channels}
        if not self.observed:
            raise ValueError("generation request observes no channel")
        for name in list(self.observed) + list(self.outputs):
            if name not in by_name:
                raise KeyError(f"channel {name!r} is not declared by the model")
        for name, obs in self.observed.items():
            spec = by_name[name]
            obs = np.asarray(obs, dtype=np.float64)
            if spec.kind == "image":
                if obs.shape != spec.shape:
                    raise ValueError(f"image {name!r} must be {spec.shape}, got {obs.shape}")
            else:
                if obs.ndim != 2 or obs.shape[1] != spec.dim + 1 or obs.shape[0] < 1:
                    raise ValueError(
                        f"trajectory {name!r} observations must be (n, {spec.dim + 1})"
                    )
                if obs[:, 0].min() < 0.0 or obs[:, 0].max() > 1.0:
                    raise ValueError(f"observation times for {name!r} outside [0, 1]")
        if self.times is not None:
            t = np.asarray(self.times, dtype=np.float64)
            if t.size and (t.min() < 0.0 or t.max() > 1.0):
                raise ValueError("target times outside [0, 1]")

    def to_json(self, channels):
        kinds = {c.name: c.kind for c in channels}
        obs = {}
        for name, v in self.observed.items():
            v = np.asarray(v, dtype=np.float64)
            if kinds[name] == "image":
                obs[name] = {"image": v.tolist()}
            else:
                obs[name] = [{"t": float(r[0]), "values": r[1:].tolist()} for r in v]
        d = {"version": FORMAT_VERSION, "observed": obs, "outputs": list(self.outputs)}
        if self.times is not None:
            d["times"] = np.asarray(self.times).tolist()
        return d

    @classmethod
    def from_json(cls, d):
        allowed = {"version", "observed", "outputs", "times"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown request keys {sorted(extra)}")
        if d.get("version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported request version {d.get('version')}")
        observed = {}
        for name, v in d.get("observed", {}).items():
            if isinstance(v, dict):
                observed[name] = np.asarray(v["image"], dtype=np.float64)
            else:
                observed[name] = np.asarray(
                    [[p["t"], *p["values"]] for p in v], dtype=np.float64)
        times = d.get("times")
        return cls(observed=observed, outputs=list(d.get("outputs", [])),
                   times=None if times is None else np.asarray(times, dtype=np.float64))


def uniform_times(T):
    return np.linspace(0.0, 1.0, T)


def resample_trajectory(values, T=CANONICAL_T):
    """Linearly interpolate a (T', dim) trajectory onto T uniform times."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    if n < 2:
        raise ValueError("need at least two points to resample")
    if T < 2:
        raise ValueError("target length must be at least 2")
    src = np.linspace(0.0, 1.0, n)
    dst = np.linspace(0.0, 1.0, T)
    out = np.empty((T, values.shape[1]))
    for d in range(values.shape[1]):
        out[:, d] = np.interp(dst, src, values[:, d])
    out[0], out[-1] = values[0], values[-1]
    return out


# --------------------------------------------------------------------------
# envelope

def _write_envelope(path, magic, meta, payload_chunks):
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payload_chunks:
            fh.write(chunk)


def _read_envelope(path, magics):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    magic = raw[:4]
    if magic not in magics:
        raise FormatError(f"{path}: bad magic {magic!r}, expected one of {magics}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} != {FORMAT_VERSION}")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + meta_len > len(raw):
        raise FormatError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata: {exc}") from None
    return magic, meta, memoryview(raw)[16 + meta_len:]


def _f64(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


# --------------------------------------------------------------------------
# datasets

def write_dataset(dataset, path):
    channels = check_channels(dataset.channels)
    for s in dataset.samples:
        s.validate(channels)
    meta = {
        "channels": [c.to_json() for c in channels],
        "num_samples": len(dataset.samples),
        "scenario": dataset.meta,
        "samples": [s.meta for s in dataset.samples],
    }

    def chunks():
        for s in dataset.samples:
            for c in channels:
                if c.name in s.values:
                    yield b"\x01"
                    yield _f64(s.values[c.name])
                else:
                    yield b"\x00"

    _write_envelope(path, DATASET_MAGIC, meta, chunks())


def read_dataset(path):
    _, meta, payload = _read_envelope(path, (DATASET_MAGIC,))
    try:
        channels = check_channels([ChannelSpec.from_json(c) for c in meta["channels"]])
        n = int(meta["num_samples"])
        sample_meta = meta.get("samples", [{}] * n)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad metadata: {exc}") from None
    if len(sample_meta) != n:
        raise FormatError(f"{path}: metadata lists {len(sample_meta)} samples, header says {n}")
    pos = 0
    samples = []
    for i in range(n):
        values = {}
        for c in channels:
            if pos >= len(payload):
                raise FormatError(f"{path}: truncated payload at sample {i}")
            flag = payload[pos]
            pos += 1
            if flag == 1:
                nbytes = 8 * c.size
                if pos + nbytes > len(payload):
                    raise FormatError(f"{path}: truncated payload in sample {i}, channel {c.name}")
                arr = np.frombuffer(payload[pos:pos + nbytes], dtype="<f8").astype(np.float64)
                values[c.name] = arr.reshape(c.shape)
                pos += nbytes
            elif flag != 0:
                raise FormatError(f"{path}: invalid availability byte {flag} in sample {i}")
        if not values:
            raise FormatError(f"{path}: sample {i} has no available channel")
        samples.append(AffordanceSample(values, dict(sample_meta[i])))
    if pos != len(payload):
        raise FormatError(f"{path}: {len(payload) - pos} trailing bytes after payload")
    return Dataset(channels, samples, dict(meta.get("scenario", {})))


# --------------------------------------------------------------------------
# model parameters

@dataclass
class ModelParameters:
    """Architecture hyperparameters, channel list and named float64 arrays."""
    hyper: dict
    channels: list
    arrays: dict
    kind: str = "model"  # "model" | "baseline"

    def copy(self):
        return ModelParameters(dict(self.hyper), list(self.channels),
                               {k: v.copy() for k, v in self.arrays.items()}, self.kind)

    def channel(self, name):
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(f"channel {name!r} is not declared by the model")


def write_model(params, path, expected_shapes=None):
    if expected_shapes is not None:
        _check_arrays(params.arrays, expected_shapes, path)
    magic = BASELINE_MAGIC if params.kind == "baseline" else MODEL_MAGIC
    meta = {
        "kind": params.kind,
        "hyper": params.hyper,
        "channels": [c.to_json() for c in params.channels],
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in params.arrays.items()],
    }
    _write_envelope(path, magic, meta, (_f64(v) for v in params.arrays.values()))


def read_model(path, expected_shapes=None):
    """Read a model file; ``expected_shapes(hyper, channels)`` validates arrays."""
    magic, meta, payload = _read_envelope(path, (MODEL_MAGIC, BASELINE_MAGIC))
    try:
        channels = check_channels([ChannelSpec.from_json(c) for c in meta["channels"]])
        entries = [(e["name"], tuple(e["shape"])) for e in meta["arrays"]]
        hyper = meta["hyper"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad metadata: {exc}") from None
    kind = "baseline" if magic == BASELINE_MAGIC else "model"
    arrays = {}
    pos = 0
    for name, shape in entries:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload in array {name!r}")
        arrays[name] = np.frombuffer(payload[pos:pos + nbytes], dtype="<f8") \
            .astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(payload):
        raise FormatError(f"{path}: {len(payload) - pos} trailing bytes after payload")
    if expected_shapes is not None:
        _check_arrays(arrays, expected_shapes(hyper, channels), path)
    return ModelParameters(hyper, channels, arrays, kind)


def _check_arrays(arrays, expected, path):
    for name, shape in expected.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing named array {name!r}")
        if tuple(np.shape(arrays[name])) != tuple(shape):
            raise FormatError(
                f"{path}: array {name!r} has shape {np.shape(arrays[name])}, "
                f"hyperparameters imply {tuple(shape)}"
            )
