"""Closed-form scenario generators for insertability, graspability and rollability.

Every trajectory lives on the canonical uniform grid over normalized time.
Object images are 32x32 height fields over a 0.5 x 0.5 window (normalized
units) on a background of 0.5, rendered with 4x4 supersampling.
Noise is added to trajectories only, from a per-sample generator seeded by
``(seed, sample_index)`` so serial and parallel generation agree bitwise.
"""
import zlib
from dataclasses import dataclass, field

import numpy as np

from .dataspec import (
    CANONICAL_T,
    AffordanceSample,
    Dataset,
    image_channel,
    trajectory_channel,
    uniform_times,
)

SCENARIOS = ("insertability", "graspability", "rollability")
IMAGE_SIZE = 32
IMAGE_EXTENT = 0.5
BACKGROUND = 0.5
_SUPERSAMPLE = 4

ROD_HALF_WIDTH = 0.10
INSERT_TRAIN = (0.02, 0.04, 0.06, 0.08, 0.12, 0.14, 0.16, 0.18)
INSERT_TEST = (0.05, 0.15)
MAX_FORCE = 10.0

GRASP_SIZES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
GRASP_TEST = (0.3, 0.8)
BAXTER_MAX_SIZE = 0.5
LIFT_HEIGHT = 0.3

ROLL_SHAPES = ("cuboid", "upright-cylinder", "sphere", "cone",
               "side-cylinder-0", "side-cylinder-45", "side-cylinder-90",
               "side-cylinder-135")
DIRECTIONS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "straight": (0.0, 1.0)}
UR10_STYLES = ("fingers", "palm")
PUSH_DISTANCE = 0.1
ROLL_DISTANCE = 0.4

AGENT_DIMS = {"ur10": 6, "baxter": 7, "kuka": 7}


@dataclass
class ScenarioConfig:
    scenario: str
    objects: list = None  # widths / sizes / shape names; None -> scenario default
    agents: list = None
    noise: float = 0.01
    seed: int = 0
    samples_per_object: int = 20
    cone_rolls: bool = True
    directions: list = field(default_factory=lambda: list(DIRECTIONS))

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; valid: {', '.join(SCENARIOS)}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.samples_per_object < 1:
            raise ValueError("samples_per_object must be positive")
        for d in self.directions:
            if d not in DIRECTIONS:
                raise ValueError(f"unknown push direction {d!r}")


# --------------------------------------------------------------------------
# profiles

def min_jerk(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def ramp(t, t0, t1):
    return np.clip((t - t0) / (t1 - t0), 0.0, 1.0)


def joint_pose(key, dim):
    """Fixed pseudo-random joint vector in [-pi, pi] for a named pose."""
    rng = np.random.default_rng(zlib.crc32(key.encode("utf-8")))
    return rng.uniform(-np.pi, np.pi, size=dim)


def joint_trajectory(agent, action_key, phase):
    dim = AGENT_DIMS[agent]
    q0 = joint_pose(f"{agent}/{action_key}/start", dim)
    q1 = joint_pose(f"{agent}/{action_key}/end", dim)
    return q0 + (q1 - q0) * phase[:, None]


# --------------------------------------------------------------------------
# rendering

def _grid():
    n = IMAGE_SIZE * _SUPERSAMPLE
    u = (np.arange(n) + 0.5) / n * IMAGE_EXTENT - IMAGE_EXTENT / 2.0
    return np.meshgrid(u, u)


def _downsample(h):
    n = IMAGE_SIZE
    return h.reshape(n, _SUPERSAMPLE, n, _SUPERSAMPLE).mean(axis=(1, 3))


def render_opening(half_width):
    x, y = _grid()
    inside = (np.abs(x) < half_width) & (np.abs(y) < half_width)
    return BACKGROUND + _downsample(np.where(inside, 1.0 - BACKGROUND, 0.0))


def render_box(half_size, height):
    x, y = _grid()
    inside = (np.abs(x) < half_size) & (np.abs(y) < half_size)
    return BACKGROUND + _downsample(np.where(inside, height, 0.0))


def render_shape(shape):
    x, y = _grid()
    r = np.hypot(x, y)
    if shape == "cuboid":
        h = np.where((np.abs(x) < 0.12) & (np.abs(y) < 0.12), 0.08, 0.0)
    elif shape == "upright-cylinder":
        h = np.where(r < 0.12, 0.08, 0.0)
    elif shape == "sphere":
        rad = 0.15
        h = np.sqrt(np.clip(rad * rad - r * r, 0.0, None)) / rad * 0.3
    elif shape == "cone":
        h = np.clip(0.3 * (1.0 - r / 0.15), 0.0, None)
    elif shape.startswith("side-cylinder-"):
        theta = np.deg2rad(side_cylinder_angle(shape))
        along = x * np.cos(theta) + y * np.sin(theta)
        across = -x * np.sin(theta) + y * np.cos(theta)
        rad = 0.1
        h = np.where(np.abs(along) < 0.15,
                     np.sqrt(np.clip(rad * rad - across * across, 0.0, None)) / rad * 0.25,
                     0.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return BACKGROUND + _downsample(h)


def side_cylinder_angle(shape):
    try:
        angle = int(shape.rsplit("-", 1)[1])
    except (IndexError, ValueError):
        raise ValueError(f"unknown shape {shape!r}") from None
    if angle not in (0, 45, 90, 135):
        raise ValueError(f"unknown shape {shape!r}")
    return angle


# --------------------------------------------------------------------------
# closed forms

def insertion_force(t, insertable):
    if insertable:
        return MAX_FORCE * ramp(t, 0.9, 1.0)
    return MAX_FORCE * ramp(t, 0.5, 0.7)


def insertion_phase(t, insertable):
    s = min_jerk(t)
    if not insertable:
        s = np.where(t >= 0.5, min_jerk(0.5), s)
    return s


def lift_effect(t, lifted):
    out = np.zeros((t.size, 3))
    if lifted:
        out[:, 2] = LIFT_HEIGHT * ramp(t, 0.5, 1.0)
    return out


def push_displacement(t, direction, rolled):
    d = PUSH_DISTANCE * min_jerk(ramp(t, 0.2, 0.6))
    if rolled:
        d = d + (ROLL_DISTANCE - PUSH_DISTANCE) * ramp(t, 0.6, 1.0)
    dx, dy = DIRECTIONS[direction]
    return np.stack([d * dx, d * dy, np.zeros_like(d)], axis=1)


def final_displacement(direction, rolled):
    dist = ROLL_DISTANCE if rolled else PUSH_DISTANCE
    dx, dy = DIRECTIONS[direction]
    return np.array([dist * dx, dist * dy, 0.0])


def rolls(shape, direction, cone_rolls=True):
    if shape == "sphere":
        return True
    if shape == "cone":
        return cone_rolls
    if shape in ("cuboid", "upright-cylinder"):
        return False
    theta = np.deg2rad(side_cylinder_angle(shape))
    axis = np.array([np.cos(theta), np.sin(theta)])
    # perpendicular within 30 degrees; diagonal axes never qualify
    return bool(abs(axis @ np.array(DIRECTIONS[direction])) < 0.5)


# --------------------------------------------------------------------------
# generators

def _noisy(samples, config, channels):
    if config.noise == 0:
        return samples
    trajectories = [c.name for c in channels if c.kind == "trajectory"]
    for i, s in enumerate(samples):
        rng = np.random.default_rng([config.seed, i])
        for name in trajectories:
            if name not in s.values:
                continue
            v = s.values[name]
            s.values[name] = v + config.noise * rng.standard_normal(v.shape)
    return samples


def gen_insertability(config):
    widths = list(config.objects) if config.objects is not None else \
        list(INSERT_TRAIN) + list(INSERT_TEST)
    for w in widths:
        if not w > 0:
            raise ValueError(f"opening half-width must be positive, got {w}")
    t = uniform_times(CANONICAL_T)
    channels = [image_channel("object"), trajectory_channel("effect", 1, "newtons"),
                trajectory_channel("ur10", 6, "radians", agent="ur10")]
    samples = []
    for w in widths:
        ok = w >= ROD_HALF_WIDTH
        image = render_opening(w)
        force = insertion_force(t, ok)[:, None]
        action = joint_trajectory("ur10", "insert", insertion_phase(t, ok))
        meta = {"scenario": "insertability", "object_id": f"opening-{w:.2f}",
                "object_param": w, "outcome": "insertable" if ok else "non-insertable",
                "split": "test" if _isin(w, INSERT_TEST) else "train"}
        for k in range(config.samples_per_object):
            samples.append(AffordanceSample(
                {"object": image.copy(), "effect": force.copy(), "ur10": action.copy()},
                dict(meta, repeat=k)))
    return Dataset(channels, _noisy(samples, config, channels), _scenario_meta(config))


def gen_graspability(config):
    sizes = list(config.objects) if config.objects is not None else list(GRASP_SIZES)
    for s in sizes:
        if not 0 < s <= 1:
            raise ValueError(f"object size must be in (0, 1], got {s}")
    t = uniform_times(CANONICAL_T)
    channels = [image_channel("object"), trajectory_channel("effect", 3, "meters"),
                trajectory_channel("ur10", 6, "radians", agent="ur10"),
                trajectory_channel("baxter", 7, "radians", agent="baxter")]
    phase = min_jerk(t)
    ur10 = joint_trajectory("ur10", "grasp", phase)
    baxter = joint_trajectory("baxter", "grasp", phase)
    lifted, dropped = lift_effect(t, True), lift_effect(t, False)
    samples = []
    for s in sizes:
        image = render_box(0.2 * s, 0.15)
        both = s <= BAXTER_MAX_SIZE
        meta = {"scenario": "graspability", "object_id": f"box-{s:.1f}", "object_param": s,
                "graspable_by": ["ur10", "baxter"] if both else ["ur10"],
                "split": "test" if _isin(s, GRASP_TEST) else "train"}
        for k in range(config.samples_per_object):
            if both:
                samples.append(AffordanceSample(
                    {"object": image.copy(), "effect": lifted.copy(),
                     "ur10": ur10.copy(), "baxter": baxter.copy()},
                    dict(meta, outcome="lifted", agents=["ur10", "baxter"], repeat=k)))
            else:
                samples.append(AffordanceSample(
                    {"object": image.copy(), "effect": lifted.copy(), "ur10": ur10.copy()},
                    dict(meta, outcome="lifted", agents=["ur10"], repeat=k)))
                samples.append(AffordanceSample(
                    {"object": image.copy(), "effect": dropped.copy(), "baxter": baxter.copy()},
                    dict(meta, outcome="not-lifted", agents=["baxter"], repeat=k)))
    return Dataset(channels, _noisy(samples, config, channels), _scenario_meta(config))


def gen_rollability(config):
    shapes = list(config.objects) if config.objects is not None else list(ROLL_SHAPES)
    agents = list(config.agents) if config.agents is not None else ["kuka", "ur10"]
    images = {s: render_shape(s) for s in shapes}  # validates names
    t = uniform_times(CANONICAL_T)
    channels = [image_channel("object"), trajectory_channel("effect", 3, "meters"),
                trajectory_channel("kuka", 7, "radians", agent="kuka"),
                trajectory_channel("ur10", 6, "radians", agent="ur10")]
    phase = min_jerk(t / 0.6)
    pushes = []
    for d in config.directions:
        if "kuka" in agents:
            pushes.append(("kuka", "push", d))
        if "ur10" in agents:
            pushes.extend(("ur10", style, d) for style in UR10_STYLES)
    samples = []
    for shape in shapes:
        for agent, style, d in pushes:
            rolled = rolls(shape, d, config.cone_rolls)
            effect = push_displacement(t, d, rolled)
            action = joint_trajectory(agent, f"{style}-{d}", phase)
            meta = {"scenario": "rollability", "object_id": shape, "object_param": shape,
                    "outcome": "rolled" if rolled else "not-rolled", "agent": agent,
                    "style": style, "direction": d,
                    "split": "novel" if shape == "cone" else "train"}
            for k in range(config.samples_per_object):
                samples.append(AffordanceSample(
                    {"object": images[shape].copy(), "effect": effect.copy(),
                     agent: action.copy()},
                    dict(meta, repeat=k)))
    return Dataset(channels, _noisy(samples, config, channels), _scenario_meta(config))


GENERATORS = {"insertability": gen_insertability, "graspability": gen_graspability,
              "rollability": gen_rollability}


def generate(config):
    return GENERATORS[config.scenario](config)


def _isin(x, values):
    return any(abs(x - v) < 1e-9 for v in values)


def _scenario_meta(config):
    return {"scenario": config.scenario, "noise": config.noise, "seed": config.seed,
            "samples_per_object": config.samples_per_object,
            "cone_rolls": config.cone_rolls,
            "objects": None if config.objects is None else list(config.objects),
            "agents": None if config.agents is None else list(config.agents),
            "directions": list(config.directions)}


def config_from_meta(meta, **overrides):
    """Rebuild the :class:`ScenarioConfig` recorded in a dataset's metadata."""
    keys = ("scenario", "objects", "agents", "noise", "seed", "samples_per_object",
            "cone_rolls", "directions")
    kwargs = {k: meta[k] for k in keys if k in meta}
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)
