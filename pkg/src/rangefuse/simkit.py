"""Synthetic LiDAR world: moving ego, box actors, raycast sweeps and labels.

World frame: z up, ground plane at z = 0.  The ego starts at the origin
heading +x with the sensor mounted ``sensor_height`` above the ground.
Actors are upright rectangular boxes standing on the ground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .decode import BevBox, rotated_iou
from .errors import ConfigError
from .geometry import Pose, Sweep
from .rangeview import DEFAULT_GEOMETRY, RvGeometry

GROUND_INTENSITY = 0.1
GROUND_ID = -1
HORIZONS = tuple(0.5 * i for i in range(1, 7))  # future label offsets, seconds
EGO_FOOTPRINT = (4.5, 2.0)


@dataclass(frozen=True)
class ActorSpec:
    w: float = 4.5  # along heading
    h: float = 2.0  # across heading
    x: float = 10.0
    y: float = 0.0
    theta: float = 0.0
    motion: str = "cv"  # "cv" constant velocity, "ctr" constant turn rate
    speed: float = 0.0
    yaw_rate: float = 0.0
    height: float = 1.6
    intensity: float = 0.5

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0 or self.height <= 0:
            raise ConfigError("actor dimensions must be positive")
        if not 0.0 <= self.speed <= 30.0:
            raise ConfigError("actor speed must lie in [0, 30] m/s")
        if self.motion not in ("cv", "ctr"):
            raise ConfigError(f"unknown motion model {self.motion!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError("intensity must lie in [0, 1]")

    def state(self, t: float) -> tuple[float, float, float]:
        """(x, y, heading) at time ``t``."""
        omega = self.yaw_rate if self.motion == "ctr" else 0.0
        return unicycle(self.x, self.y, self.theta, self.speed, omega, t)

    def box(self, t: float) -> BevBox:
        x, y, th = self.state(t)
        return BevBox(x, y, self.w, self.h, th)


def unicycle(x0: float, y0: float, th0: float, v: float, omega: float, t: float) -> tuple[float, float, float]:
    """Closed-form constant speed / constant turn-rate motion."""
    if abs(omega) < 1e-9:
        return x0 + v * t * math.cos(th0), y0 + v * t * math.sin(th0), th0
    th = th0 + omega * t
    r = v / omega
    return x0 + r * (math.sin(th) - math.sin(th0)), y0 - r * (math.cos(th) - math.cos(th0)), th


@dataclass(frozen=True)
class Scenario:
    duration: float = 0.6
    sweep_rate: float = 10.0
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0
    actors: tuple[ActorSpec, ...] = ()
    seed: int = 0
    geometry: RvGeometry = DEFAULT_GEOMETRY
    sensor_height: float = 1.8
    ground: bool = True
    max_range: float = 80.0
    range_jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.sweep_rate <= 0:
            raise ConfigError("sweep_rate must be positive")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        object.__setattr__(self, "actors", tuple(self.actors))

    @property
    def n_sweeps(self) -> int:
        return max(int(math.floor(self.duration * self.sweep_rate + 1e-9)), 1)

    def sweep_times(self) -> np.ndarray:
        return np.arange(self.n_sweeps) / self.sweep_rate

    def ego_pose(self, t: float) -> Pose:
        x, y, th = unicycle(0.0, 0.0, 0.0, self.ego_speed, self.ego_yaw_rate, t)
        return Pose.planar(x, y, th, self.sensor_height, timestamp=t)

    def validate(self, n_sweeps: int | None = None) -> None:
        if n_sweeps is not None and self.n_sweeps < n_sweeps:
            raise ConfigError(f"duration covers {self.n_sweeps} sweeps, need {n_sweeps}")
        ego = BevBox(0.0, 0.0, *EGO_FOOTPRINT, 0.0)
        for i, a in enumerate(self.actors):
            if rotated_iou(ego, a.box(0.0)) > 0 or _contains(a.box(0.0), np.zeros(2)):
                raise ConfigError(f"actor {i} overlaps the ego vehicle at start")


def _contains(box: BevBox, xy: np.ndarray, margin: float = 0.0) -> bool:
    return bool(box_contains(box, np.asarray(xy, float).reshape(1, 2), margin)[0])


def box_contains(box: BevBox, xy: np.ndarray, margin: float = 1e-6) -> np.ndarray:
    """Which ``(N, 2)`` points lie inside the footprint (inflated by ``margin``)."""
    d = np.asarray(xy, float).reshape(-1, 2) - box.center
    c, s = math.cos(box.theta), math.sin(box.theta)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) <= box.w / 2 + margin) & (np.abs(ly) <= box.h / 2 + margin)


@dataclass(frozen=True)
class WorldBox:
    """An actor frozen at one instant, as seen by the raycaster."""

    box: BevBox
    height: float
    intensity: float
    actor_id: int


def world_at(scenario: Scenario, t: float) -> list[WorldBox]:
    return [WorldBox(a.box(t), a.height, a.intensity, i) for i, a in enumerate(scenario.actors)]


def ray_directions(g: RvGeometry) -> np.ndarray:
    """Unit sensor-frame ray per bin center, ``(n_rows * n_cols, 3)`` in row-major order."""
    phi = g.row_elevations()[:, None]
    theta = g.col_azimuths()[None, :]
    d = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi) * np.ones_like(theta)],
                 axis=-1)
    return d.reshape(-1, 3)


def raycast(world: Iterable[WorldBox], pose: Pose, g: RvGeometry, ground: bool = True,
            max_range: float = 80.0, index: int = 0, jitter: float = 0.0,
            rng: np.random.Generator | None = None) -> tuple[Sweep, np.ndarray]:
    """Cast one ray per bin; returns the sweep (sensor frame) and the hit id per point (-1 ground)."""
    d_sensor = ray_directions(g)
    d = d_sensor @ pose.rotation.T
    o = pose.translation
    best = np.full(len(d), np.inf)
    hit_id = np.full(len(d), -2, dtype=np.int64)
    hit_int = np.zeros(len(d))
    if ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(d[:, 2] < -1e-12, -o[2] / d[:, 2], np.inf)
        tg = np.where(tg > 0, tg, np.inf)
        sel = tg < best
        best[sel], hit_id[sel], hit_int[sel] = tg[sel], GROUND_ID, GROUND_INTENSITY
    for wb in world:
        t = _ray_box(o, d, wb)
        sel = t < best
        best[sel], hit_id[sel], hit_int[sel] = t[sel], wb.actor_id, wb.intensity
    ok = np.isfinite(best) & (best <= max_range)
    idx = np.flatnonzero(ok)
    r = best[idx]
    if jitter > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        r = r + rng.uniform(-jitter, jitter, size=len(r))
    xyz = d_sensor[idx] * r[:, None]
    ring = idx // g.n_cols
    return Sweep(index, pose, xyz, hit_int[idx], ring), hit_id[idx]


def _ray_box(o: np.ndarray, d: np.ndarray, wb: WorldBox) -> np.ndarray:
    """Entry distance along each ray into an upright box (inf where missed or origin inside)."""
    b = wb.box
    c, s = math.cos(b.theta), math.sin(b.theta)
    ox, oy = o[0] - b.x, o[1] - b.y
    lo = np.array([c * ox + s * oy, -s * ox + c * oy, o[2]])
    ld = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    lower = np.array([-b.w / 2, -b.h / 2, 0.0])
    upper = np.array([b.w / 2, b.h / 2, wb.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (lower - lo) * inv
        t2 = (upper - lo) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside the slab -> unconstrained, outside -> miss
    parallel = ld == 0
    inside = (lo >= lower) & (lo <= upper)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


@dataclass(eq=False)
class ScenarioLog:
    scenario: Scenario
    sweeps: list[Sweep]  # oldest first; index 0 is the newest
    hit_ids: list[np.ndarray]
    labels: list[dict] = field(default_factory=list)


def label_record(scenario: Scenario, t: float, hit_ids: np.ndarray | None = None) -> dict:
    actors = []
    for i, a in enumerate(scenario.actors):
        rec = {"id": i, "box": a.box(t).to_dict(),
               "future": [{"dt": dt, "box": a.box(t + dt).to_dict()} for dt in HORIZONS],
               "speed": a.speed}
        if hit_ids is not None:
            rec["n_points"] = int((hit_ids == i).sum())
        actors.append(rec)
    return {"t": float(t), "actors": actors, "ego_speed": scenario.ego_speed}


def generate_scenario(scenario: Scenario, n_sweeps: int | None = None) -> ScenarioLog:
    """Raycast every sweep time and emit labels.  Deterministic in ``scenario.seed``."""
    scenario.validate(n_sweeps)
    rng = np.random.default_rng(scenario.seed)
    times = scenario.sweep_times()
    n = len(times)
    sweeps, hits, labels = [], [], []
    for i, t in enumerate(times):
        pose = scenario.ego_pose(float(t))
        sw, h = raycast(world_at(scenario, float(t)), pose, scenario.geometry, scenario.ground,
                        scenario.max_range, index=i - (n - 1), jitter=scenario.range_jitter, rng=rng)
        sweeps.append(sw)
        hits.append(h)
        labels.append(label_record(scenario, float(t), h))
    return ScenarioLog(scenario, sweeps, hits, labels)


def random_scenario(seed: int, ego_speed: float | None = None, n_actors: tuple[int, int] = (3, 8),
                    actor_speed: tuple[float, float] = (0.0, 15.0), radius: tuple[float, float] = (6.0, 35.0),
                    geometry: RvGeometry = DEFAULT_GEOMETRY, n_sweeps: int = 6, sweep_rate: float = 10.0,
                    turn_fraction: float = 0.3, ego_speed_range: tuple[float, float] = (0.0, 20.0),
                    ego_yaw_rate: float | None = None) -> Scenario:
    """Sample a street-like scene with non-overlapping actors."""
    rng = np.random.default_rng(seed)
    v_ego = float(rng.uniform(*ego_speed_range)) if ego_speed is None else float(ego_speed)
    yaw_ego = float(rng.uniform(-0.1, 0.1)) if ego_yaw_rate is None else float(ego_yaw_rate)
    want = int(rng.integers(n_actors[0], n_actors[1] + 1))
    actors: list[ActorSpec] = []
    ego = BevBox(0.0, 0.0, EGO_FOOTPRINT[0] + 2.0, EGO_FOOTPRINT[1] + 2.0, 0.0)
    for _ in range(200 * max(want, 1)):
        if len(actors) >= want:
            break
        r = rng.uniform(*radius)
        phi = rng.uniform(0, 2 * math.pi)
        heading = rng.uniform(-math.pi, math.pi)
        turning = rng.uniform() < turn_fraction
        a = ActorSpec(w=float(rng.uniform(3.8, 5.5)), h=float(rng.uniform(1.7, 2.2)),
                      x=r * math.cos(phi), y=r * math.sin(phi), theta=heading,
                      motion="ctr" if turning else "cv", speed=float(rng.uniform(*actor_speed)),
                      yaw_rate=float(rng.uniform(-0.3, 0.3)) if turning else 0.0,
                      height=float(rng.uniform(1.4, 2.0)), intensity=float(rng.uniform(0.3, 0.9)))
        b = a.box(0.0)
        pad = replace(b, w=b.w + 1.0, h=b.h + 1.0)
        if rotated_iou(pad, ego) > 0 or any(rotated_iou(pad, o.box(0.0)) > 0 for o in actors):
            continue
        actors.append(a)
    return Scenario(duration=n_sweeps / sweep_rate, sweep_rate=sweep_rate, ego_speed=v_ego,
                    ego_yaw_rate=yaw_ego, actors=tuple(actors), seed=seed, geometry=geometry)


# scenario spec files ---------------------------------------------------------------------------
_SCENARIO_KEYS = {"duration": float, "sweep_rate": float, "ego_speed": float, "ego_yaw_rate": float,
                  "seed": int, "sensor_height": float, "max_range": float, "range_jitter": float}
_ACTOR_KEYS = {"w": float, "h": float, "x": float, "y": float, "theta": float, "motion": str, "speed": float,
               "yaw_rate": float, "height": float, "intensity": float}
_GEOMETRY_KEYS = ("n_rows", "n_cols", "phi_min_deg", "phi_max_deg")


@dataclass(frozen=True)
class ScenarioFile:
    """Parsed spec file: a base scenario plus how many random variants to draw."""

    scenario: Scenario
    scenes: int = 1
    random_actors: tuple[int, int] | None = None
    n_sweeps: int = 6
    explicit: frozenset = frozenset()  # scenario keys the file set directly


def parse_scenario_text(text: str) -> ScenarioFile:
    """Parse ``key=value`` lines with repeated ``[actor]`` blocks.

    Extra keys: ``scenes`` (count of scenes to emit), ``random_actors``
    (``lo-hi``; draws actors per scene instead of using the listed ones,
    and ego motion too unless ``ego_speed``/``ego_yaw_rate`` are given),
    ``n_sweeps`` and ``n_rows``/``n_cols``/``phi_min_deg``/``phi_max_deg``
    for the image geometry.
    """
    top: dict[str, str] = {}
    actors: list[dict[str, str]] = []
    cur = top
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[actor]":
            actors.append({})
            cur = actors[-1]
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = (p.strip() for p in line.split("=", 1))
        cur[k] = v
    try:
        geo = DEFAULT_GEOMETRY
        if any(k in top for k in _GEOMETRY_KEYS):
            geo = RvGeometry.from_degrees(int(top.pop("n_rows", 32)), int(top.pop("n_cols", 1024)),
                                          float(top.pop("phi_min_deg", -30.0)), float(top.pop("phi_max_deg", 10.0)))
        scenes = int(top.pop("scenes", 1))
        n_sweeps = int(top.pop("n_sweeps", 6))
        rand = top.pop("random_actors", None)
        rand_range = None
        if rand is not None:
            lo, _, hi = rand.partition("-")
            rand_range = (int(lo), int(hi or lo))
        kwargs = {}
        for k, v in top.items():
            if k not in _SCENARIO_KEYS:
                raise ConfigError(f"unknown scenario key {k!r}")
            kwargs[k] = _SCENARIO_KEYS[k](v)
        acts = []
        for a in actors:
            unknown = set(a) - set(_ACTOR_KEYS)
            if unknown:
                raise ConfigError(f"unknown actor keys {sorted(unknown)}")
            acts.append(ActorSpec(**{k: _ACTOR_KEYS[k](v) for k, v in a.items()}))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value in scenario spec: {exc}") from exc
    kwargs.setdefault("duration", n_sweeps / kwargs.get("sweep_rate", 10.0))
    return ScenarioFile(Scenario(actors=tuple(acts), geometry=geo, **kwargs), scenes, rand_range, n_sweeps,
                        frozenset(kwargs))


def expand_scenarios(spec: ScenarioFile, seed: int = 0) -> list[Scenario]:
    """Concrete scenarios for every scene of a spec file."""
    base = spec.scenario
    out = []
    for i in range(spec.scenes):
        s = base.seed + seed * 100003 + i
        if spec.random_actors is not None:
            ego = {k: getattr(base, k) for k in ("ego_speed", "ego_yaw_rate") if k in spec.explicit}
            r = random_scenario(s, n_actors=spec.random_actors, geometry=base.geometry, n_sweeps=spec.n_sweeps,
                                sweep_rate=base.sweep_rate, **ego)
            out.append(replace(r, sensor_height=base.sensor_height, max_range=base.max_range,
                               range_jitter=base.range_jitter, duration=max(base.duration, r.duration)))
        else:
            out.append(replace(base, seed=s))
    return out
