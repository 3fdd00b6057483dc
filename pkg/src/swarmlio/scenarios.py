"""Preset scenes: rich room, single smooth wall, smooth corridor, exploration.

Each preset yields plain ``DroneSpec``/``PlaneSpec`` data; ``build_scenario``
turns a validated ScenarioConfig into simulation objects. A config may
replace a preset's drones (``[[drones]]``) and append planes, boxes, or
decoys to its world.
"""

from __future__ import annotations

import math

import numpy as np

from .config import DroneSpec, ScenarioConfig
from .sensor_sim import Plane, SensorModel, Sphere, TrueTrajectory, WorldModel, box_planes

DEFAULT_DURATION = {"room": 30.0, "wall": 46.0, "corridor": 66.0, "exploration": 112.0, "custom": 20.0}

_SENSOR_PRESETS = {"mid360": SensorModel.mid360, "avia": SensorModel.avia}


def _wiggles(rng, amp=(0.25, 0.45), freq=(0.08, 0.2), z_amp=0.06, terms=2):
    """Random per-axis sines; distinct per drone so trajectories are matchable."""
    out = []
    for axis in (0, 1):
        for _ in range(terms):
            out.append((axis, rng.uniform(*amp) / terms * 1.6, rng.uniform(*freq),
                        rng.uniform(0, 2 * math.pi)))
    out.append((2, z_amp, rng.uniform(*freq), rng.uniform(0, 2 * math.pi)))
    return out


def _orbit(rng, amp=(0.3, 0.45), freq=(0.1, 0.16), z_amp=0.05):
    """Lissajous loop with a random frequency ratio: planar excitation within a few
    seconds, and a shape no rotation maps onto another drone's loop."""
    a, f = rng.uniform(*amp), rng.uniform(*freq)
    r = rng.uniform(1.5, 2.2)
    return [(0, a, f, rng.uniform(0, 2 * math.pi)), (1, a * rng.uniform(0.8, 1.0), f * r,
                                                    rng.uniform(0, 2 * math.pi)),
            (2, z_amp, rng.uniform(*freq), rng.uniform(0, 2 * math.pi))]


def _yaw(rng, amp, freq=(0.05, 0.15)):
    return [(amp, rng.uniform(*freq), rng.uniform(0, 2 * math.pi))]


def _small_bias(rng, g=0.002, a=0.03):
    return tuple(rng.normal(0, g, 3)), tuple(rng.normal(0, a, 3))


def _plane(center, normal, extent, refl=60, u=None) -> Plane:
    return Plane(tuple(map(float, center)), tuple(map(float, normal)), tuple(map(float, extent)),
                 refl, None if u is None else tuple(map(float, u)))


def _room(rng):
    planes = [
        _plane((2, 0, 0), (0, 0, 1), (16, 16)),
        _plane((2, 0, 4), (0, 0, -1), (16, 16)),
        _plane((-6, 0, 2), (1, 0, 0), (16, 4)),
        _plane((10, 0, 2), (-1, 0, 0), (16, 4)),
        _plane((2, 8, 2), (0, -1, 0), (16, 4)),
        _plane((2, -8, 2), (0, 1, 0), (16, 4)),
    ]
    spots = [(-4, 5), (-4, -5), (1, 6), (1, -6), (7, 5.5), (7, -5.5), (8, 0), (-4.5, 0)]
    for x, y in spots:
        size = (rng.uniform(0.6, 1.6), rng.uniform(0.6, 1.6), rng.uniform(1.0, 3.0))
        planes += box_planes((x, y, size[2] / 2), size, rng.uniform(0, math.pi), 70)
    drones = []
    layout = [(1, "mid360", (4.0, 1.2, 1.2), 0.3), (2, "avia", (0.0, 0.0, 1.3), 0.06),
              (3, "mid360", (4.0, -1.2, 1.2), 0.3)]
    for did, sensor, start, yaw_amp in layout:
        bg, ba = _small_bias(rng)
        drones.append(DroneSpec(
            id=did, sensor=sensor, waypoints=[(0.0, *start)], yaw=0.0,
            wiggles=_orbit(rng),
            yaw_wiggles=_yaw(rng, yaw_amp),
            bias_gyro=bg, bias_acc=ba))
    return planes, [], drones


WALL_DEGENERATE_FROM = 18.0  # drone 2 sees nothing but the wall from here on


def _wall(rng):
    planes = [_plane((8, 0, 2), (-1, 0, 0), (40, 12), 60)]
    # structure behind drone 2's forward-looking pyramid; only the 360-degree sensors see it
    planes.append(_plane((-2.25, 0, 0), (0, 0, 1), (11.5, 16), 50))
    planes.append(_plane((-3.5, 0, 4), (0, 0, -1), (9, 16), 50))
    for x, y in [(-2, 5), (-2.5, -5), (-4, 1.5), (-5, -2), (-1.5, 0), (-6, 5)]:
        size = (rng.uniform(0.8, 1.8), rng.uniform(0.8, 1.8), rng.uniform(1.5, 3.5))
        planes += box_planes((x, y, size[2] / 2), size, rng.uniform(0, math.pi), 70)
    # take-off clutter in front of drone 2; it flies past and leaves it behind
    # turned about 45 degrees so their faces also pin down the lateral axis; kept
    # near the centre line so they never block the teammates' view of drone 2 later
    for y, h in [(0.5, 2.4), (-0.5, 2.0)]:
        planes += box_planes((2.0, y, h / 2), (0.5, 0.5, h), math.pi / 4 + rng.uniform(-0.2, 0.2), 70)
    planes += box_planes((2.5, 0.0, 0.4), (0.8, 0.8, 0.8), rng.uniform(0, math.pi / 2), 70)
    drones = []
    for did, y in [(1, 2.5), (3, -2.5)]:
        bg, ba = _small_bias(rng)
        drones.append(DroneSpec(
            id=did, sensor="mid360", waypoints=[(0.0, 1.0, y, 1.4)],
            wiggles=_orbit(rng), yaw_wiggles=_yaw(rng, 0.3), bias_gyro=bg, bias_acc=ba))
    t0 = WALL_DEGENERATE_FROM
    # a diamond in the y-z plane during take-off gives the teammate extrinsics a
    # two-dimensional baseline
    sweep = [(0.0, 0.5, 0.0, 1.5), (5.0, 0.5, 0.0, 1.5), (7.6, 0.5, 1.1, 2.1),
             (10.2, 0.5, 0.0, 2.6), (12.9, 0.5, -1.1, 2.1), (t0 - 2.5, 0.5, 0.0, 1.5), (t0, 4.5, 0.0, 1.5),
             (t0 + 6, 4.5, 2.0, 1.5), (t0 + 13, 4.5, -2.0, 1.5), (t0 + 20, 4.5, 1.5, 1.5),
             (t0 + 27.5, 4.5, 0.0, 1.5)]
    drones.insert(1, DroneSpec(
        id=2, sensor="avia", waypoints=sweep, wiggles=_orbit(rng, amp=(0.5, 0.6)),
        yaw_wiggles=[(0.35, 0.11, rng.uniform(0, 2 * math.pi))],
        bias_gyro=(0.002, -0.0015, 0.001), bias_acc=(0.12, -0.1, 0.05)))
    return planes, [], drones


def _facade(x, normal_x, half_w, height, open_w, open_h, refl=55):
    """A wall in the plane x = const with a rectangular opening on the y = 0 axis."""
    side = (half_w - open_w / 2)
    yc = open_w / 2 + side / 2
    return [
        _plane((x, yc, height / 2), (normal_x, 0, 0), (side, height), refl, (0, 1, 0)),
        _plane((x, -yc, height / 2), (normal_x, 0, 0), (side, height), refl, (0, 1, 0)),
        _plane((x, 0, (height + open_h) / 2), (normal_x, 0, 0), (open_w, height - open_h), refl,
               (0, 1, 0)),
    ]


def _corridor(rng, length=16.0, width=2.4, height=2.6):
    L, hw = length, width / 2
    planes = [
        _plane((L / 2, 0, 0), (0, 0, 1), (L, width), 45),
        _plane((L / 2, 0, height), (0, 0, -1), (L, width), 45),
        _plane((L / 2, hw, height / 2), (0, -1, 0), (L, height), 45),
        _plane((L / 2, -hw, height / 2), (0, 1, 0), (L, height), 45),
    ]
    planes += _facade(0.0, -1.0, 9.0, 4.0, width, height)
    planes += _facade(L, 1.0, 9.0, 4.0, width, height)
    planes.append(_plane((-6, 0, 0), (0, 0, 1), (12, 18), 50))
    planes.append(_plane((L + 6, 0, 0), (0, 0, 1), (12, 18), 50))
    # clutter kept off the corridor axis so it is hidden from deep inside
    for x in (-2.5, -5.0, -7.5):
        for side in (1, -1):
            size = (rng.uniform(0.8, 1.6), rng.uniform(0.8, 1.6), rng.uniform(1.5, 3.0))
            planes += box_planes((x, side * rng.uniform(4.5, 6.5), size[2] / 2), size,
                                 rng.uniform(0, math.pi), 70)
            planes += box_planes((L - x, side * rng.uniform(4.5, 6.5), size[2] / 2), size,
                                 rng.uniform(0, math.pi), 70)
    z = 1.3

    def diamond(x, y, axis):
        # a slow loop in front of the entrance gives every track a 2-D spread
        u = np.array([1.0, 0.0] if axis == "x" else [0.0, 1.0]) * 0.6
        return [(t, x + a * u[0], y + a * u[1], z + dz)
                for t, a, dz in [(0.0, 0, 0), (2.0, 0, 0), (4.5, 1, 0.5), (7.0, 0, 1.0),
                                 (9.5, -1, 0.5), (12.0, 0, 0)]]

    # hover and advance: one drone moves at a time and never gets more than
    # about 5 m from the teammate it leans on; 3 stays at the entrance
    d1 = diamond(-0.8, 0.0, "y") + [
        (17.0, 3.0, 0.3, z), (22.0, 3.0, 0.3, z), (27.0, 6.0, 0.3, z), (32.0, 6.0, 0.3, z),
        (37.0, 8.5, 0.3, z), (42.0, 8.5, 0.3, z), (48.0, L + 1.5, 0.5, z)]
    d2 = diamond(-2.0, 0.7, "x") + [
        (17.0, -2.0, 0.7, z), (22.0, 1.0, -0.3, z), (27.0, 1.0, -0.3, z), (32.0, 3.5, -0.3, z),
        (48.0, 3.5, -0.3, z), (60.0, L + 1.5, -0.7, z)]
    d3 = diamond(-2.0, -0.7, "x")
    drones = []
    for did, wp in [(1, d1), (2, d2), (3, d3)]:
        bg, ba = _small_bias(rng)
        drones.append(DroneSpec(
            id=did, sensor="mid360", waypoints=wp,
            wiggles=_wiggles(rng, amp=(0.15, 0.25), z_amp=0.04), yaw_wiggles=_yaw(rng, 0.3),
            bias_gyro=bg, bias_acc=ba))
    # the accelerometer of 1 is still warming up, which nothing inside the
    # corridor can observe along its axis
    drones[0] = drones[0].model_copy(update={"bias_acc": (0.12, -0.1, 0.04),
                                             "bias_acc_drift": (1e-3, 3e-4, 0.0),
                                             "bias_gyro": (0.002, 0.0015, -0.001)})
    drones[1] = drones[1].model_copy(update={"bias_acc": (-0.1, 0.12, 0.04)})
    return planes, [], drones


def _exploration(rng):
    planes = [_plane((0, 0, 0), (0, 0, 1), (160, 160), 40)]
    headings = [0.0, 2 * math.pi / 3, 4 * math.pi / 3]

    def near_path(x, y, clearance):
        r = math.hypot(x, y)
        if r < 9.0:
            return True
        for h in headings:
            along = x * math.cos(h) + y * math.sin(h)
            across = abs(-x * math.sin(h) + y * math.cos(h))
            if -2 < along < 40 and across < clearance:
                return True
        return False

    for gx in np.arange(-48, 49, 8.0):
        for gy in np.arange(-48, 49, 8.0):
            x, y = gx + rng.uniform(-2, 2), gy + rng.uniform(-2, 2)
            if near_path(x, y, 6.0):
                continue
            size = (rng.uniform(2, 5), rng.uniform(2, 5), rng.uniform(3, 9))
            planes += box_planes((x, y, size[2] / 2), size, rng.uniform(0, math.pi), 70)
    # low clutter around the take-off area
    for k in range(8):
        a = 2 * math.pi * k / 8 + rng.uniform(-0.2, 0.2)
        r = rng.uniform(6.0, 8.0)
        x, y = r * math.cos(a), r * math.sin(a)
        if near_path(x, y, 2.5) and r > 5:
            a += math.pi / 8
            x, y = r * math.cos(a), r * math.sin(a)
        size = (rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4), rng.uniform(0.8, 2.5))
        planes += box_planes((x, y, size[2] / 2), size, rng.uniform(0, math.pi), 70)
    drones = []
    starts = [(2.0, 0.0), (-1.0, 1.7), (-1.0, -1.7)]
    for did, (h, (sx, sy)) in enumerate(zip(headings, starts), start=1):
        far = (sx + 32 * math.cos(h), sy + 32 * math.sin(h))
        z = 1.5 + 0.1 * did
        # out of sight of each other for more than a minute before the return
        wp = [(0.0, sx, sy, z), (18.0, sx, sy, z), (48.0, *far, z), (76.0, *far, z),
              (106.0, sx, sy, z)]
        bg, ba = _small_bias(rng)
        drones.append(DroneSpec(
            id=did, sensor="mid360", waypoints=wp, yaw=rng.uniform(-math.pi, math.pi),
            wiggles=_wiggles(rng, amp=(0.3, 0.5), z_amp=0.05), yaw_wiggles=_yaw(rng, 0.3),
            wiggle_window=(1.0, 1e9), bias_gyro=bg, bias_acc=ba))
    return planes, [], drones


_PRESETS = {"room": _room, "wall": _wall, "corridor": _corridor, "exploration": _exploration}


def preset(name: str, seed: int):
    """(planes, decoys, drone specs) for a named scene."""
    if name == "custom":
        return [], [], []
    rng = np.random.default_rng([seed, 0x5CE])
    return _PRESETS[name](rng)


def sensor_model(name: str, cfg: ScenarioConfig) -> SensorModel:
    over = cfg.sensors[name].values() if name in cfg.sensors else {}
    if name in _SENSOR_PRESETS:
        return _SENSOR_PRESETS[name](**over)
    if name not in cfg.sensors:
        raise ValueError(f"drone sensor {name!r} is neither a preset nor defined under [sensors]")
    return SensorModel(**over)


def scenario_duration(cfg: ScenarioConfig) -> float:
    return cfg.duration if cfg.duration is not None else DEFAULT_DURATION[cfg.scenario]


def build_scenario(cfg: ScenarioConfig):
    """(WorldModel, trajectories by id, sensors by id, drone specs by id)."""
    planes, decoys, drones = preset(cfg.scenario, cfg.seed)
    if cfg.drones:
        drones = list(cfg.drones)
    if not drones:
        raise ValueError("scenario has no drones")
    ids = [d.id for d in drones]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate drone ids in {ids}")
    for p in cfg.world.planes:
        planes.append(Plane(p.center, tuple(np.asarray(p.normal) / np.linalg.norm(p.normal)),
                            p.extent, p.reflectivity, p.u_axis))
    for b in cfg.world.boxes:
        planes += box_planes(b.center, b.size, b.yaw, b.reflectivity)
    decoys = list(decoys) + [Sphere(d.center, d.radius, d.reflectivity) for d in cfg.world.decoys]
    world = WorldModel(tuple(planes), cfg.world.marker_radius, cfg.world.marker_reflectivity,
                       tuple(decoys), cfg.world.incidence_attenuation)
    t_max = scenario_duration(cfg) + 1.0
    trajs, sensors, specs = {}, {}, {}
    for d in sorted(drones, key=lambda d: d.id):
        trajs[d.id] = TrueTrajectory(
            d.id, np.asarray(d.waypoints, dtype=float), list(d.wiggles), d.yaw,
            list(d.yaw_wiggles), list(d.roll_wiggles), list(d.pitch_wiggles),
            tuple(d.wiggle_window), t_max=t_max)
        sensors[d.id] = sensor_model(d.sensor, cfg)
        specs[d.id] = d
    periods = {s.scan_period for s in sensors.values()}
    if len(periods) != 1:
        raise ValueError("all drones must share one scan period")
    return world, trajs, sensors, specs
