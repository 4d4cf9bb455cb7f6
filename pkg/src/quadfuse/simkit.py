"""Synthetic scenes, four-sensor rendering, and parametric weather.

All randomness flows through numpy SeedSequence streams derived from
(seed, purpose tag), so scene generation, rendering, and weather are pure
functions of their inputs and agree between serial and parallel runs.

Weather semantics:

* fog(beta): LiDAR points at range r survive with probability
  exp(-2 * beta * r) (two-way Beer-Lambert); backscatter clutter appears
  below 15 m; RGB depth noise doubles; gated depth and radar untouched.
* snow(lam): Poisson clutter (rate lam per cubic meter of the sensitive
  volume) added to both point clouds.
* night: RGB appearance signal-to-noise drops 4x (signal scaled 0.25,
  noise floor kept); gated appearance, depths, and point clouds untouched.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .evalkit import bev_iou
from .geometry import (CAR, PEDESTRIAN, Box3D, CameraModel, DepthMap,
                       PointCloud, RigidTransform)

TAG_SCENE = 1
TAG_RENDER = 2
TAG_WEATHER = 3

BACKSCATTER_RATE = 200.0  # Poisson mean of fog backscatter points per unit beta
BACKSCATTER_MAX_RANGE = 15.0
RADAR_CAP_FRACTION = 0.05

CAR_SIZE = (1.8, 4.5, 1.6)
PED_SIZE = (0.6, 0.6, 1.8)

INTENSITY = {CAR: 0.8, PEDESTRIAN: 0.45}
RCS = {CAR: 1.0, PEDESTRIAN: 0.3}
GROUND_INTENSITY = 0.1
CLUTTER_INTENSITY = 0.05


class PlacementError(RuntimeError):
    """Rejection sampling could not place an object within the retry budget."""


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    """Weather/illumination condition; beta for fog, lam for snow."""

    kind: str
    beta: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("clear_day", "night", "fog", "snow"):
            raise ValueError(f"unknown condition kind {self.kind!r}")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("condition parameters must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "Condition":
        if ":" in text:
            kind, value = text.split(":", 1)
            if kind == "fog":
                return cls("fog", beta=float(value))
            if kind == "snow":
                return cls("snow", lam=float(value))
            raise ValueError(f"condition {kind!r} takes no parameter")
        return cls(text)

    def __str__(self) -> str:
        if self.kind == "fog":
            return f"fog:{self.beta:g}"
        if self.kind == "snow":
            return f"snow:{self.lam:g}"
        return self.kind


CLEAR_DAY = Condition("clear_day")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Scene content: object counts and the placement ROI."""

    x_range: tuple[float, float] = (-20.0, 20.0)
    z_range: tuple[float, float] = (6.0, 44.0)
    n_cars: int = 4
    n_pedestrians: int = 2
    retry_budget: int = 200
    max_bev_overlap: float = 0.10
    size_jitter: float = 0.1

    def __post_init__(self):
        if self.n_cars < 0 or self.n_pedestrians < 0:
            raise ValueError("object counts must be non-negative")
        if not (self.x_range[1] > self.x_range[0]
                and self.z_range[1] > self.z_range[0]):
            raise ValueError("empty placement ROI")


@dataclass(frozen=True)
class RigConfig:
    """Sensor rig: two forward cameras, roof LiDAR, bumper radar.

    Mounting heights are expressed in the y-down world frame (sensor
    positions have negative y).  Ground/clutter extent doubles as the
    sensitive volume for snow clutter.
    """

    rgb_cam: CameraModel
    gated_cam: CameraModel
    x_range: tuple[float, float] = (-24.0, 24.0)
    z_range: tuple[float, float] = (0.0, 48.0)
    y_lidar: tuple[float, float] = (-3.0, 1.0)
    y_radar: tuple[float, float] = (-0.2, 0.4)
    lidar_origin: tuple[float, float, float] = (0.0, -1.7, 0.0)
    radar_origin: tuple[float, float, float] = (0.0, -0.5, 0.0)
    lidar_flux: float = 900.0
    lidar_jitter: float = 0.02
    lidar_points_min: int = 3
    lidar_points_max: int = 400
    n_ground: int = 400
    ground_jitter: float = 0.01
    sigma_rgb_depth: float = 0.05
    sigma_gated_depth: float = 0.02
    appearance_sigma: float = 0.1
    p_ped: float = 0.5
    radar_cluster_max: int = 3
    radar_sigma_xz: float = 0.3
    radar_clutter_mean: float = 3.0
    max_depth: float = 90.0


def default_rig(x_range=(-24.0, 24.0), z_range=(0.0, 48.0), width=96,
                height=48, focal=72.0) -> RigConfig:
    cy = (height - 1) / 2.0
    cx = (width - 1) / 2.0
    cam_h = -1.6
    rgb = CameraModel(fx=focal, fy=focal, cx=cx, cy=cy, width=width,
                      height=height,
                      extrinsic=RigidTransform(np.eye(3), [0.0, cam_h, 0.0]))
    gated = CameraModel(fx=focal, fy=focal, cx=cx, cy=cy, width=width,
                        height=height,
                        extrinsic=RigidTransform(np.eye(3), [0.15, cam_h, 0.0]))
    return RigConfig(rgb_cam=rgb, gated_cam=gated, x_range=x_range,
                     z_range=z_range)


# ---------------------------------------------------------------------------
# scene and frame types
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    objects: list
    seed: int
    condition: Condition = CLEAR_DAY


@dataclass(frozen=True)
class FrameMeta:
    """Rig facts a frame must remember so weather can be applied later."""

    lidar_origin: tuple[float, float, float]
    x_range: tuple[float, float]
    z_range: tuple[float, float]
    y_lidar: tuple[float, float]
    y_radar: tuple[float, float]
    rgb_depth_sigma: float
    gated_depth_sigma: float
    appearance_sigma: float


@dataclass
class SensorFrame:
    """One rendered multi-sensor capture of a scene."""

    rgb_appearance: np.ndarray
    gated_appearance: np.ndarray
    rgb_depth: DepthMap
    gated_depth: DepthMap
    lidar: PointCloud
    radar: PointCloud
    seed: int
    meta: FrameMeta

    def __post_init__(self):
        cap = int(np.floor(RADAR_CAP_FRACTION * len(self.lidar)))
        if len(self.radar) > cap:
            raise ValueError(f"radar has {len(self.radar)} points, "
                             f"cap is {cap} (5% of {len(self.lidar)} lidar)")


def _cap_radar(radar: PointCloud, n_lidar: int) -> PointCloud:
    """Truncate to the sparseness cap, keeping the earliest points (real
    clusters are emitted before clutter)."""
    cap = int(np.floor(RADAR_CAP_FRACTION * n_lidar))
    if len(radar) > cap:
        return radar.select(slice(0, cap))
    return radar


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _place_box(rng, cfg: SimConfig, cls: int, placed) -> Box3D:
    base = CAR_SIZE if cls == CAR else PED_SIZE
    for _ in range(cfg.retry_budget):
        scale = rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter, size=3)
        w, l, h = (base[0] * scale[0], base[1] * scale[1], base[2] * scale[2])
        box = Box3D(x=rng.uniform(*cfg.x_range), y=-h / 2.0,
                    z=rng.uniform(*cfg.z_range), w=w, l=l, h=h,
                    yaw=rng.uniform(-np.pi, np.pi), cls=cls)
        if all(bev_iou(box, other) <= cfg.max_bev_overlap for other in placed):
            return box
    raise PlacementError(f"could not place object {len(placed)} "
                         f"within {cfg.retry_budget} tries")


def generate_scene(config: SimConfig, seed: int,
                   condition: Condition = CLEAR_DAY) -> Scene:
    """Deterministic rejection-sampled scene; cars first, then pedestrians."""
    rng = _rng(seed, TAG_SCENE)
    objects = []
    for _ in range(config.n_cars):
        objects.append(_place_box(rng, config, CAR, objects))
    for _ in range(config.n_pedestrians):
        objects.append(_place_box(rng, config, PEDESTRIAN, objects))
    return Scene(objects=objects, seed=int(seed), condition=condition)


# ---------------------------------------------------------------------------
# depth / appearance rendering
# ---------------------------------------------------------------------------

def _slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - o) / d
        t1 = (hi - o) / d
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    par = np.abs(d) < 1e-12
    inside = (o >= lo) & (o <= hi)
    near = np.where(par, np.where(inside, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    return near, far


def raycast(cam: CameraModel, boxes, max_depth: float):
    """Per-pixel nearest hit along camera rays.

    Returns (depth (H, W), hit_id (H, W)) where hit_id is the box index,
    -1 for the ground plane, -2 for sky (no hit within max_depth).  Depth
    is the camera-frame z of the hit, matching the lifting convention.
    """
    H, W = cam.height, cam.width
    vv, uu = np.mgrid[0:H, 0:W]
    d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy,
                      np.ones((H, W))], axis=-1)
    R = cam.extrinsic.rotation
    origin = cam.extrinsic.translation
    d_world = d_cam @ R.T

    best_t = np.full((H, W), np.inf)
    hit_id = np.full((H, W), -2, dtype=np.int64)

    dy = d_world[..., 1]
    with np.errstate(divide="ignore"):
        t_ground = np.where(dy > 1e-9, (0.0 - origin[1]) / dy, np.inf)
    ground_hit = t_ground < best_t
    best_t = np.where(ground_hit, t_ground, best_t)
    hit_id = np.where(ground_hit, -1, hit_id)

    for i, box in enumerate(boxes):
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        ox = origin[0] - box.x
        oy = origin[1] - box.y
        oz = origin[2] - box.z
        # rotate into the box frame (inverse yaw about the vertical axis)
        obx = ox * c + oz * s
        obz = -ox * s + oz * c
        dbx = d_world[..., 0] * c + d_world[..., 2] * s
        dbz = -d_world[..., 0] * s + d_world[..., 2] * c
        n0, f0 = _slab(obx, dbx, -box.w / 2, box.w / 2)
        n1, f1 = _slab(oy, d_world[..., 1], -box.h / 2, box.h / 2)
        n2, f2 = _slab(obz, dbz, -box.l / 2, box.l / 2)
        t_near = np.maximum(np.maximum(n0, n1), n2)
        t_far = np.minimum(np.minimum(f0, f1), f2)
        valid = (t_near <= t_far) & (t_far > 1e-6)
        t_hit = np.where(t_near > 1e-6, t_near, t_far)
        closer = valid & (t_hit < best_t)
        best_t = np.where(closer, t_hit, best_t)
        hit_id = np.where(closer, i, hit_id)

    sky = best_t > max_depth
    best_t = np.where(sky, 0.0, best_t)
    hit_id = np.where(sky, -2, hit_id)
    return best_t, hit_id


def _appearance(hit_id, boxes, gated: bool, rng, sigma: float):
    """Class-dependent 3-channel patterns plus Gaussian pixel noise."""
    H, W = hit_id.shape
    vv, uu = np.mgrid[0:H, 0:W]
    checker = ((uu // 4 + vv // 4) % 2).astype(np.float64)
    stripes = ((vv // 2) % 2).astype(np.float64)
    app = np.zeros((3, H, W))
    ground = hit_id == -1
    app[0][ground] = 0.15 if gated else 0.1
    app[1][ground] = 0.15 if gated else 0.1
    for i, box in enumerate(boxes):
        m = hit_id == i
        if box.cls == CAR:
            app[0][m] = 0.9 if gated else 1.0
            app[1][m] = 0.9 if gated else 0.2
            app[2][m] = (0.5 if gated else 0.6) * checker[m]
        else:
            app[0][m] = 0.5 if gated else 0.2
            app[1][m] = 0.5 if gated else 1.0
            app[2][m] = 0.6 * stripes[m]
    return app + rng.normal(0.0, sigma, size=app.shape)


# ---------------------------------------------------------------------------
# point cloud rendering
# ---------------------------------------------------------------------------

def _sample_box_surface(rng, box: Box3D, n: int, jitter: float):
    """n points on the four vertical faces, uniform by face area."""
    w, l, h = box.w, box.l, box.h
    p_face = np.array([l, l, w, w]) / (2.0 * (w + l))
    faces = rng.choice(4, size=n, p=p_face)
    u = np.empty(n)
    v = np.empty(n)
    along_l = rng.uniform(-l / 2, l / 2, size=n)
    along_w = rng.uniform(-w / 2, w / 2, size=n)
    u[faces == 0] = -w / 2
    u[faces == 1] = w / 2
    u[faces >= 2] = along_w[faces >= 2]
    v[faces == 2] = -l / 2
    v[faces == 3] = l / 2
    v[faces < 2] = along_l[faces < 2]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    x = box.x + u * c - v * s
    z = box.z + u * s + v * c
    y = box.y + rng.uniform(-h / 2, h / 2, size=n)
    pts = np.stack([x, y, z], axis=1)
    return pts + rng.normal(0.0, jitter, size=pts.shape)


def expected_lidar_points(rig: RigConfig, box: Box3D) -> int:
    """Range-law point budget for one object; this is the test oracle."""
    r = float(np.linalg.norm(np.asarray([box.x, box.y, box.z])
                             - np.asarray(rig.lidar_origin)))
    area = (box.w + box.l) * box.h
    n = int(np.ceil(rig.lidar_flux * area / max(r * r, 1.0)))
    return int(np.clip(n, rig.lidar_points_min, rig.lidar_points_max))


def _render_lidar(rng, scene: Scene, rig: RigConfig) -> PointCloud:
    clouds = []
    for box in scene.objects:
        n = expected_lidar_points(rig, box)
        pts = _sample_box_surface(rng, box, n, rig.lidar_jitter)
        inten = np.clip(INTENSITY[box.cls] + rng.normal(0, 0.05, size=n), 0, 1)
        clouds.append(PointCloud(pts, inten[:, None]))
    gx = rng.uniform(*rig.x_range, size=rig.n_ground)
    gz = rng.uniform(*rig.z_range, size=rig.n_ground)
    gy = rng.normal(0.0, rig.ground_jitter, size=rig.n_ground)
    ground = PointCloud(np.stack([gx, gy, gz], axis=1),
                        np.full((rig.n_ground, 1), GROUND_INTENSITY))
    cloud = PointCloud.empty(1)
    for part in clouds:
        cloud = cloud.concat(part)
    return cloud.concat(ground)


def _render_radar(rng, scene: Scene, rig: RigConfig) -> PointCloud:
    clouds = []
    for box in scene.objects:
        detect = box.cls == CAR or rng.random() < rig.p_ped
        if not detect:
            continue
        m = int(rng.integers(1, rig.radar_cluster_max + 1))
        x = box.x + rng.normal(0, rig.radar_sigma_xz, size=m)
        z = box.z + rng.normal(0, rig.radar_sigma_xz, size=m)
        y = rng.uniform(*rig.y_radar, size=m)
        rcs = np.clip(RCS[box.cls] + rng.normal(0, 0.1, size=m), 0, 2)
        clouds.append(PointCloud(np.stack([x, y, z], axis=1), rcs[:, None]))
    n_clutter = int(rng.poisson(rig.radar_clutter_mean))
    cx = rng.uniform(*rig.x_range, size=n_clutter)
    cz = rng.uniform(*rig.z_range, size=n_clutter)
    cy = rng.uniform(*rig.y_radar, size=n_clutter)
    clutter = PointCloud(np.stack([cx, cy, cz], axis=1),
                         np.full((n_clutter, 1), CLUTTER_INTENSITY))
    cloud = PointCloud.empty(1)
    for part in clouds:
        cloud = cloud.concat(part)
    return cloud.concat(clutter)


def render_sensors(scene: Scene, rig: RigConfig) -> SensorFrame:
    """Render all four sensors under clear conditions.

    Weather/illumination degradation is applied separately by
    apply_weather so ablations share identical base frames.
    """
    rng = _rng(scene.seed, TAG_RENDER)
    meta = FrameMeta(lidar_origin=tuple(rig.lidar_origin),
                     x_range=tuple(rig.x_range), z_range=tuple(rig.z_range),
                     y_lidar=tuple(rig.y_lidar), y_radar=tuple(rig.y_radar),
                     rgb_depth_sigma=rig.sigma_rgb_depth,
                     gated_depth_sigma=rig.sigma_gated_depth,
                     appearance_sigma=rig.appearance_sigma)

    depth_maps = {}
    apps = {}
    for name, cam, sigma, gated in (("rgb", rig.rgb_cam, rig.sigma_rgb_depth, False),
                                    ("gated", rig.gated_cam,
                                     rig.sigma_gated_depth, True)):
        depth, hit_id = raycast(cam, scene.objects, rig.max_depth)
        valid = hit_id > -2
        noisy = depth + np.where(valid, rng.normal(0, sigma, size=depth.shape),
                                 0.0)
        noisy = np.where(valid, np.maximum(noisy, 0.01), 0.0)
        depth_maps[name] = DepthMap(noisy, valid)
        apps[name] = _appearance(hit_id, scene.objects, gated, rng,
                                 rig.appearance_sigma)

    lidar = _render_lidar(rng, scene, rig)
    radar = _cap_radar(_render_radar(rng, scene, rig), len(lidar))
    return SensorFrame(rgb_appearance=apps["rgb"],
                       gated_appearance=apps["gated"],
                       rgb_depth=depth_maps["rgb"],
                       gated_depth=depth_maps["gated"],
                       lidar=lidar, radar=radar, seed=scene.seed, meta=meta)


# ---------------------------------------------------------------------------
# weather
# ---------------------------------------------------------------------------

def _fog(frame: SensorFrame, beta: float, rng) -> SensorFrame:
    origin = np.asarray(frame.meta.lidar_origin)
    r = np.linalg.norm(frame.lidar.xyz - origin, axis=1)
    u = rng.random(len(r))
    # paired-seed monotonicity: the same uniforms decide survival for every
    # beta, so the surviving set shrinks as beta grows
    keep = u < np.exp(-2.0 * beta * r)
    lidar = frame.lidar.select(keep)

    n_back = int(rng.poisson(BACKSCATTER_RATE * beta))
    if n_back:
        rb = rng.uniform(1.0, BACKSCATTER_MAX_RANGE, size=n_back)
        az = rng.uniform(-np.pi / 3, np.pi / 3, size=n_back)
        el = rng.uniform(-0.1, 0.25, size=n_back)
        dirs = np.stack([np.sin(az) * np.cos(el), np.sin(el),
                         np.cos(az) * np.cos(el)], axis=1)
        pts = origin + rb[:, None] * dirs
        lidar = lidar.concat(PointCloud(pts,
                                        np.full((n_back, 1), CLUTTER_INTENSITY)))

    sigma = frame.meta.rgb_depth_sigma
    extra = sigma * np.sqrt(3.0)  # total std doubles: sqrt(s^2 + 3 s^2) = 2 s
    dm = frame.rgb_depth
    noisy = dm.values + np.where(dm.valid,
                                 rng.normal(0, extra, size=dm.values.shape), 0.0)
    noisy = np.where(dm.valid, np.maximum(noisy, 0.01), 0.0)
    rgb_depth = DepthMap(noisy, dm.valid)
    meta = replace(frame.meta, rgb_depth_sigma=2.0 * sigma)
    return SensorFrame(rgb_appearance=frame.rgb_appearance,
                       gated_appearance=frame.gated_appearance,
                       rgb_depth=rgb_depth, gated_depth=frame.gated_depth,
                       lidar=lidar, radar=_cap_radar(frame.radar, len(lidar)),
                       seed=frame.seed, meta=meta)


def _snow(frame: SensorFrame, lam: float, rng) -> SensorFrame:
    meta = frame.meta
    dx = meta.x_range[1] - meta.x_range[0]
    dz = meta.z_range[1] - meta.z_range[0]

    def clutter(y_range):
        vol = dx * dz * (y_range[1] - y_range[0])
        n = int(rng.poisson(lam * vol))
        x = rng.uniform(*meta.x_range, size=n)
        z = rng.uniform(*meta.z_range, size=n)
        y = rng.uniform(*y_range, size=n)
        return PointCloud(np.stack([x, y, z], axis=1),
                          np.full((n, 1), CLUTTER_INTENSITY))

    lidar = frame.lidar.concat(clutter(meta.y_lidar))
    radar = frame.radar.concat(clutter(meta.y_radar))
    return SensorFrame(rgb_appearance=frame.rgb_appearance,
                       gated_appearance=frame.gated_appearance,
                       rgb_depth=frame.rgb_depth, gated_depth=frame.gated_depth,
                       lidar=lidar, radar=_cap_radar(radar, len(lidar)),
                       seed=frame.seed, meta=meta)


def _night(frame: SensorFrame, rng) -> SensorFrame:
    sigma = frame.meta.appearance_sigma
    scale = 0.25
    # keep the noise floor at sigma while the signal shrinks 4x
    top_up = sigma * np.sqrt(1.0 - scale * scale)
    rgb = (scale * frame.rgb_appearance
           + rng.normal(0, top_up, size=frame.rgb_appearance.shape))
    return SensorFrame(rgb_appearance=rgb,
                       gated_appearance=frame.gated_appearance,
                       rgb_depth=frame.rgb_depth, gated_depth=frame.gated_depth,
                       lidar=frame.lidar, radar=frame.radar,
                       seed=frame.seed, meta=frame.meta)


def apply_weather(frame: SensorFrame, condition: Condition) -> SensorFrame:
    """Degrade a clear frame according to the condition; deterministic in
    (frame.seed, condition)."""
    rng = _rng(frame.seed, TAG_WEATHER)
    if condition.kind == "clear_day":
        return frame
    if condition.kind == "fog":
        return _fog(frame, condition.beta, rng)
    if condition.kind == "snow":
        return _snow(frame, condition.lam, rng)
    return _night(frame, rng)


def make_frame(scene: Scene, rig: RigConfig) -> SensorFrame:
    """Render and weather in one step using the scene's own condition."""
    return apply_weather(render_sensors(scene, rig), scene.condition)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _enc(a: np.ndarray) -> dict:
    if a.dtype == bool:
        return {"dtype": "u1", "shape": list(a.shape),
                "b64": base64.b64encode(
                    np.ascontiguousarray(a, dtype="<u1").tobytes()).decode()}
    return {"dtype": "f8", "shape": list(a.shape),
            "b64": base64.b64encode(
                np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()}


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["b64"])
    if d["dtype"] == "u1":
        return np.frombuffer(raw, dtype="<u1").reshape(d["shape"]).astype(bool)
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


def scene_to_dict(scene: Scene) -> dict:
    return {"seed": scene.seed, "condition": str(scene.condition),
            "objects": [list(b.as_array()) for b in scene.objects]}


def scene_from_dict(d: dict) -> Scene:
    return Scene(objects=[Box3D.from_array(a) for a in d["objects"]],
                 seed=int(d["seed"]),
                 condition=Condition.parse(d["condition"]))


def frame_to_dict(frame: SensorFrame) -> dict:
    m = frame.meta
    return {
        "seed": frame.seed,
        "meta": {"lidar_origin": list(m.lidar_origin),
                 "x_range": list(m.x_range), "z_range": list(m.z_range),
                 "y_lidar": list(m.y_lidar), "y_radar": list(m.y_radar),
                 "rgb_depth_sigma": m.rgb_depth_sigma,
                 "gated_depth_sigma": m.gated_depth_sigma,
                 "appearance_sigma": m.appearance_sigma},
        "rgb_appearance": _enc(frame.rgb_appearance),
        "gated_appearance": _enc(frame.gated_appearance),
        "rgb_depth": {"values": _enc(frame.rgb_depth.values),
                      "valid": _enc(frame.rgb_depth.valid)},
        "gated_depth": {"values": _enc(frame.gated_depth.values),
                        "valid": _enc(frame.gated_depth.valid)},
        "lidar": {"xyz": _enc(frame.lidar.xyz), "attrs": _enc(frame.lidar.attrs)},
        "radar": {"xyz": _enc(frame.radar.xyz), "attrs": _enc(frame.radar.attrs)},
    }


def frame_from_dict(d: dict) -> SensorFrame:
    m = d["meta"]
    meta = FrameMeta(lidar_origin=tuple(m["lidar_origin"]),
                     x_range=tuple(m["x_range"]), z_range=tuple(m["z_range"]),
                     y_lidar=tuple(m["y_lidar"]), y_radar=tuple(m["y_radar"]),
                     rgb_depth_sigma=m["rgb_depth_sigma"],
                     gated_depth_sigma=m["gated_depth_sigma"],
                     appearance_sigma=m["appearance_sigma"])
    return SensorFrame(
        rgb_appearance=_dec(d["rgb_appearance"]),
        gated_appearance=_dec(d["gated_appearance"]),
        rgb_depth=DepthMap(_dec(d["rgb_depth"]["values"]),
                           _dec(d["rgb_depth"]["valid"])),
        gated_depth=DepthMap(_dec(d["gated_depth"]["values"]),
                             _dec(d["gated_depth"]["valid"])),
        lidar=PointCloud(_dec(d["lidar"]["xyz"]), _dec(d["lidar"]["attrs"])),
        radar=PointCloud(_dec(d["radar"]["xyz"]), _dec(d["radar"]["attrs"])),
        seed=int(d["seed"]), meta=meta)


def record_to_json(scene: Scene, frame: SensorFrame) -> str:
    return json.dumps({"scene": scene_to_dict(scene),
                       "frame": frame_to_dict(frame)},
                      sort_keys=True, separators=(",", ":"))


def record_from_json(text: str):
    d = json.loads(text)
    return scene_from_dict(d["scene"]), frame_from_dict(d["frame"])
