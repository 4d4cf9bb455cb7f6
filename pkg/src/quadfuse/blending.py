"""Cross-modal feature blending.

Three attention directions enrich the per-modality maps before fusion:
camera-adaptive (image queries against lifted LiDAR context), LiDAR-adaptive
(BEV queries against camera features sampled at cell centers), and
radar-adaptive (BEV queries against RGB context only, no intra term).
Every direction runs windowed attention with learned Q/K/V projections and
folds the result back into the base features through a per-channel gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamStore, Tensor
from .encoders import FeatureMap, scatter_cells
from .geometry import (BEVGridSpec, CameraModel, DepthMap, bev_sample,
                       lift_pixels, project_points)

# pre-activation gate bound; sigmoid(15) is within 3.1e-7 of saturation
GATE_CLAMP = 15.0

DIRECTIONS = ("cam_rgb", "cam_gated", "lidar")


@dataclass(frozen=True)
class BlendConfig:
    d: int = 32
    k_camera: int = 5
    k_bev: int = 3

    def __post_init__(self):
        for k in (self.k_camera, self.k_bev):
            if k < 1 or k % 2 == 0:
                raise ValueError("window sizes must be odd and >= 1")
        if self.d < 1:
            raise ValueError("channel width must be positive")

    def window(self, plane: str) -> int:
        return self.k_camera if plane == "camera" else self.k_bev


class BlendParams:
    """Q/K/V projections per (direction, mode) plus per-channel gates.

    Gates are stored pre-activation; `gate()` exposes the squashed value
    in (0, 1).  The radar direction carries no intra projections and no
    gate because its combination rule is plain base + cross.
    """

    def __init__(self, config: BlendConfig, store: ParamStore):
        self.config = config
        self.store = store

    @classmethod
    def init(cls, config: BlendConfig | None = None,
             seed: int = 0) -> "BlendParams":
        config = config or BlendConfig()
        rng = np.random.default_rng(seed)
        store = ParamStore()
        d = config.d
        scale = 1.0 / np.sqrt(d)

        def proj(name):
            for p in ("q", "k", "v"):
                store.add(f"{name}.{p}", rng.normal(0.0, scale, size=(d, d)))

        for direction in DIRECTIONS:
            proj(f"{direction}.cross")
            proj(f"{direction}.intra")
            store.add(f"{direction}.gate", np.zeros(d))
        proj("radar.cross")
        return cls(config, store)

    def gate(self, direction: str) -> Tensor:
        raw = self.store[f"{direction}.gate"]
        return ad.sigmoid(ad.clip(raw, -GATE_CLAMP, GATE_CLAMP))


def _project(data: Tensor, weight: Tensor) -> Tensor:
    d, h, w = data.data.shape
    flat = ad.reshape(data, (d, h * w))
    return ad.reshape(weight @ flat, (weight.data.shape[0], h, w))


def gather_lidar_context(phi_l: FeatureMap, cam: CameraModel,
                         depth: DepthMap) -> FeatureMap:
    """Backproject BEV LiDAR features into a camera-plane context map.

    Each depth-valid pixel is lifted to 3D, dropped onto the BEV plane,
    and the bilinearly sampled LiDAR feature is written back at that
    pixel.  Lifted points outside the grid clamp to the border; pixels
    with no depth or no unmasked support come back zero and masked.
    """
    if phi_l.plane != "bev":
        raise ValueError("LiDAR context wants a BEV feature map")
    h, w = depth.values.shape
    if (cam.height, cam.width) != (h, w):
        raise ValueError("camera model and depth map dims disagree")
    d = phi_l.channels
    mask = np.zeros((h, w), dtype=bool)
    rows, cols = np.nonzero(depth.valid)
    if len(rows) == 0:
        return FeatureMap(plane="camera", data=np.zeros((d, h, w)), mask=mask)
    pts = lift_pixels(cam, depth)
    vals, ok = bev_sample(phi_l.data, phi_l.mask, phi_l.grid,
                          pts.xyz[:, 0], pts.xyz[:, 2])
    data = scatter_cells(vals, rows, cols, (d, h, w))
    mask[rows, cols] = ok
    return FeatureMap(plane="camera", data=data, mask=mask)


def gather_camera_context(phi_cam: FeatureMap, cam: CameraModel,
                          grid: BEVGridSpec,
                          heights: np.ndarray | None = None) -> FeatureMap:
    """Project BEV cell centers into an image and sample camera features.

    `heights` gives the representative y per cell (e.g. mean point height);
    cells without one use the middle of the grid's height slab.  Cells
    that project outside the frustum, or land where the camera map is
    masked, come back zero and masked.
    """
    if phi_cam.plane != "camera":
        raise ValueError("camera context wants a camera-plane map")
    if (cam.height, cam.width) != (phi_cam.height, phi_cam.width):
        raise ValueError("camera model and feature map dims disagree")
    zs, xs = grid.cell_centers()
    xg, zg = np.meshgrid(xs, zs)
    if heights is None:
        heights = np.full((grid.nz, grid.nx),
                          0.5 * (grid.y_range[0] + grid.y_range[1]))
    heights = np.asarray(heights, dtype=np.float64)
    if heights.shape != (grid.nz, grid.nx):
        raise ValueError("heights must be one value per BEV cell")
    pts = np.column_stack([xg.ravel(), heights.ravel(), zg.ravel()])
    uv, _, in_frustum = project_points(cam, pts)
    d = phi_cam.channels
    mask = np.zeros((grid.nz, grid.nx), dtype=bool)
    if not in_frustum.any():
        return FeatureMap(plane="bev", data=np.zeros((d, grid.nz, grid.nx)),
                          mask=mask, grid=grid)
    idx = np.nonzero(in_frustum)[0]
    vals, ok = kernels.sample_map(phi_cam.data, phi_cam.valid(),
                                  uv[idx, 1], uv[idx, 0])
    rows = (idx // grid.nx).astype(np.int64)
    cols = (idx % grid.nx).astype(np.int64)
    data = scatter_cells(vals, rows, cols, (d, grid.nz, grid.nx))
    mask[rows, cols] = ok
    return FeatureMap(plane="bev", data=data, mask=mask, grid=grid)


def blend_contexts(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Element-wise sum of two context maps; mask is the union."""
    if a.plane != b.plane or a.data.data.shape != b.data.data.shape:
        raise ValueError("context maps must share plane and dims")
    if a.mask is None or b.mask is None:
        mask = None
    else:
        mask = a.mask | b.mask
    return FeatureMap(plane=a.plane, data=a.data + b.data, mask=mask,
                      grid=a.grid)


def windowed_attention(query: FeatureMap, context: FeatureMap,
                       direction: str, params: BlendParams,
                       mode: str) -> FeatureMap:
    """Local window attention of a query map against a context map.

    Scores are projected-query against projected-context dot products,
    scaled by sqrt(d) and softmaxed over the unmasked cells of the k x k
    window.  Values come from the context (mode "cross") or from the
    query map itself (mode "intra").  A fully masked window leaves the
    query feature untouched.
    """
    if mode not in ("cross", "intra"):
        raise ValueError(f"unknown attention mode {mode!r}")
    if query.plane != context.plane:
        raise ValueError("query and context planes differ")
    if query.data.data.shape != context.data.data.shape:
        raise ValueError("query and context dims differ")
    wq = params.store[f"{direction}.{mode}.q"]
    wk = params.store[f"{direction}.{mode}.k"]
    wv = params.store[f"{direction}.{mode}.v"]
    values = context if mode == "cross" else query
    out, _ = kernels.attend_map(_project(query.data, wq),
                                _project(context.data, wk),
                                _project(values.data, wv),
                                query.data, context.valid(),
                                params.config.window(query.plane))
    return FeatureMap(plane=query.plane, data=out, mask=query.mask,
                      grid=query.grid)


def combine_cross_intra(cross: FeatureMap, intra: FeatureMap,
                        base: FeatureMap, gate_raw: Tensor) -> FeatureMap:
    """Gated residual combination: base + g*cross + (1-g)*intra.

    The per-channel gate is the clamped-sigmoid of `gate_raw`, so it
    stays strictly inside (0, 1) and saturates smoothly at the bound.
    """
    shape = base.data.data.shape
    if cross.data.data.shape != shape or intra.data.data.shape != shape:
        raise ValueError("combination inputs must share shape")
    g = ad.reshape(ad.sigmoid(ad.clip(gate_raw, -GATE_CLAMP, GATE_CLAMP)),
                   (shape[0], 1, 1))
    data = base.data + g * cross.data + (1.0 - g) * intra.data
    return FeatureMap(plane=base.plane, data=data, mask=base.mask,
                      grid=base.grid)


@dataclass
class BlendScene:
    """Everything one scene contributes to the blending stage.

    Camera models and depth maps are at feature resolution (already
    scaled by the encoder's patch factor).  Height grids carry the
    representative y per BEV cell for projecting cell centers into the
    images; None falls back to the slab midpoint.
    """

    phi_c: FeatureMap
    phi_g: FeatureMap
    phi_l: FeatureMap
    phi_r: FeatureMap
    cam_rgb: CameraModel
    cam_gated: CameraModel
    depth_rgb: DepthMap
    depth_gated: DepthMap
    lidar_heights: np.ndarray | None = None
    radar_heights: np.ndarray | None = None

    def __post_init__(self):
        widths = {m.channels for m in (self.phi_c, self.phi_g, self.phi_l,
                                       self.phi_r)}
        if len(widths) != 1:
            raise ValueError(f"modality maps disagree on channels: {widths}")


def blend_all(scene: BlendScene, params: BlendParams
              ) -> tuple[FeatureMap, FeatureMap, FeatureMap, FeatureMap]:
    """Run all three blending directions; returns enriched (C, G, L, R).

    Camera-adaptive: both image maps query the summed lifted-LiDAR
    context.  LiDAR-adaptive: the BEV map queries camera features sampled
    at cell centers from both images.  Radar-adaptive: RGB context only
    and no intra term, so the combination is plain base + cross.
    """
    ctx_lc = gather_lidar_context(scene.phi_l, scene.cam_rgb, scene.depth_rgb)
    ctx_lg = gather_lidar_context(scene.phi_l, scene.cam_gated,
                                  scene.depth_gated)
    ctx_lcg = blend_contexts(ctx_lc, ctx_lg)

    enriched_cam = []
    for phi, direction in ((scene.phi_c, "cam_rgb"),
                           (scene.phi_g, "cam_gated")):
        cross = windowed_attention(phi, ctx_lcg, direction, params, "cross")
        intra = windowed_attention(phi, phi, direction, params, "intra")
        enriched_cam.append(combine_cross_intra(
            cross, intra, phi, params.store[f"{direction}.gate"]))

    ctx_cl = gather_camera_context(scene.phi_c, scene.cam_rgb,
                                   scene.phi_l.grid, scene.lidar_heights)
    ctx_gl = gather_camera_context(scene.phi_g, scene.cam_gated,
                                   scene.phi_l.grid, scene.lidar_heights)
    ctx_cgl = blend_contexts(ctx_cl, ctx_gl)
    cross_l = windowed_attention(scene.phi_l, ctx_cgl, "lidar", params,
                                 "cross")
    intra_l = windowed_attention(scene.phi_l, scene.phi_l, "lidar", params,
                                 "intra")
    star_l = combine_cross_intra(cross_l, intra_l, scene.phi_l,
                                 params.store["lidar.gate"])

    ctx_cr = gather_camera_context(scene.phi_c, scene.cam_rgb,
                                   scene.phi_r.grid, scene.radar_heights)
    cross_r = windowed_attention(scene.phi_r, ctx_cr, "radar", params,
                                 "cross")
    star_r = FeatureMap(plane="bev", data=scene.phi_r.data + cross_r.data,
                        mask=scene.phi_r.mask, grid=scene.phi_r.grid)

    return enriched_cam[0], enriched_cam[1], star_l, star_r
