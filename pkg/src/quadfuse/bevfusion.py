"""Distance-weighted BEV fusion and proposal extraction.

The enriched LiDAR and radar maps are blended per cell with a Gaussian
weight in ego distance (near cells trust LiDAR, far cells lean on radar),
passed through a small learned transform, fused additively with
pillar-pooled gated-camera features, and finally scanned for class-wise
heatmap maxima that become the detector's initial queries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamStore, Tensor
from .blending import blend_contexts
from .encoders import FeatureMap, scatter_cells
from .geometry import (BEVGridSpec, Box3D, CameraModel, PointCloud,
                       flat_cells, project_points, squash_to_bev)

SIGMA_INIT = 30.0

# penalty-reduced focal loss shape parameters
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


@dataclass(frozen=True)
class FusionConfig:
    d: int = 32
    n_classes: int = 2
    top_k: int = 200
    heat_kernel: int = 3
    gamma_weighting: bool = True
    printed_variant: bool = False

    def __post_init__(self):
        if self.d < 1 or self.n_classes < 1 or self.top_k < 1:
            raise ValueError("fusion dims must be positive")
        if self.heat_kernel % 2 == 0:
            raise ValueError("heat kernel must be odd")


class FusionParams:
    """Distance weight sigma (stored as log), the cell transform, and one
    heat convolution per class."""

    def __init__(self, config: FusionConfig, store: ParamStore):
        self.config = config
        self.store = store

    @classmethod
    def init(cls, config: FusionConfig | None = None,
             seed: int = 0) -> "FusionParams":
        config = config or FusionConfig()
        rng = np.random.default_rng(seed)
        store = ParamStore()
        d, k = config.d, config.heat_kernel
        store.add("fuse.log_sigma", np.log(SIGMA_INIT))
        # identity transform at init keeps the fused map unchanged
        store.add("fuse.gamma.w", np.eye(d))
        store.add("fuse.gamma.b", np.zeros(d))
        scale = 1.0 / np.sqrt(d * k * k)
        for c in range(config.n_classes):
            store.add(f"heat.{c}.w",
                      rng.normal(0.0, scale, size=(d, k, k)))
            store.add(f"heat.{c}.b", np.zeros(()))
        return cls(config, store)

    def sigma(self) -> Tensor:
        return ad.exp(self.store["fuse.log_sigma"])


def distance_weight(dist, params: FusionParams) -> Tensor:
    """Gaussian weight exp(-d^2 / (2 sigma^2)) of ego distance.

    Exactly 1 at d=0 and strictly decreasing.  The printed_variant flag
    switches to exp((d / (2 sigma^2))^2), an increasing weight kept only
    for side-by-side comparison.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if (dist < 0).any():
        raise ValueError("distances must be non-negative")
    sigma = params.sigma()
    if params.config.printed_variant:
        ratio = ad.tensor(dist) / (2.0 * sigma * sigma)
        return ad.exp(ratio * ratio)
    return ad.exp(ad.tensor(-dist * dist) / (2.0 * sigma * sigma))


def fuse_lidar_radar(star_l: FeatureMap, star_r: FeatureMap,
                     params: FusionParams) -> FeatureMap:
    """Per-cell convex blend of LiDAR and radar maps, then the learned
    cell transform.

    Weight comes from each cell center's ego distance; gamma_weighting
    False short-circuits the whole scheme to a plain sum.
    """
    if star_l.plane != "bev" or star_r.plane != "bev":
        raise ValueError("fusion expects BEV maps")
    if star_l.grid != star_r.grid:
        raise ValueError("fusion inputs must share a grid")
    grid = star_l.grid
    if star_l.mask is None or star_r.mask is None:
        mask = None
    else:
        mask = star_l.mask | star_r.mask
    if not params.config.gamma_weighting:
        return FeatureMap(plane="bev", data=star_l.data + star_r.data,
                          mask=mask, grid=grid)
    zs, xs = grid.cell_centers()
    xg, zg = np.meshgrid(xs, zs)
    dist = np.hypot(xg, zg)
    f = ad.reshape(distance_weight(dist, params), (1, grid.nz, grid.nx))
    pre = f * star_l.data + (1.0 - f) * star_r.data
    d = params.config.d
    flat = ad.reshape(pre, (d, grid.nz * grid.nx))
    w = params.store["fuse.gamma.w"]
    b = ad.reshape(params.store["fuse.gamma.b"], (d, 1))
    out = ad.reshape(w @ flat + b, (d, grid.nz, grid.nx))
    return FeatureMap(plane="bev", data=out, mask=mask, grid=grid)


def gated_to_bev(star_g: FeatureMap, lidar: PointCloud, cam: CameraModel,
                 grid: BEVGridSpec) -> FeatureMap:
    """Route gated-camera features into BEV pillars via the LiDAR cloud.

    Each point is projected into the gated image, the feature sampled
    bilinearly, and the samples averaged per pillar.  Pillars without any
    contributing point stay zero and masked; there is no camera-only
    pillar synthesis.
    """
    if star_g.plane != "camera":
        raise ValueError("pillar conditioning wants a camera-plane map")
    d = star_g.channels
    mask = np.zeros((grid.nz, grid.nx), dtype=bool)
    empty = FeatureMap(plane="bev", data=np.zeros((d, grid.nz, grid.nx)),
                       mask=mask, grid=grid)
    cells, point_idx = squash_to_bev(lidar, grid)
    if len(point_idx) == 0:
        return empty
    uv, _, in_frustum = project_points(cam, lidar.xyz[point_idx])
    keep = np.nonzero(in_frustum)[0]
    if len(keep) == 0:
        return empty
    vals, ok = kernels.sample_map(star_g.data, star_g.valid(),
                                  uv[keep, 1], uv[keep, 0])
    good = np.nonzero(ok)[0]
    if len(good) == 0:
        return empty
    flat = flat_cells(cells[keep[good]], grid)
    uniq, seg = np.unique(flat, return_inverse=True)
    means, _ = kernels.segment_mean(ad.getitem(vals, good),
                                    seg.astype(np.int64), len(uniq))
    rows = (uniq // grid.nx).astype(np.int64)
    cols = (uniq % grid.nx).astype(np.int64)
    data = scatter_cells(means, rows, cols, (d, grid.nz, grid.nx))
    mask[rows, cols] = True
    return FeatureMap(plane="bev", data=data, mask=mask, grid=grid)


def late_fuse(phi_lr: FeatureMap, phi_gbev: FeatureMap) -> FeatureMap:
    """Additive fusion of the range map and the pillar-pooled gated map."""
    if phi_lr.plane != "bev" or phi_gbev.plane != "bev":
        raise ValueError("late fusion expects BEV maps")
    if phi_lr.grid != phi_gbev.grid:
        raise ValueError("late fusion inputs must share a grid")
    return blend_contexts(phi_lr, phi_gbev)


def _pad2d(t: Tensor, p: int) -> Tensor:
    def vjp(g):
        return (g[:, p:-p, p:-p],)

    return ad.make(np.pad(t.data, ((0, 0), (p, p), (p, p))), (t,), vjp)


def conv2d_same(fmap: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Single-output-channel 2D convolution with zero same-padding.

    fmap is (d, H, W), weight (d, k, k), bias scalar; returns (H, W).
    """
    d, h, w = fmap.data.shape
    k = weight.data.shape[1]
    p = k // 2
    padded = _pad2d(fmap, p)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ci, di, dj = np.meshgrid(np.arange(d), np.arange(k), np.arange(k),
                             indexing="ij")
    c_idx = np.broadcast_to(ci.ravel(), (h * w, d * k * k))
    r_idx = ii.ravel()[:, None] + di.ravel()[None, :]
    col_idx = jj.ravel()[:, None] + dj.ravel()[None, :]
    patches = ad.getitem(padded, (c_idx, r_idx, col_idx))
    flat = patches @ ad.reshape(weight, (d * k * k, 1))
    return ad.reshape(flat, (h, w)) + bias


def compute_heatmaps(phi_fuse: FeatureMap,
                     params: FusionParams) -> list[Tensor]:
    """Per-class sigmoid heat maps over the fused BEV features."""
    heats = []
    for c in range(params.config.n_classes):
        raw = conv2d_same(phi_fuse.data, params.store[f"heat.{c}.w"],
                          params.store[f"heat.{c}.b"])
        heats.append(ad.sigmoid(raw))
    return heats


@dataclass
class Proposal:
    x: float
    z: float
    cls: int
    score: float
    iz: int
    ix: int
    feature: Tensor


@dataclass
class ProposalSet:
    proposals: list[Proposal]
    capacity: int
    grid: BEVGridSpec

    def __post_init__(self):
        if len(self.proposals) > self.capacity:
            raise ValueError("proposal list exceeds capacity")
        scores = [p.score for p in self.proposals]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("proposals must be sorted by score")
        for p in self.proposals:
            if not self.grid.in_extent(p.x, p.z):
                raise ValueError("proposal center outside the BEV extent")

    def __len__(self) -> int:
        return len(self.proposals)

    def to_dict(self) -> dict:
        return {"capacity": self.capacity,
                "proposals": [{"x": p.x, "z": p.z, "cls": p.cls,
                               "score": p.score, "cell": [p.iz, p.ix]}
                              for p in self.proposals]}


def proposals_to_json(pset: ProposalSet) -> str:
    return json.dumps(pset.to_dict(), sort_keys=True,
                      separators=(",", ":"))


def _strict_local_maxima(heat: np.ndarray) -> np.ndarray:
    """(H, W) bool: cells strictly greater than all existing 8 neighbors."""
    padded = np.pad(heat, 1, constant_values=-np.inf)
    out = np.ones_like(heat, dtype=bool)
    h, w = heat.shape
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            out &= heat > padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
    return out


def extract_proposals(phi_fuse: FeatureMap, params: FusionParams,
                      top_k: int | None = None) -> ProposalSet:
    """Class-wise heat maxima as the initial query set.

    Candidates are strict 8-neighborhood local maxima of each class heat
    map; the top K across classes survive, ordered by descending heat
    with (class, row-major cell) tie-breaks.  Fewer maxima than K is a
    shorter set, not an error.
    """
    k = params.config.top_k if top_k is None else top_k
    if k < 1:
        raise ValueError("top_k must be >= 1")
    grid = phi_fuse.grid
    heats = compute_heatmaps(phi_fuse, params)
    candidates = []
    for c, heat in enumerate(heats):
        for iz, ix in np.argwhere(_strict_local_maxima(heat.data)):
            flat = iz * grid.nx + ix
            candidates.append((-heat.data[iz, ix], c, int(flat)))
    candidates.sort()
    chosen = candidates[:k]
    zs, xs = grid.cell_centers()
    proposals = []
    for neg_score, c, flat in chosen:
        iz, ix = divmod(flat, grid.nx)
        proposals.append(Proposal(
            x=float(xs[ix]), z=float(zs[iz]), cls=c, score=-neg_score,
            iz=iz, ix=ix, feature=ad.getitem(phi_fuse.data,
                                             (slice(None), iz, ix))))
    return ProposalSet(proposals=proposals, capacity=k, grid=grid)


def make_heat_targets(boxes: list[Box3D], grid: BEVGridSpec,
                      n_classes: int) -> np.ndarray:
    """Gaussian target splats, one map per class.

    Each box paints exp(-r^2 / (2 s^2)) around its center with s tied to
    the box BEV diagonal; the center cell itself is set to exactly 1.
    Overlaps combine by max.  Boxes outside the grid are skipped.
    """
    targets = np.zeros((n_classes, grid.nz, grid.nx))
    zs, xs = grid.cell_centers()
    xg, zg = np.meshgrid(xs, zs)
    for box in boxes:
        if not grid.in_extent(box.x, box.z):
            continue
        s = max(np.hypot(box.w, box.l) / 6.0, min(grid.cell_x, grid.cell_z))
        r2 = (xg - box.x) ** 2 + (zg - box.z) ** 2
        splat = np.exp(-r2 / (2.0 * s * s))
        targets[box.cls] = np.maximum(targets[box.cls], splat)
        iz = int(np.clip(np.floor((box.z - grid.z_range[0]) / grid.cell_z),
                         0, grid.nz - 1))
        ix = int(np.clip(np.floor((box.x - grid.x_range[0]) / grid.cell_x),
                         0, grid.nx - 1))
        targets[box.cls, iz, ix] = 1.0
    return targets


def heat_loss(heats: list[Tensor], targets: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss against Gaussian targets.

    Cells with target exactly 1 are positives; everywhere else the
    penalty is down-weighted by (1 - target)^beta.  Normalized by the
    positive count (at least 1).
    """
    total = ad.tensor(0.0)
    n_pos = 0
    for c, heat in enumerate(heats):
        t = targets[c]
        p = ad.clip(heat, 1e-12, 1.0 - 1e-12)
        pos = (t == 1.0).astype(np.float64)
        n_pos += int(pos.sum())
        pos_term = ((1.0 - p) ** FOCAL_ALPHA) * ad.log(p) * pos
        neg_w = ((1.0 - t) ** FOCAL_BETA) * (1.0 - pos)
        neg_term = (p ** FOCAL_ALPHA) * ad.log(1.0 - p) * neg_w
        total = total - ad.tsum(pos_term + neg_term)
    return total / max(n_pos, 1)
