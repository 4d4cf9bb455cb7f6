"""Projective geometry: camera models, pixel lifting, BEV grids.

Coordinate conventions used throughout the package:

* World frame equals the LiDAR frame orientation: x right, y DOWN, z
  forward.  The ground plane is y = 0 with the origin on the ground, so
  points above ground have negative y.  Object boxes standing on the
  ground span y in [-h, 0].
* Camera frames share the orientation (x right, y down, z forward); the
  extrinsic maps camera coordinates into the world/LiDAR frame.
* Pixel coordinates are continuous (u, v) = (column, row); the integer
  value u lands exactly on the center of column u.
* BEV feature maps are laid out (channels, rows, cols) with rows indexing
  z bins (forward) and cols indexing x bins (lateral).  Cell (iz, ix) has
  its center at z = z0 + (iz + 0.5) * cell_z, x = x0 + (ix + 0.5) * cell_x.
* Box yaw is measured in the x-z plane; at yaw 0 the box length axis
  points along +z, and the heading vector is (-sin yaw, cos yaw) in (x, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels

Array = np.ndarray

CAR = 0
PEDESTRIAN = 1
CLASS_NAMES = ("car", "pedestrian")


# ---------------------------------------------------------------------------
# rigid transforms and cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation, applied as p' = R p + t."""

    rotation: Array
    translation: Array

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts: Array) -> Array:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: compose(self, other)(p) = self(other(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with an extrinsic mapping camera -> world/LiDAR frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        inv = self.extrinsic.inverse()
        both = inv.compose(self.extrinsic)
        if (np.abs(both.rotation - np.eye(3)).max() > 1e-9
                or np.abs(both.translation).max() > 1e-9):
            raise ValueError("extrinsic inverse does not invert")

    def at_scale(self, factor: int) -> "CameraModel":
        """Camera for a feature map downsampled by an integer stride.

        Feature pixel (i, j) is identified with full-resolution pixel
        (i * factor + factor // 2, j * factor + factor // 2), so projecting
        with the scaled camera lands directly in feature-map coordinates.
        """
        off = factor // 2
        return CameraModel(fx=self.fx / factor, fy=self.fy / factor,
                           cx=(self.cx - off) / factor, cy=(self.cy - off) / factor,
                           width=self.width // factor, height=self.height // factor,
                           extrinsic=self.extrinsic)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth with a validity mask; invalid pixels hold 0."""

    values: Array
    valid: Array

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if v.shape != m.shape or v.ndim != 2:
            raise ValueError(f"depth/mask shape mismatch: {v.shape} vs {m.shape}")
        if not np.all(np.isfinite(v[m])) or np.any(v[m] <= 0):
            raise ValueError("valid depths must be finite and positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @property
    def shape(self):
        return self.values.shape

    def strided(self, factor: int) -> "DepthMap":
        """Depth at feature resolution: one representative pixel per patch."""
        off = factor // 2
        return DepthMap(self.values[off::factor, off::factor],
                        self.valid[off::factor, off::factor])


# ---------------------------------------------------------------------------
# point clouds and boxes
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    """N world-frame points with optional per-point attribute columns."""

    xyz: Array
    attrs: Array | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.attrs is None:
            self.attrs = np.zeros((len(self.xyz), 0))
        else:
            self.attrs = np.asarray(self.attrs, dtype=np.float64)
            if self.attrs.ndim == 1:
                self.attrs = self.attrs.reshape(-1, 1)
            if len(self.attrs) != len(self.xyz):
                raise ValueError("attrs rows must match xyz rows")

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, n_attrs: int = 0) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, n_attrs)))

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.xyz, other.xyz]),
                          np.vstack([self.attrs, other.attrs]))

    def select(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.attrs[index])


@dataclass
class Box3D:
    """Upright 3D box: center (x, y, z), extents (w, l, h), yaw, class id.

    w spans the local x axis, l the local z (heading) axis, h the vertical
    axis; the box occupies y in [y - h/2, y + h/2] (y points down).
    Predictions carry a confidence in `score`; labels keep the default 1.
    """

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    cls: int
    score: float = 1.0

    def bev_corners(self) -> Array:
        """(4, 2) corner coordinates in the (x, z) plane, counterclockwise."""
        return box_bev_corners(self.x, self.z, self.w, self.l, self.yaw)

    def y_span(self) -> tuple[float, float]:
        return (self.y - self.h / 2.0, self.y + self.h / 2.0)

    def heading(self) -> Array:
        return np.array([-np.sin(self.yaw), np.cos(self.yaw)])

    def as_array(self) -> Array:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h,
                         self.yaw, float(self.cls)])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(x=float(a[0]), y=float(a[1]), z=float(a[2]), w=float(a[3]),
                   l=float(a[4]), h=float(a[5]), yaw=float(a[6]), cls=int(a[7]))


def box_bev_corners(x, z, w, l, yaw):
    """Corner positions of an oriented rectangle in the x-z plane.

    Works on plain floats and on autodiff scalars alike; returns a (4, 2)
    object array of whatever scalar type went in when differentiable.
    """
    if any(isinstance(v, ad.Tensor) for v in (x, z, w, l, yaw)):
        c, s = ad.cos(yaw), ad.sin(yaw)
        hw, hl = w * 0.5, l * 0.5
        corners = []
        for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            u = hw * su
            v = hl * sv
            corners.append((x + u * c - v * s, z + u * s + v * c))
        return corners
    c, s = np.cos(yaw), np.sin(yaw)
    hw, hl = 0.5 * w, 0.5 * l
    local = np.array([[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]])
    rot = np.array([[c, s], [-s, c]])
    return local @ rot + np.array([x, z])


# ---------------------------------------------------------------------------
# BEV grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BEVGridSpec:
    """Regular BEV grid over (x, z) with a vertical crop range in y.

    Dimensions are floor(range / cell); when the range is not an integer
    multiple of the cell size the effective extent shrinks to dims * cell,
    anchored at the range minimum.  Defaults follow the full-scale
    configuration (0.075 m cells, 0.2 m voxel height, z in (0, 100),
    x in (-40, 40), y in (-3, 1)).
    """

    x_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (0.0, 100.0)
    y_range: tuple[float, float] = (-3.0, 1.0)
    cell_x: float = 0.075
    cell_z: float = 0.075
    cell_y: float = 0.2

    def __post_init__(self):
        for lo, hi in (self.x_range, self.z_range, self.y_range):
            if not hi > lo:
                raise ValueError("empty range")
        for c in (self.cell_x, self.cell_z, self.cell_y):
            if not c > 0:
                raise ValueError("cell sizes must be positive")
        if min(self.nx, self.nz, self.ny) < 1:
            raise ValueError("grid dimensions must be positive")

    @classmethod
    def radar_default(cls) -> "BEVGridSpec":
        return cls(y_range=(-0.2, 0.4))

    @staticmethod
    def _dims(lo: float, hi: float, cell: float) -> int:
        return int(np.floor((hi - lo) / cell + 1e-9))

    @property
    def nx(self) -> int:
        return self._dims(*self.x_range, self.cell_x)

    @property
    def nz(self) -> int:
        return self._dims(*self.z_range, self.cell_z)

    @property
    def ny(self) -> int:
        return self._dims(*self.y_range, self.cell_y)

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) = (z bins, x bins)."""
        return (self.nz, self.nx)

    def col_of(self, x) -> Array:
        """Continuous column coordinate; integer values are cell centers."""
        return (np.asarray(x, dtype=np.float64) - self.x_range[0]) / self.cell_x - 0.5

    def row_of(self, z) -> Array:
        return (np.asarray(z, dtype=np.float64) - self.z_range[0]) / self.cell_z - 0.5

    def x_of_col(self, col) -> Array:
        return self.x_range[0] + (np.asarray(col, dtype=np.float64) + 0.5) * self.cell_x

    def z_of_row(self, row) -> Array:
        return self.z_range[0] + (np.asarray(row, dtype=np.float64) + 0.5) * self.cell_z

    def cell_centers(self) -> tuple[Array, Array]:
        """(zs (nz,), xs (nx,)) center coordinates along each axis."""
        return self.z_of_row(np.arange(self.nz)), self.x_of_col(np.arange(self.nx))

    def in_extent(self, x, z, y=None) -> Array:
        """Inside the effective extent; y check against [y0, y1) if given."""
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        ok = ((x >= self.x_range[0]) & (x < self.x_range[0] + self.nx * self.cell_x)
              & (z >= self.z_range[0]) & (z < self.z_range[0] + self.nz * self.cell_z))
        if y is not None:
            y = np.asarray(y, dtype=np.float64)
            ok = ok & (y >= self.y_range[0]) & (y < self.y_range[1])
        return ok


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def lift_pixels(cam: CameraModel, depth: DepthMap) -> PointCloud:
    """Back-project every valid depth pixel into the world/LiDAR frame.

    Pixel (u, v) with depth d maps to the camera-frame point
    (x, y, z) = ((u - cx) d / fx, (v - cy) d / fy, d) and then through the
    extrinsic.  Output keeps row-major pixel order; invalid pixels are
    dropped.
    """
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera "
                         f"({cam.height}, {cam.width})")
    rows, cols = np.nonzero(depth.valid)
    z = depth.values[rows, cols]
    x = (cols - cam.cx) * z / cam.fx
    y = (rows - cam.cy) * z / cam.fy
    pts_cam = np.stack([x, y, z], axis=1)
    return PointCloud(cam.extrinsic.apply(pts_cam))


def project_points(cam: CameraModel, pts: PointCloud | Array):
    """Project world-frame points to pixels.

    Returns (uv (N, 2), depth (N,), in_frustum (N,)); in_frustum requires
    positive camera-frame depth and 0 <= u < width, 0 <= v < height.
    Points at or behind the image plane get NaN pixels and flag False.
    """
    xyz = pts.xyz if isinstance(pts, PointCloud) else np.asarray(pts, dtype=np.float64)
    xyz = xyz.reshape(-1, 3)
    cam_pts = cam.extrinsic.inverse().apply(xyz)
    z = cam_pts[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, cam.fx * cam_pts[:, 0] / np.where(front, z, 1.0) + cam.cx,
                     np.nan)
        v = np.where(front, cam.fy * cam_pts[:, 1] / np.where(front, z, 1.0) + cam.cy,
                     np.nan)
    in_frustum = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), z, in_frustum


def bev_sample(fmap_data, mask, grid: BEVGridSpec, xs, zs):
    """Bilinearly sample a BEV map at metric (x, z) query points.

    `fmap_data` is (d, nz, nx), plain ndarray or autodiff Tensor; `mask`
    may be None for fully valid maps.  Queries outside the extent clamp to
    the border cell centers.  Returns (values (N, d), ok (N,)); a query
    whose four support cells are all masked comes back zero with ok False.
    """
    rows = grid.row_of(zs)
    cols = grid.col_of(xs)
    if mask is None:
        shape = fmap_data.shape if not isinstance(fmap_data, ad.Tensor) else fmap_data.data.shape
        mask = np.ones(shape[1:], dtype=bool)
    if isinstance(fmap_data, ad.Tensor):
        return kernels.sample_map(fmap_data, mask, rows, cols)
    out, ok, _, _ = kernels.sample_forward(np.asarray(fmap_data, dtype=np.float64),
                                           mask, rows, cols)
    return out, ok


def squash_to_bev(pts: PointCloud | Array, grid: BEVGridSpec):
    """Drop the height coordinate and bin points into BEV cells.

    Keeps points inside the effective (x, z) extent with y inside y_range.
    Returns (cells (M, 2) int rows of (iz, ix), point_idx (M,)) in input
    point order.
    """
    xyz = pts.xyz if isinstance(pts, PointCloud) else np.asarray(pts, dtype=np.float64)
    xyz = xyz.reshape(-1, 3)
    keep = grid.in_extent(xyz[:, 0], xyz[:, 2], xyz[:, 1])
    point_idx = np.nonzero(keep)[0]
    x = xyz[point_idx, 0]
    z = xyz[point_idx, 2]
    ix = np.floor((x - grid.x_range[0]) / grid.cell_x).astype(np.int64)
    iz = np.floor((z - grid.z_range[0]) / grid.cell_z).astype(np.int64)
    # extent check already bounds the bins; clip only guards the exact edge
    ix = np.clip(ix, 0, grid.nx - 1)
    iz = np.clip(iz, 0, grid.nz - 1)
    return np.stack([iz, ix], axis=1), point_idx


def flat_cells(cells: Array, grid: BEVGridSpec) -> Array:
    """(iz, ix) rows -> flat row-major cell ids."""
    return cells[:, 0] * grid.nx + cells[:, 1]
