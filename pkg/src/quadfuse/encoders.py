"""Per-modality feature extractors.

Four small learned stacks stand in for heavyweight backbones: a strided
patch embedding per camera stream and a pooled-statistics map per point
cloud.  All of them emit a FeatureMap with a shared channel width so the
blending stage can mix them freely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamStore, Tensor
from .geometry import (BEVGridSpec, DepthMap, PointCloud, flat_cells,
                       squash_to_bev)

ACTIVATIONS = ("tanh", "linear")
CAMERA_STREAMS = ("rgb", "gated")
CHECKPOINT_MAGIC = b"QFCKPT01"


@dataclass
class FeatureMap:
    """Dense (d, H, W) feature grid on either the camera or the BEV plane.

    `mask` marks cells that carry real content; None means fully valid.
    BEV maps keep the grid spec that defined their raster so metric
    queries stay possible downstream.
    """

    plane: str
    data: Tensor
    mask: np.ndarray | None = None
    grid: BEVGridSpec | None = None

    def __post_init__(self):
        if self.plane not in ("camera", "bev"):
            raise ValueError(f"unknown plane {self.plane!r}")
        if not isinstance(self.data, Tensor):
            self.data = ad.tensor(self.data)
        if self.data.data.ndim != 3:
            raise ValueError("feature data must be (channels, H, W)")
        if not np.isfinite(self.data.data).all():
            raise ValueError("feature data must be finite")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.data.shape[1:]:
                raise ValueError("mask shape must match the spatial dims")
        if self.plane == "bev":
            if self.grid is None:
                raise ValueError("bev maps need a grid spec")
            if (self.grid.nz, self.grid.nx) != self.data.data.shape[1:]:
                raise ValueError("grid dims must match the spatial dims")
        elif self.grid is not None:
            raise ValueError("camera maps take no grid spec")

    @property
    def channels(self) -> int:
        return self.data.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.data.shape[2]

    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.data.data.shape[1:], dtype=bool)
        return self.mask


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    patch_factor: int = 4
    activation: str = "tanh"
    n_point_attrs: int = 1

    def __post_init__(self):
        if self.d < 1 or self.patch_factor < 1 or self.n_point_attrs < 0:
            raise ValueError("encoder dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


def _init_linear(store: ParamStore, prefix: str, n_out: int, n_in: int,
                 rng: np.random.Generator) -> None:
    scale = 1.0 / np.sqrt(n_in)
    store.add(f"{prefix}.w", rng.normal(0.0, scale, size=(n_out, n_in)))
    store.add(f"{prefix}.b", np.zeros(n_out))


class EncoderParams:
    """Registry of every encoder weight, addressable by stable names."""

    def __init__(self, config: EncoderConfig, store: ParamStore):
        self.config = config
        self.store = store

    @classmethod
    def init(cls, config: EncoderConfig | None = None,
             seed: int = 0) -> "EncoderParams":
        config = config or EncoderConfig()
        rng = np.random.default_rng(seed)
        store = ParamStore()
        d, f = config.d, config.patch_factor
        n_stats = config.n_point_attrs + 2
        for stream in CAMERA_STREAMS:
            _init_linear(store, f"cam_{stream}.patch", d, 3 * f * f, rng)
            _init_linear(store, f"cam_{stream}.depth", d, d + 1, rng)
        _init_linear(store, "lidar", d, n_stats, rng)
        _init_linear(store, "radar", d, n_stats, rng)
        return cls(config, store)


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "tanh":
        return ad.tanh(x)
    return x


def encode_camera(appearance: np.ndarray, which: str,
                  params: EncoderParams) -> FeatureMap:
    """Strided patch embedding of a (3, H, W) appearance image.

    Non-overlapping patch_factor x patch_factor patches become one output
    pixel each, so feature dims are input dims / patch_factor.
    """
    if which not in CAMERA_STREAMS:
        raise ValueError(f"unknown camera stream {which!r}")
    appearance = np.asarray(appearance, dtype=np.float64)
    if appearance.ndim != 3 or appearance.shape[0] != 3:
        raise ValueError("appearance must be (3, H, W)")
    f = params.config.patch_factor
    _, h, w = appearance.shape
    if h % f or w % f:
        raise ValueError(f"image dims {h}x{w} not divisible by factor {f}")
    hf, wf = h // f, w // f
    patches = (appearance.reshape(3, hf, f, wf, f)
               .transpose(1, 3, 0, 2, 4)
               .reshape(hf * wf, 3 * f * f))
    weight = params.store[f"cam_{which}.patch.w"]
    bias = params.store[f"cam_{which}.patch.b"]
    out = _activate(ad.tensor(patches) @ ad.transpose(weight) + bias,
                    params.config.activation)
    data = ad.reshape(ad.transpose(out), (params.config.d, hf, wf))
    return FeatureMap(plane="camera", data=data)


def append_depth(fmap: FeatureMap, depth: DepthMap) -> FeatureMap:
    """Attach per-pixel depth as one extra (last) channel.

    The depth map is strided down to feature resolution; pixels without a
    depth estimate get a zero channel and a False mask entry so nothing
    downstream treats them as lifted geometry.
    """
    if fmap.plane != "camera":
        raise ValueError("depth channels attach to camera maps only")
    dh, dw = depth.values.shape
    factor = dh // fmap.height
    if factor < 1 or dh != fmap.height * factor or dw != fmap.width * factor:
        raise ValueError("depth dims are not an integer multiple of the map")
    coarse = depth.strided(factor) if factor > 1 else depth
    channel = np.where(coarse.valid, coarse.values, 0.0)[None]
    data = ad.concatenate([fmap.data, ad.tensor(channel)], axis=0)
    mask = coarse.valid & fmap.valid()
    return FeatureMap(plane="camera", data=data, mask=mask)


def project_depth(fmap: FeatureMap, which: str,
                  params: EncoderParams) -> FeatureMap:
    """Linear (d+1) -> d projection that folds the depth channel back in."""
    d = params.config.d
    if fmap.channels != d + 1:
        raise ValueError(f"expected {d + 1} channels, got {fmap.channels}")
    weight = params.store[f"cam_{which}.depth.w"]
    bias = params.store[f"cam_{which}.depth.b"]
    flat = ad.reshape(fmap.data, (d + 1, fmap.height * fmap.width))
    out = ad.transpose(ad.transpose(flat) @ ad.transpose(weight) + bias)
    data = ad.reshape(out, (d, fmap.height, fmap.width))
    return FeatureMap(plane=fmap.plane, data=data, mask=fmap.mask,
                      grid=fmap.grid)


def cell_stats(pc: PointCloud, grid: BEVGridSpec,
               n_attrs: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pool a cloud into per-cell statistics.

    Returns (stats (M, n_attrs + 2), rows (M,), cols (M,)) over the M
    occupied cells; stat columns are mean attributes, point count, mean
    height.  Points are put in a canonical order before pooling so any
    permutation of the input yields bitwise-identical sums.
    """
    if pc.attrs.shape[1] != n_attrs:
        raise ValueError(f"expected {n_attrs} attribute columns, "
                         f"got {pc.attrs.shape[1]}")
    cells, point_idx = squash_to_bev(pc, grid)
    if len(point_idx) == 0:
        empty = np.zeros((0,), dtype=np.int64)
        return np.zeros((0, n_attrs + 2)), empty, empty
    xyz = pc.xyz[point_idx]
    attrs = pc.attrs[point_idx]
    flat = flat_cells(cells, grid)
    keys = [attrs[:, a] for a in range(n_attrs)] + [xyz[:, 1], xyz[:, 2],
                                                    xyz[:, 0], flat]
    order = np.lexsort(keys)
    flat = flat[order]
    values = np.column_stack([attrs[order], xyz[order, 1]])
    uniq, seg = np.unique(flat, return_inverse=True)
    means, counts = kernels.segmean_forward(values, seg.astype(np.int64),
                                            len(uniq))
    stats = np.column_stack([means[:, :n_attrs], counts.astype(np.float64),
                             means[:, n_attrs]])
    rows = (uniq // grid.nx).astype(np.int64)
    cols = (uniq % grid.nx).astype(np.int64)
    return stats, rows, cols


def scatter_cells(feats: Tensor, rows: np.ndarray, cols: np.ndarray,
                   shape: tuple[int, int, int]) -> Tensor:
    data = np.zeros(shape)
    data[:, rows, cols] = feats.data.T

    def vjp(g):
        return (g[:, rows, cols].T,)

    return ad.make(data, (feats,), vjp)


def _encode_cloud(pc: PointCloud, grid: BEVGridSpec, prefix: str,
                  params: EncoderParams) -> FeatureMap:
    cfg = params.config
    stats, rows, cols = cell_stats(pc, grid, cfg.n_point_attrs)
    mask = np.zeros((grid.nz, grid.nx), dtype=bool)
    if len(rows) == 0:
        data = ad.tensor(np.zeros((cfg.d, grid.nz, grid.nx)))
        return FeatureMap(plane="bev", data=data, mask=mask, grid=grid)
    weight = params.store[f"{prefix}.w"]
    bias = params.store[f"{prefix}.b"]
    feats = _activate(ad.tensor(stats) @ ad.transpose(weight) + bias,
                      cfg.activation)
    data = scatter_cells(feats, rows, cols, (cfg.d, grid.nz, grid.nx))
    mask[rows, cols] = True
    return FeatureMap(plane="bev", data=data, mask=mask, grid=grid)


def encode_lidar(pc: PointCloud, grid: BEVGridSpec,
                 params: EncoderParams) -> FeatureMap:
    """BEV feature map from a LiDAR cloud; empty cells are zero and masked."""
    return _encode_cloud(pc, grid, "lidar", params)


def encode_radar(pc: PointCloud, grid: BEVGridSpec,
                 params: EncoderParams) -> FeatureMap:
    """BEV feature map from a radar cloud.

    Identical machinery to the LiDAR path; the caller supplies a grid
    whose height slab matches the radar mounting.
    """
    return _encode_cloud(pc, grid, "radar", params)


def save_params(store: ParamStore, path) -> None:
    """Write every parameter as (name, shape, little-endian float64) records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(store)))
        for name, t in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            for dim in t.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        out[name] = data.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise ValueError("trailing bytes after the last record")
    return out


def load_into(store: ParamStore, path) -> None:
    """Restore a checkpoint into an existing registry, names must match."""
    arrays = load_params(path)
    if set(arrays) != set(store.names()):
        missing = set(store.names()) - set(arrays)
        extra = set(arrays) - set(store.names())
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, arr in arrays.items():
        t = store[name]
        if arr.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{arr.shape} vs {t.data.shape}")
        t.data = arr.copy()
