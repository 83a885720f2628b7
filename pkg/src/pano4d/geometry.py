"""Calibration, LiDAR-to-image projection, sparse voxelization, point/voxel
feature transfer, and the positional encodings used by the decoder and the
association head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class CameraModel:
    """Pinhole camera with a rigid sensor-to-camera extrinsic transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) sensor -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("CameraModel: focal lengths must be positive")
        r = self.rotation
        if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("CameraModel: rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("CameraModel: rotation determinant must be +1")

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def extrinsic_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrices(cls, k: np.ndarray, e: np.ndarray, width: int, height: int):
        k = np.asarray(k, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        return cls(
            fx=float(k[0, 0]), fy=float(k[1, 1]),
            cx=float(k[0, 2]), cy=float(k[1, 2]),
            rotation=e[:3, :3], translation=e[:3, 3],
            width=width, height=height,
        )


def project(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Project sensor-frame points; returns ((u, v, z) per point, valid mask).

    A projection is valid iff the camera-frame depth is positive and (u, v)
    lands inside the image. Invalid rows keep their values so callers can
    route them (e.g. to the pseudo-fusion path) instead of dropping them.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam_pts = pts @ cam.rotation.T + cam.translation
    z = cam_pts[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = cam.fx * cam_pts[:, 0] / safe_z + cam.cx
    v = cam.fy * cam_pts[:, 1] / safe_z + cam.cy
    valid = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v, z], axis=1), valid


def unproject(uvz: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Invert :func:`project` back to camera-frame points from (u, v, z)."""
    uvz = np.asarray(uvz, dtype=np.float64).reshape(-1, 3)
    z = uvz[:, 2]
    x = (uvz[:, 0] - cam.cx) * z / cam.fx
    y = (uvz[:, 1] - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=1)


def camera_frame(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    return np.asarray(points, np.float64).reshape(-1, 3) @ cam.rotation.T + cam.translation


def yaw_rotated_camera(cam: CameraModel, yaw: float) -> CameraModel:
    """The camera as seen from a world rotated by ``yaw`` about z: for points
    p' = Rz(yaw) p, the adjusted model projects p' where ``cam`` projects p."""
    c, s = np.cos(yaw), np.sin(yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return CameraModel(
        fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
        rotation=cam.rotation @ rz.T, translation=cam.translation.copy(),
        width=cam.width, height=cam.height,
    )


# ---------------------------------------------------------------------------
# sparse voxel grids


@dataclass
class VoxelGrid:
    """Unique integer voxel coordinates at one stride.

    ``point_map`` (stride 1 only) sends each input point to its voxel row;
    coordinates are lexicographically sorted so the grid is independent of
    point order.
    """

    stride: int
    voxel_size: float
    coords: np.ndarray  # (M, 3) int64
    point_map: np.ndarray | None = None  # (N,) int64
    features: Tensor | None = None

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def centers(self) -> np.ndarray:
        cell = self.voxel_size * self.stride
        return (self.coords.astype(np.float64) + 0.5) * cell


def voxelize(points: np.ndarray, voxel_size: float) -> VoxelGrid:
    """Bucket points into a stride-1 grid: point p maps to floor(p / size)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("voxelize: non-finite coordinates")
    if pts.shape[0] == 0:
        return VoxelGrid(1, voxel_size, np.zeros((0, 3), np.int64),
                         np.zeros(0, np.int64))
    cells = np.floor(pts / voxel_size).astype(np.int64)
    coords, inverse = np.unique(cells, axis=0, return_inverse=True)
    return VoxelGrid(1, voxel_size, coords, inverse.astype(np.int64))


def downsample(grid: VoxelGrid) -> tuple[VoxelGrid, np.ndarray]:
    """Halve resolution; returns the coarser grid and the child->parent map."""
    parent_cells = grid.coords // 2
    coords, inverse = np.unique(parent_cells, axis=0, return_inverse=True)
    coarser = VoxelGrid(grid.stride * 2, grid.voxel_size, coords)
    return coarser, inverse.astype(np.int64)


@dataclass
class VoxelPyramid:
    """Stride-indexed grids with parent maps between consecutive strides."""

    grids: dict[int, VoxelGrid]
    parent_maps: dict[int, np.ndarray] = field(default_factory=dict)  # stride -> map to 2*stride

    def point_to_stride(self, stride: int) -> np.ndarray:
        """Composed map sending each point to its voxel at the given stride."""
        m = self.grids[1].point_map
        s = 1
        while s < stride:
            m = self.parent_maps[s][m]
            s *= 2
        return m


def build_pyramid(points: np.ndarray, voxel_size: float,
                  strides: tuple[int, ...] = (1, 2, 4, 8)) -> VoxelPyramid:
    if strides[0] != 1:
        raise ValueError("build_pyramid: strides must start at 1")
    grid = voxelize(points, voxel_size)
    grids = {1: grid}
    parent_maps: dict[int, np.ndarray] = {}
    for s in strides[1:]:
        finer = grids[s // 2]
        coarser, pmap = downsample(finer)
        grids[s] = coarser
        parent_maps[s // 2] = pmap
    return VoxelPyramid(grids, parent_maps)


def p2v_scatter_mean(point_features, point_map: np.ndarray, num_voxels: int) -> Tensor:
    """Voxel feature = arithmetic mean of its member point features."""
    return ad.segment_mean(point_features, point_map, num_voxels)


def v2p_gather(voxel_features, point_map: np.ndarray) -> Tensor:
    """Every point receives its voxel's feature verbatim."""
    return ad.take(voxel_features, point_map)


# ---------------------------------------------------------------------------
# bilinear image-feature sampling


def sample_image_features(feature_map, map_hw: tuple[int, int],
                          uv: np.ndarray, stride: int) -> Tensor:
    """Bilinearly sample a (H*W, D) feature map at full-resolution pixel coords.

    Coordinates are divided by the map's stride; cell centers sit at half-cell
    offsets so a query at a cell center returns exactly that cell's feature.
    Border cells replicate.
    """
    h, w = map_hw
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    px = uv[:, 0] / stride - 0.5
    py = uv[:, 1] / stride - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = np.clip(x0, 0, w - 1).astype(np.int64)
    y0 = np.clip(y0, 0, h - 1).astype(np.int64)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)

    def flat(yy, xx):
        return yy * w + xx

    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    out = ad.scale_rows(ad.take(feature_map, flat(y0, x0)), w00)
    out = ad.add(out, ad.scale_rows(ad.take(feature_map, flat(y0, x1)), w10))
    out = ad.add(out, ad.scale_rows(ad.take(feature_map, flat(y1, x0)), w01))
    out = ad.add(out, ad.scale_rows(ad.take(feature_map, flat(y1, x1)), w11))
    return out


# ---------------------------------------------------------------------------
# positional encodings

_BASE_FREQ = np.pi / 32.0
_OCTAVES = 8


def _xyz_frequency_table(d: int) -> tuple[np.ndarray, np.ndarray]:
    """(axis, frequency) per slot: axes cycle x,y,z; octaves 0..7 cycle."""
    slots = d // 4
    idx = np.arange(slots)
    axes = idx % 3
    octaves = (idx // 3) % _OCTAVES
    freqs = _BASE_FREQ * (2.0 ** octaves)
    return axes, freqs


def depth_frequencies(d: int) -> np.ndarray:
    """Geometric frequencies for the range half, spanning 8 octaves."""
    n = d // 4
    if n == 1:
        return np.array([_BASE_FREQ])
    expo = np.linspace(0.0, _OCTAVES, n)
    return _BASE_FREQ * (2.0 ** expo)


def positional_encoding(xyz: np.ndarray, origin: np.ndarray, d: int) -> np.ndarray:
    """Length-D encoding: first half Fourier features of xyz, second half
    interleaved sin/cos of the range from the sensor origin."""
    if d % 4 != 0:
        raise ValueError("positional_encoding: D must be divisible by 4")
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    n = xyz.shape[0]

    axes, freqs = _xyz_frequency_table(d)
    phase = xyz[:, axes] * freqs  # (n, d//4)
    first = np.empty((n, d // 2))
    first[:, 0::2] = np.sin(phase)
    first[:, 1::2] = np.cos(phase)

    r = np.linalg.norm(xyz - origin, axis=1)
    dphase = r[:, None] * depth_frequencies(d)  # (n, d//4)
    second = np.empty((n, d // 2))
    second[:, 0::2] = np.sin(dphase)
    second[:, 1::2] = np.cos(dphase)
    return np.concatenate([first, second], axis=1)


def depth_lipschitz_bound(d: int) -> float:
    """Lipschitz constant of the range half w.r.t. range, from the table."""
    f = depth_frequencies(d)
    return float(np.sqrt(np.sum(f * f)))


_EXPAND_SEED = 230717
_expand_tables: dict[tuple[int, int], np.ndarray] = {}


def _expand_table(k: int, out_dim: int) -> np.ndarray:
    key = (k, out_dim)
    if key not in _expand_tables:
        rng = np.random.default_rng(_EXPAND_SEED + 1009 * k + out_dim)
        _expand_tables[key] = rng.normal(scale=0.2, size=(k, out_dim // 2))
    return _expand_tables[key]


def sinusoidal_expand(values: np.ndarray, out_dim: int) -> np.ndarray:
    """Fixed random-Fourier expansion: sin block then cos block.

    Zero input maps to (0,...,0, 1,...,1). The projection table is frozen per
    (input length, out_dim) pair so identical inputs always agree.
    """
    if out_dim % 2 != 0:
        raise ValueError("sinusoidal_expand: out_dim must be even")
    vals = np.atleast_2d(np.asarray(values, dtype=np.float64))
    proj = vals @ _expand_table(vals.shape[1], out_dim)
    out = np.concatenate([np.sin(proj), np.cos(proj)], axis=1)
    return out[0] if np.asarray(values).ndim == 1 else out
