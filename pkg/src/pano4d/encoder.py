"""Toy multimodal encoder: image feature pyramid at strides {4, 8}, a point
branch with an 8-D input descriptor, a voxel pyramid at strides {1, 2, 4, 8}
with point/voxel exchange, and point-level fusion of sampled image features
into projectable points (non-projectable points go through the pseudo MLP).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import ConfigError
from .synthworld import PointCloudClip

IMAGE_STRIDES = (4, 8)
VOXEL_STRIDES = (1, 2, 4, 8)


@dataclass
class ImagePyramid:
    """Per-camera feature maps at strides 4 and 8, stored as (H*W, D) rows."""

    maps: list[dict[int, Tensor]]
    dims: list[dict[int, tuple[int, int]]]

    @property
    def num_cameras(self) -> int:
        return len(self.maps)

    def zeroed(self) -> "ImagePyramid":
        zmaps = [
            {s: Tensor(np.zeros_like(t.data)) for s, t in per_cam.items()}
            for per_cam in self.maps
        ]
        return ImagePyramid(zmaps, self.dims)


@dataclass
class FusionTerm:
    """Raw branch inputs of one point-level fusion application (for the
    pseudo-fusion regression loss)."""

    z_plus: Tensor  # (M, D) projectable point features before fusion
    z_img: Tensor  # (M, D) sampled image features


@dataclass
class EncoderOutput:
    z: Tensor  # (N, D) final point features
    voxel_features: dict[int, Tensor]  # stride -> (N_i, D)
    pyramid: geo.VoxelPyramid
    fusion_terms: list[FusionTerm]


def _linear(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def mlp(params: dict[str, Tensor], prefix: str, n_layers: int, x: Tensor) -> Tensor:
    """n_layers linear maps with ReLU between them, linear output."""
    for i in range(n_layers):
        x = _linear(params, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def _init_linear(params, rng, name, fan_in, fan_out):
    params[f"{name}.w"] = Tensor(
        rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)),
        requires_grad=True,
    )
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def init_encoder_params(d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    _init_linear(params, rng, "enc.img.p4.0", 48, d)
    _init_linear(params, rng, "enc.img.p4.1", d, d)
    _init_linear(params, rng, "enc.img.p8.0", d, d)
    _init_linear(params, rng, "enc.img.p8.1", d, d)
    _init_linear(params, rng, "enc.point.init.0", 8, d)
    _init_linear(params, rng, "enc.point.init.1", d, d)
    for s in (2, 4, 8):
        _init_linear(params, rng, f"enc.voxel.down{s}.0", d, d)
    for s in (4, 2, 1):
        _init_linear(params, rng, f"enc.voxel.up{s}.0", d, d)
    for i in range(3):
        _init_linear(params, rng, f"enc.fusion.{i}", 2 * d if i == 0 else d, d)
        _init_linear(params, rng, f"enc.pseudo.{i}", d, d)
    params["enc.out_ln.g"] = Tensor(np.ones(d), requires_grad=True)
    params["enc.out_ln.b"] = Tensor(np.zeros(d), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# image branch


def encode_images(images: list[np.ndarray], params: dict[str, Tensor], d: int) -> ImagePyramid:
    """Stride-4 map from non-overlapping 4x4 patch embedding + 2-layer MLP;
    stride-8 map from 2x2 mean-pooling of it + another 2-layer MLP."""
    maps, dims = [], []
    for img in images:
        h, w = img.shape[:2]
        if h % 8 or w % 8:
            raise ConfigError(f"encode_images: dims {h}x{w} not divisible by 8")
        x = img.astype(np.float64) / 255.0
        h4, w4 = h // 4, w // 4
        patches = x.reshape(h4, 4, w4, 4, 3).transpose(0, 2, 1, 3, 4).reshape(h4 * w4, 48)
        i4 = mlp(params, "enc.img.p4", 2, Tensor(patches))
        h8, w8 = h // 8, w // 8
        grid = ad.reshape(i4, (h8, 2, w8, 2, d))
        pooled = ad.tmean(ad.tmean(grid, axis=3), axis=1)
        i8 = mlp(params, "enc.img.p8", 2, ad.reshape(pooled, (h8 * w8, d)))
        maps.append({4: i4, 8: i8})
        dims.append({4: (h4, w4), 8: (h8, w8)})
    return ImagePyramid(maps, dims)


# ---------------------------------------------------------------------------
# point branch


def init_point_features(clip: PointCloudClip, grid: geo.VoxelGrid) -> np.ndarray:
    """8-D per-point descriptor: xyz, relative timestamp, intensity, and the
    offset to the containing voxel's center."""
    centers = grid.centers()[grid.point_map]
    offset = clip.xyz - centers
    return np.concatenate(
        [
            clip.xyz,
            clip.timestamps[:, None],
            clip.intensity[:, None],
            offset,
        ],
        axis=1,
    )


def project_to_rig(xyz: np.ndarray, cams) -> tuple[np.ndarray, np.ndarray]:
    """First valid camera in rig order per point; returns (camera index or -1,
    full-resolution uv)."""
    n = xyz.shape[0]
    cam_of = np.full(n, -1, dtype=np.int64)
    uv = np.zeros((n, 2))
    for k, cam in enumerate(cams):
        uvz, valid = geo.project(xyz, cam)
        fresh = valid & (cam_of == -1)
        cam_of[fresh] = k
        uv[fresh] = uvz[fresh, :2]
    return cam_of, uv


def point_level_fusion(
    z_lidar: Tensor,
    pyramid: ImagePyramid,
    cam_of: np.ndarray,
    uv: np.ndarray,
    params: dict[str, Tensor],
    zero_images: bool = False,
) -> tuple[Tensor, FusionTerm | None]:
    """Projectable points are fused with image features sampled from the
    stride-4 maps; the rest go through the pseudo MLP. Returns the updated
    point features and the raw branch inputs for the regression loss."""
    n, d = z_lidar.shape
    proj_idx = np.flatnonzero(cam_of >= 0)
    rest_idx = np.flatnonzero(cam_of < 0)

    term = None
    pieces = []
    order = []
    if proj_idx.size:
        z_plus = ad.take(z_lidar, proj_idx)
        img_rows = []
        img_order = []
        for k in range(pyramid.num_cameras):
            sel = np.flatnonzero(cam_of[proj_idx] == k)
            if not sel.size:
                continue
            rows = geo.sample_image_features(
                pyramid.maps[k][4], pyramid.dims[k][4], uv[proj_idx[sel]], 4
            )
            img_rows.append(rows)
            img_order.append(sel)
        z_img = ad.concat(img_rows, axis=0)
        inv = np.empty(proj_idx.size, dtype=np.int64)
        inv[np.concatenate(img_order)] = np.arange(proj_idx.size)
        z_img = ad.take(z_img, inv)
        if zero_images:
            z_img = Tensor(np.zeros_like(z_img.data))
        fused = mlp(params, "enc.fusion", 3, ad.concat([z_plus, z_img], axis=1))
        pieces.append(fused)
        order.append(proj_idx)
        term = FusionTerm(z_plus=z_plus, z_img=z_img)
    if rest_idx.size:
        pieces.append(mlp(params, "enc.pseudo", 3, ad.take(z_lidar, rest_idx)))
        order.append(rest_idx)

    stacked = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
    perm = np.empty(n, dtype=np.int64)
    perm[np.concatenate(order)] = np.arange(n)
    return ad.take(stacked, perm), term


# ---------------------------------------------------------------------------
# voxel branch with point exchange


def encode_voxels(
    point_feats8: np.ndarray,
    pyramid: geo.VoxelPyramid,
    image_pyramid: ImagePyramid,
    cam_of: np.ndarray,
    uv: np.ndarray,
    params: dict[str, Tensor],
    zero_images: bool = False,
) -> EncoderOutput:
    """Down/up voxel pyramid with p2v/v2p exchange against the point branch
    and point-level fusion applied at the two exchange points."""
    g1 = pyramid.grids[1]
    if g1.num_voxels == 0:
        raise ValueError("encode_voxels: empty voxel grid")
    pmap = g1.point_map

    p = mlp(params, "enc.point.init", 2, Tensor(point_feats8))

    # down path
    v1 = geo.p2v_scatter_mean(p, pmap, g1.num_voxels)
    down = {1: v1}
    for s in (2, 4, 8):
        parent = pyramid.parent_maps[s // 2]
        pooled = geo.p2v_scatter_mean(down[s // 2], parent, pyramid.grids[s].num_voxels)
        down[s] = ad.add(mlp(params, f"enc.voxel.down{s}", 1, ad.relu(pooled)), pooled)

    # exchange 1: stride-1 voxel context back to points, then fusion
    terms = []
    p = ad.add(p, geo.v2p_gather(v1, pmap))
    p, t1 = point_level_fusion(p, image_pyramid, cam_of, uv, params, zero_images)
    if t1 is not None:
        terms.append(t1)

    # up path with skip additions
    up = {8: down[8]}
    for s in (4, 2, 1):
        lifted = geo.v2p_gather(up[s * 2], pyramid.parent_maps[s])
        up[s] = ad.add(mlp(params, f"enc.voxel.up{s}", 1, ad.relu(lifted)), down[s])

    # exchange 2: refined stride-1 context to points, then fusion
    p = ad.add(p, geo.v2p_gather(up[1], pmap))
    z, t2 = point_level_fusion(p, image_pyramid, cam_of, uv, params, zero_images)
    if t2 is not None:
        terms.append(t2)
    # normalized point features keep mask logits and attention bias bounded
    z = ad.layer_norm(z, params["enc.out_ln.g"], params["enc.out_ln.b"])

    voxel_features = {
        1: geo.p2v_scatter_mean(z, pmap, g1.num_voxels),
        2: up[2],
        4: up[4],
        8: up[8],
    }
    return EncoderOutput(z=z, voxel_features=voxel_features, pyramid=pyramid,
                         fusion_terms=terms)


def encode_clip(
    clip: PointCloudClip,
    images: list[np.ndarray],
    cams,
    params: dict[str, Tensor],
    d: int,
    voxel_size: float,
    zero_images: bool = False,
    image_pyr: ImagePyramid | None = None,
) -> EncoderOutput:
    """Full encoder forward for one clip. A prebuilt image pyramid may be
    passed in to share it with the decoder."""
    pyramid = geo.build_pyramid(clip.xyz, voxel_size, VOXEL_STRIDES)
    if image_pyr is None:
        image_pyr = encode_images(images, params, d)
        if zero_images:
            image_pyr = image_pyr.zeroed()
    cam_of, uv = project_to_rig(clip.xyz, cams)
    feats8 = init_point_features(clip, pyramid.grids[1])
    return encode_voxels(feats8, pyramid, image_pyr, cam_of, uv, params,
                         zero_images=zero_images)
