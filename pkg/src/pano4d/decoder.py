"""Query-based panoptic decoder: learned queries refined by four coarse-to-fine
fusion blocks (soft-masked cross-attention to voxel and image features,
interleaved self-attention and feed-forward layers), the mask/class heads, and
per-clip panoptic assembly into a labeling plus tracklets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .encoder import EncoderOutput, ImagePyramid, project_to_rig
from .synthworld import PointCloudClip, SceneConfig
from .tracking import Tracklet

BLOCK_STRIDES = (8, 4, 2, 1)
NUM_BLOCKS = 4


def init_decoder_params(d: int, num_queries: int, num_classes: int,
                        rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    params["dec.queries"] = Tensor(rng.normal(scale=0.5, size=(num_queries, d)),
                                   requires_grad=True)
    scale = 1.0 / np.sqrt(d)

    def attn(prefix):
        for name in ("wq", "wk", "wv"):
            params[f"{prefix}.{name}"] = Tensor(
                rng.normal(scale=scale, size=(d, d)), requires_grad=True)
        params[f"{prefix}.ln.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{prefix}.ln.b"] = Tensor(np.zeros(d), requires_grad=True)

    for b in range(NUM_BLOCKS):
        p = f"dec.b{b}"
        attn(f"{p}.vx")
        attn(f"{p}.ix")
        attn(f"{p}.sa1")
        attn(f"{p}.sa2")
        for ffn in ("ffn1", "ffn2"):
            params[f"{p}.{ffn}.0.w"] = Tensor(
                rng.normal(scale=scale, size=(d, 2 * d)), requires_grad=True)
            params[f"{p}.{ffn}.0.b"] = Tensor(np.zeros(2 * d), requires_grad=True)
            params[f"{p}.{ffn}.1.w"] = Tensor(
                rng.normal(scale=1.0 / np.sqrt(2 * d), size=(2 * d, d)),
                requires_grad=True)
            params[f"{p}.{ffn}.1.b"] = Tensor(np.zeros(d), requires_grad=True)
            params[f"{p}.{ffn}.ln.g"] = Tensor(np.ones(d), requires_grad=True)
            params[f"{p}.{ffn}.ln.b"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"{p}.alpha"] = Tensor(np.array(1.0), requires_grad=True)
    params["head.cls.w"] = Tensor(
        rng.normal(scale=scale, size=(d, 1 + num_classes)), requires_grad=True)
    params["head.cls.b"] = Tensor(np.zeros(1 + num_classes), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# attention layers


def masked_attention(q, keys, values, encodings, mask_bias, alpha, d: int) -> Tensor:
    """softmax((Q (K+E)^T + alpha M^T) / sqrt(D)) V.

    ``mask_bias`` is (rows, T) aligned with keys, or None to disable the bias
    term entirely.
    """
    if keys.shape[0] != values.shape[0]:
        raise ad.ShapeError("masked_attention: key/value row mismatch")
    k = ad.add(keys, encodings) if encodings is not None else keys
    logits = ad.matmul(q, ad.transpose(k))
    if mask_bias is not None:
        if mask_bias.shape[0] != keys.shape[0]:
            raise ad.ShapeError(
                f"masked_attention: bias rows {mask_bias.shape[0]} "
                f"!= feature rows {keys.shape[0]}")
        logits = ad.add(logits, ad.mul(alpha, ad.transpose(mask_bias)))
    logits = ad.mul(logits, 1.0 / np.sqrt(d))
    return ad.matmul(ad.softmax(logits), values)


def soft_masked_xattn(q, features, encodings, mask_bias, alpha,
                      params: dict[str, Tensor], prefix: str, d: int) -> Tensor:
    """Projected cross-attention with the soft mask bias, then residual add
    and layer-normalize."""
    qp = ad.matmul(q, params[f"{prefix}.wq"])
    k = ad.matmul(features, params[f"{prefix}.wk"])
    v = ad.matmul(features, params[f"{prefix}.wv"])
    out = masked_attention(qp, k, v, encodings, mask_bias, alpha, d)
    return ad.layer_norm(ad.add(q, out), params[f"{prefix}.ln.g"],
                         params[f"{prefix}.ln.b"])


def self_attention(q, params: dict[str, Tensor], prefix: str, d: int) -> Tensor:
    qp = ad.matmul(q, params[f"{prefix}.wq"])
    k = ad.matmul(q, params[f"{prefix}.wk"])
    v = ad.matmul(q, params[f"{prefix}.wv"])
    out = masked_attention(qp, k, v, None, None, None, d)
    return ad.layer_norm(ad.add(q, out), params[f"{prefix}.ln.g"],
                         params[f"{prefix}.ln.b"])


def feed_forward(q, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(q, params[f"{prefix}.0.w"]), params[f"{prefix}.0.b"]))
    h = ad.add(ad.matmul(h, params[f"{prefix}.1.w"]), params[f"{prefix}.1.b"])
    return ad.layer_norm(ad.add(q, h), params[f"{prefix}.ln.g"],
                         params[f"{prefix}.ln.b"])


# ---------------------------------------------------------------------------
# mask heads


def predict_masks(q, z) -> Tensor:
    """Point-level mask logits M = Z Q^T, shape (N, T)."""
    return ad.matmul(z, ad.transpose(q))


def predict_classes(q, params: dict[str, Tensor]) -> Tensor:
    """(T, 1+C) class logits; the last column scores "no object"."""
    return ad.add(ad.matmul(q, params["head.cls.w"]), params["head.cls.b"])


def mask_bias_at_stride(mask_logits, pyramid: geo.VoxelPyramid, stride: int) -> Tensor:
    """Scatter-mean the point mask logits to stride 1, then pool through the
    parent maps down to the requested stride."""
    g1 = pyramid.grids[1]
    m = ad.segment_mean(mask_logits, g1.point_map, g1.num_voxels)
    s = 1
    while s < stride:
        m = ad.segment_mean(m, pyramid.parent_maps[s], pyramid.grids[s * 2].num_voxels)
        s *= 2
    return m


# ---------------------------------------------------------------------------
# image feature gathering per stride


@dataclass
class ImageRows:
    """Image feature rows attending at one stride, tagged by source voxel."""

    features: Tensor | None  # (M_i, D) or None when nothing projects
    encodings: np.ndarray | None  # (M_i, D) voxel positional encodings
    voxel_tags: np.ndarray | None  # (M_i,)

    @property
    def num_rows(self) -> int:
        return 0 if self.features is None else self.features.shape[0]


def gather_image_features(pyramid: geo.VoxelPyramid, stride: int,
                          image_pyr: ImagePyramid, cams, d: int) -> ImageRows:
    """Project voxel centers into their first valid camera and sample both
    image maps; every row carries its source voxel's positional encoding."""
    centers = pyramid.grids[stride].centers()
    if centers.shape[0] == 0 or image_pyr.num_cameras == 0:
        return ImageRows(None, None, None)
    cam_of, uv = project_to_rig(centers, cams)
    valid = np.flatnonzero(cam_of >= 0)
    if valid.size == 0:
        return ImageRows(None, None, None)
    enc = geo.positional_encoding(centers, np.zeros(3), d)
    rows, tags = [], []
    for s in (4, 8):
        for k in range(image_pyr.num_cameras):
            sel = valid[cam_of[valid] == k]
            if not sel.size:
                continue
            rows.append(geo.sample_image_features(
                image_pyr.maps[k][s], image_pyr.dims[k][s], uv[sel], s))
            tags.append(sel)
    tags_arr = np.concatenate(tags)
    return ImageRows(ad.concat(rows, axis=0), enc[tags_arr], tags_arr)


# ---------------------------------------------------------------------------
# fusion blocks


def fusion_block(q, z, vox_feats, vox_enc, image_rows: ImageRows,
                 pyramid: geo.VoxelPyramid, stride: int,
                 params: dict[str, Tensor], block: int, d: int,
                 mask_bias_enabled: bool = True) -> Tensor:
    """One decoder stage: voxel x-attn, self-attn, FFN, image x-attn,
    self-attn, FFN. The mask bias is recomputed from the incoming queries
    before each cross-attention."""
    p = f"dec.b{block}"
    alpha = params[f"{p}.alpha"]

    bias_v = None
    if mask_bias_enabled:
        bias_v = mask_bias_at_stride(predict_masks(q, z), pyramid, stride)
    q = soft_masked_xattn(q, vox_feats, Tensor(vox_enc), bias_v, alpha,
                          params, f"{p}.vx", d)
    q = self_attention(q, params, f"{p}.sa1", d)
    q = feed_forward(q, params, f"{p}.ffn1")

    if image_rows.num_rows > 0:
        bias_i = None
        if mask_bias_enabled:
            bias_s = mask_bias_at_stride(predict_masks(q, z), pyramid, stride)
            bias_i = ad.take(bias_s, image_rows.voxel_tags)
        q = soft_masked_xattn(q, image_rows.features, Tensor(image_rows.encodings),
                              bias_i, alpha, params, f"{p}.ix", d)
    q = self_attention(q, params, f"{p}.sa2", d)
    q = feed_forward(q, params, f"{p}.ffn2")
    return q


def decode(params: dict[str, Tensor], encoded: EncoderOutput,
           image_pyr: ImagePyramid, cams, d: int,
           mask_bias_enabled: bool = True) -> list[Tensor]:
    """Run the four fusion blocks coarse-to-fine ((V8,F8) .. (V1,F1));
    returns the intermediate query set after every block (the last entry is
    the decoder output Q')."""
    for s in BLOCK_STRIDES:
        if s not in encoded.voxel_features:
            raise ValueError(f"decode: missing voxel stride {s}")
    q = params["dec.queries"]
    block_queries: list[Tensor] = []
    for b, stride in enumerate(BLOCK_STRIDES):
        vox_enc = geo.positional_encoding(
            encoded.pyramid.grids[stride].centers(), np.zeros(3), d)
        image_rows = gather_image_features(encoded.pyramid, stride, image_pyr,
                                           cams, d)
        q = fusion_block(q, encoded.z, encoded.voxel_features[stride], vox_enc,
                         image_rows, encoded.pyramid, stride, params, b, d,
                         mask_bias_enabled=mask_bias_enabled)
        block_queries.append(q)
    return block_queries


# ---------------------------------------------------------------------------
# panoptic assembly


@dataclass
class AssembledClip:
    class_ids: np.ndarray  # (N,)
    track_ids: np.ndarray  # (N,) local per-clip ids, 0 = no instance
    tracklets: list[Tracklet]


def assemble_panoptic(mask_logits: np.ndarray, class_logits: np.ndarray,
                      queries: np.ndarray, clip: PointCloudClip,
                      config: SceneConfig, fallback_class: int) -> AssembledClip:
    """Hard per-point assembly: drop no-object queries, give every point to
    the active query maximizing p(class) * sigmoid(mask logit); thing points
    get that query's tracklet id, stuff points only the class. With no active
    query at all, every point falls back to the configured stuff class."""
    n, t = mask_logits.shape
    shifted = class_logits - class_logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    best_class = probs[:, :-1].argmax(axis=1)
    best_prob = probs[np.arange(t), best_class]
    active = probs.argmax(axis=1) != (probs.shape[1] - 1)

    class_ids = np.full(n, fallback_class, dtype=np.int64)
    track_ids = np.zeros(n, dtype=np.int64)
    tracklets: list[Tracklet] = []
    active_idx = np.flatnonzero(active)
    if active_idx.size == 0:
        return AssembledClip(class_ids, track_ids, tracklets)

    palette_ids = np.array([c.id for c in config.classes])
    thing = {c.id for c in config.thing_classes()}
    mask_prob = 1.0 / (1.0 + np.exp(-np.clip(mask_logits[:, active_idx], -60, 60)))
    scores = best_prob[active_idx][None, :] * mask_prob
    winner = active_idx[scores.argmax(axis=1)]

    frame_of_point = clip.frame_index
    next_track = 1
    for qi in active_idx:
        pts = np.flatnonzero(winner == qi)
        if pts.size == 0:
            continue
        cid = int(palette_ids[best_class[qi]])
        class_ids[pts] = cid
        if cid not in thing:
            continue
        frame_masks: dict[int, np.ndarray] = {}
        frames_present = []
        for local, global_f in enumerate(clip.frame_numbers):
            in_frame = frame_of_point == local
            mask = (winner == qi) & in_frame
            if mask.any():
                frame_masks[global_f] = mask[in_frame]
                frames_present.append(global_f)
        track_ids[pts] = next_track
        last_local = clip.frame_numbers.index(frames_present[-1])
        last_pts = pts[frame_of_point[pts] == last_local]
        tracklets.append(Tracklet(
            query=queries[qi].copy(),
            frame_masks=frame_masks,
            centroid=clip.xyz[last_pts].mean(axis=0),
            frame_range=(frames_present[0], frames_present[-1]),
            class_id=cid,
        ))
        next_track += 1
    return AssembledClip(class_ids, track_ids, tracklets)
