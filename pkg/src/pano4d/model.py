"""Model assembly: parameter initialization across encoder/decoder/heads,
the full clip forward pass, inference with panoptic assembly, and checkpoint
glue."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from .autodiff import Tensor
from .geometry import yaw_rotated_camera
from .synthworld import PointCloudClip, Scene, SceneConfig
from .tracking import Tracklet

BACKBONE_PREFIXES = ("enc.point", "enc.voxel")


@dataclass
class ModelConfig:
    d: int = 32
    num_queries: int = 32
    voxel_size: float = 0.1
    fallback_class: int = 1
    zero_images: bool = False


def init_params(cfg: ModelConfig, num_classes: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = enc.init_encoder_params(cfg.d, rng)
    params.update(dec.init_decoder_params(cfg.d, cfg.num_queries, num_classes, rng))
    return params


def split_param_groups(params: dict[str, Tensor]) -> tuple[dict, dict]:
    """(LiDAR feature extractor params, everything else) for the two
    learning-rate groups."""
    backbone = {k: v for k, v in params.items()
                if k.startswith(BACKBONE_PREFIXES)}
    rest = {k: v for k, v in params.items() if k not in backbone}
    return backbone, rest


@dataclass
class ForwardResult:
    z: Tensor
    block_queries: list[Tensor]
    encoder_out: enc.EncoderOutput
    fusion_terms: list[enc.FusionTerm]


def forward_clip(params: dict[str, Tensor], clip: PointCloudClip,
                 images: list[np.ndarray], cams, cfg: ModelConfig) -> ForwardResult:
    if clip.world_rotation != 0.0:
        cams = [yaw_rotated_camera(c, clip.world_rotation) for c in cams]
    image_pyr = enc.encode_images(images, params, cfg.d)
    if cfg.zero_images:
        image_pyr = image_pyr.zeroed()
    encoded = enc.encode_clip(clip, images, cams, params, cfg.d, cfg.voxel_size,
                              zero_images=cfg.zero_images, image_pyr=image_pyr)
    blocks = dec.decode(params, encoded, image_pyr, cams, cfg.d)
    return ForwardResult(z=encoded.z, block_queries=blocks, encoder_out=encoded,
                         fusion_terms=encoded.fusion_terms)


def infer_clip(params: dict[str, Tensor], clip: PointCloudClip,
               images: list[np.ndarray], cams, cfg: ModelConfig,
               scene_config: SceneConfig) -> dec.AssembledClip:
    out = forward_clip(params, clip, images, cams, cfg)
    q = out.block_queries[-1]
    mask_logits = dec.predict_masks(q, out.z).data
    class_logits = dec.predict_classes(q, params).data
    return dec.assemble_panoptic(mask_logits, class_logits, q.data, clip,
                                 scene_config, cfg.fallback_class)


def scene_clip_inference(params: dict[str, Tensor], scene: Scene,
                         cfg: ModelConfig):
    """Adapter for run_sequence: t -> (class_ids, local ids, tracklets)."""

    def infer(t: int) -> tuple[np.ndarray, np.ndarray, list[Tracklet]]:
        clip = scene.clip(t)
        assembled = infer_clip(params, clip, scene.images[t], scene.cameras,
                               cfg, scene.config)
        return assembled.class_ids, assembled.track_ids, assembled.tracklets

    return infer
