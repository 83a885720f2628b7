"""Shared test scaffolding: oracle tracklets derived from ground truth (for
association experiments that isolate the tracking path) and labeling
conversion utilities."""

import numpy as np

from pano4d import metrics as mx
from pano4d import tracking as trk
from pano4d.geometry import project
from pano4d.synthworld import Scene

ORACLE_QUERY_DIM = 8


def oracle_query(scene: Scene, frame: int, pts_xyz: np.ndarray,
                 intensity: np.ndarray) -> np.ndarray:
    """Appearance descriptor computed from the data a model would see: mean
    intensity, box extents, mean rendered color at projected pixels, size."""
    extent = pts_xyz.max(axis=0) - pts_xyz.min(axis=0)
    rgb = np.zeros(3)
    hits = 0
    for k, cam in enumerate(scene.cameras):
        uvz, valid = project(pts_xyz, cam)
        if valid.any():
            img = scene.images[frame][k]
            uv = uvz[valid]
            rgb += img[uv[:, 1].astype(int), uv[:, 0].astype(int)].mean(axis=0) / 255.0
            hits += 1
    if hits:
        rgb /= hits
    return np.concatenate([
        [float(intensity.mean())], extent, rgb,
        [np.log1p(len(pts_xyz)) / 5.0],
    ])


def oracle_clip_tracklets(scene: Scene, t: int) -> list[trk.Tracklet]:
    """Ground-truth tracklets for clip (t-1, t) with data-derived queries."""
    clip = scene.clip(t)
    tracklets = []
    for tid in np.unique(clip.track_ids[clip.track_ids > 0]):
        frame_masks = {}
        for local, global_f in enumerate(clip.frame_numbers):
            in_frame = clip.frame_index == local
            mask = (clip.track_ids == tid) & in_frame
            if mask.any():
                frame_masks[global_f] = mask[in_frame]
        frames_present = sorted(frame_masks)
        last = frames_present[-1]
        local_last = clip.frame_numbers.index(last)
        sel = (clip.track_ids == tid) & (clip.frame_index == local_last)
        pts = clip.xyz[sel]
        tracklets.append(trk.Tracklet(
            query=oracle_query(scene, last, pts, clip.intensity[sel]),
            frame_masks=frame_masks,
            centroid=pts.mean(axis=0),
            frame_range=(frames_present[0], last),
            class_id=int(clip.class_ids[sel][0]),
        ))
    return tracklets


def oracle_clip_inference(scene: Scene):
    """run_sequence adapter emitting ground-truth masks and classes; only the
    association stage is under test."""

    def infer(t: int):
        clip = scene.clip(t)
        tracklets = oracle_clip_tracklets(scene, t)
        local = np.zeros(clip.num_points, dtype=np.int64)
        for j, tr in enumerate(tracklets):
            for f, mask in tr.frame_masks.items():
                local_f = clip.frame_numbers.index(f)
                base = np.flatnonzero(clip.frame_index == local_f)
                local[base[mask]] = j + 1
        return clip.class_ids.copy(), local, tracklets

    return infer


def gt_labeling(scene: Scene) -> mx.Labeling:
    return mx.Labeling([
        mx.FrameLabels(f.class_ids.astype(np.int64), f.track_ids.astype(np.int64))
        for f in scene.frames
    ])


def frames_to_labeling(frames: list[tuple[np.ndarray, np.ndarray]]) -> mx.Labeling:
    return mx.Labeling([mx.FrameLabels(c, t) for c, t in frames])


def scene_gt_tracks(scene: Scene) -> dict[int, np.ndarray]:
    return {f: scene.frames[f].track_ids.astype(np.int64)
            for f in range(scene.num_frames)}
