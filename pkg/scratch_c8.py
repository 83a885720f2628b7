import sys
import time

import numpy as np

from pano4d import metrics as mx
from pano4d import model as mdl
from pano4d import supervision as sup
from pano4d import synthworld as sw

TWIN_PALETTE = [
    sw.ClassSpec(1, "ground", "stuff", 0.30, 0.25),
    sw.ClassSpec(3, "crate_red", "thing", 0.98, 0.75, (1.4, 1.4, 1.2)),
    sw.ClassSpec(4, "crate_blue", "thing", 0.58, 0.75, (1.4, 1.4, 1.2)),
]
CFG = sw.SceneConfig(frames=6, actors_min=4, actors_max=4,
                     classes=TWIN_PALETTE, ground_points=200, wall_points=0,
                     points_per_actor=60,
                     speed_min=0.5, speed_max=0.9,
                     size_jitter=0.0)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150


def clip_pq(scene, params, model_cfg, t=5):
    clip = scene.clip(t)
    assembled = mdl.infer_clip(params, clip, scene.images[t], scene.cameras,
                               model_cfg, scene.config)
    table = mx.ClassTable.from_palette(scene.config.classes)
    n0 = scene.frames[t - 1].num_points
    pred = mx.Labeling([
        mx.FrameLabels(assembled.class_ids[:n0], assembled.track_ids[:n0]),
        mx.FrameLabels(assembled.class_ids[n0:], assembled.track_ids[n0:])])
    gt = mx.Labeling([
        mx.FrameLabels(f.class_ids.astype(np.int64), f.track_ids.astype(np.int64))
        for f in (scene.frames[t - 1], scene.frames[t])])
    return mx.evaluate(pred, gt, table).means["pq"]


t0 = time.time()
fusion_pqs, lidar_pqs = [], []
for seed in range(5):
    scene = sw.generate_scene(CFG, seed=500 + seed)
    for zero_images, bucket in ((False, fusion_pqs), (True, lidar_pqs)):
        model_cfg = mdl.ModelConfig(d=16, num_queries=8, voxel_size=0.15,
                                    zero_images=zero_images)
        settings = sup.TrainSettings(
            lr_backbone=1e-3, lr_other=1e-3, epochs=steps, decay_epochs=(),
            warmup_steps=50, max_steps=steps,
            augment=sw.AugmentParams(rotation_max=np.pi, jitter_sigma=0.01,
                                     point_budget=10**6),
            seed=seed)
        train_scene = sw.Scene(config=scene.config, seed=scene.seed,
                               cameras=scene.cameras,
                               frames=scene.frames[:4],
                               images=scene.images[:4], actors=scene.actors)
        params, rows = sup.train_stage1([train_scene], model_cfg, settings)
        bucket.append(0.5 * (clip_pq(scene, params, model_cfg, t=4)
                             + clip_pq(scene, params, model_cfg, t=5)))
    print(f"seed {seed}: fusion {fusion_pqs[-1]:.4f}  lidar {lidar_pqs[-1]:.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
print(f"steps={steps} mean fusion {np.mean(fusion_pqs):.4f}  "
      f"mean lidar {np.mean(lidar_pqs):.4f}  gap {np.mean(fusion_pqs)-np.mean(lidar_pqs):.4f}")
