import time

import numpy as np

from pano4d import metrics as mx
from pano4d import model as mdl
from pano4d import supervision as sup
from pano4d import synthworld as sw

scene = sw.generate_scene(
    sw.SceneConfig(frames=2, actors_min=4, actors_max=4, ground_points=550,
                   wall_points=150, points_per_actor=90), seed=101)
clip = scene.clip(1)
print("points:", clip.num_points)
model_cfg = mdl.ModelConfig(d=32, num_queries=32, voxel_size=0.1)
settings = sup.TrainSettings(
    lr_backbone=1e-3, lr_other=1e-3, epochs=500, decay_epochs=(),
    warmup_steps=50, max_steps=500,
    augment=sw.AugmentParams(rotation_max=0.0, jitter_sigma=0.0,
                             point_budget=10**6),
    seed=1)
t0 = time.time()
params, rows = sup.train_stage1([scene], model_cfg, settings)
elapsed = time.time() - t0
assembled = mdl.infer_clip(params, clip, scene.images[1], scene.cameras,
                           model_cfg, scene.config)
table = mx.ClassTable.from_palette(scene.config.classes)
n0 = scene.frames[0].num_points
pred = mx.Labeling([mx.FrameLabels(assembled.class_ids[:n0], assembled.track_ids[:n0]),
                    mx.FrameLabels(assembled.class_ids[n0:], assembled.track_ids[n0:])])
gt = mx.Labeling([mx.FrameLabels(f.class_ids.astype(np.int64),
                                 f.track_ids.astype(np.int64))
                  for f in scene.frames])
pq = mx.evaluate(pred, gt, table).means["pq"]
print(f"loss {rows[-1]['total']:.4f}  PQ {pq:.4f}  elapsed {elapsed:.1f}s")
