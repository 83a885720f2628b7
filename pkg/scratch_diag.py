import numpy as np

from pano4d import autodiff as ad
from pano4d import decoder as dec
from pano4d import model as mdl
from pano4d import supervision as sup
from pano4d import synthworld as sw

scene = sw.generate_scene(
    sw.SceneConfig(frames=2, actors_min=4, actors_max=4, ground_points=640,
                   wall_points=0, points_per_actor=90), seed=101)
clip = scene.clip(1)
model_cfg = mdl.ModelConfig(d=32, num_queries=32, voxel_size=0.1)
settings = sup.TrainSettings(
    lr_backbone=1e-3, lr_other=1e-3, epochs=300, decay_epochs=(),
    warmup_steps=50, max_steps=300,
    augment=sw.AugmentParams(rotation_max=0.0, jitter_sigma=0.0,
                             point_budget=10**6), seed=0)
params, rows = sup.train_stage1([scene], model_cfg, settings)
for r in rows[::50]:
    print({k: round(v, 3) for k, v in r.items()})

result = mdl.forward_clip(params, clip, scene.images[1], scene.cameras, model_cfg)
q = result.block_queries[-1]
cls = dec.predict_classes(q, params).data
probs = np.exp(cls - cls.max(1, keepdims=True))
probs /= probs.sum(1, keepdims=True)
active = probs.argmax(1) != probs.shape[1] - 1
print("active queries:", active.sum(), "of", len(active))
print("argmax classes:", np.bincount(probs.argmax(1), minlength=5))
mask_logits = dec.predict_masks(q, result.z).data
print("mask logit stats: mean %.2f std %.2f min %.2f max %.2f" % (
    mask_logits.mean(), mask_logits.std(), mask_logits.min(), mask_logits.max()))
targets = sup.clip_targets(clip, scene.config)
print("targets:", [(t.class_id, int(t.mask.sum())) for t in targets])
probs_mask = 1 / (1 + np.exp(-np.clip(mask_logits, -60, 60)))
cost = sup.build_cost(probs_mask, probs, targets,
                      {c.id: i for i, c in enumerate(scene.config.classes)})
match = sup.hungarian_match(cost)
for qq, g in match.pairs:
    iou = sup.mask_iou(probs_mask[:, qq], targets[g].mask)
    print(f"  pair q{qq} -> target{g} (cls {targets[g].class_id}) iou {iou:.3f} "
          f"p(cls) {probs[qq, {c.id: i for i, c in enumerate(scene.config.classes)}[targets[g].class_id]]:.3f}")
alpha = [float(params[f'dec.b{b}.alpha'].data) for b in range(4)]
print("alphas:", [round(a, 3) for a in alpha])
