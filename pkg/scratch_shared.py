"""Compare per-block independent matching vs shared final-block matching."""
import time

import numpy as np

from pano4d import autodiff as ad
from pano4d import decoder as dec
from pano4d import metrics as mx
from pano4d import model as mdl
from pano4d import supervision as sup
from pano4d import synthworld as sw
from pano4d.autodiff import Tensor

scene = sw.generate_scene(
    sw.SceneConfig(frames=2, actors_min=4, actors_max=4, ground_points=640,
                   wall_points=0, points_per_actor=90), seed=101)
clip = scene.clip(1)
model_cfg = mdl.ModelConfig(d=32, num_queries=32, voxel_size=0.1)


def shared_clip_loss(result, clip, params, config, now=0.1):
    targets = sup.clip_targets(clip, config)
    palette_col = {c.id: i for i, c in enumerate(config.classes)}
    no_object_col = len(config.classes)
    # match on the final block only
    q_final = result.block_queries[-1]
    mask_logits = dec.predict_masks(q_final, result.z)
    class_logits = dec.predict_classes(q_final, params)
    probs = ad.softmax(class_logits).data
    mask_probs = 1 / (1 + np.exp(-np.clip(mask_logits.data, -60, 60)))
    match = sup.hungarian_match(
        sup.build_cost(mask_probs, probs, targets, palette_col))

    t = q_final.shape[0]
    target_cols = np.full(t, no_object_col, dtype=np.int64)
    q_idx = [q for q, _ in match.pairs]
    t_idx = [g for _, g in match.pairs]
    target_cols[q_idx] = [palette_col[targets[g].class_id] for g in t_idx]
    tmat = np.stack([targets[g].mask.astype(np.float64) for g in t_idx])

    blocks = []
    for q in result.block_queries:
        ml = dec.predict_masks(q, result.z)
        cl = dec.predict_classes(q, params)
        cols = ad.take(ad.transpose(ml), q_idx)
        l_ce = sup.bce_mask_loss(cols, tmat)
        l_dice = sup.dice_loss_rows(ad.sigmoid(cols), tmat)
        l_cls = sup.cls_loss(cl, target_cols, now)
        blocks.append((l_ce, l_dice, l_cls))
    pf_terms = [sup.pseudo_fusion_loss(tm, params) for tm in result.fusion_terms]
    l_pf = Tensor(0.0)
    for tm in pf_terms:
        l_pf = ad.add(l_pf, ad.mul(tm, 1.0 / len(pf_terms)))
    return sup.total_loss(blocks, l_pf)


def train(shared, seed, steps=500):
    settings = sup.TrainSettings(
        lr_backbone=1e-3, lr_other=1e-3, epochs=steps, decay_epochs=(),
        warmup_steps=50, max_steps=steps,
        augment=sw.AugmentParams(0.0, 0.0, 10**6), seed=seed)
    params = mdl.init_params(model_cfg, len(scene.config.classes), seed)
    backbone, rest = mdl.split_param_groups(params)
    opt = ad.AdamW([(backbone, settings.lr_backbone), (rest, settings.lr_other)])
    rng = np.random.default_rng(seed + 0x5173)
    last = None
    for step in range(steps):
        opt.lr_scale = min(1.0, (step + 1) / 50)
        rng.integers(2**31)  # keep stream aligned with train_stage1
        result = mdl.forward_clip(params, clip, scene.images[1], scene.cameras,
                                  model_cfg)
        if shared:
            loss, report = shared_clip_loss(result, clip, params, scene.config)
        else:
            loss, report = sup.clip_loss(result, clip, params, scene.config,
                                         no_object_weight=NOW)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        last = report.total
    assembled = mdl.infer_clip(params, clip, scene.images[1], scene.cameras,
                               model_cfg, scene.config)
    table = mx.ClassTable.from_palette(scene.config.classes)
    n0 = scene.frames[0].num_points
    pred = mx.Labeling([
        mx.FrameLabels(assembled.class_ids[:n0], assembled.track_ids[:n0]),
        mx.FrameLabels(assembled.class_ids[n0:], assembled.track_ids[n0:])])
    gt = mx.Labeling([
        mx.FrameLabels(f.class_ids.astype(np.int64), f.track_ids.astype(np.int64))
        for f in scene.frames])
    return last, mx.evaluate(pred, gt, table).means["pq"]


t0 = time.time()
import sys
lr = float(sys.argv[1]) if len(sys.argv) > 1 else 1.5e-3
NOW = float(sys.argv[3]) if len(sys.argv) > 3 else 0.4
warm = int(sys.argv[2]) if len(sys.argv) > 2 else 100
def train2(seed, steps=500):
    settings_lr = lr
    params = mdl.init_params(model_cfg, len(scene.config.classes), seed)
    backbone, rest = mdl.split_param_groups(params)
    opt = ad.AdamW([(backbone, settings_lr), (rest, settings_lr)])
    rng = np.random.default_rng(seed + 0x5173)
    last = None
    for step in range(steps):
        opt.lr_scale = min(1.0, (step + 1) / warm)
        rng.integers(2**31)
        result = mdl.forward_clip(params, clip, scene.images[1], scene.cameras, model_cfg)
        loss, report = sup.clip_loss(result, clip, params, scene.config, no_object_weight=NOW)
        opt.zero_grad(); ad.backward(loss); opt.step()
        last = report.total
    assembled = mdl.infer_clip(params, clip, scene.images[1], scene.cameras, model_cfg, scene.config)
    table = mx.ClassTable.from_palette(scene.config.classes)
    n0 = scene.frames[0].num_points
    pred = mx.Labeling([mx.FrameLabels(assembled.class_ids[:n0], assembled.track_ids[:n0]),
                        mx.FrameLabels(assembled.class_ids[n0:], assembled.track_ids[n0:])])
    gt = mx.Labeling([mx.FrameLabels(f.class_ids.astype(np.int64), f.track_ids.astype(np.int64)) for f in scene.frames])
    return last, mx.evaluate(pred, gt, table).means["pq"]

for seed in range(4):
    loss, pq = train2(seed)
    print(f"lr={lr} warm={warm} seed {seed}: loss {loss:8.3f}  PQ {pq:.4f}  ({time.time()-t0:.0f}s)", flush=True)
