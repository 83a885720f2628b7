import sys
import time

sys.path.insert(0, "tests")

import numpy as np

from helpers import (ORACLE_QUERY_DIM, frames_to_labeling, gt_labeling,
                     oracle_clip_inference, oracle_clip_tracklets,
                     scene_gt_tracks)
from pano4d import metrics as mx
from pano4d import synthworld as sw
from pano4d import tracking as trk

OCC_CFG = sw.SceneConfig(frames=8, actors_min=3, actors_max=4,
                         ground_points=150, wall_points=0, points_per_actor=50,
                         occlusion_prob=0.85)


def make_scenes(base_seed, n):
    return [sw.generate_scene(OCC_CFG, seed=base_seed + i) for i in range(n)]


def train_tam_for(seed):
    scenes = make_scenes(10_000 + 100 * seed, 8)
    feats, labels = [], []
    for scene in scenes:
        per_clip = {t: oracle_clip_tracklets(scene, t)
                    for t in range(1, scene.num_frames)}
        f, l = trk.collect_pairs(per_clip, scene_gt_tracks(scene))
        if f.size:
            feats.append(f)
            labels.append(l)
    feats = np.concatenate(feats)
    labels = np.concatenate(labels)
    params, losses = trk.train_tam(feats, labels, ORACLE_QUERY_DIM, lr=2e-3,
                                   epochs=8, seed=seed)
    # training accuracy
    logits = trk.tam_logits(feats, params).data[:, 0]
    acc = np.mean((logits > 0) == (labels > 0.5))
    print(f"  seed {seed}: {len(labels)} pairs ({labels.mean():.2f} pos), "
          f"final loss {np.mean(losses[-5:]):.4f}, acc {acc:.3f}")
    return params


def eval_suite(seed, tam_params):
    scenes = make_scenes(20_000 + 100 * seed, 20)
    results = {}
    for mode in ("tam", "iou"):
        pairs = []
        for scene in scenes:
            frames = trk.run_sequence(
                oracle_clip_inference(scene), scene.num_frames,
                [f.num_points for f in scene.frames],
                tau=0.5, t_hist=4,
                baseline_iou=(mode == "iou"),
                tam_params=tam_params if mode == "tam" else None)
            pairs.append((frames_to_labeling(frames), gt_labeling(scene)))
        table = mx.ClassTable.from_palette(OCC_CFG.classes)
        rep = mx.evaluate_scenes(pairs, table)
        results[mode] = (rep.means["s_assoc"], rep.means["pat"])
    return results


t0 = time.time()
gaps_a, gaps_p = [], []
for seed in range(5):
    params = train_tam_for(seed)
    res = eval_suite(seed, params)
    da = res["tam"][0] - res["iou"][0]
    dp = res["tam"][1] - res["iou"][1]
    gaps_a.append(da)
    gaps_p.append(dp)
    print(f"  seed {seed}: TAM S_assoc {res['tam'][0]:.3f} PAT {res['tam'][1]:.3f} | "
          f"IoU S_assoc {res['iou'][0]:.3f} PAT {res['iou'][1]:.3f} | "
          f"gaps {da*100:.1f} / {dp*100:.1f} pts ({time.time()-t0:.0f}s)", flush=True)
print(f"mean gaps: S_assoc {np.mean(gaps_a)*100:.1f} pts, PAT {np.mean(gaps_p)*100:.1f} pts")
