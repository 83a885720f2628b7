"""Tracklet association: pairwise feature construction, the 4-layer scoring
MLP, the track memory bank over the last T_hist frames, greedy cross-clip
association, sliding-window sequence inference, and stage-2 training of the
scorer with the rest of the network frozen."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError
from .geometry import sinusoidal_expand
from .synthworld import read_label_records, write_label_records

log = logging.getLogger(__name__)

TAM_WIDTHS = (256, 128, 64, 1)


@dataclass
class Tracklet:
    """One object mask within a single clip, with its query embedding."""

    query: np.ndarray  # (D,)
    frame_masks: dict[int, np.ndarray]  # global frame number -> bool mask
    centroid: np.ndarray  # (3,) mean xyz of the most recent frame's mask
    frame_range: tuple[int, int]
    class_id: int


@dataclass
class BankEntry:
    track_id: int
    query: np.ndarray
    centroid: np.ndarray
    last_frame: int
    last_mask: np.ndarray  # bool mask over the points of last_frame


@dataclass
class TrackMemoryBank:
    """Recent tracks kept for the past T_hist frames."""

    t_hist: int = 4
    entries: dict[int, BankEntry] = field(default_factory=dict)
    next_id: int = 1

    def prune(self, frame: int) -> None:
        stale = [tid for tid, e in self.entries.items()
                 if e.last_frame < frame - self.t_hist]
        for tid in stale:
            del self.entries[tid]

    def fresh_id(self) -> int:
        tid = self.next_id
        self.next_id += 1
        return tid


# ---------------------------------------------------------------------------
# pairwise features and the scoring MLP


def overlap_iou(entry: BankEntry, tracklet: Tracklet) -> float:
    """Mask IoU on the single overlapping frame; 0 when frames do not overlap."""
    mask = tracklet.frame_masks.get(entry.last_frame)
    if mask is None or mask.shape != entry.last_mask.shape:
        return 0.0
    inter = np.count_nonzero(mask & entry.last_mask)
    union = np.count_nonzero(mask | entry.last_mask)
    return inter / union if union else 0.0


def build_tam_features(
    query_a: np.ndarray, centroid_a: np.ndarray,
    query_b: np.ndarray, centroid_b: np.ndarray,
    frame_gap: int, iou: float,
) -> np.ndarray:
    """Layout: [enc64(centroid_a), enc64(centroid_b), query_a, query_b,
    enc64(gap), iou] of length 193 + 2D."""
    if frame_gap < 0:
        raise ValueError("build_tam_features: negative frame gap")
    return np.concatenate([
        sinusoidal_expand(np.asarray(centroid_a, dtype=np.float64), 64),
        sinusoidal_expand(np.asarray(centroid_b, dtype=np.float64), 64),
        np.asarray(query_a, dtype=np.float64),
        np.asarray(query_b, dtype=np.float64),
        sinusoidal_expand(np.array([float(frame_gap)]), 64),
        np.array([float(iou)]),
    ])


def tam_feature_length(d: int) -> int:
    return 193 + 2 * d


def init_tam_params(d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    fan_in = tam_feature_length(d)
    for i, width in enumerate(TAM_WIDTHS):
        params[f"tam.{i}.w"] = Tensor(
            rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, width)),
            requires_grad=True)
        params[f"tam.{i}.b"] = Tensor(np.zeros(width), requires_grad=True)
        fan_in = width
    return params


def tam_logits(features, params: dict[str, Tensor]) -> Tensor:
    """Raw association logits for a (B, F) feature batch."""
    x = features if isinstance(features, Tensor) else Tensor(np.atleast_2d(features))
    expected = params["tam.0.w"].shape[0]
    if x.shape[1] != expected:
        raise ValueError(
            f"tam_logits: feature length {x.shape[1]}, expected {expected}")
    for i in range(len(TAM_WIDTHS)):
        x = ad.add(ad.matmul(x, params[f"tam.{i}.w"]), params[f"tam.{i}.b"])
        if i < len(TAM_WIDTHS) - 1:
            x = ad.relu(x)
    return x


def tam_score(features: np.ndarray, params: dict[str, Tensor]) -> float:
    """Association probability in (0, 1) for a single pair."""
    return float(ad.sigmoid(tam_logits(features, params)).data[0, 0])


# ---------------------------------------------------------------------------
# association and the bank


def tam_scorer(params: dict[str, Tensor]) -> Callable[[BankEntry, Tracklet, int], float]:
    def score(entry: BankEntry, tracklet: Tracklet, frame: int) -> float:
        gap = frame - entry.last_frame
        feats = build_tam_features(
            entry.query, entry.centroid, tracklet.query, tracklet.centroid,
            gap, overlap_iou(entry, tracklet))
        return tam_score(feats, params)

    return score


def iou_scorer() -> Callable[[BankEntry, Tracklet, int], float]:
    """Baseline: the overlap-frame mask IoU itself is the score."""
    def score(entry: BankEntry, tracklet: Tracklet, frame: int) -> float:
        return overlap_iou(entry, tracklet)

    return score


def associate(
    bank: TrackMemoryBank,
    tracklets: list[Tracklet],
    frame: int,
    tau: float,
    scorer: Callable[[BankEntry, Tracklet, int], float],
    strict: bool = False,
) -> dict[int, int]:
    """Greedy descending-score matching of bank entries to tracklets.

    Pairs are accepted while score >= tau (or > tau when ``strict``, used by
    the IoU baseline); unmatched tracklets start fresh monotonically
    increasing ids. Ties break toward the lower tracklet index, then the
    lower bank id.
    """
    bank.prune(frame)
    scored = []
    for tid in sorted(bank.entries):
        entry = bank.entries[tid]
        for j, tracklet in enumerate(tracklets):
            scored.append((scorer(entry, tracklet, frame), j, tid))
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    assigned: dict[int, int] = {}
    used_entries: set[int] = set()
    for score, j, tid in scored:
        accept = score > tau if strict else score >= tau
        if not accept:
            break
        if j in assigned or tid in used_entries:
            continue
        assigned[j] = tid
        used_entries.add(tid)
    for j in range(len(tracklets)):
        if j not in assigned:
            assigned[j] = bank.fresh_id()
    return assigned


def update_bank(
    bank: TrackMemoryBank,
    assignments: dict[int, int],
    tracklets: list[Tracklet],
    frame: int,
) -> None:
    """Refresh associated entries, insert new ids, evict entries older than
    T_hist relative to the current frame."""
    for j, tracklet in enumerate(tracklets):
        tid = assignments[j]
        last = tracklet.frame_range[1]
        bank.entries[tid] = BankEntry(
            track_id=tid,
            query=tracklet.query.copy(),
            centroid=tracklet.centroid.copy(),
            last_frame=last,
            last_mask=tracklet.frame_masks[last].copy(),
        )
    bank.prune(frame)


# ---------------------------------------------------------------------------
# sequence inference

ClipInference = Callable[[int], tuple[np.ndarray, np.ndarray, list[Tracklet]]]
"""t -> (class_ids, local track ids over clip (t-1, t) points, tracklets)."""


def run_sequence(
    infer_clip: ClipInference,
    num_frames: int,
    frame_sizes: list[int],
    tau: float,
    t_hist: int,
    scorer_factory: Callable[[], Callable] | None = None,
    baseline_iou: bool = False,
    tam_params: dict[str, Tensor] | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Slide over clips (t-1, t), associate tracklets against the bank, and
    emit final (class, track) labels per frame.

    Frame t's labels come from clip (t-1, t); frame 0 comes from the first
    clip. Association uses the TAM scorer unless ``baseline_iou`` is set.
    """
    if num_frames < 2:
        raise ValueError("run_sequence: need at least 2 frames")
    if scorer_factory is not None:
        scorer = scorer_factory()
        strict = False
    elif baseline_iou:
        scorer = iou_scorer()
        strict = True
        tau = 0.5
    else:
        if tam_params is None:
            raise ValueError("run_sequence: tam_params required without baseline")
        scorer = tam_scorer(tam_params)
        strict = False

    bank = TrackMemoryBank(t_hist=t_hist)
    out: list[tuple[np.ndarray, np.ndarray] | None] = [None] * num_frames
    for t in range(1, num_frames):
        class_ids, local_ids, tracklets = infer_clip(t)
        assignments = associate(bank, tracklets, t, tau, scorer, strict=strict)
        update_bank(bank, assignments, tracklets, t)

        remap = np.zeros(len(tracklets) + 1, dtype=np.int64)
        for j in range(len(tracklets)):
            remap[j + 1] = assignments[j]
        global_ids = remap[local_ids]

        n_prev = frame_sizes[t - 1]
        if t == 1:
            out[0] = (class_ids[:n_prev].copy(), global_ids[:n_prev].copy())
        out[t] = (class_ids[n_prev:].copy(), global_ids[n_prev:].copy())
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# prediction files


def write_predictions(out_dir: str, frames: list[tuple[np.ndarray, np.ndarray]],
                      scene_ref: str = "") -> None:
    """Per-frame pred_<t>.bin label records plus pred_manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for t, (class_ids, track_ids) in enumerate(frames):
        name = f"pred_{t}.bin"
        write_label_records(os.path.join(out_dir, name), class_ids, track_ids)
        files.append(name)
    manifest = {"format": "pano4d-pred-v1", "frames": len(frames),
                "files": files, "scene": scene_ref}
    tmp = os.path.join(out_dir, "pred_manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, "pred_manifest.json"))


def read_predictions(pred_dir: str) -> list[tuple[np.ndarray, np.ndarray]]:
    mpath = os.path.join(pred_dir, "pred_manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"missing manifest: {mpath}")
    with open(mpath, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "pano4d-pred-v1":
        raise FormatError(f"{mpath}: unknown format '{manifest.get('format')}'")
    return [read_label_records(os.path.join(pred_dir, name))
            for name in manifest["files"]]


# ---------------------------------------------------------------------------
# stage-2 training


def majority_gt_track(tracklet: Tracklet, gt_tracks: dict[int, np.ndarray]) -> int | None:
    """The GT track id covering a strict majority of the tracklet's points,
    or None when no thing track does."""
    counts: dict[int, int] = {}
    total = 0
    for frame, mask in tracklet.frame_masks.items():
        ids = gt_tracks[frame][mask]
        total += ids.size
        for tid in np.unique(ids):
            counts[int(tid)] = counts.get(int(tid), 0) + int(np.sum(ids == tid))
    if not total:
        return None
    best = max(sorted(counts), key=lambda k: counts[k])
    if best > 0 and counts[best] * 2 > total:
        return best
    return None


def collect_pairs(
    clip_tracklets: dict[int, list[Tracklet]],
    gt_tracks: dict[int, np.ndarray],
    gaps: tuple[int, ...] = (1, 2, 3, 4),
) -> tuple[np.ndarray, np.ndarray]:
    """All cross-clip tracklet pairs at the given end-frame gaps, labeled
    positive iff both sides majority-overlap the same GT track."""
    feats, labels = [], []
    ends = sorted(clip_tracklets)
    majority = {
        (t, i): majority_gt_track(trk, gt_tracks)
        for t in ends for i, trk in enumerate(clip_tracklets[t])
    }
    for ta in ends:
        for g in gaps:
            tb = ta + g
            if tb not in clip_tracklets:
                continue
            for i, a in enumerate(clip_tracklets[ta]):
                for j, b in enumerate(clip_tracklets[tb]):
                    entry = BankEntry(0, a.query, a.centroid,
                                      a.frame_range[1], a.frame_masks[a.frame_range[1]])
                    iou = overlap_iou(entry, b)
                    gap = tb - ta
                    feats.append(build_tam_features(
                        a.query, a.centroid, b.query, b.centroid, gap, iou))
                    ma, mb = majority[(ta, i)], majority[(tb, j)]
                    labels.append(1.0 if ma is not None and ma == mb else 0.0)
    if not feats:
        return np.zeros((0, 1)), np.zeros(0)
    return np.stack(feats), np.array(labels)


def train_tam(
    features: np.ndarray,
    labels: np.ndarray,
    d: int,
    lr: float = 1e-3,
    epochs: int = 5,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[dict[str, Tensor], list[float]]:
    """BCE training of the scorer over precomputed pair features."""
    rng = np.random.default_rng(seed)
    params = init_tam_params(d, rng)
    opt = ad.AdamW([(params, lr)])
    losses: list[float] = []
    n = features.shape[0]
    if n == 0:
        return params, losses
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            opt.zero_grad()
            logits = tam_logits(Tensor(features[sel]), params)
            loss = ad.bce_with_logits(logits, labels[sel][:, None])
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
    return params, losses


def train_stage2(
    per_scene_inference: Callable[[int, int], list[Tracklet]],
    scenes_frames: list[tuple[str, int, dict[int, np.ndarray]]],
    d: int,
    gaps: tuple[int, ...] = (1, 2, 3, 4),
    lr: float = 1e-3,
    epochs: int = 5,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[dict[str, Tensor], list[float]]:
    """Gather labeled pairs from frozen inference over every scene, then fit
    the scorer. Scenes that yield no tracklets are skipped with a warning.

    ``scenes_frames`` holds (scene key, frame count, gt track arrays per
    frame); ``per_scene_inference(scene_index, t)`` produces the tracklets of
    clip (t-1, t).
    """
    all_feats, all_labels = [], []
    for s, (key, n_frames, gt_tracks) in enumerate(scenes_frames):
        clip_tracklets = {t: per_scene_inference(s, t) for t in range(1, n_frames)}
        if not any(clip_tracklets.values()):
            log.warning("train_stage2: scene %s produced no tracklets, skipping", key)
            continue
        feats, labels = collect_pairs(clip_tracklets, gt_tracks, gaps)
        if feats.size:
            all_feats.append(feats)
            all_labels.append(labels)
    if not all_feats:
        return init_tam_params(d, np.random.default_rng(seed)), []
    return train_tam(np.concatenate(all_feats), np.concatenate(all_labels), d,
                     lr=lr, epochs=epochs, batch_size=batch_size, seed=seed)
