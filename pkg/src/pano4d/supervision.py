"""Stage-1 supervision: bipartite matching of query outputs to ground truth,
the mask/class/pseudo-fusion losses, the weighted total, deep supervision over
all fusion blocks, and the single-clip training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import model as mdl
from .autodiff import Tensor
from .encoder import FusionTerm, mlp
from .errors import TrainingDiverged
from .synthworld import AugmentParams, PointCloudClip, Scene, augment_clip

log = logging.getLogger(__name__)

DICE_EPS = 1e-6
DEFAULT_LOSS_WEIGHTS = (5.0, 2.0, 2.0)  # ce, dice, cls


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query index, target index)
    unmatched_queries: list[int]
    unmatched_targets: list[int]


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two masks over the same points; soft masks are thresholded at
    0.5. Two empty masks have IoU 0 by definition."""
    ah = a > 0.5
    bh = b > 0.5
    union = np.count_nonzero(ah | bh)
    if union == 0:
        return 0.0
    return np.count_nonzero(ah & bh) / union


def _solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row to a distinct column (rows <= cols),
    via potentials and shortest augmenting paths. Ties break toward the first
    minimum, making the result deterministic."""
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of_col = np.zeros(m + 1, dtype=np.int64)  # 1-based rows; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:] = np.where(better, cur, minv[1:])
            way[1:] = np.where(better, j0, way[1:])
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if row_of_col[j]:
            col_of_row[row_of_col[j] - 1] = j - 1
    return col_of_row


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost bipartite matching of queries (rows) to targets
    (columns); |pairs| = min(T, G)."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian_match: non-finite costs")
    t, g = cost.shape
    if t == 0 or g == 0:
        return MatchResult([], list(range(t)), list(range(g)))
    if t <= g:
        col_of_row = _solve_assignment(cost)
        pairs = [(i, int(col_of_row[i])) for i in range(t)]
    else:
        row_of_col = _solve_assignment(cost.T)
        pairs = sorted((int(row_of_col[j]), j) for j in range(g))
    matched_q = {q for q, _ in pairs}
    matched_t = {tt for _, tt in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_queries=[q for q in range(t) if q not in matched_q],
        unmatched_targets=[tt for tt in range(g) if tt not in matched_t],
    )


@dataclass
class Target:
    class_id: int
    mask: np.ndarray  # (N,) bool over clip points


def clip_targets(clip: PointCloudClip, config) -> list[Target]:
    """Per-clip ground truth: one target per thing track plus one per present
    stuff class (stuff segments are treated as object tracks for matching)."""
    targets = []
    for tid in np.unique(clip.track_ids[clip.track_ids > 0]):
        mask = clip.track_ids == tid
        cid = int(clip.class_ids[mask][0])
        targets.append(Target(cid, mask))
    for spec in config.stuff_classes():
        mask = clip.class_ids == spec.id
        if mask.any():
            targets.append(Target(spec.id, mask))
    return targets


def build_cost(mask_probs: np.ndarray, class_probs: np.ndarray,
               targets: list[Target], palette_col: dict[int, int]) -> np.ndarray:
    """cost[q, g] = -p_q(class_g) - IoU(mask_q, mask_g)."""
    hard = mask_probs > 0.5  # (N, T)
    tmat = np.stack([t.mask for t in targets], axis=1)  # (N, G)
    inter = hard.T.astype(np.float64) @ tmat.astype(np.float64)
    union = hard.sum(axis=0)[:, None] + tmat.sum(axis=0)[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    cols = [palette_col[t.class_id] for t in targets]
    return -class_probs[:, cols] - iou


# ---------------------------------------------------------------------------
# losses


def dice_loss(soft_mask, target: np.ndarray) -> Tensor:
    """1 - 2 sum(p t) / (sum(p) + sum(t) + eps)."""
    t = np.asarray(target, dtype=np.float64)
    num = ad.mul(ad.tsum(ad.mul(soft_mask, t)), 2.0)
    den = ad.add(ad.tsum(soft_mask), float(t.sum()) + DICE_EPS)
    return ad.sub(1.0, ad.div(num, den))


def dice_loss_rows(soft_masks, targets: np.ndarray) -> Tensor:
    """Mean DICE over (P, N) mask rows against (P, N) hard targets."""
    t = np.asarray(targets, dtype=np.float64)
    num = ad.mul(ad.tsum(ad.mul(soft_masks, t), axis=1), 2.0)
    den = ad.add(ad.tsum(soft_masks, axis=1), t.sum(axis=1) + DICE_EPS)
    return ad.tmean(ad.sub(1.0, ad.div(num, den)))


def bce_mask_loss(logits, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over points, from logits."""
    return ad.bce_with_logits(logits, np.asarray(target, dtype=np.float64))


def cls_loss(logits, target_cols: np.ndarray,
             no_object_weight: float = 1.0) -> Tensor:
    """Weighted mean categorical cross-entropy over the 1+C columns; rows
    whose target is the no-object column (the last one) can be down-weighted
    to keep the many unmatched queries from dominating early training."""
    t, c1 = logits.shape
    cols = np.asarray(target_cols, dtype=np.int64)
    onehot = np.zeros((t, c1))
    onehot[np.arange(t), cols] = 1.0
    weights = np.where(cols == c1 - 1, no_object_weight, 1.0)
    per_row = ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits), onehot), axis=1))
    return ad.div(ad.tsum(ad.mul(per_row, weights)), float(weights.sum()))


def pseudo_fusion_loss(term: FusionTerm | None, params: dict[str, Tensor]) -> Tensor:
    """Mean squared difference between the fused features (treated as a fixed
    regression target) and the pseudo branch; gradients reach only the pseudo
    MLP."""
    if term is None or term.z_plus.shape[0] == 0:
        return Tensor(0.0)
    fused = mlp(params, "enc.fusion", 3,
                ad.concat([term.z_plus, term.z_img], axis=1)).detach()
    pseudo = mlp(params, "enc.pseudo", 3, term.z_plus.detach())
    diff = ad.sub(fused, pseudo)
    return ad.tmean(ad.mul(diff, diff))


@dataclass
class LossReport:
    per_block: list[dict[str, float]] = field(default_factory=list)
    l_pf: float = 0.0
    total: float = 0.0

    def row(self) -> dict[str, float]:
        out = {"l_pf": self.l_pf, "total": self.total}
        for key in ("ce", "dice", "cls"):
            out[f"l_{key}"] = sum(b[key] for b in self.per_block)
        return out


def total_loss(block_losses: list[tuple[Tensor, Tensor, Tensor]], l_pf: Tensor,
               weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS,
               ) -> tuple[Tensor, LossReport]:
    """Weighted sum over blocks (ce, dice, cls) plus the pseudo-fusion term."""
    w_ce, w_dice, w_cls = weights
    total = l_pf
    report = LossReport(l_pf=l_pf.item())
    for ce, dice, cls in block_losses:
        total = ad.add(total, ad.add(ad.mul(ce, w_ce),
                                     ad.add(ad.mul(dice, w_dice), ad.mul(cls, w_cls))))
        report.per_block.append(
            {"ce": ce.item(), "dice": dice.item(), "cls": cls.item()})
    report.total = total.item()
    return total, report


# ---------------------------------------------------------------------------
# per-block supervision


def block_losses(block_q, z, params: dict[str, Tensor], targets: list[Target],
                 config, no_object_weight: float = 1.0,
                 ) -> tuple[Tensor, Tensor, Tensor]:
    """Independent matching and losses for one block's query output."""
    palette_col = {c.id: i for i, c in enumerate(config.classes)}
    no_object_col = len(config.classes)

    mask_logits = dec.predict_masks(block_q, z)
    class_logits = dec.predict_classes(block_q, params)

    probs = ad.softmax(class_logits).data
    mask_probs = 1.0 / (1.0 + np.exp(-np.clip(mask_logits.data, -60, 60)))
    match = hungarian_match(build_cost(mask_probs, probs, targets, palette_col))

    t = block_q.shape[0]
    target_cols = np.full(t, no_object_col, dtype=np.int64)
    if match.pairs:
        q_idx = [q for q, _ in match.pairs]
        t_idx = [g for _, g in match.pairs]
        target_cols[q_idx] = [palette_col[targets[g].class_id] for g in t_idx]
        cols = ad.take(ad.transpose(mask_logits), q_idx)  # (P, N)
        tmat = np.stack([targets[g].mask.astype(np.float64) for g in t_idx])
        l_ce = bce_mask_loss(cols, tmat)
        l_dice = dice_loss_rows(ad.sigmoid(cols), tmat)
    else:
        l_ce = Tensor(0.0)
        l_dice = Tensor(0.0)
    l_cls = cls_loss(class_logits, target_cols, no_object_weight)
    return l_ce, l_dice, l_cls


def clip_loss(result: mdl.ForwardResult, clip: PointCloudClip, params, config,
              weights=DEFAULT_LOSS_WEIGHTS,
              no_object_weight: float = 1.0) -> tuple[Tensor, LossReport]:
    """Deep supervision: independent matching and losses per block output,
    plus the averaged pseudo-fusion term."""
    targets = clip_targets(clip, config)
    blocks = [block_losses(q, result.z, params, targets, config, no_object_weight)
              for q in result.block_queries]
    if result.fusion_terms:
        pf_terms = [pseudo_fusion_loss(t, params) for t in result.fusion_terms]
        l_pf = ad.mul(pf_terms[0], 1.0 / len(pf_terms))
        for t in pf_terms[1:]:
            l_pf = ad.add(l_pf, ad.mul(t, 1.0 / len(pf_terms)))
    else:
        l_pf = Tensor(0.0)
    return total_loss(blocks, l_pf, weights)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    lr_backbone: float = 3e-3
    lr_other: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 80
    decay_epochs: tuple[int, ...] = (30, 60)
    decay_factor: float = 0.1
    warmup_steps: int = 0
    max_steps: int | None = None
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    no_object_weight: float = 0.1
    augment: AugmentParams = field(default_factory=lambda: AugmentParams(
        rotation_max=np.pi, jitter_sigma=0.005, point_budget=100_000))
    seed: int = 0


def train_stage1(scenes: list[Scene], model_cfg: mdl.ModelConfig,
                 settings: TrainSettings,
                 params: dict[str, Tensor] | None = None,
                 ) -> tuple[dict[str, Tensor], list[dict[str, float]]]:
    """Single-clip SGD over all scene clips: sample, augment, forward, match
    per block, step AdamW. Deterministic under the settings seed."""
    if not scenes:
        raise ValueError("train_stage1: no scenes")
    num_classes = len(scenes[0].config.classes)
    if params is None:
        params = mdl.init_params(model_cfg, num_classes, settings.seed)
    backbone, rest = mdl.split_param_groups(params)
    opt = ad.AdamW([(backbone, settings.lr_backbone), (rest, settings.lr_other)],
                   weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed + 0x5173)

    clips = [(si, t) for si, scene in enumerate(scenes)
             for t in range(1, scene.num_frames)]
    rows: list[dict[str, float]] = []
    step = 0
    for epoch in range(settings.epochs):
        decay = ad.step_decay_factor(epoch, settings.decay_epochs,
                                     settings.decay_factor)
        order = rng.permutation(len(clips))
        for idx in order:
            if settings.max_steps is not None and step >= settings.max_steps:
                return params, rows
            warm = (min(1.0, (step + 1) / settings.warmup_steps)
                    if settings.warmup_steps > 0 else 1.0)
            opt.lr_scale = decay * warm
            si, t = clips[idx]
            scene = scenes[si]
            clip = augment_clip(scene.clip(t), settings.augment,
                                seed=int(rng.integers(2**31)))
            result = mdl.forward_clip(params, clip, scene.images[t],
                                      scene.cameras, model_cfg)
            loss, report = clip_loss(result, clip, params, scene.config,
                                     settings.loss_weights,
                                     settings.no_object_weight)
            if not np.isfinite(report.total):
                raise TrainingDiverged(step)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            row = {"step": step, **report.row()}
            rows.append(row)
            step += 1
        if rows:
            log.info("epoch %d: total %.4f", epoch, rows[-1]["total"])
    return params, rows
