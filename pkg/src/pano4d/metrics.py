"""The 4D panoptic evaluation suite: per-class IoU/mIoU, PQ/SQ/RQ/PQ-dagger,
PTQ/sPTQ, LSTQ (S_assoc, S_cls), and PAT, computed from mergeable per-frame
accumulators, plus an independent brute-force oracle for tiny instances.

Conventions (shared by the accumulator and the oracle):
  - per-frame segment matching requires IoU strictly greater than 0.5;
  - PTQ/sPTQ are clamped at 0 so every reported metric stays in [0, 1];
  - means over an empty set of classes/tubes are defined as 1.0 (vacuously
    perfect), so ground truth scored against itself is exactly 1 everywhere;
  - points whose ground-truth class is in the ignore set are dropped first.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DataMismatchError

MEAN_KEYS = ("miou", "pq", "sq", "rq", "pq_dagger", "ptq", "sptq",
             "s_assoc", "s_cls", "lstq", "tq", "pat")


@dataclass
class FrameLabels:
    class_ids: np.ndarray
    track_ids: np.ndarray

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64)
        if self.class_ids.shape != self.track_ids.shape:
            raise DataMismatchError("FrameLabels: class/track length mismatch")


@dataclass
class Labeling:
    frames: list[FrameLabels]

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class ClassTable:
    ids: tuple[int, ...]
    thing_ids: frozenset[int]
    names: dict[int, str]

    @classmethod
    def from_palette(cls, palette) -> "ClassTable":
        return cls(
            ids=tuple(c.id for c in palette),
            thing_ids=frozenset(c.id for c in palette if c.kind == "thing"),
            names={c.id: c.name for c in palette},
        )


# ---------------------------------------------------------------------------
# accumulator


class PanopticAccumulator:
    """Streaming per-frame statistics; accumulators for disjoint frames merge
    associatively, and the report is independent of accumulation order."""

    def __init__(self, table: ClassTable, ignore: tuple[int, ...] = ()):
        self.table = table
        self.ignore = tuple(ignore)
        self._col = {cid: i for i, cid in enumerate(table.ids)}
        self._lut = np.full(max(table.ids) + 1, -1, dtype=np.int64)
        for i, cid in enumerate(table.ids):
            self._lut[cid] = i
        c = len(table.ids)
        self.conf = np.zeros((c, c), dtype=np.int64)
        self.tp = np.zeros(c, dtype=np.int64)
        self.fp = np.zeros(c, dtype=np.int64)
        self.fn = np.zeros(c, dtype=np.int64)
        self.iou_sum = np.zeros(c, dtype=np.float64)
        # match events per (seq, class, gt id): [(frame, pred id, iou)]
        self.match_events: dict[tuple, list] = defaultdict(list)
        # class-agnostic 4D tubes
        self.gt_tube_size: dict[tuple, int] = defaultdict(int)
        self.pred_tube_size: dict[tuple, int] = defaultdict(int)
        self.tube_inter: dict[tuple, int] = defaultdict(int)
        # per gt tube: [(frame, dominant pred id or None)]
        self.tube_frames: dict[tuple, list] = defaultdict(list)
        self._frame_counter: dict[str, int] = defaultdict(int)

    # -- accumulation ------------------------------------------------------

    def add_frame(self, seq: str, pred: FrameLabels, gt: FrameLabels,
                  frame: int | None = None) -> None:
        if pred.class_ids.shape[0] != gt.class_ids.shape[0]:
            raise DataMismatchError(
                f"frame of seq '{seq}': {pred.class_ids.shape[0]} predicted "
                f"points vs {gt.class_ids.shape[0]} ground-truth points")
        if frame is None:
            frame = self._frame_counter[seq]
        self._frame_counter[seq] = max(self._frame_counter[seq], frame + 1)

        keep = ~np.isin(gt.class_ids, self.ignore)
        pc, pt = pred.class_ids[keep], pred.track_ids[keep]
        gc, gtr = gt.class_ids[keep], gt.track_ids[keep]

        for arr in (pc, gc):
            bad = set(np.unique(arr).tolist()) - set(self.table.ids)
            if bad:
                raise DataMismatchError(f"unknown class ids {sorted(bad)}")
        np.add.at(self.conf, (self._lut[pc], self._lut[gc]), 1)

        for cid in self.table.ids:
            self._match_class(seq, frame, cid, pc, pt, gc, gtr)
        self._add_tubes(seq, frame, pt, gtr)

    def _segments(self, cid: int, classes, tracks):
        sel = classes == cid
        if cid in self.table.thing_ids:
            keys = tracks[sel]
        else:
            keys = np.zeros(np.count_nonzero(sel), dtype=np.int64)
        ids, counts = np.unique(keys, return_counts=True)
        return sel, dict(zip(ids.tolist(), counts.tolist())), keys

    def _match_class(self, seq, frame, cid, pc, pt, gc, gtr):
        ci = self._col[cid]
        gsel, gsegs, gkeys = self._segments(cid, gc, gtr)
        psel, psegs, pkeys = self._segments(cid, pc, pt)
        if not gsegs and not psegs:
            return
        both = gsel & psel
        inter: dict[tuple, int] = {}
        if both.any():
            gb = gtr[both] if cid in self.table.thing_ids else np.zeros(both.sum(), np.int64)
            pb = pt[both] if cid in self.table.thing_ids else np.zeros(both.sum(), np.int64)
            pairs = np.stack([gb, pb], axis=1)
            uniq, counts = np.unique(pairs, axis=0, return_counts=True)
            inter = {(int(g), int(p)): int(n) for (g, p), n in zip(uniq, counts)}
        matched_g, matched_p = set(), set()
        for (g, p), n in sorted(inter.items()):
            iou = n / (gsegs[g] + psegs[p] - n)
            if iou > 0.5:
                self.tp[ci] += 1
                self.iou_sum[ci] += iou
                matched_g.add(g)
                matched_p.add(p)
                if cid in self.table.thing_ids:
                    self.match_events[(seq, cid, g)].append((frame, p, iou))
        self.fn[ci] += len(gsegs) - len(matched_g)
        self.fp[ci] += len(psegs) - len(matched_p)

    def _add_tubes(self, seq, frame, pt, gtr):
        for pid, n in zip(*np.unique(pt[pt > 0], return_counts=True)):
            self.pred_tube_size[(seq, int(pid))] += int(n)
        gt_ids, gt_counts = np.unique(gtr[gtr > 0], return_counts=True)
        for gid, n in zip(gt_ids, gt_counts):
            self.gt_tube_size[(seq, int(gid))] += int(n)
        both = (pt > 0) & (gtr > 0)
        if both.any():
            pairs = np.stack([gtr[both], pt[both]], axis=1)
            uniq, counts = np.unique(pairs, axis=0, return_counts=True)
            for (g, p), n in zip(uniq, counts):
                self.tube_inter[(seq, int(g), int(p))] += int(n)
        for gid in gt_ids:
            sel = gtr == gid
            over = pt[sel & (pt > 0)]
            dom = None
            if over.size:
                ids, counts = np.unique(over, return_counts=True)
                top = counts.max()
                # an ambiguous (tied) dominant id counts as unmatched, which
                # keeps the trajectory metrics invariant under id relabeling
                if np.count_nonzero(counts == top) == 1:
                    dom = int(ids[int(np.argmax(counts))])
            self.tube_frames[(seq, int(gid))].append((frame, dom))

    def merge(self, other: "PanopticAccumulator") -> None:
        if other.table != self.table or other.ignore != self.ignore:
            raise ValueError("merge: incompatible accumulators")
        self.conf += other.conf
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        for k, v in other.match_events.items():
            self.match_events[k].extend(v)
        for k, v in other.gt_tube_size.items():
            self.gt_tube_size[k] += v
        for k, v in other.pred_tube_size.items():
            self.pred_tube_size[k] += v
        for k, v in other.tube_inter.items():
            self.tube_inter[k] += v
        for k, v in other.tube_frames.items():
            self.tube_frames[k].extend(v)
        for k, v in other._frame_counter.items():
            self._frame_counter[k] = max(self._frame_counter[k], v)

    # -- report ------------------------------------------------------------

    def _switches(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.zeros(len(self.table.ids), dtype=np.int64)
        ids_iou = np.zeros(len(self.table.ids), dtype=np.float64)
        for (seq, cid, gid), events in self.match_events.items():
            ci = self._col[cid]
            prev = None
            for frame, pid, iou in sorted(events):
                if prev is not None and pid != prev:
                    ids[ci] += 1
                    ids_iou[ci] += iou
                prev = pid
        return ids, ids_iou

    def _tube_aq(self) -> dict[tuple, float]:
        aq: dict[tuple, float] = {}
        inter_by_tube: dict[tuple, list] = defaultdict(list)
        for (seq, g, p), n in self.tube_inter.items():
            inter_by_tube[(seq, g)].append((p, n))
        for key, size in self.gt_tube_size.items():
            total = 0.0
            for p, n in inter_by_tube.get(key, []):
                psize = self.pred_tube_size[(key[0], p)]
                total += n * (n / (size + psize - n))
            aq[key] = total / size
        return aq

    def _tube_switch_rate(self) -> dict[tuple, float]:
        out: dict[tuple, float] = {}
        for key, entries in self.tube_frames.items():
            entries = sorted(entries)
            matched = [pid for _, pid in entries if pid is not None]
            switches = sum(1 for a, b in zip(matched, matched[1:]) if a != b)
            out[key] = switches / max(1, len(entries) - 1)
        return out

    def report(self) -> "MetricReport":
        c = len(self.table.ids)
        tp_s = self.conf.diagonal().astype(np.float64)
        fp_s = self.conf.sum(axis=1) - tp_s
        fn_s = self.conf.sum(axis=0) - tp_s
        union = tp_s + fp_s + fn_s
        sem_present = union > 0
        iou = np.divide(tp_s, union, out=np.zeros(c), where=sem_present)

        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        pq_present = denom > 0
        pq = np.divide(self.iou_sum, denom, out=np.zeros(c), where=pq_present)
        sq = np.divide(self.iou_sum, self.tp, out=np.zeros(c), where=self.tp > 0)
        rq = np.divide(self.tp.astype(np.float64), denom, out=np.zeros(c),
                       where=pq_present)
        is_stuff = np.array([cid not in self.table.thing_ids
                             for cid in self.table.ids])
        pq_dagger = np.where(is_stuff, iou, pq)
        ids, ids_iou = self._switches()
        ptq = np.maximum(np.divide(self.iou_sum - ids, denom, out=np.zeros(c),
                                   where=pq_present), 0.0)
        sptq = np.maximum(np.divide(self.iou_sum - ids_iou, denom,
                                    out=np.zeros(c), where=pq_present), 0.0)

        def mean(values, present):
            return float(values[present].mean()) if present.any() else 1.0

        aq = self._tube_aq()
        switch_rate = self._tube_switch_rate()
        s_assoc = (sum(aq.values()) / len(aq)) if aq else 1.0
        tq_terms = [math.sqrt(aq[k] * (1.0 - switch_rate.get(k, 0.0))) for k in aq]
        tq = (sum(tq_terms) / len(tq_terms)) if tq_terms else 1.0
        s_cls = mean(iou, sem_present)
        mean_pq = mean(pq, pq_present)
        pat = (2.0 * mean_pq * tq / (mean_pq + tq)) if (mean_pq + tq) > 0 else 0.0

        per_class = {}
        counts = {}
        for i, cid in enumerate(self.table.ids):
            per_class[cid] = {
                "iou": float(iou[i]), "pq": float(pq[i]), "sq": float(sq[i]),
                "rq": float(rq[i]), "pq_dagger": float(pq_dagger[i]),
                "ptq": float(ptq[i]), "sptq": float(sptq[i]),
                "present": bool(sem_present[i] or pq_present[i]),
            }
            counts[cid] = {"tp": int(self.tp[i]), "fp": int(self.fp[i]),
                           "fn": int(self.fn[i]), "ids": int(ids[i])}
        means = {
            "miou": mean(iou, sem_present),
            "pq": mean_pq,
            "sq": mean(sq, pq_present),
            "rq": mean(rq, pq_present),
            "pq_dagger": mean(pq_dagger, pq_present),
            "ptq": mean(ptq, pq_present),
            "sptq": mean(sptq, pq_present),
            "s_assoc": s_assoc,
            "s_cls": s_cls,
            "lstq": math.sqrt(s_assoc * s_cls),
            "tq": tq,
            "pat": pat,
        }
        return MetricReport(per_class=per_class, means=means, counts=counts,
                            class_names=dict(self.table.names))


@dataclass
class MetricReport:
    per_class: dict[int, dict[str, float]]
    means: dict[str, float]
    counts: dict[int, dict[str, int]]
    class_names: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "means": self.means,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "class_names": {str(k): v for k, v in self.class_names.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def csv_row(self) -> tuple[list[str], list[float]]:
        return list(MEAN_KEYS), [self.means[k] for k in MEAN_KEYS]


# ---------------------------------------------------------------------------
# evaluation entry points


def evaluate(pred: Labeling, gt: Labeling, table: ClassTable,
             ignore: tuple[int, ...] = (), seq: str = "scene") -> MetricReport:
    acc = accumulate(pred, gt, table, ignore=ignore, seq=seq)
    return acc.report()


def accumulate(pred: Labeling, gt: Labeling, table: ClassTable,
               ignore: tuple[int, ...] = (), seq: str = "scene",
               ) -> PanopticAccumulator:
    if pred.num_frames != gt.num_frames:
        raise DataMismatchError(
            f"{pred.num_frames} predicted frames vs {gt.num_frames} ground truth")
    acc = PanopticAccumulator(table, ignore)
    for f in range(pred.num_frames):
        acc.add_frame(seq, pred.frames[f], gt.frames[f])
    return acc


def evaluate_scenes(pairs: list[tuple[Labeling, Labeling]], table: ClassTable,
                    ignore: tuple[int, ...] = ()) -> MetricReport:
    merged = PanopticAccumulator(table, ignore)
    for i, (pred, gt) in enumerate(pairs):
        merged.merge(accumulate(pred, gt, table, ignore=ignore, seq=f"scene{i}"))
    return merged.report()


# ---------------------------------------------------------------------------
# brute-force oracle (independent code path: python sets and loops only)


def _oracle_segments(frame: FrameLabels, cid: int, thing: bool):
    segs: dict[int, set] = {}
    for i in range(len(frame.class_ids)):
        if int(frame.class_ids[i]) != cid:
            continue
        key = int(frame.track_ids[i]) if thing else 0
        segs.setdefault(key, set()).add(i)
    return segs


def oracle_evaluate(pred: Labeling, gt: Labeling, table: ClassTable,
                    ignore: tuple[int, ...] = ()) -> dict:
    """Re-derives every metric by exhaustive enumeration with python sets;
    shares no code with the accumulator."""
    frames = []
    for f in range(len(gt.frames)):
        keep = [i for i in range(len(gt.frames[f].class_ids))
                if int(gt.frames[f].class_ids[i]) not in ignore]
        frames.append((
            FrameLabels(pred.frames[f].class_ids[keep],
                        pred.frames[f].track_ids[keep]),
            FrameLabels(gt.frames[f].class_ids[keep],
                        gt.frames[f].track_ids[keep]),
        ))

    # semantic iou
    per_class = {}
    for cid in table.ids:
        tp = fp = fn = 0
        for pf, gf in frames:
            for i in range(len(gf.class_ids)):
                p, g = int(pf.class_ids[i]), int(gf.class_ids[i])
                if p == cid and g == cid:
                    tp += 1
                elif p == cid:
                    fp += 1
                elif g == cid:
                    fn += 1
        union = tp + fp + fn
        per_class[cid] = {"iou": tp / union if union else 0.0,
                          "sem_present": union > 0}

    # per-frame matching
    for cid in table.ids:
        thing = cid in table.thing_ids
        tp = fp = fn = 0
        iou_sum = 0.0
        matched_history: dict[int, list] = {}
        for f, (pf, gf) in enumerate(frames):
            gsegs = _oracle_segments(gf, cid, thing)
            psegs = _oracle_segments(pf, cid, thing)
            matched_g, matched_p = set(), set()
            for g, gset in sorted(gsegs.items()):
                for p, pset in sorted(psegs.items()):
                    inter = len(gset & pset)
                    if inter == 0:
                        continue
                    iou = inter / len(gset | pset)
                    if iou > 0.5:
                        tp += 1
                        iou_sum += iou
                        matched_g.add(g)
                        matched_p.add(p)
                        matched_history.setdefault(g, []).append((f, p, iou))
            fn += len(gsegs) - len(matched_g)
            fp += len(psegs) - len(matched_p)
        ids = 0
        ids_iou = 0.0
        if thing:
            for g, events in matched_history.items():
                prev = None
                for f, p, iou in sorted(events):
                    if prev is not None and p != prev:
                        ids += 1
                        ids_iou += iou
                    prev = p
        denom = tp + 0.5 * fp + 0.5 * fn
        d = per_class[cid]
        d["pq_present"] = denom > 0
        d["pq"] = iou_sum / denom if denom else 0.0
        d["sq"] = iou_sum / tp if tp else 0.0
        d["rq"] = tp / denom if denom else 0.0
        d["pq_dagger"] = d["pq"] if thing else d["iou"]
        d["ptq"] = max((iou_sum - ids) / denom, 0.0) if denom else 0.0
        d["sptq"] = max((iou_sum - ids_iou) / denom, 0.0) if denom else 0.0

    # tubes
    gt_tubes: dict[int, set] = {}
    pred_tubes: dict[int, set] = {}
    for f, (pf, gf) in enumerate(frames):
        for i in range(len(gf.class_ids)):
            g, p = int(gf.track_ids[i]), int(pf.track_ids[i])
            if g > 0:
                gt_tubes.setdefault(g, set()).add((f, i))
            if p > 0:
                pred_tubes.setdefault(p, set()).add((f, i))
    aq = {}
    for g, tset in gt_tubes.items():
        total = 0.0
        for p, sset in pred_tubes.items():
            inter = len(tset & sset)
            if inter:
                total += inter * (inter / len(tset | sset))
        aq[g] = total / len(tset)
    tq_terms = []
    for g, tset in gt_tubes.items():
        frames_of = sorted({f for f, _ in tset})
        doms = []
        for f in frames_of:
            pts = {i for ff, i in tset if ff == f}
            counts: dict[int, int] = {}
            pf = frames[f][0]
            for i in pts:
                p = int(pf.track_ids[i])
                if p > 0:
                    counts[p] = counts.get(p, 0) + 1
            if counts:
                top = max(counts.values())
                leaders = [k for k, v in counts.items() if v == top]
                if len(leaders) == 1:
                    doms.append(leaders[0])
        switches = sum(1 for a, b in zip(doms, doms[1:]) if a != b)
        rate = switches / max(1, len(frames_of) - 1)
        tq_terms.append(math.sqrt(aq[g] * (1.0 - rate)))

    def mean_over(key, present_key):
        vals = [d[key] for d in per_class.values() if d[present_key]]
        return sum(vals) / len(vals) if vals else 1.0

    s_assoc = sum(aq.values()) / len(aq) if aq else 1.0
    s_cls = mean_over("iou", "sem_present")
    tq = sum(tq_terms) / len(tq_terms) if tq_terms else 1.0
    mean_pq = mean_over("pq", "pq_present")
    means = {
        "miou": s_cls,
        "pq": mean_pq,
        "sq": mean_over("sq", "pq_present"),
        "rq": mean_over("rq", "pq_present"),
        "pq_dagger": mean_over("pq_dagger", "pq_present"),
        "ptq": mean_over("ptq", "pq_present"),
        "sptq": mean_over("sptq", "pq_present"),
        "s_assoc": s_assoc,
        "s_cls": s_cls,
        "lstq": math.sqrt(s_assoc * s_cls),
        "tq": tq,
        "pat": (2 * mean_pq * tq / (mean_pq + tq)) if (mean_pq + tq) > 0 else 0.0,
    }
    return {"means": means, "per_class": per_class}


def oracle_check(pred: Labeling, gt: Labeling, table: ClassTable,
                 ignore: tuple[int, ...] = ()) -> dict:
    """Max absolute discrepancy between the evaluator and the oracle, per
    metric and overall."""
    got = evaluate(pred, gt, table, ignore=ignore)
    want = oracle_evaluate(pred, gt, table, ignore=ignore)
    diffs = {}
    for key in MEAN_KEYS:
        diffs[f"mean.{key}"] = abs(got.means[key] - want["means"][key])
    for cid in table.ids:
        for key in ("iou", "pq", "sq", "rq", "pq_dagger", "ptq", "sptq"):
            diffs[f"class{cid}.{key}"] = abs(
                got.per_class[cid][key] - want["per_class"][cid][key])
    return {"max": max(diffs.values()), "diffs": diffs}
