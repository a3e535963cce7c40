"""Refinement inference, segmentation metrics, splits, and report tables.

Conventions: confusion-matrix rows are ground truth, columns are prediction;
ground-truth IGNORE pixels are excluded (and counted separately); predictions
must never contain IGNORE. Metrics over a test set are micro-aggregated: sum
the confusion matrices first, compute percentages once.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    CLASS_NAMES,
    IGNORE,
    NUM_CLASSES,
    Image,
    LabelMap,
    Sample,
    image_chw,
    stack_encode,
)
from .seeds import make_rng
from .tinynet import NetParams, forward


# ---------------------------------------------------------------------------
# confusion counting

@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (4, 4) int64, rows gt, cols pred
    ignored: int = 0

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion matrix must be 4x4, got {arr.shape}")
        if (arr < 0).any() or self.ignored < 0:
            raise ValueError("confusion counts must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(gt: LabelMap, pred: LabelMap) -> ConfusionMatrix:
    """Pixel confusion counts; gt IGNORE pixels are skipped and tallied."""
    if gt.data.shape != pred.data.shape:
        raise ValueError(
            f"shape mismatch: gt {gt.data.shape} vs pred {pred.data.shape}"
        )
    if pred.has_ignore():
        raise ValueError("prediction contains IGNORE pixels")
    valid = gt.data != IGNORE
    g = gt.data[valid].astype(np.int64)
    p = pred.data[valid].astype(np.int64)
    cm = np.bincount(g * NUM_CLASSES + p, minlength=NUM_CLASSES * NUM_CLASSES)
    return ConfusionMatrix(
        cm.reshape(NUM_CLASSES, NUM_CLASSES), ignored=int((~valid).sum())
    )


def aggregate_confusion(
    gts: Sequence[LabelMap], preds: Sequence[LabelMap]
) -> ConfusionMatrix:
    if len(gts) != len(preds) or not gts:
        raise ValueError("need equal, non-empty gt/pred sequences")
    total = confusion(gts[0], preds[0])
    for g, p in zip(gts[1:], preds[1:]):
        total = total + confusion(g, p)
    return total


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class EvalReport:
    """Per-class and mean IoU/Acc in percent.

    A class absent from both gt and pred carries None and is excluded from
    the means. Acc is per-class recall; for a class never in gt but present
    in predictions recall is undefined and reported as 0.
    """

    model: str
    variant: str
    iou: tuple  # 4 entries, float percent or None
    acc: tuple
    mean_iou: float
    mean_acc: float
    excluded: tuple  # class codes left out of the means
    ignored_pixels: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "variant": self.variant,
            "iou": list(self.iou),
            "acc": list(self.acc),
            "mean_iou": self.mean_iou,
            "mean_acc": self.mean_acc,
            "excluded": list(self.excluded),
            "ignored_pixels": self.ignored_pixels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            model=d["model"],
            variant=d["variant"],
            iou=tuple(d["iou"]),
            acc=tuple(d["acc"]),
            mean_iou=d["mean_iou"],
            mean_acc=d["mean_acc"],
            excluded=tuple(d["excluded"]),
            ignored_pixels=d.get("ignored_pixels", 0),
        )


def metrics(cm: ConfusionMatrix, model: str = "", variant: str = "") -> EvalReport:
    counts = cm.counts
    iou: list = []
    acc: list = []
    excluded: list[int] = []
    for c in range(NUM_CLASSES):
        tp = int(counts[c, c])
        fn = int(counts[c].sum()) - tp
        fp = int(counts[:, c].sum()) - tp
        if tp + fp + fn == 0:
            iou.append(None)
            acc.append(None)
            excluded.append(c)
            continue
        iou.append(100.0 * tp / (tp + fp + fn))
        acc.append(100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0)
    present_iou = [v for v in iou if v is not None]
    present_acc = [v for v in acc if v is not None]
    if not present_iou:
        raise ValueError("no class present in either gt or pred")
    return EvalReport(
        model=model,
        variant=variant,
        iou=tuple(iou),
        acc=tuple(acc),
        mean_iou=float(np.mean(present_iou)),
        mean_acc=float(np.mean(present_acc)),
        excluded=tuple(excluded),
        ignored_pixels=cm.ignored,
    )


def intersection_set(manual: LabelMap, ensemble: LabelMap) -> LabelMap:
    """Keep pixels where both annotations agree; IGNORE elsewhere."""
    if manual.data.shape != ensemble.data.shape:
        raise ValueError("annotation shapes differ")
    out = np.where(manual.data == ensemble.data, manual.data, IGNORE).astype(np.uint8)
    return LabelMap(out)


# ---------------------------------------------------------------------------
# stratified splitting

@dataclass(frozen=True)
class SplitAssignment:
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        seen = set(self.train) | set(self.val) | set(self.test)
        n = len(self.train) + len(self.val) + len(self.test)
        if len(seen) != n:
            raise ValueError("split parts overlap")

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    total = sum(ratios)
    ideal = [n * r / total for r in ratios]
    counts = [math.floor(v) for v in ideal]
    rem = n - sum(counts)
    order = sorted(
        range(len(ratios)), key=lambda i: (-(ideal[i] - counts[i]), i)
    )
    for i in order[:rem]:
        counts[i] += 1
    return counts


def presence_key(label_map: LabelMap) -> frozenset:
    """Which soiling classes (1, 2, 3) appear in the map; the stratification key."""
    return frozenset(label_map.classes_present() - {0, IGNORE})


def stratified_split(
    keys: Sequence[frozenset],
    seed: int,
    ratios: tuple[float, float, float] = (6.0, 2.0, 2.0),
) -> SplitAssignment:
    """Partition sample indices 6:2:2, stratified by class-presence bucket.

    Global split sizes follow largest-remainder rounding exactly; buckets are
    split by the same rule, with per-bucket remainders reconciled against the
    global totals so the overall sizes always come out exact.
    """
    n = len(keys)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    targets = _largest_remainder(n, ratios)

    buckets: dict[frozenset, list[int]] = {}
    for idx, key in enumerate(keys):
        buckets.setdefault(frozenset(key), []).append(idx)
    bucket_keys = sorted(buckets, key=lambda k: sorted(k))

    total = sum(ratios)
    quota = {
        bk: [len(buckets[bk]) * r / total for r in ratios] for bk in bucket_keys
    }
    counts = {bk: [math.floor(v) for v in quota[bk]] for bk in bucket_keys}

    # hand out the leftover per-bucket samples by largest fractional remainder,
    # capped by each split's remaining global deficit
    deficit = [targets[s] - sum(counts[bk][s] for bk in bucket_keys) for s in range(3)]
    leftovers = [
        (quota[bk][s] - counts[bk][s], bi, s)
        for bi, bk in enumerate(bucket_keys)
        for s in range(3)
    ]
    leftovers.sort(key=lambda t: (-t[0], t[1], t[2]))
    spare = {bk: len(buckets[bk]) - sum(counts[bk]) for bk in bucket_keys}
    for _, bi, s in leftovers:
        bk = bucket_keys[bi]
        if spare[bk] > 0 and deficit[s] > 0:
            counts[bk][s] += 1
            spare[bk] -= 1
            deficit[s] -= 1
    # repair pass: any bucket capacity that the greedy could not place
    for bk in bucket_keys:
        while spare[bk] > 0:
            s = next(i for i in range(3) if deficit[i] > 0)
            counts[bk][s] += 1
            spare[bk] -= 1
            deficit[s] -= 1

    parts: list[list[int]] = [[], [], []]
    for bk in bucket_keys:
        idxs = list(buckets[bk])
        rng = make_rng(seed, "split", *sorted(bk))
        rng.shuffle(idxs)
        a, b, _ = counts[bk]
        parts[0].extend(idxs[:a])
        parts[1].extend(idxs[a : a + b])
        parts[2].extend(idxs[a + b :])
    return SplitAssignment(
        tuple(sorted(parts[0])), tuple(sorted(parts[1])), tuple(sorted(parts[2]))
    )


# ---------------------------------------------------------------------------
# inference

def _tile_origins(full: int, window: int) -> list[int]:
    if window >= full:
        return [0]
    origins = list(range(0, full - window + 1, window))
    if origins[-1] + window < full:
        origins.append(full - window)
    return origins


def _predict_logits(
    params: NetParams, image: Image, stack_hwc: np.ndarray | None
) -> np.ndarray:
    img = image_chw(image)[None]
    if params.arch.kind == "dual":
        if stack_hwc is None:
            raise ValueError("dual model needs the candidate stack")
        st = np.transpose(stack_hwc, (2, 0, 1))[None]
        logits, _ = forward(params, img, st)
    else:
        logits, _ = forward(params, img)
    return logits[0]


def predict_map(
    params: NetParams,
    image: Image,
    stack_hwc: np.ndarray | None = None,
    tile: tuple[int, int] | None = None,
) -> LabelMap:
    """Per-pixel argmax prediction over the full image.

    When `tile` is given and smaller than the image, the image is processed
    in crop-size windows; each output pixel is written by exactly one window
    (the first, in row-major order, that covers it).
    """
    h, w = image.data.shape[:2]
    if h % 4 or w % 4:
        raise ValueError(f"image dims must be divisible by 4, got {h}x{w}")
    if tile is None or (tile[0] >= h and tile[1] >= w):
        logits = _predict_logits(params, image, stack_hwc)
        return LabelMap(np.argmax(logits, axis=0).astype(np.uint8))

    th, tw = tile
    if th % 4 or tw % 4:
        raise ValueError(f"tile dims must be divisible by 4, got {th}x{tw}")
    out = np.full((h, w), IGNORE, dtype=np.uint8)
    filled = np.zeros((h, w), dtype=bool)
    for r in _tile_origins(h, th):
        for c in _tile_origins(w, tw):
            sub_img = Image(image.data[r : r + th, c : c + tw])
            sub_stack = (
                None if stack_hwc is None else stack_hwc[r : r + th, c : c + tw]
            )
            logits = _predict_logits(params, sub_img, sub_stack)
            pred = np.argmax(logits, axis=0).astype(np.uint8)
            sel = ~filled[r : r + th, c : c + tw]
            out[r : r + th, c : c + tw][sel] = pred[sel]
            filled[r : r + th, c : c + tw] = True
    return LabelMap(out)


def refine(params: NetParams, sample: Sample, tile: tuple[int, int] | None = None) -> LabelMap:
    """Refined annotation: the stack-conditioned model's prediction for the
    sample's image plus its 9 candidate maps."""
    if params.arch.kind != "dual":
        raise ValueError("refinement requires the stack-conditioned (dual) model")
    return predict_map(params, sample.image, stack_encode(sample.pls), tile=tile)


# ---------------------------------------------------------------------------
# whole-test-set evaluation

VARIANTS = ("manual", "ensemble", "intersection")


def three_way_eval(
    preds: Sequence[LabelMap],
    manuals: Sequence[LabelMap],
    refined: Sequence[LabelMap],
    model: str = "model",
) -> dict[str, EvalReport]:
    """Evaluate predictions against manual, refined, and agreement-only
    annotation variants of the same test set (micro-aggregated)."""
    if not (len(preds) == len(manuals) == len(refined)) or not preds:
        raise ValueError("need aligned, non-empty prediction/annotation lists")
    inter = [intersection_set(m, e) for m, e in zip(manuals, refined)]
    out = {}
    for variant, gts in (("manual", manuals), ("ensemble", refined), ("intersection", inter)):
        cm = aggregate_confusion(gts, preds)
        out[variant] = metrics(cm, model=model, variant=variant)
    return out


def label_quality(
    gts: Sequence[LabelMap],
    candidates: Sequence[LabelMap],
    model: str = "annotation",
    variant: str = "truth",
) -> EvalReport:
    """How well candidate annotations match ground truth (micro mean IoU)."""
    return metrics(aggregate_confusion(gts, candidates), model=model, variant=variant)


# ---------------------------------------------------------------------------
# rendering / serialization

def _fmt(v) -> str:
    return f"{'--':>6}" if v is None else f"{v:6.2f}"


def render_table(reports: Sequence[EvalReport]) -> str:
    """Text table: one row per (model, variant), IoU/Acc per class + means."""
    lines = []
    header = (
        f"{'model':<14} {'variant':<13} "
        + " ".join(f"{CLASS_NAMES[c]:>13}" for c in range(NUM_CLASSES))
        + f" {'mean':>13}"
    )
    sub = (
        f"{'':<14} {'':<13} "
        + " ".join(f"{'IoU':>6} {'Acc':>6}" for _ in range(NUM_CLASSES))
        + f" {'IoU':>6} {'Acc':>6}"
    )
    lines.append(header)
    lines.append(sub)
    lines.append("-" * len(sub))
    for r in reports:
        cells = " ".join(f"{_fmt(r.iou[c])} {_fmt(r.acc[c])}" for c in range(NUM_CLASSES))
        lines.append(
            f"{r.model:<14} {r.variant:<13} {cells} {r.mean_iou:6.2f} {r.mean_acc:6.2f}"
        )
    return "\n".join(lines)


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    head = ["model", "variant"]
    for c in range(NUM_CLASSES):
        head += [f"iou_{CLASS_NAMES[c]}", f"acc_{CLASS_NAMES[c]}"]
    head += ["mean_iou", "mean_acc", "ignored_pixels"]
    writer.writerow(head)
    for r in reports:
        row: list = [r.model, r.variant]
        for c in range(NUM_CLASSES):
            row += [
                "" if r.iou[c] is None else f"{r.iou[c]:.4f}",
                "" if r.acc[c] is None else f"{r.acc[c]:.4f}",
            ]
        row += [f"{r.mean_iou:.4f}", f"{r.mean_acc:.4f}", r.ignored_pixels]
        writer.writerow(row)
    return buf.getvalue()
