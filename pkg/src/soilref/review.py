"""Blinded AB review of annotation pairs.

Export side: sample a subset of test items, render the original image plus
two tinted overlays (manual and refined, shuffled into positions A/B per
item), and write a static bundle a browser tool can serve. Which source sits
at position A is kept out of the public manifest; it lives in
private/assignments.json so the import side can unblind.

Import side: read reviewer decision files (JSON lines), unblind each choice,
and tabulate per-reviewer and averaged percentages of manual-better /
ensemble-better / similar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Image, LabelMap, Sample, SoilingClass
from .raster_io import unit_to_u8, write_bmp
from .seeds import derive_seed, make_rng

BUNDLE_FORMAT = "soilref-review-bundle"
ASSIGNMENTS_FORMAT = "soilref-review-assignments"
BUNDLE_VERSION = 1
CHOICES = ("A", "B", "similar")
SOURCES = ("manual", "ensemble")
OVERLAY_ALPHA = 0.5
REVIEW_FRACTION = 0.2

# display tint per soiled class; clean (and any ignored pixel) stays untinted
TINT_RGB = {
    int(SoilingClass.TRANSPARENT): (0.0, 1.0, 0.0),
    int(SoilingClass.SEMI_TRANSPARENT): (0.0, 0.0, 1.0),
    int(SoilingClass.OPAQUE): (1.0, 0.0, 0.0),
}


def overlay(image: Image, annotation: LabelMap, alpha: float = OVERLAY_ALPHA) -> Image:
    """Alpha-blend a class tint over soiled pixels; everything else passes
    through, so an all-clean annotation reproduces the image exactly."""
    if image.data.shape[:2] != annotation.data.shape:
        raise ValueError("annotation dims differ from image")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    out = image.data.copy()
    for cls, color in TINT_RGB.items():
        mask = annotation.data == cls
        out[mask] = (1.0 - alpha) * out[mask] + alpha * np.asarray(color)
    return Image(out)


def sample_review_items(ids: Sequence[str], seed: int, fraction: float = REVIEW_FRACTION) -> list[str]:
    """Pick round(fraction * n) ids, preserving the input order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    count = round(fraction * len(ids))
    rng = make_rng(seed, "review-sample")
    chosen = set(rng.choice(len(ids), size=count, replace=False).tolist())
    return [ids[i] for i in range(len(ids)) if i in chosen]


def blind_assignments(item_ids: Sequence[str], seed: int) -> dict[str, str]:
    """Per item, which annotation source appears at position A."""
    out = {}
    for item_id in item_ids:
        rng = make_rng(derive_seed(seed, "blind", item_id))
        out[item_id] = SOURCES[int(rng.integers(0, 2))]
    return out


def export_review_bundle(
    out_dir: Path,
    items: Sequence[tuple[Sample, LabelMap]],
    seed: int,
    fraction: float = REVIEW_FRACTION,
    alpha: float = OVERLAY_ALPHA,
) -> dict:
    """Write the bundle tree and return the public manifest.

    `items` pairs each candidate sample with its refined annotation; the
    manual annotation comes from the sample itself. Layout:

        manifest.json                       public: items + asset paths
        private/assignments.json            secret: source shown at A
        items/<id>/original.bmp
        items/<id>/a.bmp  b.bmp
    """
    out_dir = Path(out_dir)
    by_id = {s.id: (s, refined) for s, refined in items}
    if len(by_id) != len(items):
        raise ValueError("duplicate sample ids in review items")
    picked = sample_review_items([s.id for s, _ in items], seed, fraction)
    assignments = blind_assignments(picked, seed)

    index = []
    for item_id in picked:
        sample, refined = by_id[item_id]
        overlays = {
            "manual": overlay(sample.image, sample.manual, alpha),
            "ensemble": overlay(sample.image, refined, alpha),
        }
        a_source = assignments[item_id]
        b_source = "ensemble" if a_source == "manual" else "manual"
        d = out_dir / "items" / item_id
        d.mkdir(parents=True, exist_ok=True)
        write_bmp(d / "original.bmp", unit_to_u8(sample.image.data))
        write_bmp(d / "a.bmp", unit_to_u8(overlays[a_source].data))
        write_bmp(d / "b.bmp", unit_to_u8(overlays[b_source].data))
        h, w = sample.image.data.shape[:2]
        index.append(
            {
                "item_id": item_id,
                "original": f"items/{item_id}/original.bmp",
                "overlay_a": f"items/{item_id}/a.bmp",
                "overlay_b": f"items/{item_id}/b.bmp",
                "width": w,
                "height": h,
            }
        )

    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "alpha": alpha,
        "items": index,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    private = out_dir / "private"
    private.mkdir(exist_ok=True)
    secret = {
        "format": ASSIGNMENTS_FORMAT,
        "version": BUNDLE_VERSION,
        "items": assignments,
    }
    (private / "assignments.json").write_text(json.dumps(secret, sort_keys=True, indent=2) + "\n")
    return manifest


def load_assignments(bundle_dir: Path) -> dict[str, str]:
    path = Path(bundle_dir) / "private" / "assignments.json"
    if not path.is_file():
        raise FileNotFoundError(f"no blinding assignments at {path}")
    data = json.loads(path.read_text())
    if data.get("format") != ASSIGNMENTS_FORMAT:
        raise ValueError(f"{path} is not an assignments file")
    items = data["items"]
    for item_id, src in items.items():
        if src not in SOURCES:
            raise ValueError(f"item {item_id}: bad source {src!r}")
    return dict(items)


def read_decisions(paths: Sequence[Path]) -> list[dict]:
    """Parse reviewer results files (JSON lines, one decision per line)."""
    records = []
    for path in paths:
        path = Path(path)
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{where}: not valid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{where}: decision must be a JSON object")
            for key in ("item_id", "reviewer_id", "choice", "timestamp"):
                if key not in rec:
                    raise ValueError(f"{where}: missing field {key!r}")
            if rec["choice"] not in CHOICES:
                raise ValueError(
                    f"{where}: choice must be one of {', '.join(CHOICES)}, got {rec['choice']!r}"
                )
            if not isinstance(rec["reviewer_id"], str) or not rec["reviewer_id"]:
                raise ValueError(f"{where}: reviewer_id must be a non-empty string")
            records.append(rec)
    return records


@dataclass(frozen=True)
class ReviewRow:
    reviewer_id: str
    n_items: int
    pct_manual: float
    pct_ensemble: float
    pct_similar: float

    def to_dict(self) -> dict:
        return {
            "reviewer_id": self.reviewer_id,
            "n_items": self.n_items,
            "manual_better_pct": self.pct_manual,
            "ensemble_better_pct": self.pct_ensemble,
            "similar_pct": self.pct_similar,
        }


@dataclass(frozen=True)
class ReviewReport:
    rows: tuple
    average: ReviewRow

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "average": self.average.to_dict()}


def aggregate_review(records: Sequence[dict], assignments: dict[str, str]) -> ReviewReport:
    """Unblind and tabulate. A later record for the same (reviewer, item)
    replaces the earlier one, which is how the review tool revises."""
    if not records:
        raise ValueError("no decisions to aggregate")
    outcomes: dict[str, dict[str, str]] = {}
    for rec in records:
        item_id = rec["item_id"]
        if item_id not in assignments:
            raise ValueError(f"unknown item id {item_id!r}")
        if rec["choice"] == "similar":
            outcome = "similar"
        else:
            picked_a = rec["choice"] == "A"
            a_source = assignments[item_id]
            if picked_a:
                outcome = a_source
            else:
                outcome = "ensemble" if a_source == "manual" else "manual"
        outcomes.setdefault(rec["reviewer_id"], {})[item_id] = outcome

    rows = []
    for reviewer_id in sorted(outcomes):
        per_item = outcomes[reviewer_id]
        n = len(per_item)
        counts = {"manual": 0, "ensemble": 0, "similar": 0}
        for outcome in per_item.values():
            counts[outcome] += 1
        rows.append(
            ReviewRow(
                reviewer_id=reviewer_id,
                n_items=n,
                pct_manual=100.0 * counts["manual"] / n,
                pct_ensemble=100.0 * counts["ensemble"] / n,
                pct_similar=100.0 * counts["similar"] / n,
            )
        )

    average = ReviewRow(
        reviewer_id="Average",
        n_items=sum(r.n_items for r in rows),
        pct_manual=float(np.mean([r.pct_manual for r in rows])),
        pct_ensemble=float(np.mean([r.pct_ensemble for r in rows])),
        pct_similar=float(np.mean([r.pct_similar for r in rows])),
    )
    return ReviewReport(rows=tuple(rows), average=average)


def render_review_table(report: ReviewReport) -> str:
    header = f"{'reviewer':<16} {'items':>5} {'manual better':>14} {'ensemble better':>16} {'similar':>8}"
    lines = [header, "-" * len(header)]
    for row in (*report.rows, report.average):
        lines.append(
            f"{row.reviewer_id:<16} {row.n_items:>5} "
            f"{row.pct_manual:>13.2f}% {row.pct_ensemble:>15.2f}% {row.pct_similar:>7.2f}%"
        )
    return "\n".join(lines)
