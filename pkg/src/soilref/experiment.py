"""End-to-end refinement experiment, run fully in memory.

One experiment seed drives: data generation, the stratified split, both
ensemble training stages, annotation refinement, and a pair of downstream
models trained under identical settings on manual versus refined labels.
The headline number is the test-set mean IoU gap between those two models.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import LabelMap, Sample
from .evaluation import (
    EvalReport,
    SplitAssignment,
    label_quality,
    predict_map,
    presence_key,
    refine,
    stratified_split,
    three_way_eval,
)
from .seeds import derive_seed
from .synth import SceneSpec, generate_dataset
from .tinynet import NetParams
from .trainer import StageReport, TrainConfig, train_downstream, train_stage1, train_stage2


@dataclass
class ExperimentResult:
    seed: int
    split: SplitAssignment
    manual_quality: EvalReport
    refined_quality: EvalReport
    downstream_manual: EvalReport
    downstream_refined: EvalReport
    table_reports: list[EvalReport] = field(default_factory=list)
    stage_reports: dict[str, StageReport] = field(default_factory=dict)
    wall_s: float = 0.0

    @property
    def downstream_gap(self) -> float:
        """Test mean IoU of the refined-label model minus the manual one."""
        return self.downstream_refined.mean_iou - self.downstream_manual.mean_iou

    @property
    def quality_gap(self) -> float:
        """Test mean IoU of refined annotations minus manual, against truth."""
        return self.refined_quality.mean_iou - self.manual_quality.mean_iou

    def summary(self) -> str:
        lines = [
            f"experiment seed={self.seed}",
            f"  annotation quality: manual {self.manual_quality.mean_iou:.4f}"
            f"  refined {self.refined_quality.mean_iou:.4f}"
            f"  gap {self.quality_gap:+.4f}",
            f"  downstream test IoU: manual-trained {self.downstream_manual.mean_iou:.4f}"
            f"  refined-trained {self.downstream_refined.mean_iou:.4f}"
            f"  gap {self.downstream_gap:+.4f}",
        ]
        return "\n".join(lines)


def default_scene_spec(seed: int, size=(64, 64)) -> SceneSpec:
    return SceneSpec(seed=seed, size=size)


def run_experiment(
    seed: int,
    n: int = 500,
    scene_spec: Optional[SceneSpec] = None,
    ensemble_config: Optional[TrainConfig] = None,
    downstream_config: Optional[TrainConfig] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> ExperimentResult:
    t0 = time.monotonic()

    def say(msg: str):
        if progress is not None:
            progress(msg)

    spec = scene_spec if scene_spec is not None else default_scene_spec(seed)
    say(f"generating {n} scenes")
    generated = generate_dataset(spec, n, root_seed=derive_seed(seed, "data"))
    samples = [g.sample for g in generated]

    keys = [presence_key(s.truth) for s in samples]
    split = stratified_split(keys, seed)
    train_s = [samples[i] for i in split.train]
    val_s = [samples[i] for i in split.val]
    test_s = [samples[i] for i in split.test]

    cfg = ensemble_config if ensemble_config is not None else TrainConfig(
        seed=derive_seed(seed, "ensemble")
    )
    say("training ensemble stage 1")
    stage1, rep1 = train_stage1(train_s, cfg, val_s)
    say("training ensemble stage 2")
    stage2, rep2 = train_stage2(train_s, stage1, cfg, val_s)

    say("refining annotations")
    refined: dict[str, LabelMap] = {s.id: refine(stage2, s) for s in samples}

    truths_test = [s.truth for s in test_s]
    manuals_test = [s.manual for s in test_s]
    refined_test = [refined[s.id] for s in test_s]
    manual_quality = label_quality(truths_test, manuals_test, variant="manual")
    refined_quality = label_quality(truths_test, refined_test, variant="ensemble")

    # The downstream pair trains 3x longer than the refiner stages: both
    # models must clear the underfitting regime, where label quality barely
    # moves the needle, for the comparison to measure the labels themselves.
    dcfg = downstream_config if downstream_config is not None else TrainConfig(
        seed=derive_seed(seed, "downstream"), epochs=36, patience=12
    )
    say("training downstream model on manual labels")
    model_m, rep_m = train_downstream(
        train_s,
        [s.manual for s in train_s],
        dcfg,
        val_s,
        [s.manual for s in val_s],
        stage_name="downstream-manual",
    )
    say("training downstream model on refined labels")
    model_r, rep_r = train_downstream(
        train_s,
        [refined[s.id] for s in train_s],
        dcfg,
        val_s,
        [refined[s.id] for s in val_s],
        stage_name="downstream-refined",
    )

    say("evaluating on the test split")
    preds_m = [predict_map(model_m, s.image) for s in test_s]
    preds_r = [predict_map(model_r, s.image) for s in test_s]
    downstream_manual = label_quality(
        truths_test, preds_m, model="downstream-manual", variant="truth"
    )
    downstream_refined = label_quality(
        truths_test, preds_r, model="downstream-refined", variant="truth"
    )

    table = []
    for model_name, preds in (
        ("downstream-manual", preds_m),
        ("downstream-refined", preds_r),
    ):
        by_variant = three_way_eval(preds, manuals_test, refined_test, model=model_name)
        table.extend([by_variant["manual"], by_variant["ensemble"], by_variant["intersection"]])

    return ExperimentResult(
        seed=seed,
        split=split,
        manual_quality=manual_quality,
        refined_quality=refined_quality,
        downstream_manual=downstream_manual,
        downstream_refined=downstream_refined,
        table_reports=table,
        stage_reports={
            "stage1": rep1,
            "stage2": rep2,
            "downstream-manual": rep_m,
            "downstream-refined": rep_r,
        },
        wall_s=time.monotonic() - t0,
    )
