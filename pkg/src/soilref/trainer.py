"""Two-stage training of the annotation-refinement ensemble.

Stage 1 fits the stack-conditioned network against uniformly random candidate
maps, so it learns the consensus of all nine annotations. Stage 2 trains a
fresh network of the same shape against, per draw, whichever candidate map is
nearest (in cross-entropy) to the stage-1 prediction. A third entry point
trains the image-only downstream segmentation model used to compare
annotation variants.

All stages share one engine: SGD with momentum on random augmented crops,
periodic validation with augmentation disabled (center crop), patience-based
early stopping, and the best-validation parameters returned (never the last).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    Image,
    LabelMap,
    NUM_CLASSES,
    ProbMap,
    PseudoLabelStack,
    Sample,
    crop,
    flip_h,
    flip_v,
    image_chw,
    rot90,
    stack_encode,
)
from .seeds import derive_seed, make_rng
from .tinynet import (
    Architecture,
    NetParams,
    NonFiniteError,
    SgdState,
    backward,
    forward,
    init_params,
    sgd_step,
    softmax_ce,
    softmax_probs,
)

N_PLS = 9


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8  # minibatch draws per step
    epochs: int = 12  # hard cap per stage
    lr: float = 0.05
    momentum: float = 0.9
    crop: tuple[int, int] = (32, 32)
    flip: bool = True
    rotate: bool = True
    seed: int = 0
    val_every: int = 1  # validate every this many epochs
    patience: int = 4  # stop after this many validations without improvement
    steps_per_epoch: int = 0  # 0 = ceil(n / batch_size)
    class_weights: tuple | None = None  # loss-weighting hook, off by default

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        ch, cw = self.crop
        if ch % 4 or cw % 4 or ch < 8 or cw < 8:
            raise ValueError(f"crop dims must be >= 8 and divisible by 4, got {ch}x{cw}")
        if self.val_every < 1 or self.patience < 1:
            raise ValueError("val_every and patience must be >= 1")
        if self.steps_per_epoch < 0:
            raise ValueError("steps_per_epoch must be >= 0")
        if self.class_weights is not None and len(self.class_weights) != NUM_CLASSES:
            raise ValueError("class_weights needs one entry per class")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["crop"] = list(self.crop)
        if d["class_weights"] is not None:
            d["class_weights"] = list(d["class_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "crop" in d:
            d["crop"] = tuple(d["crop"])
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


@dataclass
class StageReport:
    stage: str
    train_losses: list = field(default_factory=list)  # one mean per epoch
    val_losses: list = field(default_factory=list)  # one per validation
    selected_hist: np.ndarray = field(default_factory=lambda: np.zeros(N_PLS, np.int64))
    best_val: float = float("inf")
    best_epoch: int = -1
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "train_losses": [float(v) for v in self.train_losses],
            "val_losses": [float(v) for v in self.val_losses],
            "selected_hist": [int(v) for v in self.selected_hist],
            "best_val": float(self.best_val),
            "best_epoch": self.best_epoch,
            "wall_s": round(self.wall_s, 3),
        }


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugSpec:
    """A fully described augmentation draw, applied identically to the image
    and every label map; exposed so tests can replay it independently."""

    origin: tuple[int, int]
    size: tuple[int, int]
    do_flip_h: bool = False
    do_flip_v: bool = False
    rot_k: int = 0

    def apply(
        self, image: Image, maps: Sequence[LabelMap]
    ) -> tuple[Image, tuple[LabelMap, ...]]:
        img, ms = crop(image, maps, self.origin, self.size)
        if self.do_flip_h:
            img, ms = flip_h(img, ms)
        if self.do_flip_v:
            img, ms = flip_v(img, ms)
        if self.rot_k:
            img, ms = rot90(img, ms, self.rot_k)
        return img, ms


def draw_augmentation(
    image_shape: tuple[int, int], config: TrainConfig, rng: np.random.Generator
) -> AugSpec:
    """Random crop window plus optional flips and quarter-turns (turns only
    for square crops, so dims stay put)."""
    h, w = image_shape
    ch, cw = config.crop
    if ch > h or cw > w:
        raise ValueError(f"crop {config.crop} exceeds image {image_shape}")
    r = int(rng.integers(0, h - ch + 1))
    c = int(rng.integers(0, w - cw + 1))
    fh = bool(config.flip and rng.random() < 0.5)
    fv = bool(config.flip and rng.random() < 0.5)
    k = int(rng.integers(0, 4)) if config.rotate and ch == cw else 0
    return AugSpec(origin=(r, c), size=(ch, cw), do_flip_h=fh, do_flip_v=fv, rot_k=k)


def center_crop_spec(image_shape: tuple[int, int], config: TrainConfig) -> AugSpec:
    h, w = image_shape
    ch, cw = min(config.crop[0], h), min(config.crop[1], w)
    return AugSpec(origin=((h - ch) // 8 * 4, (w - cw) // 8 * 4), size=(ch, cw))


# ---------------------------------------------------------------------------
# batch pieces

def encode_crop(img: Image, maps: Sequence[LabelMap]):
    """CHW image + CHW one-hot encoding of 9 candidate maps."""
    stack = PseudoLabelStack(tuple(maps), tuple(str(i) for i in range(N_PLS)))
    enc = np.transpose(stack_encode(stack), (2, 0, 1))
    return image_chw(img), enc


def draw_random_pairs(
    n: int, count: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """(sample index, candidate index) pairs, both uniform."""
    ps = rng.integers(0, n, size=count)
    qs = rng.integers(0, N_PLS, size=count)
    return [(int(p), int(q)) for p, q in zip(ps, qs)]


def select_nn_pl(yhat: ProbMap, pls: PseudoLabelStack) -> int:
    """Index of the candidate map nearest to the predicted distribution.

    Distance is mean per-pixel cross-entropy -log(p[class]); ties go to the
    lowest index.
    """
    if yhat.data.shape[:2] != pls.maps[0].data.shape:
        raise ValueError("prediction and candidate stack dims differ")
    logp = np.log(np.clip(yhat.data, 1e-300, 1.0))
    ces = np.empty(N_PLS)
    for q, m in enumerate(pls.maps):
        picked = np.take_along_axis(logp, m.data[:, :, None].astype(np.int64), axis=2)
        ces[q] = -picked.mean()
    return int(np.argmin(ces))


def predict_probs(params: NetParams, chw: np.ndarray, enc: np.ndarray) -> ProbMap:
    logits, _ = forward(params, chw[None], enc[None])
    return ProbMap(np.transpose(softmax_probs(logits)[0], (1, 2, 0)))


# ---------------------------------------------------------------------------
# shared fit engine

def _check_crop_fits(samples: Sequence[Sample], config: TrainConfig):
    if not samples:
        raise ValueError("training set is empty")
    for s in samples:
        h, w = s.image.data.shape[:2]
        if h < config.crop[0] or w < config.crop[1]:
            raise ValueError(f"sample {s.id} is smaller than crop {config.crop}")


def _fit(
    arch: Architecture,
    config: TrainConfig,
    n: int,
    batch_fn: Callable,  # (rng) -> (imgs, stacks | None, targets)
    val_fn: Callable | None,  # (params) -> float
    report: StageReport,
) -> NetParams:
    params = init_params(arch, derive_seed(config.seed, report.stage, "init"))
    state: SgdState | None = None
    rng = make_rng(config.seed, report.stage, "draws")
    steps = config.steps_per_epoch or -(-n // config.batch_size)
    best_params = params
    evals_since_best = 0
    t0 = time.monotonic()

    for epoch in range(config.epochs):
        epoch_losses = []
        for _ in range(steps):
            imgs, stacks, targets = batch_fn(rng)
            if stacks is None:
                logits, cache = forward(params, imgs)
            else:
                logits, cache = forward(params, imgs, stacks)
            loss, dlogits = softmax_ce(logits, targets)
            if not np.isfinite(loss):
                raise NonFiniteError(f"training loss became non-finite: {loss}")
            grads = backward(params, cache, dlogits)
            params, state = sgd_step(params, grads, config.lr, config.momentum, state)
            epoch_losses.append(float(loss))
        report.train_losses.append(float(np.mean(epoch_losses)))

        if (epoch + 1) % config.val_every == 0:
            val = val_fn(params) if val_fn is not None else report.train_losses[-1]
            report.val_losses.append(val)
            if val < report.best_val:
                report.best_val = val
                report.best_epoch = epoch
                best_params = params
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= config.patience:
                    break

    report.wall_s = time.monotonic() - t0
    return best_params


# ---------------------------------------------------------------------------
# stage 1: random candidate targets

def train_stage1(
    samples: Sequence[Sample],
    config: TrainConfig,
    val_samples: Sequence[Sample] = (),
) -> tuple[NetParams, StageReport]:
    """Fit the first refiner against uniformly random candidate targets."""
    _check_crop_fits(samples, config)
    n = len(samples)

    def batch(rng):
        imgs, stacks, targets = [], [], []
        for p, q in draw_random_pairs(n, config.batch_size, rng):
            spec = draw_augmentation(samples[p].image.data.shape[:2], config, rng)
            img, maps = spec.apply(samples[p].image, samples[p].pls.maps)
            chw, enc = encode_crop(img, maps)
            imgs.append(chw)
            stacks.append(enc)
            targets.append(maps[q].data.astype(np.int64))
        return np.stack(imgs), np.stack(stacks), np.stack(targets)

    def val(params):
        # target selection is uniform over the 9 candidates, so validation
        # scores the expectation: the mean of the 9 per-candidate losses
        losses = []
        for s in val_samples:
            spec = center_crop_spec(s.image.data.shape[:2], config)
            img, maps = spec.apply(s.image, s.pls.maps)
            chw, enc = encode_crop(img, maps)
            logits, _ = forward(params, chw[None], enc[None])
            per_q = [
                softmax_ce(logits, m.data.astype(np.int64)[None])[0] for m in maps
            ]
            losses.append(float(np.mean(per_q)))
        return float(np.mean(losses))

    report = StageReport(stage="stage1")
    params = _fit(
        Architecture(kind="dual"), config, n, batch,
        val if len(val_samples) else None, report,
    )
    return params, report


# ---------------------------------------------------------------------------
# stage 2: nearest-candidate targets from the frozen stage-1 model

def train_stage2(
    samples: Sequence[Sample],
    stage1: NetParams,
    config: TrainConfig,
    val_samples: Sequence[Sample] = (),
    predict_fn: Callable[[np.ndarray, np.ndarray], ProbMap] | None = None,
) -> tuple[NetParams, StageReport]:
    """Fit the second refiner; targets are the candidate maps nearest to the
    stage-1 prediction (or to an injected predictor's output, for tests)."""
    _check_crop_fits(samples, config)
    if predict_fn is None:
        if stage1.arch.kind != "dual":
            raise ValueError("the stage-1 model must be the stack-conditioned variant")
        predict_fn = lambda chw, enc: predict_probs(stage1, chw, enc)
    n = len(samples)
    report = StageReport(stage="stage2")

    def pick_target(sample: Sample, img, maps, chw, enc, count=True):
        stack = PseudoLabelStack(tuple(maps), sample.pls.provenance)
        qhat = select_nn_pl(predict_fn(chw, enc), stack)
        if count:
            report.selected_hist[qhat] += 1
        return maps[qhat].data.astype(np.int64)

    def batch(rng):
        imgs, stacks, targets = [], [], []
        for p, _ in draw_random_pairs(n, config.batch_size, rng):
            spec = draw_augmentation(samples[p].image.data.shape[:2], config, rng)
            img, maps = spec.apply(samples[p].image, samples[p].pls.maps)
            chw, enc = encode_crop(img, maps)
            imgs.append(chw)
            stacks.append(enc)
            targets.append(pick_target(samples[p], img, maps, chw, enc))
        return np.stack(imgs), np.stack(stacks), np.stack(targets)

    def val(params):
        losses = []
        for s in val_samples:
            spec = center_crop_spec(s.image.data.shape[:2], config)
            img, maps = spec.apply(s.image, s.pls.maps)
            chw, enc = encode_crop(img, maps)
            tgt = pick_target(s, img, maps, chw, enc, count=False)
            logits, _ = forward(params, chw[None], enc[None])
            loss, _ = softmax_ce(logits, tgt[None])
            losses.append(loss)
        return float(np.mean(losses))

    params = _fit(
        Architecture(kind="dual"), config, n, batch,
        val if len(val_samples) else None, report,
    )
    return params, report


# ---------------------------------------------------------------------------
# downstream image-only model

def train_downstream(
    samples: Sequence[Sample],
    labels: Sequence[LabelMap],
    config: TrainConfig,
    val_samples: Sequence[Sample] = (),
    val_labels: Sequence[LabelMap] = (),
    stage_name: str = "downstream",
) -> tuple[NetParams, StageReport]:
    """Train the image-only segmentation model on (image, given-label) pairs.

    The labels are whatever annotation variant is under study (manual,
    refined, truth); comparing the resulting models is the point.
    """
    _check_crop_fits(samples, config)
    if len(samples) != len(labels):
        raise ValueError("need one label map per sample")
    if len(val_samples) != len(val_labels):
        raise ValueError("need one validation label per validation sample")
    for s, m in zip(samples, labels):
        if s.image.data.shape[:2] != m.data.shape:
            raise ValueError(f"sample {s.id}: label dims differ from image")
    n = len(samples)

    def batch(rng):
        imgs, targets = [], []
        for p in rng.integers(0, n, size=config.batch_size):
            spec = draw_augmentation(samples[p].image.data.shape[:2], config, rng)
            img, (m,) = spec.apply(samples[p].image, [labels[p]])
            imgs.append(image_chw(img))
            targets.append(m.data.astype(np.int64))
        return np.stack(imgs), None, np.stack(targets)

    def val(params):
        losses = []
        for s, m in zip(val_samples, val_labels):
            spec = center_crop_spec(s.image.data.shape[:2], config)
            img, (mm,) = spec.apply(s.image, [m])
            logits, _ = forward(params, image_chw(img)[None])
            loss, _ = softmax_ce(logits, mm.data.astype(np.int64)[None])
            losses.append(loss)
        return float(np.mean(losses))

    report = StageReport(stage=stage_name)
    params = _fit(
        Architecture(kind="single"), config, n, batch,
        val if len(val_samples) else None, report,
    )
    return params, report
