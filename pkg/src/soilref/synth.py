"""Synthetic soiling scenes with simulated annotation noise.

Stands in for real camera data: renders a textured background, paints soiling
blobs whose appearance depends on their class (opaque occludes, the
transparent grades blur and tint the background), and derives from the exact
blob geometry both a coarse polygonal "manual" annotation and eight further
candidate annotations with distinct error profiles (boundary sloppiness,
class confusion, missed components, resolution loss).

Everything is a pure function of (spec, seed); per-purpose PRNG streams are
derived by hashing, so sample generation is order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .core import (
    IGNORE,
    NUM_CLASSES,
    Image,
    LabelMap,
    PseudoLabelStack,
    Sample,
    SoilingClass,
)
from .seeds import derive_seed, make_rng

CLEAN = int(SoilingClass.CLEAN)
TRANSPARENT = int(SoilingClass.TRANSPARENT)
SEMI = int(SoilingClass.SEMI_TRANSPARENT)
OPAQUE = int(SoilingClass.OPAQUE)

_EIGHT_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


# ---------------------------------------------------------------------------
# noise parameter sets, one flavor per candidate-annotation family

@dataclass(frozen=True)
class MorphNoise:
    """Boundary-sloppy annotator: grow/shrink regions, flip boundary pixels."""

    mode: str = "dilate"  # "dilate" | "erode" | "none"
    radius: int = 1
    boundary_rate: float = 0.05

    def validate(self):
        if self.mode not in ("dilate", "erode", "none"):
            raise ValueError(f"unknown morphology mode {self.mode!r}")
        if self.radius < 0:
            raise ValueError("morphology radius must be >= 0")
        if not 0.0 <= self.boundary_rate <= 1.0:
            raise ValueError("boundary_rate must be in [0, 1]")

    def tag(self) -> str:
        return f"morph-{self.mode}{self.radius}-b{self.boundary_rate:g}"


@dataclass(frozen=True)
class ComponentNoise:
    """Per-component confusion: whole regions dropped or relabeled."""

    swap_rate: float = 0.1
    drop_rate: float = 0.05

    def validate(self):
        for name in ("swap_rate", "drop_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    def tag(self) -> str:
        return f"component-swap{self.swap_rate:g}-drop{self.drop_rate:g}"


@dataclass(frozen=True)
class BlockNoise:
    """Low-resolution annotator: per-block majority vote, upsampled back."""

    factor: int = 2

    def validate(self):
        if self.factor not in (2, 4):
            raise ValueError("block factor must be 2 or 4 (raster dims are divisible by 4)")

    def tag(self) -> str:
        return f"block{self.factor}"


PLNoise = MorphNoise | ComponentNoise | BlockNoise

_NOISE_KINDS = {"morph": MorphNoise, "component": ComponentNoise, "block": BlockNoise}


def _noise_to_dict(p: PLNoise) -> dict:
    kind = {MorphNoise: "morph", ComponentNoise: "component", BlockNoise: "block"}[type(p)]
    d = {"kind": kind}
    d.update(p.__dict__)
    return d


def _noise_from_dict(d: dict) -> PLNoise:
    d = dict(d)
    cls = _NOISE_KINDS[d.pop("kind")]
    return cls(**d)


def default_pl_noise() -> tuple[PLNoise, ...]:
    """Noise profiles for stack positions 1..8 (position 0 is the manual map):
    three boundary-sloppy variants, three component-confusion variants, and
    quarter/half resolution degradations."""
    return (
        MorphNoise("dilate", 1, 0.03),
        MorphNoise("erode", 1, 0.05),
        MorphNoise("dilate", 2, 0.10),
        ComponentNoise(swap_rate=0.10, drop_rate=0.05),
        ComponentNoise(swap_rate=0.05, drop_rate=0.15),
        ComponentNoise(swap_rate=0.20, drop_rate=0.10),
        BlockNoise(4),
        BlockNoise(2),
    )


@dataclass(frozen=True)
class SceneSpec:
    """Everything gen_scene and the annotation simulators need.

    Blob counts are inclusive (lo, hi) ranges per soiling class; radii in
    pixels. polygon_vertices / vertex_jitter / confusion_prob shape the
    simulated manual annotation.
    """

    seed: int = 0
    size: tuple[int, int] = (64, 64)
    transparent_blobs: tuple[int, int] = (1, 2)
    semi_transparent_blobs: tuple[int, int] = (1, 2)
    opaque_blobs: tuple[int, int] = (0, 2)
    blob_radius: tuple[float, float] = (5.0, 11.0)
    blob_lobes: tuple[int, int] = (1, 3)
    polygon_vertices: int = 6
    vertex_jitter: float = 2.0
    confusion_prob: float = 0.15
    pl_noise: tuple[PLNoise, ...] = field(default_factory=default_pl_noise)

    def __post_init__(self):
        h, w = self.size
        if h < 16 or w < 16 or h % 4 or w % 4:
            raise ValueError(f"scene size must be >=16 and divisible by 4, got {h}x{w}")
        for name in ("transparent_blobs", "semi_transparent_blobs", "opaque_blobs"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range ({lo}, {hi}) is invalid")
        lo, hi = self.blob_radius
        if lo <= 0 or hi < lo:
            raise ValueError(f"blob_radius range ({lo}, {hi}) must be positive")
        lo, hi = self.blob_lobes
        if lo < 1 or hi < lo:
            raise ValueError(f"blob_lobes range ({lo}, {hi}) is invalid")
        if self.polygon_vertices < 3:
            raise ValueError("polygon_vertices must be >= 3")
        if self.vertex_jitter < 0:
            raise ValueError("vertex_jitter must be >= 0")
        if not 0.0 <= self.confusion_prob <= 1.0:
            raise ValueError("confusion_prob must be in [0, 1]")
        if len(self.pl_noise) != 8:
            raise ValueError(f"pl_noise must describe 8 candidate maps, got {len(self.pl_noise)}")
        for p in self.pl_noise:
            p.validate()

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "size": list(self.size),
            "transparent_blobs": list(self.transparent_blobs),
            "semi_transparent_blobs": list(self.semi_transparent_blobs),
            "opaque_blobs": list(self.opaque_blobs),
            "blob_radius": list(self.blob_radius),
            "blob_lobes": list(self.blob_lobes),
            "polygon_vertices": self.polygon_vertices,
            "vertex_jitter": self.vertex_jitter,
            "confusion_prob": self.confusion_prob,
            "pl_noise": [_noise_to_dict(p) for p in self.pl_noise],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in (
            "size",
            "transparent_blobs",
            "semi_transparent_blobs",
            "opaque_blobs",
            "blob_radius",
            "blob_lobes",
        ):
            if key in d:
                d[key] = tuple(d[key])
        if "pl_noise" in d:
            d["pl_noise"] = tuple(_noise_from_dict(p) for p in d["pl_noise"])
        return cls(**d)


@dataclass(frozen=True)
class Blob:
    """One soiling blob: a class and a union of discs, in draw order."""

    class_code: int
    discs: tuple[tuple[float, float, float], ...]  # (cy, cx, radius)


@dataclass(frozen=True)
class Scene:
    """gen_scene output: rendered image, exact truth, and for diagnostics the
    unsoiled background plus the blob geometry that produced the truth."""

    image: Image
    truth: LabelMap
    background: Image
    blobs: tuple[Blob, ...]


@dataclass(frozen=True)
class GeneratedSample:
    """A full synthetic sample; truth is always present."""

    sample: Sample
    scene: Scene

    def __post_init__(self):
        if self.sample.truth is None:
            raise ValueError("generated samples must carry ground truth")
        if self.sample.truth.has_ignore():
            raise ValueError("ground truth must not contain IGNORE")


# ---------------------------------------------------------------------------
# rasterization helpers

def rasterize_disc(h: int, w: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Boolean mask of pixels (r, c) with (r-cy)^2 + (c-cx)^2 <= radius^2."""
    rr, cc = np.ogrid[0:h, 0:w]
    return (rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2


def fill_polygon(h: int, w: int, vertices: np.ndarray) -> np.ndarray:
    """Scanline even-odd fill of a polygon given as (K, 2) float (row, col)
    vertices. Pixels are sampled at their integer coordinates."""
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
        raise ValueError(f"need (K>=3, 2) vertices, got {verts.shape}")
    mask = np.zeros((h, w), dtype=bool)
    ys = verts[:, 0]
    y_lo = max(0, int(math.ceil(ys.min())))
    y_hi = min(h - 1, int(math.floor(ys.max())))
    k = len(verts)
    for r in range(y_lo, y_hi + 1):
        xs = []
        for i in range(k):
            y1, x1 = verts[i]
            y2, x2 = verts[(i + 1) % k]
            if y1 == y2:
                continue
            # half-open span so shared vertices are counted exactly once
            if (y1 <= r < y2) or (y2 <= r < y1):
                t = (r - y1) / (y2 - y1)
                xs.append(x1 + t * (x2 - x1))
        xs.sort()
        for j in range(0, len(xs) - 1, 2):
            c0 = max(0, int(math.ceil(xs[j])))
            c1 = min(w - 1, int(math.floor(xs[j + 1])))
            if c1 >= c0:
                mask[r, c0 : c1 + 1] = True
    return mask


def disc_structure(radius: int) -> np.ndarray:
    """Disc-shaped structuring element for morphology."""
    if radius == 0:
        return np.ones((1, 1), dtype=bool)
    d = 2 * radius + 1
    return rasterize_disc(d, d, radius, radius, radius)


# ---------------------------------------------------------------------------
# scene generation

def _render_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.size
    c0 = rng.uniform(0.15, 0.9, size=3)
    c1 = rng.uniform(0.15, 0.9, size=3)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    rr, cc = np.mgrid[0:h, 0:w]
    proj = rr * math.sin(angle) + cc * math.cos(angle)
    t = (proj - proj.min()) / max(float(np.ptp(proj)), 1e-9)
    bg = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]

    n_shapes = int(rng.integers(6, 12))
    for _ in range(n_shapes):
        color = rng.uniform(0.05, 0.95, size=3)
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(3.0, max(h, w) / 3.0)
            m = rasterize_disc(h, w, cy, cx, rad)
        else:
            r0 = int(rng.integers(0, h))
            c0_ = int(rng.integers(0, w))
            rh = int(rng.integers(4, max(5, h // 2)))
            rw = int(rng.integers(4, max(5, w // 2)))
            m = np.zeros((h, w), dtype=bool)
            m[r0 : min(h, r0 + rh), c0_ : min(w, c0_ + rw)] = True
        bg[m] = color
    bg = ndimage.gaussian_filter(bg, sigma=(1.0, 1.0, 0.0))
    bg += rng.normal(0.0, 0.01, size=bg.shape)
    return np.clip(bg, 0.0, 1.0)


def _draw_blobs(spec: SceneSpec, rng: np.random.Generator) -> tuple[Blob, ...]:
    h, w = spec.size
    blobs: list[Blob] = []
    counts = {
        TRANSPARENT: spec.transparent_blobs,
        SEMI: spec.semi_transparent_blobs,
        OPAQUE: spec.opaque_blobs,
    }
    for cls in (TRANSPARENT, SEMI, OPAQUE):
        lo, hi = counts[cls]
        n = int(rng.integers(lo, hi + 1))
        for _ in range(n):
            radius = rng.uniform(*spec.blob_radius)
            margin = math.ceil(radius)
            if 2 * margin >= min(h, w):
                raise ValueError(
                    f"blob radius {radius:.1f} does not fit a {h}x{w} scene"
                )
            cy = rng.uniform(margin, h - 1 - margin)
            cx = rng.uniform(margin, w - 1 - margin)
            discs = [(cy, cx, radius)]
            n_lobes = int(rng.integers(spec.blob_lobes[0], spec.blob_lobes[1] + 1))
            for _ in range(n_lobes - 1):
                dy, dx = rng.normal(0.0, radius * 0.6, size=2)
                r2 = radius * rng.uniform(0.5, 0.85)
                discs.append((cy + dy, cx + dx, r2))
            blobs.append(Blob(cls, tuple(discs)))
    order = rng.permutation(len(blobs))
    return tuple(blobs[i] for i in order)


def _paint_truth(size: tuple[int, int], blobs: tuple[Blob, ...]) -> np.ndarray:
    h, w = size
    truth = np.zeros((h, w), dtype=np.uint8)
    for blob in blobs:
        mask = np.zeros((h, w), dtype=bool)
        for cy, cx, rad in blob.discs:
            mask |= rasterize_disc(h, w, cy, cx, rad)
        truth[mask] = blob.class_code
    return truth


_OPAQUE_FILL = np.array([0.24, 0.20, 0.17])
_SEMI_TINT = np.array([0.46, 0.43, 0.40])
_TRANSPARENT_TINT = np.array([0.55, 0.55, 0.55])


def _render_soiling(
    bg: np.ndarray, truth: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    img = bg.copy()
    heavy = ndimage.gaussian_filter(bg, sigma=(3.0, 3.0, 0.0))
    mild = ndimage.gaussian_filter(bg, sigma=(1.0, 1.0, 0.0))

    m = truth == TRANSPARENT
    if m.any():
        img[m] = 0.82 * mild[m] + 0.18 * _TRANSPARENT_TINT
    m = truth == SEMI
    if m.any():
        img[m] = 0.45 * heavy[m] + 0.55 * _SEMI_TINT
    m = truth == OPAQUE
    if m.any():
        fill = _OPAQUE_FILL + rng.normal(0.0, 0.015, size=(int(m.sum()), 3))
        img[m] = fill
    return np.clip(img, 0.0, 1.0)


def gen_scene(spec: SceneSpec) -> Scene:
    """Render one synthetic scene; deterministic in spec (including its seed)."""
    bg = _render_background(spec, make_rng(spec.seed, "bg"))
    blobs = _draw_blobs(spec, make_rng(spec.seed, "blobs"))
    truth = _paint_truth(spec.size, blobs)
    img = _render_soiling(bg, truth, make_rng(spec.seed, "soil"))
    return Scene(
        image=Image(img),
        truth=LabelMap(truth),
        background=Image(bg),
        blobs=blobs,
    )


# ---------------------------------------------------------------------------
# simulated manual annotation

def _components(mask: np.ndarray) -> list[np.ndarray]:
    labeled, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    return [labeled == i for i in range(1, n + 1)]


def _polygonize(component: np.ndarray, k: int, jitter: float, rng) -> np.ndarray | None:
    """Fit a K-vertex star polygon to the component boundary; None when the
    component is too small to polygonize meaningfully."""
    pts = np.argwhere(component)
    if len(pts) < 8:
        return None
    boundary = component & ~ndimage.binary_erosion(component)
    bpts = np.argwhere(boundary).astype(np.float64)
    if len(bpts) < 3:
        return None
    cy, cx = pts.mean(axis=0)
    ang = np.arctan2(bpts[:, 0] - cy, bpts[:, 1] - cx) % (2.0 * math.pi)
    dist = np.hypot(bpts[:, 0] - cy, bpts[:, 1] - cx)

    offset = rng.uniform(0.0, 2.0 * math.pi / k)
    bin_idx = np.floor(((ang - offset) % (2.0 * math.pi)) / (2.0 * math.pi / k)).astype(int)
    bin_idx = np.clip(bin_idx, 0, k - 1)
    radii = np.full(k, np.nan)
    for b in range(k):
        sel = bin_idx == b
        if sel.any():
            radii[b] = dist[sel].max()
    # fill empty angular bins from their circular neighbors
    while np.isnan(radii).any():
        nxt = radii.copy()
        for b in range(k):
            if np.isnan(radii[b]):
                neigh = [radii[(b - 1) % k], radii[(b + 1) % k]]
                vals = [v for v in neigh if not np.isnan(v)]
                if vals:
                    nxt[b] = float(np.mean(vals))
        if np.isnan(nxt).all():
            return None
        radii = nxt

    theta = offset + (np.arange(k) + 0.5) * (2.0 * math.pi / k)
    verts = np.stack(
        [cy + radii * np.sin(theta), cx + radii * np.cos(theta)], axis=1
    )
    if jitter > 0:
        verts = verts + rng.normal(0.0, jitter, size=verts.shape)
    return verts


def simulate_manual(truth: LabelMap, spec: SceneSpec, seed: int) -> LabelMap:
    """Coarse polygonal annotation of the truth map.

    Each soiled component becomes a jittered K-gon filled with its class;
    with confusion_prob a transparent component is relabeled semi-transparent
    or vice versa. Components too small to polygonize are copied through.
    """
    if truth.has_ignore():
        raise ValueError("truth must not contain IGNORE")
    rng = make_rng(seed, "manual")
    h, w = truth.data.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for cls in (TRANSPARENT, SEMI, OPAQUE):
        for comp in _components(truth.data == cls):
            label = cls
            if cls in (TRANSPARENT, SEMI) and rng.random() < spec.confusion_prob:
                label = SEMI if cls == TRANSPARENT else TRANSPARENT
            verts = _polygonize(comp, spec.polygon_vertices, spec.vertex_jitter, rng)
            mask = comp if verts is None else fill_polygon(h, w, verts)
            out[mask] = label
    return LabelMap(out)


# ---------------------------------------------------------------------------
# candidate annotation stack

def _apply_morph(truth: np.ndarray, noise: MorphNoise, rng) -> np.ndarray:
    h, w = truth.shape
    out = np.zeros((h, w), dtype=np.uint8)
    structure = disc_structure(noise.radius)
    for cls in (TRANSPARENT, SEMI, OPAQUE):
        mask = truth == cls
        if not mask.any():
            continue
        if noise.mode == "dilate" and noise.radius > 0:
            mask = ndimage.binary_dilation(mask, structure=structure)
        elif noise.mode == "erode" and noise.radius > 0:
            mask = ndimage.binary_erosion(mask, structure=structure)
        out[mask] = cls
    if noise.boundary_rate > 0:
        out = _boundary_flips(out, noise.boundary_rate, rng)
    return out


def _boundary_flips(lab: np.ndarray, rate: float, rng) -> np.ndarray:
    h, w = lab.shape
    padded = np.pad(lab, 1, mode="edge")
    boundary = np.zeros((h, w), dtype=bool)
    for dy, dx in _EIGHT_NEIGHBORS:
        boundary |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] != lab
    flip = boundary & (rng.random((h, w)) < rate)
    if not flip.any():
        return lab
    out = lab.copy()
    rs, cs = np.nonzero(flip)
    picks = rng.integers(0, len(_EIGHT_NEIGHBORS), size=len(rs))
    offs = np.array(_EIGHT_NEIGHBORS)
    nr = np.clip(rs + offs[picks, 0], 0, h - 1)
    nc = np.clip(cs + offs[picks, 1], 0, w - 1)
    out[rs, cs] = lab[nr, nc]
    return out


def _apply_component(truth: np.ndarray, noise: ComponentNoise, rng) -> np.ndarray:
    out = np.zeros_like(truth)
    for cls in (TRANSPARENT, SEMI, OPAQUE):
        for comp in _components(truth == cls):
            u = rng.random()
            if u < noise.drop_rate:
                continue  # annotator missed the component entirely
            label = cls
            if u < noise.drop_rate + noise.swap_rate:
                if cls == TRANSPARENT:
                    label = SEMI
                elif cls == OPAQUE:
                    label = SEMI
                else:
                    label = TRANSPARENT if rng.random() < 0.5 else OPAQUE
            out[comp] = label
    return out


def _apply_block(truth: np.ndarray, noise: BlockNoise) -> np.ndarray:
    f = noise.factor
    h, w = truth.shape
    if h % f or w % f:
        raise ValueError(f"map dims {h}x{w} not divisible by block factor {f}")
    onehot = np.eye(NUM_CLASSES, dtype=np.int64)[truth]
    counts = onehot.reshape(h // f, f, w // f, f, NUM_CLASSES).sum(axis=(1, 3))
    small = np.argmax(counts, axis=2).astype(np.uint8)  # ties: lowest class code
    return small.repeat(f, axis=0).repeat(f, axis=1)


def simulate_pls(
    truth: LabelMap, manual: LabelMap, spec: SceneSpec, seed: int
) -> PseudoLabelStack:
    """Build the 9-map candidate stack: the manual annotation first, then the
    eight noise profiles from spec.pl_noise applied to the truth."""
    if truth.data.shape != manual.data.shape:
        raise ValueError("truth and manual shapes differ")
    maps = [manual]
    provenance = ["manual"]
    for q, noise in enumerate(spec.pl_noise):
        rng = make_rng(seed, "pl", q)
        if isinstance(noise, MorphNoise):
            arr = _apply_morph(truth.data, noise, rng)
        elif isinstance(noise, ComponentNoise):
            arr = _apply_component(truth.data, noise, rng)
        else:
            arr = _apply_block(truth.data, noise)
        maps.append(LabelMap(arr))
        provenance.append(noise.tag())
    return PseudoLabelStack(tuple(maps), tuple(provenance))


# ---------------------------------------------------------------------------
# sample assembly

def generate_sample(spec: SceneSpec, sample_id: str) -> GeneratedSample:
    """Scene + manual + candidate stack, all from spec.seed."""
    scene = gen_scene(spec)
    manual = simulate_manual(scene.truth, spec, derive_seed(spec.seed, "manual"))
    pls = simulate_pls(scene.truth, manual, spec, derive_seed(spec.seed, "pls"))
    sample = Sample(id=sample_id, image=scene.image, pls=pls, truth=scene.truth)
    return GeneratedSample(sample=sample, scene=scene)


def generate_dataset(spec: SceneSpec, n: int, root_seed: int) -> list[GeneratedSample]:
    """n samples with per-sample derived seeds; order-independent."""
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    out = []
    for i in range(n):
        sspec = replace(spec, seed=derive_seed(root_seed, "sample", i))
        out.append(generate_sample(sspec, sample_id=f"s{i:05d}"))
    return out
