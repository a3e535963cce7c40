"""Domain types and raster operations shared by the whole pipeline.

Everything here is immutable after construction: the wrapped numpy arrays
are marked read-only, so samples can be shared freely across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class SoilingClass(enum.IntEnum):
    """Per-pixel soiling category. Codes are the on-disk gray values."""

    CLEAN = 0
    TRANSPARENT = 1
    SEMI_TRANSPARENT = 2
    OPAQUE = 3


# Sentinel for pixels excluded from losses/metrics. Not a SoilingClass:
# constructing SoilingClass(255) raises. 255 survives 8-bit file round-trips.
IGNORE = 255

NUM_CLASSES = 4
VALID_CODES = frozenset((0, 1, 2, 3, IGNORE))
CLASS_NAMES = {
    SoilingClass.CLEAN: "clean",
    SoilingClass.TRANSPARENT: "transparent",
    SoilingClass.SEMI_TRANSPARENT: "semi_transparent",
    SoilingClass.OPAQUE: "opaque",
}
SOILED_CLASSES = (
    SoilingClass.TRANSPARENT,
    SoilingClass.SEMI_TRANSPARENT,
    SoilingClass.OPAQUE,
)


class EncodingError(ValueError):
    """Raised when a label map cannot be one-hot encoded."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Image:
    """H x W x 3 color raster with unit-range float64 channels.

    Files store 8-bit channels; in memory everything is value/255. Width and
    height must be >= 16 and divisible by 4 (the network downsamples once and
    upsamples back, and crops inherit the same constraint).
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {arr.shape}")
        h, w = arr.shape[:2]
        if h < 8 or w < 8:
            raise ValueError(f"image must be at least 8x8, got {h}x{w}")
        if h % 4 or w % 4:
            raise ValueError(f"image dims must be divisible by 4, got {h}x{w}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image channel values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LabelMap:
    """H x W per-pixel class codes, possibly containing IGNORE."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"label map must be non-empty (H, W), got {arr.shape}")
        arr = arr.astype(np.uint8, casting="unsafe") if arr.dtype != np.uint8 else arr
        codes = np.unique(arr)
        bad = [int(c) for c in codes if int(c) not in VALID_CODES]
        if bad:
            raise ValueError(f"invalid class codes {bad}; allowed {sorted(VALID_CODES)}")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def has_ignore(self) -> bool:
        return bool((self.data == IGNORE).any())

    def classes_present(self) -> frozenset[int]:
        """Distinct non-IGNORE codes in the map."""
        codes = np.unique(self.data)
        return frozenset(int(c) for c in codes if c != IGNORE)


@dataclass(frozen=True)
class PseudoLabelStack:
    """Ordered stack of exactly 9 candidate annotations for one image.

    Position 0 is by convention the manual annotation. Candidate maps must
    commit to a definite class everywhere, so IGNORE is rejected.
    """

    maps: tuple[LabelMap, ...]
    provenance: tuple[str, ...]

    STACK_SIZE = 9

    def __post_init__(self):
        maps = tuple(self.maps)
        prov = tuple(self.provenance)
        if len(maps) != self.STACK_SIZE:
            raise ValueError(f"stack needs exactly {self.STACK_SIZE} maps, got {len(maps)}")
        if len(prov) != self.STACK_SIZE:
            raise ValueError(f"stack needs {self.STACK_SIZE} provenance strings, got {len(prov)}")
        shape = maps[0].data.shape
        for i, m in enumerate(maps):
            if m.data.shape != shape:
                raise ValueError(f"map {i} has shape {m.data.shape}, expected {shape}")
            if m.has_ignore():
                raise ValueError(f"pseudo-label map {i} ({prov[i]!r}) contains IGNORE cells")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "provenance", prov)

    @property
    def height(self) -> int:
        return self.maps[0].height

    @property
    def width(self) -> int:
        return self.maps[0].width


@dataclass(frozen=True)
class ProbMap:
    """H x W x 4 per-pixel class probabilities."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != NUM_CLASSES:
            raise ValueError(f"prob map must be (H, W, {NUM_CLASSES}), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("prob map contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = arr.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("per-pixel probabilities must sum to 1 within 1e-6")
        object.__setattr__(self, "data", _freeze(arr))

    def argmax_map(self) -> LabelMap:
        """Hard per-pixel decision; ties resolve to the lowest class code."""
        return LabelMap(np.argmax(self.data, axis=2).astype(np.uint8))


@dataclass(frozen=True)
class Sample:
    """One annotated image: raster, optional ground truth, 9-map stack."""

    id: str
    image: Image
    pls: PseudoLabelStack
    truth: LabelMap | None = None

    def __post_init__(self):
        shape = (self.image.height, self.image.width)
        if (self.pls.height, self.pls.width) != shape:
            raise ValueError(
                f"sample {self.id}: pseudo-label stack shape "
                f"{(self.pls.height, self.pls.width)} != image shape {shape}"
            )
        if self.truth is not None and self.truth.data.shape != shape:
            raise ValueError(
                f"sample {self.id}: truth shape {self.truth.data.shape} != image shape {shape}"
            )

    @property
    def manual(self) -> LabelMap:
        return self.pls.maps[0]


# ---------------------------------------------------------------------------
# encodings

def one_hot(label_map: LabelMap) -> np.ndarray:
    """Encode a label map as an (H, W, 4) 0/1 tensor.

    Raises EncodingError on IGNORE cells, naming the first offending pixel.
    """
    data = label_map.data
    ignore = data == IGNORE
    if ignore.any():
        r, c = np.argwhere(ignore)[0]
        raise EncodingError(f"cannot one-hot encode IGNORE cell at pixel ({r}, {c})")
    out = np.zeros(data.shape + (NUM_CLASSES,), dtype=np.float64)
    rows, cols = np.indices(data.shape)
    out[rows, cols, data.astype(np.int64)] = 1.0
    return out


def stack_encode(pls: PseudoLabelStack) -> np.ndarray:
    """Channel-wise concatenation of one-hot encodings, (H, W, 36).

    Channel block [4q, 4q+4) holds the q-th stack entry, in stack order.
    """
    return np.concatenate([one_hot(m) for m in pls.maps], axis=2)


def stack_decode(encoded: np.ndarray) -> list[LabelMap]:
    """Inverse of stack_encode: per-block argmax back to 9 label maps."""
    if encoded.ndim != 3 or encoded.shape[2] % NUM_CLASSES:
        raise ValueError(f"expected (H, W, 4k) tensor, got {encoded.shape}")
    n = encoded.shape[2] // NUM_CLASSES
    return [
        LabelMap(np.argmax(encoded[:, :, 4 * q : 4 * q + 4], axis=2).astype(np.uint8))
        for q in range(n)
    ]


# ---------------------------------------------------------------------------
# joint geometric transforms
#
# Image and label maps always receive the identical transform so that pixel
# alignment is preserved.  Rotations are quarter-turns only: class-index maps
# cannot be interpolated.

def crop(
    image: Image,
    maps: Sequence[LabelMap],
    origin: tuple[int, int],
    size: tuple[int, int],
) -> tuple[Image, tuple[LabelMap, ...]]:
    """Crop image and maps with one shared window.

    origin is (row, col); size is (h, w), both divisible by 4. The window
    must lie fully inside the rasters.
    """
    r0, c0 = origin
    h, w = size
    if h % 4 or w % 4:
        raise ValueError(f"crop size must be divisible by 4, got {h}x{w}")
    if r0 < 0 or c0 < 0 or r0 + h > image.height or c0 + w > image.width:
        raise ValueError(
            f"crop window {origin}+{size} is outside {image.height}x{image.width} raster"
        )
    for i, m in enumerate(maps):
        if m.data.shape != (image.height, image.width):
            raise ValueError(f"map {i} shape {m.data.shape} does not match image")
    img = Image(image.data[r0 : r0 + h, c0 : c0 + w])
    out = tuple(LabelMap(m.data[r0 : r0 + h, c0 : c0 + w]) for m in maps)
    return img, out


def _check_dims(image: Image, maps: Sequence[LabelMap]):
    for i, m in enumerate(maps):
        if m.data.shape != (image.height, image.width):
            raise ValueError(f"map {i} shape {m.data.shape} does not match image")


def flip_h(image: Image, maps: Sequence[LabelMap]) -> tuple[Image, tuple[LabelMap, ...]]:
    """Mirror image and maps left-right."""
    _check_dims(image, maps)
    img = Image(image.data[:, ::-1])
    return img, tuple(LabelMap(m.data[:, ::-1]) for m in maps)


def flip_v(image: Image, maps: Sequence[LabelMap]) -> tuple[Image, tuple[LabelMap, ...]]:
    """Mirror image and maps top-bottom."""
    _check_dims(image, maps)
    img = Image(image.data[::-1, :])
    return img, tuple(LabelMap(m.data[::-1, :]) for m in maps)


def rot90(
    image: Image, maps: Sequence[LabelMap], k: int
) -> tuple[Image, tuple[LabelMap, ...]]:
    """Rotate image and maps by k counter-clockwise quarter-turns."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be one of 0..3 quarter-turns, got {k}")
    _check_dims(image, maps)
    img = Image(np.rot90(image.data, k, axes=(0, 1)))
    return img, tuple(LabelMap(np.rot90(m.data, k)) for m in maps)


# ---------------------------------------------------------------------------
# tensor layout helpers

def image_chw(image: Image) -> np.ndarray:
    """(H, W, 3) -> (3, H, W) float64 view for network input."""
    return np.ascontiguousarray(image.data.transpose(2, 0, 1))


def hwc_chw(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.transpose(2, 0, 1))
