"""Weak photometric jitter and strong geometric transforms with label transport.

Strong transforms are exact pixel permutations or subsettings (right-angle
rotations, crops, nearest-neighbor 2x scaling), so a teacher map moved with
:func:`transport_map` lands bit-exactly where the transformed image's pixels
came from. Weak jitter never touches geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRONG_KINDS = ("rot90", "rot180", "rot270", "crop", "scale")
ROTATION_MENU = ("rot90", "rot180", "rot270")
MULTI_AUG_MENU = ("rot90", "rot180", "rot270", "crop", "scale")
SCALE_FACTORS = (0.5, 2.0)


@dataclass(frozen=True)
class GeoTransform:
    """One exact geometric transform tied to the shape it applies to.

    kind: "identity", "rot90", "rot180", "rot270", "crop" or "scale".
    rot90 maps out[i, j] = src[H-1-j, i] (counter-clockwise in row/col coords).
    """

    kind: str
    source_shape: tuple[int, int]
    crop: tuple[int, int, int, int] | None = None  # x, y, w, h
    factor: float | None = None

    def __post_init__(self):
        h, w = self.source_shape
        if self.kind not in ("identity",) + STRONG_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "crop":
            if self.crop is None:
                raise ValueError("crop transform needs a window")
            x, y, cw, ch = self.crop
            if cw <= 0 or ch <= 0 or x < 0 or y < 0 or x + cw > w or y + ch > h:
                raise ValueError(f"crop window {self.crop} out of bounds for {self.source_shape}")
        elif self.kind == "scale":
            if self.factor not in SCALE_FACTORS:
                raise ValueError(f"scale factor must be one of {SCALE_FACTORS}, got {self.factor}")

    def output_shape(self) -> tuple[int, int]:
        h, w = self.source_shape
        if self.kind in ("rot90", "rot270"):
            return (w, h)
        if self.kind == "crop":
            return (self.crop[3], self.crop[2])
        if self.kind == "scale":
            if self.factor == 0.5:
                return ((h + 1) // 2, (w + 1) // 2)
            return (2 * h, 2 * w)
        return (h, w)


def identity_transform(shape: tuple[int, int]) -> GeoTransform:
    return GeoTransform("identity", tuple(shape))


@dataclass(frozen=True)
class WeakJitter:
    brightness_max: float = 0.2
    contrast_range: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        lo, hi = self.contrast_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"contrast range {self.contrast_range} is not well-ordered")
        if self.brightness_max < 0.0:
            raise ValueError("brightness_max must be >= 0")


@dataclass(frozen=True)
class AugSpec:
    weak: WeakJitter = WeakJitter()
    strong_enabled: bool = True
    strong_menu: tuple[str, ...] = ROTATION_MENU

    def __post_init__(self):
        if self.strong_enabled and not self.strong_menu:
            raise ValueError("strong_menu must be non-empty when strong_enabled")
        bad = [k for k in self.strong_menu if k not in STRONG_KINDS]
        if bad:
            raise ValueError(f"unknown strong transform kinds: {bad}")


def color_jitter(
    image: np.ndarray,
    seed: int,
    jitter: WeakJitter = WeakJitter(),
) -> np.ndarray:
    """clip(contrast * (image - 0.5) + 0.5 + brightness, 0, 1), seeded draws."""
    rng = np.random.default_rng(seed)
    brightness = rng.uniform(-jitter.brightness_max, jitter.brightness_max)
    contrast = rng.uniform(*jitter.contrast_range)
    return np.clip(contrast * (image - 0.5) + 0.5 + brightness, 0.0, 1.0)


def apply_geo(image: np.ndarray, t: GeoTransform) -> np.ndarray:
    """Apply a transform to the trailing two (H, W) axes; leading axes pass through."""
    if image.shape[-2:] != t.source_shape:
        raise ValueError(
            f"transform expects spatial shape {t.source_shape}, image has {image.shape[-2:]}"
        )
    if t.kind == "identity":
        out = image
    elif t.kind == "rot90":
        out = np.rot90(image, -1, axes=(-2, -1))
    elif t.kind == "rot180":
        out = np.rot90(image, 2, axes=(-2, -1))
    elif t.kind == "rot270":
        out = np.rot90(image, 1, axes=(-2, -1))
    elif t.kind == "crop":
        x, y, w, h = t.crop
        out = image[..., y : y + h, x : x + w]
    else:  # scale
        if t.factor == 0.5:
            out = image[..., ::2, ::2]
        else:
            out = np.repeat(np.repeat(image, 2, axis=-2), 2, axis=-1)
    return np.ascontiguousarray(out)


def transport_map(map_values: np.ndarray, t: GeoTransform) -> tuple[np.ndarray, np.ndarray]:
    """Move a label/prediction map into the transformed frame.

    Returns (moved map, validity mask over the output frame). Every kind in the
    current menu maps each output pixel to exactly one source pixel, so the
    mask is all ones; it narrows once confidence filtering applies downstream.
    """
    moved = apply_geo(map_values, t)
    valid = np.ones(t.output_shape(), dtype=np.uint8)
    return moved, valid


def sample_strong(seed: int, spec: AugSpec, shape: tuple[int, int]) -> GeoTransform:
    """Draw one transform uniformly over the menu kinds, then its parameters."""
    if not spec.strong_enabled:
        raise ValueError("sample_strong requires strong_enabled")
    rng = np.random.default_rng(seed)
    kind = spec.strong_menu[int(rng.integers(len(spec.strong_menu)))]
    h, w = shape
    if kind == "crop":
        cw, ch = w // 2, h // 2
        x = int(rng.integers(0, w - cw + 1))
        y = int(rng.integers(0, h - ch + 1))
        return GeoTransform("crop", (h, w), crop=(x, y, cw, ch))
    if kind == "scale":
        factor = SCALE_FACTORS[int(rng.integers(2))]
        return GeoTransform("scale", (h, w), factor=factor)
    return GeoTransform(kind, (h, w))
