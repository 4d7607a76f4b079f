"""Deterministic toy scene generator: two visually distinct domains.

The synthetic domain is flat and high-contrast; the real domain is textured,
dimmer, blurred, and its glyph instances are slightly rotated. "Text" is a row
of seven-segment style glyph blocks joined by a baseline stroke, so every
instance is one 4-connected component and its mask is exact by construction.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .detector import Box

logger = logging.getLogger(__name__)

BASE_BACKGROUND = 0.08
MIN_INSTANCE_AREA = 12
PLACEMENT_MARGIN = 2
TEXTURE_CELL = 8


class DatasetError(ValueError):
    """A dataset file is missing or malformed; the message names the path."""


class Domain(Enum):
    SYNTHETIC = "synthetic"
    REAL = "real"


@dataclass(frozen=True)
class DomainConfig:
    background_noise_std: float = 0.02
    background_texture_amp: float = 0.0
    stroke_intensity_range: tuple[float, float] = (0.85, 1.0)
    instance_rotation_max_deg: float = 0.0
    blur_kernel: str = "none"  # "none" or "box3"
    instance_count_range: tuple[int, int] = (1, 4)
    image_size: int = 64

    def __post_init__(self):
        lo, hi = self.stroke_intensity_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"stroke intensity range {self.stroke_intensity_range} invalid")
        clo, chi = self.instance_count_range
        if not 1 <= clo <= chi:
            raise ValueError(f"instance count range {self.instance_count_range} invalid")
        if self.background_noise_std < 0 or self.background_texture_amp < 0:
            raise ValueError("noise/texture amplitudes must be >= 0")
        if self.blur_kernel not in ("none", "box3"):
            raise ValueError(f"unknown blur kernel {self.blur_kernel!r}")

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


SYNTHETIC_DEFAULT = DomainConfig()
REAL_DEFAULT = DomainConfig(
    background_noise_std=0.05,
    background_texture_amp=0.15,
    stroke_intensity_range=(0.45, 0.9),
    instance_rotation_max_deg=15.0,
    blur_kernel="box3",
)


def default_config(domain: Domain) -> DomainConfig:
    return SYNTHETIC_DEFAULT if domain is Domain.SYNTHETIC else REAL_DEFAULT


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) uint8
    boxes: tuple[Box, ...]
    domain: Domain
    sample_id: int


@dataclass(frozen=True)
class UnlabeledSample:
    """Image-only view; mask and boxes are not reachable from this type."""

    image: np.ndarray
    sample_id: int


def strip_labels(sample: LabeledSample) -> UnlabeledSample:
    return UnlabeledSample(image=sample.image, sample_id=sample.sample_id)


# ---------------------------------------------------------------------------
# glyph rendering

_CELL_H, _CELL_W = 7, 5
# seven-segment strokes inside a 5x7 cell: (rows, cols) index pairs
_SEGMENTS = {
    "top": (slice(0, 1), slice(0, 5)),
    "mid": (slice(3, 4), slice(0, 5)),
    "bot": (slice(6, 7), slice(0, 5)),
    "tl": (slice(0, 4), slice(0, 1)),
    "bl": (slice(3, 7), slice(0, 1)),
    "tr": (slice(0, 4), slice(4, 5)),
    "br": (slice(3, 7), slice(4, 5)),
}
_OPTIONAL = ("top", "mid", "tl", "bl", "tr", "br")
_BRIDGE_ORDER = ("bl", "br", "tl", "tr", "mid", "top")


def _component_count(cell: np.ndarray) -> int:
    seen = np.zeros_like(cell, dtype=bool)
    h, w = cell.shape
    count = 0
    for y0 in range(h):
        for x0 in range(w):
            if not cell[y0, x0] or seen[y0, x0]:
                continue
            count += 1
            stack = [(y0, x0)]
            seen[y0, x0] = True
            while stack:
                y, x = stack.pop()
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and cell[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
    return count


def _glyph_cell(rng: np.random.Generator) -> np.ndarray:
    cell = np.zeros((_CELL_H, _CELL_W), dtype=bool)
    cell[_SEGMENTS["bot"]] = True  # anchors the char to the baseline
    extra = int(rng.integers(2, len(_OPTIONAL) + 1))
    for idx in rng.choice(len(_OPTIONAL), size=extra, replace=False):
        cell[_SEGMENTS[_OPTIONAL[int(idx)]]] = True
    for name in _BRIDGE_ORDER:  # keep the char one 4-connected piece
        if _component_count(cell) == 1:
            break
        cell[_SEGMENTS[name]] = True
    return cell


def _rotate_nn(stamp: np.ndarray, angle_deg: float) -> np.ndarray:
    """Nearest-neighbor rotation of a boolean stamp, cropped to its extent."""
    theta = np.deg2rad(angle_deg)
    h, w = stamp.shape
    diag = int(np.ceil(np.hypot(h, w))) + 2
    cy, cx = (diag - 1) / 2.0, (diag - 1) / 2.0
    yy, xx = np.mgrid[0:diag, 0:diag]
    # inverse map: rotate output coords back into the source frame
    sy = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta) + (h - 1) / 2.0
    sx = (yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta) + (w - 1) / 2.0
    syi = np.rint(sy).astype(int)
    sxi = np.rint(sx).astype(int)
    inside = (syi >= 0) & (syi < h) & (sxi >= 0) & (sxi < w)
    out = np.zeros((diag, diag), dtype=bool)
    out[inside] = stamp[syi[inside], sxi[inside]]
    ys, xs = np.nonzero(out)
    return out[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]


def _instance_stamp(rng: np.random.Generator, cfg: DomainConfig) -> np.ndarray:
    k = int(rng.integers(1, 4))
    width = _CELL_W * k + 2 * (k - 1)
    base = np.zeros((_CELL_H + 1, width), dtype=bool)
    for i in range(k):
        base[:_CELL_H, i * (_CELL_W + 2) : i * (_CELL_W + 2) + _CELL_W] = _glyph_cell(rng)
    base[_CELL_H, :] = True  # baseline joins the chars into one component
    stamp = np.repeat(np.repeat(base, 2, axis=0), 2, axis=1)
    if cfg.instance_rotation_max_deg > 0:
        for _ in range(20):
            angle = float(rng.uniform(-cfg.instance_rotation_max_deg, cfg.instance_rotation_max_deg))
            rotated = _rotate_nn(stamp, angle)
            if _component_count(rotated) == 1:
                return rotated
        logger.debug("rotation kept breaking connectivity; using axis-aligned stamp")
    return stamp


def _box_blur3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return acc / 9.0


def _background(rng: np.random.Generator, cfg: DomainConfig) -> np.ndarray:
    size = cfg.image_size
    bg = np.full((size, size), BASE_BACKGROUND)
    if cfg.background_texture_amp > 0:
        cells = -(-size // TEXTURE_CELL)
        coarse = rng.random((cells, cells))
        blotches = np.kron(coarse, np.ones((TEXTURE_CELL, TEXTURE_CELL)))
        bg = bg + cfg.background_texture_amp * blotches[:size, :size]
    if cfg.background_noise_std > 0:
        bg = bg + rng.normal(0.0, cfg.background_noise_std, (size, size))
    return bg


def gen_sample(seed: int, domain: Domain, cfg: DomainConfig) -> LabeledSample:
    """Deterministic sample for (seed, domain, cfg); seed becomes the sample id."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    n_wanted = int(rng.integers(cfg.instance_count_range[0], cfg.instance_count_range[1] + 1))
    image = _background(rng, cfg)
    mask = np.zeros((size, size), dtype=np.uint8)
    boxes: list[Box] = []
    for _ in range(n_wanted):
        stamp = _instance_stamp(rng, cfg)
        if stamp.sum() < MIN_INSTANCE_AREA:
            continue
        sh, sw = stamp.shape
        if sh > size or sw > size:
            continue
        intensity = float(rng.uniform(*cfg.stroke_intensity_range))
        placed = False
        for _ in range(100):
            y0 = int(rng.integers(0, size - sh + 1))
            x0 = int(rng.integers(0, size - sw + 1))
            candidate = Box(x0, y0, x0 + sw, y0 + sh)
            m = PLACEMENT_MARGIN
            clashes = any(
                not (
                    candidate.x_max + m <= b.x_min
                    or b.x_max + m <= candidate.x_min
                    or candidate.y_max + m <= b.y_min
                    or b.y_max + m <= candidate.y_min
                )
                for b in boxes
            )
            if not clashes:
                placed = True
                break
        if not placed:
            continue  # reduce instance count rather than fail
        region = (slice(y0, y0 + sh), slice(x0, x0 + sw))
        image[region][stamp] = intensity
        mask[region][stamp] = 1
        boxes.append(candidate)
    if cfg.blur_kernel == "box3":
        image = _box_blur3(image)
    image = np.clip(image, 0.0, 1.0)
    boxes.sort(key=lambda b: (b.y_min, b.x_min))
    return LabeledSample(
        image=image, mask=mask, boxes=tuple(boxes), domain=domain, sample_id=seed
    )


# ---------------------------------------------------------------------------
# PGM + JSON dataset files


def write_pgm(path: Path, gray: np.ndarray) -> None:
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"{path}: cannot read ({e})") from e
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: unexpected end of file in header")
        return blob[start:pos]

    if token() != b"P5":
        raise DatasetError(f"{path}: not a P5 PGM")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise DatasetError(f"{path}: malformed PGM header") from e
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = blob[pos : pos + w * h]
    if len(raster) < w * h:
        raise DatasetError(f"{path}: unexpected end of file in raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Manifest:
    directory: Path
    ids: tuple[int, ...]
    domain: Domain
    config_hash: str
    hash_matches: bool | None = None


def write_dataset(
    directory: Path,
    count: int,
    domain: Domain,
    cfg: DomainConfig,
    base_seed: int,
) -> Manifest:
    if count < 1:
        raise ValueError("count must be >= 1")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = tuple(range(base_seed, base_seed + count))
    for sid in ids:
        sample = gen_sample(sid, domain, cfg)
        write_pgm(directory / f"{sid}.pgm", quantize_image(sample.image))
        write_pgm(directory / f"{sid}.mask.pgm", sample.mask * np.uint8(255))
        annotation = {
            "sample_id": sid,
            "domain": domain.value,
            "boxes": [list(b.coords()) for b in sample.boxes],
            "mask_file": f"{sid}.mask.pgm",
        }
        (directory / f"{sid}.json").write_text(json.dumps(annotation, sort_keys=True))
    manifest = {
        "ids": list(ids),
        "domain": domain.value,
        "config_hash": cfg.hash(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    return Manifest(directory=directory, ids=ids, domain=domain, config_hash=cfg.hash())


def load_sample(path: Path) -> LabeledSample:
    path = Path(path)
    try:
        annotation = json.loads(path.read_text())
    except OSError as e:
        raise DatasetError(f"{path}: cannot read ({e})") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: corrupt annotation ({e})") from e
    try:
        sid = int(annotation["sample_id"])
        domain = Domain(annotation["domain"])
        boxes = tuple(Box(*map(int, b)) for b in annotation["boxes"])
        mask_file = annotation["mask_file"]
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetError(f"{path}: bad annotation fields ({e})") from e
    image = read_pgm(path.with_suffix(".pgm")).astype(np.float64) / 255.0
    mask = (read_pgm(path.parent / mask_file) > 127).astype(np.uint8)
    return LabeledSample(image=image, mask=mask, boxes=boxes, domain=domain, sample_id=sid)


def load_manifest(directory: Path, expected_cfg: DomainConfig | None = None) -> Manifest:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        data = json.loads(mpath.read_text())
    except OSError as e:
        raise DatasetError(f"{mpath}: cannot read ({e})") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: corrupt manifest ({e})") from e
    matches: bool | None = None
    if expected_cfg is not None:
        matches = data["config_hash"] == expected_cfg.hash()
        if not matches:
            logger.warning(
                "%s: config hash %s does not match expected %s",
                mpath,
                data["config_hash"],
                expected_cfg.hash(),
            )
    return Manifest(
        directory=directory,
        ids=tuple(int(i) for i in data["ids"]),
        domain=Domain(data["domain"]),
        config_hash=data["config_hash"],
        hash_matches=matches,
    )


def load_split(manifest: Manifest) -> list[LabeledSample]:
    return [load_sample(manifest.directory / f"{sid}.json") for sid in manifest.ids]
