"""Tiny per-pixel text detector: conv-relu stack ending in a sigmoid.

Two forward routes share the same numeric kernels: :func:`forward_scores`
builds the differentiable graph for training, while :func:`predict` /
:func:`predict_batch` run a plain-array pass for inference (never recorded,
bitwise identical to the differentiable route).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .params import ParamSet
from .tensor import ShapeError, Tensor, conv2d, masked_bce, relu, sigmoid
from .tensor import _conv3_raw  # shared conv kernel keeps both routes identical

logger = logging.getLogger(__name__)

DEFAULT_MIN_AREA = 8
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class DetectorConfig:
    channels: tuple[int, ...] = (1, 8, 8, 1)
    kernel: int = 3
    init_scale: float = 0.1

    def __post_init__(self):
        if len(self.channels) < 3:
            raise ValueError("detector needs at least 2 layers")
        if self.channels[0] != 1 or self.channels[-1] != 1:
            raise ValueError("detector channels must start and end at 1")
        if self.kernel != 3:
            raise ValueError("only 3x3 kernels are supported")

    def num_layers(self) -> int:
        return len(self.channels) - 1

    def param_count(self) -> int:
        total = 0
        for cin, cout in zip(self.channels, self.channels[1:]):
            total += cout * cin * self.kernel * self.kernel + cout
        return total


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel text probability map; same spatial shape as its input."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ShapeError(f"ProbMap must be 2-D, got {v.shape}")
        if not ((v > 0.0).all() and (v < 1.0).all()):
            raise ValueError("ProbMap values must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in half-open pixel coordinates [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    score: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {(self.x_min, self.y_min, self.x_max, self.y_max)}")

    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def coords(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def init_detector(cfg: DetectorConfig, seed: int) -> ParamSet:
    """Seeded uniform(-init_scale, init_scale) weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for i, (cin, cout) in enumerate(zip(cfg.channels, cfg.channels[1:])):
        arrays[f"conv{i}.weight"] = rng.uniform(
            -cfg.init_scale, cfg.init_scale, size=(cout, cin, 3, 3)
        )
        arrays[f"conv{i}.bias"] = np.zeros(cout)
    return ParamSet.from_arrays(arrays)


def _layer_count(params: ParamSet) -> int:
    n = sum(1 for name in params if name.endswith(".weight"))
    if n < 2:
        raise ShapeError("parameter set does not look like a conv stack")
    return n


def forward_scores(params: ParamSet, x: Tensor) -> Tensor:
    """Differentiable forward pass on an (N, 1, H, W) batch; output same shape."""
    if x.data.ndim != 4:
        raise ShapeError(f"forward_scores expects (N,1,H,W), got {x.shape}")
    n_layers = _layer_count(params)
    h = x
    for i in range(n_layers):
        h = conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        if i < n_layers - 1:
            h = relu(h)
    return sigmoid(h)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, pos, 1.0 - pos)


def predict_batch(params: ParamSet, images: np.ndarray) -> np.ndarray:
    """Inference on an (N, H, W) stack of images in [0,1]; returns (N, H, W) probabilities."""
    if images.ndim != 3:
        raise ShapeError(f"predict_batch expects (N,H,W), got {images.shape}")
    n_layers = _layer_count(params)
    h = images[:, None, :, :]
    for i in range(n_layers):
        h = _conv3_raw(h, params[f"conv{i}.weight"].data)
        h += params[f"conv{i}.bias"].data[None, :, None, None]
        if i < n_layers - 1:
            np.maximum(h, 0.0, out=h)
    return _sigmoid_raw(h)[:, 0, :, :]


def predict(params: ParamSet, image: np.ndarray) -> ProbMap:
    """Probability map for one (H, W) image in [0,1]."""
    if image.ndim != 2:
        raise ShapeError(f"predict expects a single (H,W) image, got {image.shape}")
    return ProbMap(predict_batch(params, image[None])[0])


def det_loss(pred: Tensor, gt_mask: np.ndarray, valid_mask: np.ndarray | None = None) -> Tensor:
    """Mean masked BCE between a predicted map and a binary ground-truth mask."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    if valid_mask is None:
        valid = np.ones_like(gt)
    else:
        valid = np.asarray(valid_mask, dtype=np.float64)
    if gt.shape != pred.shape or valid.shape != pred.shape:
        raise ShapeError(
            f"det_loss: shapes differ (pred {pred.shape}, gt {gt.shape}, valid {valid.shape})"
        )
    if valid.sum() == 0:
        logger.warning("det_loss: no valid pixels, loss defined as 0")
    return masked_bce(pred, Tensor(gt), Tensor(valid))


def binarize(pm: ProbMap | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Hard map: pixel is 1 iff its probability is >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    values = pm.values if isinstance(pm, ProbMap) else np.asarray(pm)
    return (values >= threshold).astype(np.uint8)


def extract_boxes(
    binary: np.ndarray,
    min_area: int = DEFAULT_MIN_AREA,
    prob: np.ndarray | None = None,
) -> list[Box]:
    """Bounding boxes of 4-connected components with at least min_area pixels.

    Boxes come back sorted by (y_min, x_min). The score is the mean of ``prob``
    inside the box when given, else the mean of the binary map there.
    """
    b = np.asarray(binary) != 0
    h, w = b.shape
    seen = np.zeros_like(b, dtype=bool)
    boxes: list[Box] = []
    score_src = prob if prob is not None else b.astype(np.float64)
    ys, xs = np.nonzero(b)
    for y0, x0 in zip(ys.tolist(), xs.tolist()):
        if seen[y0, x0]:
            continue
        stack = [(y0, x0)]
        seen[y0, x0] = True
        area = 0
        ymin = ymax = y0
        xmin = xmax = x0
        while stack:
            y, x = stack.pop()
            area += 1
            ymin = min(ymin, y)
            ymax = max(ymax, y)
            xmin = min(xmin, x)
            xmax = max(xmax, x)
            if y > 0 and b[y - 1, x] and not seen[y - 1, x]:
                seen[y - 1, x] = True
                stack.append((y - 1, x))
            if y + 1 < h and b[y + 1, x] and not seen[y + 1, x]:
                seen[y + 1, x] = True
                stack.append((y + 1, x))
            if x > 0 and b[y, x - 1] and not seen[y, x - 1]:
                seen[y, x - 1] = True
                stack.append((y, x - 1))
            if x + 1 < w and b[y, x + 1] and not seen[y, x + 1]:
                seen[y, x + 1] = True
                stack.append((y, x + 1))
        if area < min_area:
            continue
        score = float(score_src[ymin : ymax + 1, xmin : xmax + 1].mean())
        boxes.append(Box(xmin, ymin, xmax + 1, ymax + 1, score=score))
    boxes.sort(key=lambda bx: (bx.y_min, bx.x_min))
    return boxes
