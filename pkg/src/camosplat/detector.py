"""Seeded differentiable surrogate detector and the detection loss.

The detector is a small fixed-weight conv stack (3x3 kernels, tanh in
between) whose final response map is mean-pooled over a grid of anchor
boxes at three scales; each pooled value maps through a gain and sigmoid to
a confidence. Weights are regenerated from the seed, so the serialized form
is just ``{seed, strides, scales, threshold}``. Both the forward pass and
the gradient of a selected confidence w.r.t. the input pixels are analytic.

The loss follows the usual adversarial-detection convention: pick the box
with maximal IoU against the ground truth and take its confidence; if no
box overlaps, the frame counts as already evaded (loss 0, index -1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError
from .rng import normal_array, uniform_array
from .scene import GroundTruthBox

DEFAULT_SCALES = (16, 32, 64)
DEFAULT_THRESHOLD = 0.05
_HIDDEN = 6
_GAIN = 8.0


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValidationError("detection: degenerate box")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("detection: confidence outside [0, 1]")


def _conv2d(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution; x is (H, W, Cin), k is (3, 3, Cin, Cout)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    return np.einsum("hwcij,ijco->hwo", win, k) + b


def _conv2d_input_grad(dy: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of ``_conv2d`` w.r.t. its input (transposed convolution)."""
    dyp = np.pad(dy, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(dyp, (3, 3), axis=(0, 1))  # (H, W, Cout, 3, 3)
    k_rot = k[::-1, ::-1]
    return np.einsum("hwoij,ijco->hwc", win, k_rot)


def _integral(x: np.ndarray) -> np.ndarray:
    s = np.cumsum(np.cumsum(x, axis=0), axis=1)
    return np.pad(s, ((1, 0), (1, 0)))


@dataclass
class SurrogateDetector:
    """Deterministic differentiable scorer standing in for a real detector."""

    seed: int
    scales: tuple[int, ...] = DEFAULT_SCALES
    threshold: float = DEFAULT_THRESHOLD
    weights: dict = field(init=False, repr=False)

    def __post_init__(self):
        if any(s < 2 or s % 2 for s in self.scales):
            raise ValidationError("anchor scales must be even and >= 2")
        self.weights = self._draw_weights()

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(s // 2 for s in self.scales)

    def _draw_weights(self) -> dict:
        shapes = {
            "k1": (3, 3, 3, _HIDDEN),
            "b1": (_HIDDEN,),
            "k2": (3, 3, _HIDDEN, _HIDDEN),
            "b2": (_HIDDEN,),
            "k3": (3, 3, _HIDDEN, 1),
            "b3": (1,),
        }
        out, offset = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            fan_in = int(np.prod(shape[:3])) if name.startswith("k") else 1
            scale = np.sqrt(1.0 / fan_in) if name.startswith("k") else 0.1
            out[name] = (normal_array(self.seed, n, start=offset) * scale).reshape(shape)
            offset += n
        # Per-scale score bias, drawn last so confidences start spread out.
        nb = len(self.scales)
        out["score_bias"] = uniform_array(self.seed ^ 0xA5C3, nb) * 0.6 + 0.2
        return out

    def spec(self) -> dict:
        """Serializable description; weights regenerate from the seed."""
        return {
            "seed": self.seed,
            "strides": list(self.strides),
            "scales": list(self.scales),
            "threshold": self.threshold,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "SurrogateDetector":
        det = cls(
            seed=int(spec["seed"]),
            scales=tuple(int(s) for s in spec.get("scales", DEFAULT_SCALES)),
            threshold=float(spec.get("threshold", DEFAULT_THRESHOLD)),
        )
        if "strides" in spec:
            got = tuple(int(s) for s in spec["strides"])
            if got != det.strides:
                raise ValidationError(f"detector strides {got} inconsistent with scales")
        return det

    def anchor_grid(self, width: int, height: int) -> list[tuple[int, int, int, int, int]]:
        """(xmin, ymin, xmax, ymax, scale_index) boxes tiled over the image."""
        self._check_dims(width, height)
        anchors = []
        for si, size in enumerate(self.scales):
            stride = size // 2
            if size > width or size > height:
                continue
            for y in range(0, height - size + 1, stride):
                for x in range(0, width - size + 1, stride):
                    anchors.append((x, y, x + size, y + size, si))
        return anchors

    def _check_dims(self, width: int, height: int) -> None:
        for size in self.scales:
            stride = size // 2
            if size > width or size > height:
                continue
            if width % stride or height % stride:
                raise ValidationError(
                    f"image {width}x{height} not divisible by anchor stride {stride}"
                )

    def _forward(self, image: np.ndarray):
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError("detector input must be H x W x 3")
        w = self.weights
        z1 = _conv2d(img, w["k1"], w["b1"])
        a1 = np.tanh(z1)
        z2 = _conv2d(a1, w["k2"], w["b2"])
        a2 = np.tanh(z2)
        resp = _conv2d(a2, w["k3"], w["b3"])[:, :, 0]
        return img, a1, a2, resp

    def confidences(self, image: np.ndarray) -> tuple[np.ndarray, list]:
        """Confidence per anchor plus the anchor list, in anchor order."""
        img, _, _, resp = self._forward(image)
        h, wd = resp.shape
        anchors = self.anchor_grid(wd, h)
        integral = _integral(resp)
        conf = np.empty(len(anchors))
        for i, (x0, y0, x1, y1, si) in enumerate(anchors):
            area = (x1 - x0) * (y1 - y0)
            pooled = (
                integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
            ) / area
            conf[i] = 1.0 / (1.0 + np.exp(-(_GAIN * pooled + self.weights["score_bias"][si])))
        return conf, anchors

    def detect(self, image: np.ndarray) -> list[Detection]:
        """All anchors above the confidence threshold, sorted descending
        (ties by anchor index); deterministic."""
        conf, anchors = self.confidences(image)
        order = np.argsort(-conf, kind="stable")
        out = []
        for i in order:
            if conf[i] > self.threshold:
                x0, y0, x1, y1, _ = anchors[i]
                out.append(Detection((float(x0), float(y0), float(x1), float(y1)), float(conf[i])))
        return out

    def confidence_gradient(self, image: np.ndarray, anchor_index: int) -> np.ndarray:
        """d(confidence of one anchor) / d(pixels), analytic."""
        img, a1, a2, resp = self._forward(image)
        h, wd = resp.shape
        anchors = self.anchor_grid(wd, h)
        x0, y0, x1, y1, si = anchors[anchor_index]
        area = (x1 - x0) * (y1 - y0)
        integral = _integral(resp)
        pooled = (
            integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
        ) / area
        conf = 1.0 / (1.0 + np.exp(-(_GAIN * pooled + self.weights["score_bias"][si])))

        d_resp = np.zeros((h, wd, 1))
        d_resp[y0:y1, x0:x1, 0] = conf * (1.0 - conf) * _GAIN / area
        w = self.weights
        d_a2 = _conv2d_input_grad(d_resp, w["k3"]) * (1.0 - a2 * a2)
        d_a1 = _conv2d_input_grad(d_a2, w["k2"]) * (1.0 - a1 * a1)
        return _conv2d_input_grad(d_a1, w["k1"])


def detect(det: SurrogateDetector, image: np.ndarray) -> list[Detection]:
    return det.detect(image)


def iou(a, b) -> float:
    """Intersection over union of two (xmin, ymin, xmax, ymax) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    if ax0 >= ax1 or ay0 >= ay1 or bx0 >= bx1 or by0 >= by1:
        raise ValidationError("iou: degenerate box")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def detection_loss(dets: list[Detection], gt: GroundTruthBox) -> tuple[float, int]:
    """Confidence of the box with maximal IoU against the ground truth.

    Returns (loss, selected_index); (0.0, -1) when nothing overlaps the
    target, i.e. the frame is already evaded.
    """
    gt.validate()
    best_i, best_iou = -1, 0.0
    for i, d in enumerate(dets):
        v = iou(d.box, gt.as_tuple())
        if v > best_iou:  # strict: ties keep the lowest index
            best_i, best_iou = i, v
    if best_i < 0:
        return 0.0, -1
    return dets[best_i].confidence, best_i


def loss_gradient(
    det: SurrogateDetector, image: np.ndarray, gt: GroundTruthBox
) -> tuple[float, np.ndarray]:
    """Detection loss and its gradient w.r.t. the image pixels.

    The argmax box selection is treated as locally constant; the sentinel
    (no-overlap) case returns a zero gradient.
    """
    conf, anchors = det.confidences(image)
    order = np.argsort(-conf, kind="stable")
    dets, anchor_ids = [], []
    for i in order:
        if conf[i] > det.threshold:
            x0, y0, x1, y1, _ = anchors[i]
            dets.append(Detection((float(x0), float(y0), float(x1), float(y1)), float(conf[i])))
            anchor_ids.append(int(i))
    loss, sel = detection_loss(dets, gt)
    if sel < 0:
        return 0.0, np.zeros_like(np.asarray(image, dtype=np.float64))
    return loss, det.confidence_gradient(image, anchor_ids[sel])
