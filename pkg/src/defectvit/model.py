"""Detector: encoder -> shared CNN trunk -> classification / regression heads.

The classification head emits one softmax distribution per anchor and the
regression head one sigmoid 4-vector per anchor. ``predict`` turns those into
boxes: drop background anchors, undo the offset scaling, decode against the
anchors, clip, and run class-wise NMS.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .anchors import AnchorGrid, BBox, MinMaxScaler, decode_offsets, nms_indices
from .tensor import Tensor
from .vit import ConfigError, ViTConfig, encode, init_vit_weights, passthrough_encode


@dataclass(frozen=True)
class HeadConfig:
    num_anchors: int
    num_classes: int
    cnn_channels: tuple[int, ...] = (64, 32)
    cnn_kernel: int = 3
    mlp_hidden: tuple[int, ...] = (256,)
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "cnn_channels", tuple(self.cnn_channels))
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        if self.num_classes < 2:
            raise ConfigError("num_classes counts background and must be >= 2")
        if self.cnn_kernel % 2 == 0:
            raise ConfigError("cnn_kernel must be odd so 'same' padding keeps the grid size")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def class_outputs(self) -> int:
        return self.num_anchors * self.num_classes

    @property
    def box_outputs(self) -> int:
        return self.num_anchors * 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d


@dataclass
class DetectionOutput:
    class_probs: Tensor
    offsets: Tensor


def _he(rng, shape, fan_in) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_head_weights(head: HeadConfig, in_channels: int, grid: int, rng: np.random.Generator) -> dict[str, Tensor]:
    w: dict[str, Tensor] = {}
    c = in_channels
    k = head.cnn_kernel
    for i, co in enumerate(head.cnn_channels):
        w[f"trunk.conv{i}.w"] = _he(rng, (co, c, k, k), c * k * k)
        w[f"trunk.conv{i}.b"] = _zeros((co, 1, 1))
        c = co
    flat = c * grid * grid
    for branch, out in (("cls", head.class_outputs), ("reg", head.box_outputs)):
        n = flat
        for j, h in enumerate(head.mlp_hidden):
            w[f"{branch}.fc{j}.w"] = _he(rng, (n, h), n)
            w[f"{branch}.fc{j}.b"] = _zeros((h,))
            n = h
        w[f"{branch}.out.w"] = Tensor(rng.normal(0.0, 0.01, size=(n, out)), requires_grad=True)
        w[f"{branch}.out.b"] = _zeros((out,))
    return w


def trunk(embeddings: Tensor, head: HeadConfig, weights: dict[str, Tensor]) -> Tensor:
    """(b, n, d) patch embeddings -> (b, flat) shared feature.

    The patch sequence is laid back out as a d-channel sqrt(n) x sqrt(n) grid.
    """
    b, n, d = embeddings.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ConfigError(f"patch count {n} is not a perfect square")
    x = T.reshape(T.transpose(embeddings, (0, 2, 1)), (b, d, g, g))
    pad = head.cnn_kernel // 2
    for i in range(len(head.cnn_channels)):
        x = T.relu(T.conv2d(x, weights[f"trunk.conv{i}.w"], stride=1, padding=pad) + weights[f"trunk.conv{i}.b"])
    return T.reshape(x, (b, -1))


def _mlp(x: Tensor, branch: str, head: HeadConfig, weights, training: bool, key, layer0: int) -> Tensor:
    for j in range(len(head.mlp_hidden)):
        x = T.relu(T.matmul(x, weights[f"{branch}.fc{j}.w"]) + weights[f"{branch}.fc{j}.b"])
        x = T.dropout(x, head.dropout_rate, training, (key[0], layer0 + j, key[1]))
    return T.matmul(x, weights[f"{branch}.out.w"]) + weights[f"{branch}.out.b"]


def heads(shared: Tensor, head: HeadConfig, weights: dict[str, Tensor], *, training: bool = False,
          key: tuple[int, int] = (0, 0)) -> DetectionOutput:
    b = shared.shape[0]
    logits = _mlp(shared, "cls", head, weights, training, key, 100)
    probs = T.softmax_lastdim(T.reshape(logits, (b, head.num_anchors, head.num_classes)))
    raw = _mlp(shared, "reg", head, weights, training, key, 200)
    offsets = T.sigmoid(T.reshape(raw, (b, head.num_anchors, 4)))
    return DetectionOutput(probs, offsets)


class Detector:
    """Holds configs and named weights; ``encoder`` is ``"vit"`` or ``"passthrough"``."""

    def __init__(self, vit: ViTConfig, head: HeadConfig, *, seed: int = 0, encoder: str = "vit",
                 weights: dict[str, Tensor] | None = None):
        if encoder not in ("vit", "passthrough"):
            raise ConfigError(f"unknown encoder {encoder!r}")
        self.vit = vit
        self.head = head
        self.encoder = encoder
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = init_vit_weights(vit, rng) if encoder == "vit" else {}
            weights.update(init_head_weights(head, self.embed_channels, vit.grid, rng))
        self.weights = weights
        self.check_weights()

    @property
    def embed_channels(self) -> int:
        return self.vit.embed_dim if self.encoder == "vit" else self.vit.patch_dim

    def check_weights(self) -> None:
        ref = Detector.__new__(Detector)
        ref.vit, ref.head, ref.encoder = self.vit, self.head, self.encoder
        rng = np.random.default_rng(0)
        expected = init_vit_weights(self.vit, rng) if self.encoder == "vit" else {}
        expected.update(init_head_weights(self.head, ref.embed_channels, self.vit.grid, rng))
        missing = sorted(set(expected) - set(self.weights))
        extra = sorted(set(self.weights) - set(expected))
        if missing or extra:
            raise ConfigError(f"weight names do not match config; missing={missing[:3]} unexpected={extra[:3]}")
        for name, t in expected.items():
            if self.weights[name].shape != t.shape:
                raise ConfigError(f"weight {name!r} has shape {self.weights[name].shape}, config implies {t.shape}")

    def parameters(self) -> dict[str, Tensor]:
        return self.weights

    def embed(self, images: Tensor, *, training: bool = False, key=(0, 0)) -> Tensor:
        if self.encoder == "vit":
            return encode(images, self.vit, self.weights, training=training, key=key)
        return passthrough_encode(images, self.vit)

    def forward(self, images: Tensor, *, training: bool = False, key=(0, 0)) -> DetectionOutput:
        """``images`` is (b, c, h, w) preprocessed input."""
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        emb = self.embed(images, training=training, key=key)
        shared = trunk(emb, self.head, self.weights)
        return heads(shared, self.head, self.weights, training=training, key=key)

    __call__ = forward


@dataclass
class Detection:
    box: BBox
    class_id: int
    score: float

    def as_tuple(self) -> tuple[BBox, int, float]:
        return (self.box, self.class_id, self.score)


@dataclass
class PredictParams:
    score_threshold: float = 0.5
    iou_threshold: float = 0.5
    diagnostics: dict = field(default_factory=lambda: {"invalid_boxes": 0})


def decode_predictions(class_probs: np.ndarray, offsets: np.ndarray, grid: AnchorGrid, scaler: MinMaxScaler,
                       params: PredictParams, scale: tuple[float, float] = (1.0, 1.0)) -> list[Detection]:
    """Post-process one image's (anchors, classes) probs and (anchors, 4) offsets.

    ``scale`` maps model-input pixels back to the caller's image (sx, sy).
    """
    k = class_probs.shape[-1]
    cls = np.argmax(class_probs, axis=1)
    keep = np.flatnonzero(cls != k - 1)
    if len(keep) == 0:
        return []
    scores = class_probs[keep, cls[keep]].astype(np.float64)
    boxes = decode_offsets(grid.boxes[keep], scaler.invert(offsets[keep]))
    size = float(grid.image_size)
    boxes = np.clip(boxes, 0.0, size)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    params.diagnostics["invalid_boxes"] = params.diagnostics.get("invalid_boxes", 0) + int(np.sum(~valid))
    keep, boxes, scores = keep[valid], boxes[valid], scores[valid]
    order = nms_indices(boxes, cls[keep], scores, params.iou_threshold, params.score_threshold)
    sx, sy = scale
    out = []
    for i in order:
        b = boxes[i]
        out.append(Detection(BBox(b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy, int(cls[keep[i]])), int(cls[keep[i]]),
                             float(scores[i])))
    return out


def predict(model: Detector, image: np.ndarray, scaler: MinMaxScaler, grid: AnchorGrid,
            params: PredictParams | None = None, scale: tuple[float, float] = (1.0, 1.0)) -> list[Detection]:
    """Detections for one preprocessed (c, h, w) image, in eval mode."""
    params = params or PredictParams()
    out = model.forward(Tensor(image[None]), training=False)
    return decode_predictions(out.class_probs.data[0], out.offsets.data[0], grid, scaler, params, scale)
