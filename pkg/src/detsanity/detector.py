"""Toy single-shot anchor-based detector: build, decode, train, evaluate.

Architecture (fixed): four stride-2 conv blocks, then two 1x1 conv heads
(class logits incl. background, and 4 box offsets) over one anchor per
grid cell. The grid stride is 16 px, so a 96 px input gives a 6x6 anchor
grid. The anchor side (56 px) and the synthetic object sizes (40-64 px)
are chosen together so every object reaches IoU >= 0.5 with its nearest
anchor, which is what the 0.5/0.4 positive/negative matching thresholds
require.

Box parameterization relative to the matched anchor (center cx, cy and
side s):

    x_center = cx + tx * s        width  = s * exp(tw)
    y_center = cy + ty * s        height = s * exp(th)

Decoded corners are clipped to the image only in reported detections;
gradient targets are built from the unclipped arithmetic (saliency.py).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Activation, Conv2d, DetectorModel
from .synthdata import SyntheticScene

GRID_STRIDE = 16
CHECKPOINT_MAGIC = b"DSCKPT\x01\n"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 96
    num_classes: int = 3
    anchor_scale: float = 56.0
    activation: str = "relu"  # "relu" or "smooth"
    seed: int = 0
    # channel plan keeps layer parameter counts spread so each default
    # cascading-randomization level touches a strictly larger layer set
    channels: tuple[int, int, int, int] = (10, 12, 12, 22)
    kernel: int = 5

    def __post_init__(self):
        if self.input_size % GRID_STRIDE != 0 or self.input_size < 2 * GRID_STRIDE:
            raise ValueError(
                f"input_size must be a multiple of {GRID_STRIDE} and >= "
                f"{2 * GRID_STRIDE}, got {self.input_size}"
            )
        if self.activation not in ("relu", "smooth"):
            raise ValueError(f"activation must be 'relu' or 'smooth', got {self.activation!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.anchor_scale > 0:
            raise ValueError("anchor_scale must be positive")
        if len(self.channels) != 4 or self.kernel % 2 != 1:
            raise ValueError("channels must have 4 entries and kernel must be odd")

    @property
    def grid(self) -> int:
        return self.input_size // GRID_STRIDE

    @property
    def n_anchors(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "anchor_scale": self.anchor_scale,
            "activation": self.activation,
            "seed": self.seed,
            "channels": list(self.channels),
            "kernel": self.kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["channels"] = tuple(d.get("channels", (8, 16, 24, 32)))
        return cls(**d)


@dataclass
class Detection:
    """One decoded detector output.

    ``anchor_index`` plus ``class_id`` are the differentiable handles: they
    identify the class-logit scalar and the four decoded-coordinate scalars
    that saliency targets rebuild on any model sharing this architecture.
    """

    box: tuple[float, float, float, float]
    class_id: int
    score: float
    anchor_index: int
    class_logit: float


def build(config: DetectorConfig) -> DetectorModel:
    """Deterministically initialized detector for the given config."""
    act = "relu" if config.activation == "relu" else "silu"
    k, pad = config.kernel, config.kernel // 2
    c = config.channels
    trunk = []
    in_ch = 3
    for i, out_ch in enumerate(c, start=1):
        trunk.append(Conv2d(f"conv{i}", in_ch, out_ch, k, stride=2, padding=pad))
        trunk.append(Activation(f"act{i}", act))
        in_ch = out_ch
    cls_head = Conv2d("cls_head", in_ch, config.num_classes + 1, 1)
    box_head = Conv2d("box_head", in_ch, 4, 1)
    model = DetectorModel(
        trunk, cls_head, box_head, input_shape=(1, 3, config.input_size, config.input_size)
    )
    rng = np.random.default_rng(config.seed)
    for layer in model.param_layers():
        layer.init_params(rng)
    return model


def anchor_centers(config: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    g = config.grid
    coords = (np.arange(g) + 0.5) * GRID_STRIDE
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    return gx.reshape(-1), gy.reshape(-1)


def anchor_boxes(config: DetectorConfig) -> np.ndarray:
    cx, cy = anchor_centers(config)
    h = config.anchor_scale / 2.0
    return np.stack([cx - h, cy - h, cx + h, cy + h], axis=1)


def image_to_input(image: np.ndarray) -> np.ndarray:
    """HWC [0,1] scene image -> NCHW model input."""
    return np.ascontiguousarray(image.transpose(2, 0, 1)[None])


def heads_to_anchor_layout(cls_raw: np.ndarray, box_raw: np.ndarray, config: DetectorConfig):
    """(1,C+1,G,G), (1,4,G,G) -> (A, C+1), (A, 4) with anchor a = gy*G+gx."""
    a = config.n_anchors
    expect_cls = (1, config.num_classes + 1, config.grid, config.grid)
    expect_box = (1, 4, config.grid, config.grid)
    if cls_raw.shape != expect_cls or box_raw.shape != expect_box:
        raise ValueError(
            f"raw outputs {cls_raw.shape}/{box_raw.shape} do not match the "
            f"anchor grid (expected {expect_cls}/{expect_box})"
        )
    cls = cls_raw[0].transpose(1, 2, 0).reshape(a, -1)
    box = box_raw[0].transpose(1, 2, 0).reshape(a, 4)
    return cls, box


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def decode_offsets(box_offsets: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """(A, 4) raw offsets -> (A, 4) unclipped corner boxes."""
    acx, acy = anchor_centers(config)
    s = config.anchor_scale
    cx = acx + box_offsets[:, 0] * s
    cy = acy + box_offsets[:, 1] * s
    w = s * np.exp(box_offsets[:, 2])
    h = s * np.exp(box_offsets[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def iou(a, b) -> float:
    """IoU of two corner boxes; degenerate (zero-area) boxes give 0."""
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a == 0.0 or area_b == 0.0:
        return 0.0
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (area_a + area_b - inter)


def _iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    ax0, ay0, ax1, ay1 = (boxes_a[:, i, None] for i in range(4))
    bx0, by0, bx1, by1 = (boxes_b[None, :, i] for i in range(4))
    ix = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    iy = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = ix * iy
    area_a = np.maximum(0.0, ax1 - ax0) * np.maximum(0.0, ay1 - ay0)
    area_b = np.maximum(0.0, bx1 - bx0) * np.maximum(0.0, by1 - by0)
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def decode(
    cls_raw: np.ndarray,
    box_raw: np.ndarray,
    config: DetectorConfig,
    score_threshold: float = 0.25,
    nms_iou: float = 0.45,
) -> list[Detection]:
    """Anchor decode + per-class NMS; detections sorted by descending score."""
    cls, box = heads_to_anchor_layout(cls_raw, box_raw, config)
    probs = _softmax_rows(cls)
    fg = probs[:, 1:]
    best_cls = fg.argmax(axis=1)
    best_score = fg[np.arange(len(fg)), best_cls]
    keep = np.nonzero(best_score >= score_threshold)[0]
    if keep.size == 0:
        return []
    boxes = decode_offsets(box, config)
    size = float(config.input_size)
    candidates = []
    for a in keep:
        x0, y0, x1, y1 = boxes[a]
        x0c, y0c = max(0.0, min(x0, size)), max(0.0, min(y0, size))
        x1c, y1c = max(0.0, min(x1, size)), max(0.0, min(y1, size))
        if x1c - x0c <= 0 or y1c - y0c <= 0:
            continue  # decoded box entirely outside the image
        cid = int(best_cls[a])
        candidates.append(
            Detection(
                box=(x0c, y0c, x1c, y1c),
                class_id=cid,
                score=float(best_score[a]),
                anchor_index=int(a),
                class_logit=float(cls[a, cid + 1]),
            )
        )
    candidates.sort(key=lambda d: (-d.score, d.anchor_index))
    kept: list[Detection] = []
    for det in candidates:
        suppressed = any(
            k.class_id == det.class_id and iou(k.box, det.box) > nms_iou for k in kept
        )
        if not suppressed:
            kept.append(det)
    return kept


def detect(model: DetectorModel, image: np.ndarray, config: DetectorConfig, **kw):
    cls_raw, box_raw = model.forward(image_to_input(image))
    return decode(cls_raw, box_raw, config, **kw)


# --------------------------------------------------------------------------
# anchor matching + training
# --------------------------------------------------------------------------

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4


def match_anchors(annotations, config: DetectorConfig):
    """Per-anchor labels (-1 ignore, 0 background, 1..C class) + box targets."""
    a_boxes = anchor_boxes(config)
    labels = np.zeros(config.n_anchors, dtype=np.int64)
    targets = np.zeros((config.n_anchors, 4))
    if not annotations:
        return labels, targets
    g_boxes = np.array([b for b, _ in annotations])
    g_cls = np.array([c for _, c in annotations], dtype=np.int64)
    ious = _iou_matrix(a_boxes, g_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(a_boxes)), best]
    labels[:] = 0
    labels[(best_iou >= NEGATIVE_IOU) & (best_iou < POSITIVE_IOU)] = -1
    pos = best_iou >= POSITIVE_IOU
    labels[pos] = g_cls[best[pos]] + 1
    acx, acy = anchor_centers(config)
    s = config.anchor_scale
    gb = g_boxes[best]
    gcx = (gb[:, 0] + gb[:, 2]) / 2
    gcy = (gb[:, 1] + gb[:, 3]) / 2
    gw = gb[:, 2] - gb[:, 0]
    gh = gb[:, 3] - gb[:, 1]
    t = np.stack([(gcx - acx) / s, (gcy - acy) / s, np.log(gw / s), np.log(gh / s)], axis=1)
    targets[pos] = t[pos]
    return labels, targets


def _scene_loss(model: DetectorModel, x, labels, targets, config: DetectorConfig):
    """Cross-entropy on matched anchors + L1 on positive box offsets."""
    (cls_v, box_v), handles = model.forward_graph(x, input_grad=False)
    n_cls = config.num_classes + 1
    a = config.n_anchors
    cls_flat = ad.reshape(ad.transpose(cls_v, (0, 2, 3, 1)), (a, n_cls))
    logp = ad.log_softmax(cls_flat, axis=-1)
    pos = np.nonzero(labels > 0)[0]
    neg = np.nonzero(labels == 0)[0]
    terms = []
    if pos.size:
        picked = ad.take(logp, pos * n_cls + labels[pos])
        terms.append(ad.scale(ad.sum_all(picked), -1.0 / pos.size))
    if neg.size:
        picked = ad.take(logp, neg * n_cls)  # background column
        terms.append(ad.scale(ad.sum_all(picked), -1.0 / neg.size))
    if pos.size:
        box_flat = ad.reshape(ad.transpose(box_v, (0, 2, 3, 1)), (a, 4))
        pred = ad.take(box_flat, (pos[:, None] * 4 + np.arange(4)[None, :]).ravel())
        diff = ad.sub(pred, ad.constant(targets[pos].ravel()))
        terms.append(ad.scale(ad.sum_all(ad.absolute(diff)), 1.0 / (4.0 * pos.size)))
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss, handles


@dataclass
class TrainResult:
    model: DetectorModel
    loss_trace: list[float]
    epochs_run: int
    map50_trace: list[tuple[int, float]] = field(default_factory=list)
    final_map50: float | None = None
    reached_target: bool | None = None


def train(
    model: DetectorModel,
    scenes: list[SyntheticScene],
    config: DetectorConfig,
    epochs: int,
    learning_rate: float,
    seed: int = 0,
    target_map50: float | None = None,
    eval_every: int = 10,
    score_threshold: float = 0.25,
    nms_iou: float = 0.45,
) -> TrainResult:
    """SGD with fixed learning rate and seeded per-epoch shuffling.

    The input model is untouched; a trained clone is returned. When
    ``target_map50`` is set, training stops early once train-set mAP@0.5
    (against ``scenes``' own annotations) reaches it.
    """
    if not scenes:
        raise ValueError("dataset must be non-empty")
    model = model.clone()
    prepared = []
    for scene in scenes:
        labels, targets = match_anchors(scene.annotations, config)
        prepared.append((image_to_input(scene.image), labels, targets))
    rng = np.random.default_rng(seed)
    loss_trace: list[float] = []
    map_trace: list[tuple[int, float]] = []
    reached = None if target_map50 is None else False
    epochs_run = 0
    for epoch in range(epochs):
        order = rng.permutation(len(prepared))
        total = 0.0
        for idx in order:
            x, labels, targets = prepared[idx]
            loss, handles = _scene_loss(model, x, labels, targets, config)
            lval = float(loss.value)
            if not np.isfinite(lval):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, scene {int(idx)} "
                    f"(lr={learning_rate})"
                )
            total += lval
            if learning_rate != 0.0:
                grads = ad.backward(ad.ComputationRecord(loss))
                params = model.named_params()
                for name, pvar in handles.params.items():
                    g = grads.get(pvar)
                    if g is not None:
                        params[name] -= learning_rate * g
        loss_trace.append(total / len(prepared))
        epochs_run = epoch + 1
        if target_map50 is not None and (epoch + 1) % eval_every == 0:
            m = evaluate_map50(
                model, scenes, config, score_threshold=score_threshold, nms_iou=nms_iou
            )
            map_trace.append((epoch + 1, m))
            if m >= target_map50:
                reached = True
                break
    final = evaluate_map50(
        model, scenes, config, score_threshold=score_threshold, nms_iou=nms_iou
    )
    return TrainResult(
        model=model,
        loss_trace=loss_trace,
        epochs_run=epochs_run,
        map50_trace=map_trace,
        final_map50=final,
        reached_target=reached,
    )


# --------------------------------------------------------------------------
# mAP@0.5
# --------------------------------------------------------------------------


def _average_precision(records, n_positive):
    """records: (score, is_tp) sorted by decreasing score."""
    if n_positive == 0:
        return 0.0
    if not records:
        return 0.0
    tps = np.array([tp for _, tp in records], dtype=np.float64)
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1.0 - tps)
    recall = tp_cum / n_positive
    precision = tp_cum / (tp_cum + fp_cum)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map50(
    detections_per_image: list[list[Detection]],
    ground_truth_per_image: list[list[tuple[tuple[float, float, float, float], int]]],
    iou_threshold: float = 0.5,
) -> float:
    """Mean AP over classes present in the ground truth, greedy matching."""
    if len(detections_per_image) != len(ground_truth_per_image):
        raise ValueError("detections and ground truth must cover the same images")
    all_classes = sorted({c for gts in ground_truth_per_image for _, c in gts})
    if not all_classes:
        raise ValueError("map50 is undefined without any ground truth")
    aps = []
    for cls in all_classes:
        n_positive = sum(1 for gts in ground_truth_per_image for _, c in gts if c == cls)
        entries = []  # (score, image, det order, box)
        for img, dets in enumerate(detections_per_image):
            for j, det in enumerate(dets):
                if det.class_id == cls:
                    entries.append((det.score, img, j, det.box))
        entries.sort(key=lambda e: (-e[0], e[1], e[2]))
        matched: dict[int, set[int]] = {}
        records = []
        for score, img, _, box in entries:
            gts = [
                (k, gt_box)
                for k, (gt_box, c) in enumerate(ground_truth_per_image[img])
                if c == cls and k not in matched.get(img, set())
            ]
            best_iou, best_k = 0.0, None
            for k, gt_box in gts:
                v = iou(box, gt_box)
                if v > best_iou:
                    best_iou, best_k = v, k
            if best_k is not None and best_iou >= iou_threshold:
                matched.setdefault(img, set()).add(best_k)
                records.append((score, 1.0))
            else:
                records.append((score, 0.0))
        aps.append(_average_precision(records, n_positive))
    return float(np.mean(aps))


def evaluate_map50(model, scenes, config, score_threshold=0.25, nms_iou=0.45) -> float:
    dets = [
        detect(model, s.image, config, score_threshold=score_threshold, nms_iou=nms_iou)
        for s in scenes
    ]
    gts = [s.annotations for s in scenes]
    return map50(dets, gts)


# --------------------------------------------------------------------------
# checkpoint format (version 1)
#
#   magic "DSCKPT\x01\n"
#   u32 little-endian header length, then that many bytes of UTF-8 JSON:
#     {"format_version": 1, "config": {...}, "extra": {...},
#      "params": [{"name": "conv1.weight", "shape": [...]} ...]}  (layer order)
#   raw little-endian float64 data for each param, in header order
#
# Writing is byte-deterministic for identical models.
# --------------------------------------------------------------------------


def save_checkpoint(path, model: DetectorModel, config: DetectorConfig, extra: dict | None = None):
    names = list(model.named_params())
    header = {
        "format_version": 1,
        "config": config.to_dict(),
        "extra": extra or {},
        "params": [
            {"name": n, "shape": list(model.named_params()[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        params = model.named_params()
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[DetectorModel, DetectorConfig, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a detector checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("format_version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        config = DetectorConfig.from_dict(header["config"])
        model = build(config)
        params = model.named_params()
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            if spec["name"] not in params:
                raise ValueError(f"{path}: unknown parameter {spec['name']!r}")
            params[spec["name"]][...] = data
    return model, config, header.get("extra", {})


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()
