"""Test utilities: finite-difference oracles and random small networks."""

from __future__ import annotations

import numpy as np

from detsanity import autodiff as ad
from detsanity import detector
from detsanity.detector import Detection
from detsanity.model import Activation, Conv2d, Dense, Flatten, MaxPool, Model


def fd_gradient(fn, x, step=1e-4):
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_gradient_error(analytic, numeric, floor=1e-6):
    """Max relative disagreement over elements of magnitude >= floor."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale >= floor
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / scale[mask]).max())


def random_network(seed: int, activation: str | None = None) -> tuple[Model, np.ndarray]:
    """Small random conv/pool/dense stack (<= 4 parameterized layers).

    Returns the model and a matching random input. ``activation`` forces
    relu or silu; by default the rng picks per network.
    """
    rng = np.random.default_rng(seed)
    act = activation or rng.choice(["relu", "silu"])
    c_in = int(rng.integers(1, 3))
    hw = int(rng.integers(6, 9))
    layers = []
    n_param_layers = int(rng.integers(1, 4))
    ch = c_in
    size = hw
    for i in range(n_param_layers):
        out_ch = int(rng.integers(2, 5))
        layers.append(Conv2d(f"c{i}", ch, out_ch, 3, stride=1, padding=1))
        layers.append(Activation(f"a{i}", act))
        ch = out_ch
        if size >= 6 and rng.random() < 0.5:
            layers.append(MaxPool(f"p{i}", 2, 2))
            size //= 2
    layers.append(Flatten())
    layers.append(Dense("head", size * size * ch, int(rng.integers(2, 5))))
    model = Model(layers, input_shape=(1, c_in, hw, hw))
    for layer in model.param_layers():
        layer.init_params(rng)
    x = rng.standard_normal((1, c_in, hw, hw))
    return model, x


def scalar_output(model: Model, x: np.ndarray, hooks=None):
    """sum(model(x)) as a recorded scalar; returns (value, input grad)."""
    out, handles = model.forward_graph(x)
    scalar = ad.sum_all(out)
    grad = ad.input_gradient(scalar, handles.input, hooks=hooks)
    return float(scalar.value), grad


def scalar_forward_value(model: Model, x: np.ndarray) -> float:
    return float(model.forward(x).sum())


# ---------------------------------------------------------------------------
# mAP oracle shared by the detector tests and the acceptance suite
# ---------------------------------------------------------------------------

def hand_detection(box, cls, score):
    return Detection(tuple(float(v) for v in box), cls, float(score), 0, 0.0)


def brute_force_map50(dets_per_image, gts_per_image, iou_thr=0.5):
    """Independent PR-curve computation: greedy matching per class, then the
    precision-envelope area, all in explicit loops."""
    classes = sorted({c for gts in gts_per_image for _, c in gts})
    aps = []
    for cls in classes:
        npos = sum(1 for gts in gts_per_image for _, c in gts if c == cls)
        flat = []
        for img, dets in enumerate(dets_per_image):
            for order, d in enumerate(dets):
                if d.class_id == cls:
                    flat.append((d.score, img, order, d.box))
        flat.sort(key=lambda e: (-e[0], e[1], e[2]))
        used = set()
        points = []
        tp = fp = 0
        for score, img, order, box in flat:
            best, best_key = 0.0, None
            for k, (gbox, c) in enumerate(gts_per_image[img]):
                if c != cls or (img, k) in used:
                    continue
                v = detector.iou(box, gbox)
                if v > best:
                    best, best_key = v, (img, k)
            if best_key is not None and best >= iou_thr:
                used.add(best_key)
                tp += 1
            else:
                fp += 1
            points.append((tp / npos if npos else 0.0, tp / (tp + fp)))
        # area under the precision envelope over recall
        ap = 0.0
        prev_recall = 0.0
        for i, (recall, _prec) in enumerate(points):
            if recall == prev_recall:
                continue
            envelope = max(p for r, p in points[i:])
            ap += (recall - prev_recall) * envelope
            prev_recall = recall
        aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0


HAND_CASES = [
    # perfect detections
    (
        [[hand_detection((0, 0, 10, 10), 0, 1.0)], [hand_detection((5, 5, 20, 20), 1, 1.0)]],
        [[((0, 0, 10, 10), 0)], [((5, 5, 20, 20), 1)]],
    ),
    # one FP outranking a TP
    (
        [[hand_detection((50, 50, 60, 60), 0, 0.9), hand_detection((0, 0, 10, 10), 0, 0.8)]],
        [[((0, 0, 10, 10), 0)]],
    ),
    # multi-class, multi-image with misses and duplicates
    (
        [
            [hand_detection((0, 0, 10, 10), 0, 0.9), hand_detection((1, 1, 11, 11), 0, 0.85)],
            [hand_detection((20, 20, 40, 40), 1, 0.6), hand_detection((70, 70, 90, 90), 1, 0.55)],
            [hand_detection((10, 10, 30, 30), 0, 0.3)],
        ],
        [
            [((0, 0, 10, 10), 0), ((30, 30, 40, 40), 1)],
            [((21, 21, 41, 41), 1)],
            [((12, 12, 32, 32), 0), ((60, 60, 80, 80), 1)],
        ],
    ),
    # detections for a class with no ground truth are ignored in the mean
    (
        [[hand_detection((0, 0, 10, 10), 2, 0.9), hand_detection((0, 0, 10, 10), 0, 0.8)]],
        [[((0, 0, 10, 10), 0)]],
    ),
    # interleaved scores across images
    (
        [
            [hand_detection((0, 0, 10, 10), 0, 0.7), hand_detection((40, 40, 50, 50), 0, 0.65)],
            [hand_detection((0, 0, 10, 10), 0, 0.68), hand_detection((12, 0, 22, 10), 0, 0.66)],
        ],
        [
            [((0, 0, 10, 10), 0), ((41, 41, 51, 51), 0)],
            [((0, 0, 10, 10), 0)],
        ],
    ),
]


