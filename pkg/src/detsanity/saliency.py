"""Gradient-based saliency maps for detector decisions.

Methods: plain input gradients, guided backpropagation (GBP), integrated
gradients (IG), and the SmoothGrad wrapper giving SGBP and SIG.

An explanation target names one scalar model output: a detection's class
logit (or post-softmax score, switchable) or one decoded box coordinate
(x_min / y_min / x_max / y_max). Targets are (anchor_index, decision)
pairs, so they stay well defined on randomized models that no longer
detect anything - the same anchor and decision are simply re-explained.

Stored map values are the channel reduction (sum of absolute values by
default) of the raw input gradient or attribution; min-max normalization
is a view applied in metrics.py. The pre-normalization extremes ride
along in ``raw_min`` / ``raw_max``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .detector import DetectorConfig, Detection, anchor_centers, image_to_input
from .model import DetectorModel

DECISIONS = ("class", "x_min", "y_min", "x_max", "y_max")
METHODS = ("gradients", "gbp", "ig", "sgbp", "sig")
REDUCTIONS = ("sum_abs", "max_abs", "mean_abs")

GUIDED_HOOKS: ad.BackwardHookSet = {"relu": ad.guided_relu_rule}


@dataclass(frozen=True)
class ExplanationTarget:
    anchor_index: int
    decision: str
    class_id: int | None = None

    def __post_init__(self):
        if self.decision not in DECISIONS:
            raise ValueError(f"decision must be one of {DECISIONS}, got {self.decision!r}")
        if self.decision == "class" and self.class_id is None:
            raise ValueError("class decision needs a class_id")

    def describe(self) -> str:
        if self.decision == "class":
            return f"anchor{self.anchor_index}:class{self.class_id}"
        return f"anchor{self.anchor_index}:{self.decision}"


def target_from_detection(det: Detection, decision: str) -> ExplanationTarget:
    return ExplanationTarget(
        anchor_index=det.anchor_index,
        decision=decision,
        class_id=det.class_id if decision == "class" else None,
    )


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W), unnormalized
    raw_min: float
    raw_max: float
    target: ExplanationTarget
    method: str
    model_fingerprint: str
    metadata: dict = field(default_factory=dict)

    @property
    def raw_range(self) -> float:
        return self.raw_max - self.raw_min


def _reduce_channels(grad_nchw: np.ndarray, reduction: str) -> np.ndarray:
    a = np.abs(grad_nchw[0])
    if reduction == "sum_abs":
        return a.sum(axis=0)
    if reduction == "max_abs":
        return a.max(axis=0)
    if reduction == "mean_abs":
        return a.mean(axis=0)
    raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def target_scalar(
    model: DetectorModel,
    x_nchw: np.ndarray,
    target: ExplanationTarget,
    config: DetectorConfig,
    class_target: str = "logit",
):
    """Build the scalar Var for a target; returns (scalar, input leaf).

    Box coordinates use the unclipped decode arithmetic so their gradients
    survive at image borders.
    """
    if not 0 <= target.anchor_index < config.n_anchors:
        raise ValueError(f"anchor_index {target.anchor_index} outside grid")
    (cls_v, box_v), handles = model.forward_graph(x_nchw, param_grad=False)
    n_cls = config.num_classes + 1
    a = target.anchor_index
    if target.decision == "class":
        if not 0 <= target.class_id < config.num_classes:
            raise ValueError(f"class_id {target.class_id} out of range")
        cls_flat = ad.reshape(ad.transpose(cls_v, (0, 2, 3, 1)), (config.n_anchors, n_cls))
        col = target.class_id + 1
        if class_target == "logit":
            scalar = ad.take(cls_flat, [a * n_cls + col])
        elif class_target == "score":
            scalar = ad.take(ad.softmax(cls_flat, axis=-1), [a * n_cls + col])
        else:
            raise ValueError(f"class_target must be 'logit' or 'score', got {class_target!r}")
    else:
        box_flat = ad.reshape(ad.transpose(box_v, (0, 2, 3, 1)), (config.n_anchors, 4))
        acx, acy = anchor_centers(config)
        s = config.anchor_scale
        if target.decision in ("x_min", "x_max"):
            t_c = ad.take(box_flat, [a * 4 + 0])
            t_s = ad.take(box_flat, [a * 4 + 2])
            center = ad.add(ad.scale(t_c, s), ad.constant([acx[a]]))
        else:
            t_c = ad.take(box_flat, [a * 4 + 1])
            t_s = ad.take(box_flat, [a * 4 + 3])
            center = ad.add(ad.scale(t_c, s), ad.constant([acy[a]]))
        half = ad.scale(ad.exp(t_s), s / 2.0)
        if target.decision in ("x_min", "y_min"):
            scalar = ad.sub(center, half)
        else:
            scalar = ad.add(center, half)
    scalar = ad.reshape(scalar, ())
    if not np.isfinite(scalar.value):
        raise ValueError(f"target scalar for {target.describe()} is not finite")
    return scalar, handles.input


def _input_gradient(model, x, target, config, hooks=None, class_target="logit"):
    scalar, inp = target_scalar(model, x, target, config, class_target=class_target)
    return ad.input_gradient(scalar, inp, hooks=hooks), float(scalar.value)


def _target_value(model, x, target, config, class_target="logit") -> float:
    scalar, _ = target_scalar(model, x, target, config, class_target=class_target)
    return float(scalar.value)


def _finish(values, target, method, model, metadata) -> SaliencyMap:
    return SaliencyMap(
        values=values,
        raw_min=float(values.min()),
        raw_max=float(values.max()),
        target=target,
        method=method,
        model_fingerprint=model.fingerprint(),
        metadata=metadata,
    )


def gradients(
    model: DetectorModel,
    image: np.ndarray,
    target: ExplanationTarget,
    config: DetectorConfig,
    reduction: str = "sum_abs",
    class_target: str = "logit",
) -> SaliencyMap:
    """Channel-reduced |d(target scalar) / d(input)|."""
    x = image_to_input(image)
    g, val = _input_gradient(model, x, target, config, class_target=class_target)
    return _finish(
        _reduce_channels(g, reduction),
        target,
        "gradients",
        model,
        {"target_value": val, "reduction": reduction, "class_target": class_target},
    )


def guided_backprop(
    model: DetectorModel,
    image: np.ndarray,
    target: ExplanationTarget,
    config: DetectorConfig,
    reduction: str = "sum_abs",
    class_target: str = "logit",
) -> SaliencyMap:
    """Gradients with every relu backward rule replaced by the guided gate.

    On a model without relu primitives the hook never fires and the result
    is bit-identical to ``gradients``.
    """
    x = image_to_input(image)
    g, val = _input_gradient(
        model, x, target, config, hooks=GUIDED_HOOKS, class_target=class_target
    )
    return _finish(
        _reduce_channels(g, reduction),
        target,
        "gbp",
        model,
        {"target_value": val, "reduction": reduction, "class_target": class_target},
    )


def integrated_gradients(
    model: DetectorModel,
    image: np.ndarray,
    target: ExplanationTarget,
    config: DetectorConfig,
    baseline: np.ndarray | None = None,
    steps: int = 64,
    reduction: str = "sum_abs",
    class_target: str = "logit",
) -> SaliencyMap:
    """Path attribution (x - x') * mean_k grad F(x' + (k/m)(x - x')), k=1..m.

    The signed attribution total is kept in the metadata so the
    completeness identity (sum == F(x) - F(x')) can be checked.
    """
    if steps < 1:
        raise ValueError("integrated_gradients needs steps >= 1")
    if baseline is None:
        baseline = np.zeros_like(image)
    if baseline.shape != image.shape:
        raise ValueError(f"baseline shape {baseline.shape} != image shape {image.shape}")
    x = image_to_input(image)
    xb = image_to_input(baseline)
    diff = x - xb
    total = np.zeros_like(x)
    for k in range(1, steps + 1):
        xk = xb + (k / steps) * diff
        g, _ = _input_gradient(model, xk, target, config, class_target=class_target)
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient along the integration path")
        total += g
    attribution = diff * (total / steps)
    f_x = _target_value(model, x, target, config, class_target=class_target)
    f_b = _target_value(model, xb, target, config, class_target=class_target)
    delta = f_x - f_b
    attr_sum = float(attribution.sum())
    residual = abs(attr_sum - delta) / max(abs(delta), 1e-300)
    return _finish(
        _reduce_channels(attribution, reduction),
        target,
        "ig",
        model,
        {
            "steps": steps,
            "target_value": f_x,
            "baseline_value": f_b,
            "attribution_sum": attr_sum,
            "completeness_residual": residual,
            "reduction": reduction,
            "class_target": class_target,
        },
    )


_BASE_METHODS = {"gradients": gradients, "gbp": guided_backprop, "ig": integrated_gradients}
_SMOOTH_NAMES = {"gradients": "sgradients", "gbp": "sgbp", "ig": "sig"}


def smoothgrad(
    base_method: str,
    model: DetectorModel,
    image: np.ndarray,
    target: ExplanationTarget,
    config: DetectorConfig,
    samples: int = 15,
    noise: float = 0.15,
    seed: int = 0,
    **base_kwargs,
) -> SaliencyMap:
    """Mean base-method map over inputs with i.i.d. Gaussian pixel noise.

    ``noise`` is a fraction of the image dynamic range. With zero noise
    (or a single noiseless sample) the result is bit-identical to the base
    method.
    """
    if base_method not in _BASE_METHODS:
        raise ValueError(f"base method must be one of {sorted(_BASE_METHODS)}")
    if samples < 1:
        raise ValueError("smoothgrad needs samples >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    fn = _BASE_METHODS[base_method]
    stddev = noise * float(image.max() - image.min())
    rng = np.random.default_rng(seed)
    stack = []
    for _ in range(samples):
        if stddev > 0:
            perturbed = image + rng.normal(0.0, stddev, size=image.shape)
        else:
            perturbed = image
        stack.append(fn(model, perturbed, target, config, **base_kwargs).values)
    values = np.mean(stack, axis=0)
    return _finish(
        values,
        target,
        _SMOOTH_NAMES[base_method],
        model,
        {"base_method": base_method, "samples": samples, "noise": noise, "seed": seed},
    )


def compute_saliency(
    method: str,
    model: DetectorModel,
    image: np.ndarray,
    target: ExplanationTarget,
    config: DetectorConfig,
    *,
    ig_steps: int = 64,
    ig_baseline: np.ndarray | None = None,
    sg_samples: int = 15,
    sg_noise: float = 0.15,
    seed: int = 0,
    reduction: str = "sum_abs",
    class_target: str = "logit",
) -> SaliencyMap:
    common = {"reduction": reduction, "class_target": class_target}
    if method == "gradients":
        return gradients(model, image, target, config, **common)
    if method == "gbp":
        return guided_backprop(model, image, target, config, **common)
    if method == "ig":
        return integrated_gradients(
            model, image, target, config, baseline=ig_baseline, steps=ig_steps, **common
        )
    if method in ("sgbp", "sig"):
        base = "gbp" if method == "sgbp" else "ig"
        extra = {} if base == "gbp" else {"baseline": ig_baseline, "steps": ig_steps}
        return smoothgrad(
            base,
            model,
            image,
            target,
            config,
            samples=sg_samples,
            noise=sg_noise,
            seed=seed,
            **common,
            **extra,
        )
    raise ValueError(f"method must be one of {METHODS}, got {method!r}")


# --------------------------------------------------------------------------
# export: 16-bit grayscale PNG of the min-max view + key = value sidecar
# --------------------------------------------------------------------------


def save_map(smap: SaliencyMap, path_base) -> tuple[str, str]:
    from pathlib import Path

    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    span = smap.raw_max - smap.raw_min
    if span > 0:
        norm = (smap.values - smap.raw_min) / span
    else:
        norm = np.zeros_like(smap.values)
    arr16 = np.round(norm * 65535.0).astype(np.uint16)
    png_path = base.with_suffix(".png")
    Image.fromarray(arr16).save(png_path)  # uint16 -> 16-bit grayscale ("I;16")
    lines = [
        f"method = {smap.method}",
        f"decision = {smap.target.decision}",
        f"anchor_index = {smap.target.anchor_index}",
        f"class_id = {'' if smap.target.class_id is None else smap.target.class_id}",
        f"raw_min = {smap.raw_min!r}",
        f"raw_max = {smap.raw_max!r}",
        f"model_fingerprint = {smap.model_fingerprint}",
    ]
    for key in sorted(smap.metadata):
        lines.append(f"meta.{key} = {smap.metadata[key]!r}")
    txt_path = base.with_suffix(".txt")
    txt_path.write_text("\n".join(lines) + "\n")
    return str(png_path), str(txt_path)
