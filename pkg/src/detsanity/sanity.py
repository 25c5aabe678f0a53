"""The two randomization sanity-test runners.

Model randomization: starting from the output side, whole layers are
re-initialized (same initializer family as a fresh build) until the
cumulative re-initialized parameter count first reaches the requested
fraction of all parameters. Saliency maps for the same (anchor, decision)
targets are produced at every level and compared to the level-0 maps with
SSIM; the six qualitative aspects are scored at full randomization.

Data randomization: two detectors are trained on the same scenes, one with
true annotations and one with uniformly reassigned labels plus Gaussian
box-coordinate noise. The random arm trains until it reaches the target
train mAP@0.5 against its own randomized annotations or its epoch budget
runs out (flagged, not fatal). Explanations on held-out scenes are then
paired per true-model detection.

Explanation targets always come from the TRUE model's detections; the same
anchor and decision are re-explained on randomized or random-label models
even when those models detect nothing, since the comparison is only
defined for a fixed detection of interest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import metrics, saliency, synthdata
from .detector import DetectorConfig, Detection, build, detect, iou, train
from .metrics import AspectFlag, AspectObservation, CriteriaThresholds
from .model import Model
from .saliency import SaliencyMap, compute_saliency, target_from_detection

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class SanityRunConfig:
    levels: tuple = DEFAULT_LEVELS
    n_images: int = 15
    methods: tuple = ("gbp", "ig", "sgbp", "sig")
    decisions: tuple = ("class", "x_min", "y_min", "x_max", "y_max")
    seed: int = 0
    ig_steps: int = 16
    sg_samples: int = 8
    sg_noise: float = 0.15
    score_threshold: float = 0.25
    nms_iou: float = 0.45
    class_target: str = "logit"
    reduction: str = "sum_abs"
    thresholds: CriteriaThresholds = CriteriaThresholds()

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        if list(levels) != sorted(levels):
            raise ValueError("levels must be sorted ascending")
        if any(not 0.0 <= v <= 1.0 for v in levels):
            raise ValueError("levels must lie in [0, 1]")
        object.__setattr__(self, "levels", levels)
        for m in self.methods:
            if m not in saliency.METHODS:
                raise ValueError(f"unknown method {m!r}")
        for d in self.decisions:
            if d not in saliency.DECISIONS:
                raise ValueError(f"unknown decision {d!r}")

    def saliency_kwargs(self) -> dict:
        return {
            "ig_steps": self.ig_steps,
            "sg_samples": self.sg_samples,
            "sg_noise": self.sg_noise,
            "seed": self.seed,
            "reduction": self.reduction,
            "class_target": self.class_target,
        }


# --------------------------------------------------------------------------
# cascading parameter randomization
# --------------------------------------------------------------------------


def cascade_randomize(model: Model, fraction: float, seed: int = 0) -> Model:
    """Re-initialize whole layers from the output side until at least
    ``fraction`` of all weight variables have been replaced.

    The input model is untouched; the walk and the per-layer draws are
    deterministic in (model, fraction, seed), so the randomized layer set
    at a lower fraction is always a prefix of the set at a higher one.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    out = model.clone()
    total = out.param_count()
    target = fraction * total
    rng = np.random.default_rng(seed)
    done = 0
    for layer in reversed(out.param_layers()):
        if done >= target:
            break
        layer.init_params(rng)
        done += layer.param_count()
    return out


def randomized_layer_names(model: Model, fraction: float) -> list[str]:
    """Which layers ``cascade_randomize`` touches at this fraction."""
    total = model.param_count()
    target = fraction * total
    names = []
    done = 0
    for layer in reversed(model.param_layers()):
        if done >= target:
            break
        names.append(layer.name)
        done += layer.param_count()
    return names


# --------------------------------------------------------------------------
# model randomization test
# --------------------------------------------------------------------------


@dataclass
class ExplainedDetection:
    scene_index: int
    detection: Detection


@dataclass
class ModelRandomizationResult:
    config: SanityRunConfig
    explained: list[ExplainedDetection]
    skipped: list[int]
    maps: dict  # (scene_index, method, decision, level) -> SaliencyMap
    curves: dict  # (method, decision) -> [(fraction, mean_ssim, n_images)]
    per_image_observations: dict  # method -> [AspectObservation]
    observations: dict  # method -> majority AspectObservation
    scores: dict  # method -> SensitivityScore


def _majority(per_image: list[AspectObservation]) -> AspectObservation:
    n = len(per_image)
    flags = {}
    for name in metrics.ALL_ASPECTS:
        count = sum(1 for obs in per_image if getattr(obs, name).present)
        flags[name] = AspectFlag(
            present=count * 2 > n,
            evidence={"fraction_present": count / n if n else 0.0, "n_images": n},
        )
    return AspectObservation(**flags)


def model_randomization_test(
    model: Model,
    scenes: list[synthdata.SyntheticScene],
    det_config: DetectorConfig,
    config: SanityRunConfig = SanityRunConfig(),
) -> ModelRandomizationResult:
    """Full (image x method x decision x level) saliency grid plus scoring.

    Images whose true-model detection list is empty are skipped and logged.
    Qualitative aspects compare each method's classification-decision map
    at full randomization against level 0, majority-voted across images.
    """
    models = {p: cascade_randomize(model, p, config.seed) for p in config.levels}
    explained: list[ExplainedDetection] = []
    skipped: list[int] = []
    maps: dict = {}
    use = scenes[: config.n_images] if config.n_images else scenes
    kwargs = config.saliency_kwargs()
    for i, scene in enumerate(use):
        dets = detect(
            model,
            scene.image,
            det_config,
            score_threshold=config.score_threshold,
            nms_iou=config.nms_iou,
        )
        if not dets:
            skipped.append(i)
            log.warning("scene %d: no detection from the true model, skipped", i)
            continue
        interest = dets[0]
        explained.append(ExplainedDetection(scene_index=i, detection=interest))
        for method in config.methods:
            for decision in config.decisions:
                target = target_from_detection(interest, decision)
                for level in config.levels:
                    maps[(i, method, decision, level)] = compute_saliency(
                        method, models[level], scene.image, target, det_config, **kwargs
                    )
    curves = {}
    for method in config.methods:
        for decision in config.decisions:
            points = []
            for level in config.levels:
                vals = []
                for ed in explained:
                    ref = maps[(ed.scene_index, method, decision, config.levels[0])]
                    cur = maps[(ed.scene_index, method, decision, level)]
                    vals.append(
                        metrics.ssim(
                            metrics.minmax_normalize(ref), metrics.minmax_normalize(cur)
                        )
                    )
                points.append((level, float(np.mean(vals)) if vals else float("nan"), len(vals)))
            curves[(method, decision)] = points
    per_image_observations = {}
    observations = {}
    scores = {}
    full = config.levels[-1]
    aspect_decision = "class" if "class" in config.decisions else config.decisions[0]
    for method in config.methods:
        obs_list = []
        for ed in explained:
            scene = use[ed.scene_index]
            map_true = maps[(ed.scene_index, method, aspect_decision, config.levels[0])]
            map_rand = maps[(ed.scene_index, method, aspect_decision, full)]
            det_box = ed.detection.box
            others = [b for b, _ in scene.annotations if iou(b, det_box) < 0.5]
            obs_list.append(
                metrics.observe_aspects(
                    map_true, map_rand, scene.image, det_box, others, config.thresholds
                )
            )
        per_image_observations[method] = obs_list
        observations[method] = _majority(obs_list)
        scores[method] = metrics.aggregate_score(observations[method])
    return ModelRandomizationResult(
        config=config,
        explained=explained,
        skipped=skipped,
        maps=maps,
        curves=curves,
        per_image_observations=per_image_observations,
        observations=observations,
        scores=scores,
    )


# --------------------------------------------------------------------------
# data randomization test
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DataRandConfig:
    n_train_scenes: int = 24
    n_test_scenes: int = 8
    dataset_seed: int = 0
    image_size: int = 96
    rand_seed: int = 7
    permute_labels: bool = True
    box_noise_stddev: float | None = None  # None -> 10% of mean box side
    epochs: int = 400
    learning_rate: float = 0.01
    train_seed: int = 0
    target_map50: float = 0.8
    eval_every: int = 25
    methods: tuple = ("gbp", "ig", "sgbp", "sig")
    decisions: tuple = ("class",)
    ig_steps: int = 16
    sg_samples: int = 8
    sg_noise: float = 0.15
    seed: int = 0
    score_threshold: float = 0.25
    nms_iou: float = 0.45
    class_target: str = "logit"
    reduction: str = "sum_abs"
    ssim_threshold: float = 0.9
    range_band: tuple = (0.5, 2.0)

    def saliency_kwargs(self) -> dict:
        return {
            "ig_steps": self.ig_steps,
            "sg_samples": self.sg_samples,
            "sg_noise": self.sg_noise,
            "seed": self.seed,
            "reduction": self.reduction,
            "class_target": self.class_target,
        }


@dataclass
class MapPair:
    scene_index: int
    detection: Detection
    method: str
    decision: str
    true_map: SaliencyMap
    rand_map: SaliencyMap
    pair_ssim: float
    range_ratio: float | None
    texture_intersection: float
    different: bool


@dataclass
class ArmInfo:
    final_map50: float
    epochs_run: int
    reached_target: bool | None
    threshold_met: bool


@dataclass
class DataRandomizationResult:
    config: DataRandConfig
    true_arm: ArmInfo
    random_arm: ArmInfo
    pairs: list[MapPair]
    per_method: dict  # method -> {"n_pairs", "fraction_different", "verdict"}
    skipped: list[int]


def _flag_pair(pair_ssim, range_ratio, config: DataRandConfig) -> bool:
    lo, hi = config.range_band
    range_out = range_ratio is None or not (lo <= range_ratio <= hi)
    return range_out or pair_ssim < config.ssim_threshold


def data_randomization_test(
    det_config: DetectorConfig,
    config: DataRandConfig = DataRandConfig(),
    train_scenes: "list[synthdata.SyntheticScene] | None" = None,
    test_scenes: "list[synthdata.SyntheticScene] | None" = None,
    true_model: "Model | None" = None,
    random_model: "Model | None" = None,
) -> DataRandomizationResult:
    """Train (or accept) the two arms and pair their explanations.

    A pair is flagged "different" when the raw-range ratio leaves
    ``range_band`` or the pair SSIM drops below ``ssim_threshold``. A
    method's verdict is "passes data randomization" when at least 90% of
    its pairs are flagged.
    """
    if train_scenes is None:
        train_scenes = synthdata.generate(
            config.n_train_scenes, image_size=config.image_size, seed=config.dataset_seed
        )
    if test_scenes is None:
        test_scenes = synthdata.generate(
            config.n_test_scenes,
            image_size=config.image_size,
            seed=config.dataset_seed + 1,
        )
    eval_kw = {"score_threshold": config.score_threshold, "nms_iou": config.nms_iou}

    if true_model is None:
        res_true = train(
            build(det_config),
            train_scenes,
            det_config,
            epochs=config.epochs,
            learning_rate=config.learning_rate,
            seed=config.train_seed,
            target_map50=config.target_map50,
            eval_every=config.eval_every,
            **eval_kw,
        )
        true_model = res_true.model
        true_arm = ArmInfo(
            final_map50=res_true.final_map50,
            epochs_run=res_true.epochs_run,
            reached_target=res_true.reached_target,
            threshold_met=res_true.final_map50 >= config.target_map50,
        )
    else:
        true_arm = ArmInfo(final_map50=float("nan"), epochs_run=0, reached_target=None,
                           threshold_met=True)

    if random_model is None:
        noise = config.box_noise_stddev
        if noise is None:
            noise = synthdata.default_box_noise(train_scenes)
        spec = synthdata.RandomizationSpec(
            permute_labels=config.permute_labels,
            box_noise_stddev=noise,
            seed=config.rand_seed,
        )
        randomized = synthdata.randomize(train_scenes, spec)
        res_rand = train(
            build(det_config),
            randomized,
            det_config,
            epochs=config.epochs,
            learning_rate=config.learning_rate,
            seed=config.train_seed,
            target_map50=config.target_map50,
            eval_every=config.eval_every,
            **eval_kw,
        )
        random_model = res_rand.model
        met = res_rand.final_map50 >= config.target_map50
        if not met:
            log.warning(
                "random-label arm stopped at mAP@0.5=%.3f after %d epochs "
                "(threshold not met)",
                res_rand.final_map50,
                res_rand.epochs_run,
            )
        random_arm = ArmInfo(
            final_map50=res_rand.final_map50,
            epochs_run=res_rand.epochs_run,
            reached_target=res_rand.reached_target,
            threshold_met=met,
        )
    else:
        random_arm = ArmInfo(final_map50=float("nan"), epochs_run=0, reached_target=None,
                             threshold_met=True)

    kwargs = config.saliency_kwargs()
    pairs: list[MapPair] = []
    skipped: list[int] = []
    for i, scene in enumerate(test_scenes):
        dets = detect(true_model, scene.image, det_config, **eval_kw)
        if not dets:
            skipped.append(i)
            log.warning("test scene %d: no detection from the true model, skipped", i)
            continue
        for det in dets:
            for method in config.methods:
                for decision in config.decisions:
                    target = target_from_detection(det, decision)
                    m_true = compute_saliency(
                        method, true_model, scene.image, target, det_config, **kwargs
                    )
                    m_rand = compute_saliency(
                        method, random_model, scene.image, target, det_config, **kwargs
                    )
                    s = metrics.ssim(
                        metrics.minmax_normalize(m_true), metrics.minmax_normalize(m_rand)
                    )
                    tr = m_true.raw_range
                    ratio = (m_rand.raw_range / tr) if tr > 0 else None
                    tex = metrics.detect_texture_change(
                        metrics.minmax_normalize(m_true), metrics.minmax_normalize(m_rand)
                    ).evidence["histogram_intersection"]
                    pairs.append(
                        MapPair(
                            scene_index=i,
                            detection=det,
                            method=method,
                            decision=decision,
                            true_map=m_true,
                            rand_map=m_rand,
                            pair_ssim=s,
                            range_ratio=ratio,
                            texture_intersection=tex,
                            different=_flag_pair(s, ratio, config),
                        )
                    )
    per_method = {}
    for method in config.methods:
        mine = [p for p in pairs if p.method == method]
        frac = (sum(1 for p in mine if p.different) / len(mine)) if mine else 0.0
        per_method[method] = {
            "n_pairs": len(mine),
            "fraction_different": frac,
            "verdict": "passes data randomization" if frac >= 0.9 else "fails data randomization",
        }
    return DataRandomizationResult(
        config=config,
        true_arm=true_arm,
        random_arm=random_arm,
        pairs=pairs,
        per_method=per_method,
        skipped=skipped,
    )


def data_report_dict(result: DataRandomizationResult) -> dict:
    """JSON-serializable report; validates against DATA_SANITY_REPORT_SCHEMA."""

    def arm(info: ArmInfo) -> dict:
        return {
            "final_map50": None if np.isnan(info.final_map50) else info.final_map50,
            "epochs_run": info.epochs_run,
            "threshold_met": info.threshold_met,
        }

    return {
        "true_arm": arm(result.true_arm),
        "random_arm": arm(result.random_arm),
        "skipped_scenes": list(result.skipped),
        "pairs": [
            {
                "scene_index": p.scene_index,
                "anchor_index": p.detection.anchor_index,
                "class_id": p.detection.class_id,
                "method": p.method,
                "decision": p.decision,
                "ssim": p.pair_ssim,
                "range_ratio": p.range_ratio,
                "texture_intersection": p.texture_intersection,
                "true_raw_range": p.true_map.raw_range,
                "random_raw_range": p.rand_map.raw_range,
                "different": p.different,
            }
            for p in result.pairs
        ],
        "per_method": result.per_method,
    }


_ARM_SCHEMA = {
    "type": "object",
    "required": ["final_map50", "epochs_run", "threshold_met"],
    "properties": {
        "final_map50": {"type": ["number", "null"]},
        "epochs_run": {"type": "integer", "minimum": 0},
        "threshold_met": {"type": "boolean"},
    },
}

DATA_SANITY_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["true_arm", "random_arm", "pairs", "per_method", "skipped_scenes"],
    "properties": {
        "true_arm": _ARM_SCHEMA,
        "random_arm": _ARM_SCHEMA,
        "skipped_scenes": {"type": "array", "items": {"type": "integer"}},
        "pairs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "scene_index",
                    "anchor_index",
                    "class_id",
                    "method",
                    "decision",
                    "ssim",
                    "range_ratio",
                    "different",
                ],
                "properties": {
                    "scene_index": {"type": "integer"},
                    "anchor_index": {"type": "integer"},
                    "class_id": {"type": "integer"},
                    "method": {"type": "string"},
                    "decision": {"type": "string"},
                    "ssim": {"type": "number"},
                    "range_ratio": {"type": ["number", "null"]},
                    "texture_intersection": {"type": "number"},
                    "true_raw_range": {"type": "number"},
                    "random_raw_range": {"type": "number"},
                    "different": {"type": "boolean"},
                },
            },
        },
        "per_method": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["n_pairs", "fraction_different", "verdict"],
                "properties": {
                    "n_pairs": {"type": "integer"},
                    "fraction_different": {"type": "number"},
                    "verdict": {"type": "string"},
                },
            },
        },
    },
}
