"""Saliency methods: gradients, GBP, IG, SmoothGrad, targets, export."""

import numpy as np
import pytest

from detsanity import detector, saliency, synthdata
from detsanity.detector import DetectorConfig
from detsanity.model import Conv2d, DetectorModel
from detsanity.saliency import ExplanationTarget


def _linear_detector():
    """Detector whose trunk is four identity-free 1x1 stride-2 convs and no
    activations: every head output is linear in exactly one input pixel."""
    cfg = DetectorConfig(kernel=1, channels=(1, 1, 1, 1))
    trunk = []
    for i in range(4):
        layer = Conv2d(f"conv{i + 1}", 3 if i == 0 else 1, 1, 1, stride=2, padding=0)
        layer.weight = np.full(layer.weight.shape, 1.0 if i else 0.0)
        if i == 0:
            layer.weight[0, :, 0, 0] = [0.25, -0.5, 1.5]  # per-channel weights
        layer.bias = np.zeros_like(layer.bias)
        trunk.append(layer)
    cls_head = Conv2d("cls_head", 1, cfg.num_classes + 1, 1)
    cls_head.weight = np.zeros(cls_head.weight.shape)
    cls_head.weight[1, 0, 0, 0] = 2.0  # class 0 logit = 2 * feature
    cls_head.bias = np.zeros(cls_head.bias.shape)
    box_head = Conv2d("box_head", 1, 4, 1)
    box_head.weight = np.full(box_head.weight.shape, 0.5)
    box_head.bias = np.zeros(box_head.bias.shape)
    model = DetectorModel(trunk, cls_head, box_head, (1, 3, 96, 96))
    return model, cfg


def test_gradients_linear_model_closed_form():
    """Linear head: the map is the channel-reduced |w| (one hot pixel)."""
    model, cfg = _linear_detector()
    image = np.random.default_rng(0).random((96, 96, 3))
    target = ExplanationTarget(anchor_index=14, decision="class", class_id=0)
    smap = saliency.gradients(model, image, target, cfg)
    # stride-2 x4 with k=1 picks input pixel (16*gy, 16*gx) for cell (gy, gx)
    a = 14
    py, px = (a // cfg.grid) * 16, (a % cfg.grid) * 16
    expected = 2.0 * (abs(0.25) + abs(-0.5) + abs(1.5))
    assert smap.values[py, px] == pytest.approx(expected, rel=1e-12)
    rest = smap.values.copy()
    rest[py, px] = 0.0
    np.testing.assert_array_equal(rest, np.zeros_like(rest))


def test_gradients_zero_on_unused_region():
    """Output independent of a region -> exactly zero saliency there."""
    model, cfg = _linear_detector()
    image = np.random.default_rng(1).random((96, 96, 3))
    smap = saliency.gradients(model, image, ExplanationTarget(0, "class", 0), cfg)
    assert np.count_nonzero(smap.values) == 1  # everything else is region R


def test_gradients_on_trained_model_concentrates_on_object(ref_model, det_config):
    """Center-object class target: >= 50% of top-decile mass inside the box."""
    # a scene whose object sits near the image center
    scene = None
    for candidate in synthdata.generate(40, seed=300):
        for (x0, y0, x1, y1), _cls in candidate.annotations:
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            if abs(cx - 48) < 10 and abs(cy - 48) < 10:
                scene = candidate
                break
        if scene is not None:
            break
    assert scene is not None
    dets = detector.detect(ref_model, scene.image, det_config)
    assert dets
    # explain the detection closest to the center
    det0 = min(dets, key=lambda d: abs((d.box[0] + d.box[2]) / 2 - 48)
               + abs((d.box[1] + d.box[3]) / 2 - 48))
    smap = saliency.gradients(ref_model, scene.image,
                              saliency.target_from_detection(det0, "class"), det_config)
    v = smap.values
    thresh = np.quantile(v, 0.9)
    sel = v >= thresh
    yy, xx = np.mgrid[0:96, 0:96] + 0.5
    x0, y0, x1, y1 = det0.box
    inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    share = v[sel & inside].sum() / v[sel].sum()
    assert share >= 0.5


def test_target_validation():
    model, cfg = _linear_detector()
    image = np.zeros((96, 96, 3))
    with pytest.raises(ValueError):
        ExplanationTarget(0, "width")
    with pytest.raises(ValueError):
        ExplanationTarget(0, "class")  # class_id missing
    with pytest.raises(ValueError):
        saliency.gradients(model, image, ExplanationTarget(9999, "x_min"), cfg)
    with pytest.raises(ValueError):
        saliency.gradients(model, image, ExplanationTarget(0, "class", 7), cfg)


def test_coordinate_targets_match_decode_values(ref_model, det_config, holdout_scenes):
    """Graph-built decoded coordinates equal the numpy decode (unclipped)."""
    scene = holdout_scenes[1]
    x = detector.image_to_input(scene.image)
    cls_raw, box_raw = ref_model.forward(x)
    _, box = detector.heads_to_anchor_layout(cls_raw, box_raw, det_config)
    boxes = detector.decode_offsets(box, det_config)
    for a in (0, 7, 17, 35):
        for j, decision in enumerate(("x_min", "y_min", "x_max", "y_max")):
            scalar, _ = saliency.target_scalar(
                ref_model, x, ExplanationTarget(a, decision), det_config
            )
            assert float(scalar.value) == pytest.approx(boxes[a, j], rel=1e-12)


def test_class_target_score_switch(ref_model, det_config, holdout_scenes):
    scene = holdout_scenes[0]
    x = detector.image_to_input(scene.image)
    t = ExplanationTarget(14, "class", 1)
    logit, _ = saliency.target_scalar(ref_model, x, t, det_config, class_target="logit")
    score, _ = saliency.target_scalar(ref_model, x, t, det_config, class_target="score")
    assert 0.0 <= float(score.value) <= 1.0
    assert float(logit.value) != float(score.value)


# --------------------------------------------------------------------------
# guided backpropagation
# --------------------------------------------------------------------------


def test_gbp_equals_gradients_on_smooth_model():
    cfg = DetectorConfig(activation="smooth", seed=3)
    model = detector.build(cfg)
    image = np.random.default_rng(4).random((96, 96, 3))
    t = ExplanationTarget(21, "class", 2)
    a = saliency.gradients(model, image, t, cfg)
    b = saliency.guided_backprop(model, image, t, cfg)
    assert np.array_equal(a.values, b.values)  # bit-identical


def test_gbp_differs_from_gradients_on_relu_model(ref_model, det_config, holdout_scenes):
    scene = holdout_scenes[2]
    dets = detector.detect(ref_model, scene.image, det_config)
    assert dets
    t = saliency.target_from_detection(dets[0], "class")
    a = saliency.gradients(ref_model, scene.image, t, det_config)
    b = saliency.guided_backprop(ref_model, scene.image, t, det_config)
    assert not np.array_equal(a.values, b.values)


def test_gbp_gate_blocks_negative_upstream():
    """A single relu whose upstream gradient is negative contributes nothing."""
    from detsanity import autodiff as ad

    x = ad.leaf(np.array([0.5, -0.5]), requires_grad=True)
    y = ad.sum_all(ad.scale(ad.relu(x), -1.0))
    guided = ad.backward(ad.ComputationRecord(y), hooks=saliency.GUIDED_HOOKS)
    np.testing.assert_array_equal(guided[x], [0.0, 0.0])
    plain = ad.backward(ad.ComputationRecord(y))
    np.testing.assert_array_equal(plain[x], [-1.0, 0.0])


# --------------------------------------------------------------------------
# integrated gradients
# --------------------------------------------------------------------------


def test_ig_zero_when_image_equals_baseline():
    model, cfg = _linear_detector()
    image = np.random.default_rng(5).random((96, 96, 3))
    t = ExplanationTarget(3, "class", 0)
    smap = saliency.integrated_gradients(model, image, t, cfg, baseline=image.copy(),
                                         steps=4)
    np.testing.assert_array_equal(smap.values, np.zeros((96, 96)))


@pytest.mark.parametrize("steps", [1, 3, 17])
def test_ig_linear_model_closed_form_any_steps(steps):
    """Linear target: attribution_i = w_i * x_i exactly, for any step count."""
    model, cfg = _linear_detector()
    image = np.random.default_rng(6).random((96, 96, 3))
    t = ExplanationTarget(14, "class", 0)
    smap = saliency.integrated_gradients(model, image, t, cfg, steps=steps)
    a = 14
    py, px = (a // cfg.grid) * 16, (a % cfg.grid) * 16
    w = 2.0 * np.array([0.25, -0.5, 1.5])
    expected = np.abs(w * image[py, px]).sum()
    assert smap.values[py, px] == pytest.approx(expected, rel=1e-12)
    assert smap.metadata["completeness_residual"] < 1e-12


def test_ig_rejects_bad_arguments():
    model, cfg = _linear_detector()
    image = np.zeros((96, 96, 3))
    t = ExplanationTarget(0, "class", 0)
    with pytest.raises(ValueError):
        saliency.integrated_gradients(model, image, t, cfg, steps=0)
    with pytest.raises(ValueError):
        saliency.integrated_gradients(model, image, t, cfg,
                                      baseline=np.zeros((4, 4, 3)))


@pytest.mark.slow
def test_ig_completeness_on_trained_smooth_detector(smooth_model, det_config_smooth,
                                                    holdout_scenes):
    scene = holdout_scenes[0]
    dets = detector.detect(smooth_model, scene.image, det_config_smooth)
    assert dets
    t = saliency.target_from_detection(dets[0], "class")
    smap = saliency.integrated_gradients(smooth_model, scene.image, t,
                                         det_config_smooth, steps=256)
    assert smap.metadata["completeness_residual"] <= 0.005


# --------------------------------------------------------------------------
# smoothgrad
# --------------------------------------------------------------------------


def test_smoothgrad_single_noiseless_sample_is_base(ref_model, det_config, holdout_scenes):
    scene = holdout_scenes[0]
    t = ExplanationTarget(14, "class", 0)
    base = saliency.guided_backprop(ref_model, scene.image, t, det_config)
    sg = saliency.smoothgrad("gbp", ref_model, scene.image, t, det_config,
                             samples=1, noise=0.0, seed=5)
    assert np.array_equal(base.values, sg.values)
    assert sg.method == "sgbp"


def test_smoothgrad_zero_noise_any_samples(ref_model, det_config, holdout_scenes):
    scene = holdout_scenes[0]
    t = ExplanationTarget(14, "class", 0)
    base = saliency.guided_backprop(ref_model, scene.image, t, det_config)
    sg = saliency.smoothgrad("gbp", ref_model, scene.image, t, det_config,
                             samples=4, noise=0.0, seed=6)
    np.testing.assert_allclose(sg.values, base.values, rtol=1e-15)


def test_smoothgrad_deterministic_per_seed(ref_model, det_config, holdout_scenes):
    scene = holdout_scenes[3]
    t = ExplanationTarget(21, "x_max")
    a = saliency.smoothgrad("gbp", ref_model, scene.image, t, det_config,
                            samples=3, noise=0.1, seed=9)
    b = saliency.smoothgrad("gbp", ref_model, scene.image, t, det_config,
                            samples=3, noise=0.1, seed=9)
    c = saliency.smoothgrad("gbp", ref_model, scene.image, t, det_config,
                            samples=3, noise=0.1, seed=10)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_smoothgrad_validation(ref_model, det_config, holdout_scenes):
    t = ExplanationTarget(0, "x_min")
    image = holdout_scenes[0].image
    with pytest.raises(ValueError):
        saliency.smoothgrad("nope", ref_model, image, t, det_config)
    with pytest.raises(ValueError):
        saliency.smoothgrad("gbp", ref_model, image, t, det_config, samples=0)
    with pytest.raises(ValueError):
        saliency.smoothgrad("gbp", ref_model, image, t, det_config, noise=-1.0)


@pytest.mark.slow
def test_smoothgrad_reduces_total_variation(ref_model, det_config):
    """n=16, sigma=0.1: smoothed map has lower TV than the base map on >= 80%
    of a 15-image suite."""

    def tv(v):
        return np.abs(np.diff(v, axis=0)).sum() + np.abs(np.diff(v, axis=1)).sum()

    scenes = synthdata.generate(15, seed=400)
    wins = total = 0
    for scene in scenes:
        dets = detector.detect(ref_model, scene.image, det_config)
        if not dets:
            continue
        t = saliency.target_from_detection(dets[0], "class")
        base = saliency.guided_backprop(ref_model, scene.image, t, det_config)
        sg = saliency.smoothgrad("gbp", ref_model, scene.image, t, det_config,
                                 samples=16, noise=0.1, seed=11)
        from detsanity.metrics import minmax_normalize

        total += 1
        if tv(minmax_normalize(sg)) <= tv(minmax_normalize(base)):
            wins += 1
    assert total >= 12
    assert wins / total >= 0.8


# --------------------------------------------------------------------------
# properties and export
# --------------------------------------------------------------------------


def test_maps_are_nonnegative_and_input_shaped(ref_model, det_config, holdout_scenes):
    scene = holdout_scenes[4]
    t = ExplanationTarget(10, "class", 0)
    for method in ("gradients", "gbp", "ig"):
        smap = saliency.compute_saliency(method, ref_model, scene.image, t, det_config,
                                         ig_steps=4)
        assert smap.values.shape == (96, 96)
        assert smap.values.min() >= 0.0
        assert smap.raw_min == smap.values.min()
        assert smap.raw_max == smap.values.max()


def test_target_injectivity_on_trained_model(ref_model, det_config, holdout_scenes):
    """Different decisions on the same detection give different maps."""
    scene = holdout_scenes[0]
    dets = detector.detect(ref_model, scene.image, det_config)
    assert dets
    maps = {}
    for decision in saliency.DECISIONS:
        t = saliency.target_from_detection(dets[0], decision)
        maps[decision] = saliency.gradients(ref_model, scene.image, t, det_config).values
    names = list(maps)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert not np.array_equal(maps[names[i]], maps[names[j]])


def test_reduction_switch():
    model, cfg = _linear_detector()
    image = np.random.default_rng(12).random((96, 96, 3))
    t = ExplanationTarget(14, "class", 0)
    a = 14
    py, px = (a // cfg.grid) * 16, (a % cfg.grid) * 16
    w = 2.0 * np.array([0.25, -0.5, 1.5])
    for reduction, expect in (("sum_abs", np.abs(w).sum()),
                              ("max_abs", np.abs(w).max()),
                              ("mean_abs", np.abs(w).mean())):
        smap = saliency.gradients(model, image, t, cfg, reduction=reduction)
        assert smap.values[py, px] == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        saliency.gradients(model, image, t, cfg, reduction="l2")


def test_map_export_round_trip(tmp_path, ref_model, det_config, holdout_scenes):
    from PIL import Image

    scene = holdout_scenes[0]
    t = ExplanationTarget(14, "class", 0)
    smap = saliency.gradients(ref_model, scene.image, t, det_config)
    png, txt = saliency.save_map(smap, tmp_path / "map")
    arr = np.asarray(Image.open(png))
    assert arr.dtype == np.uint16 and arr.shape == (96, 96)
    sidecar = txt and (tmp_path / "map.txt").read_text()
    assert f"raw_min = {smap.raw_min!r}" in sidecar
    assert f"raw_max = {smap.raw_max!r}" in sidecar
    assert "method = gradients" in sidecar
    assert smap.model_fingerprint in sidecar
    # normalized view round-trips through the 16-bit PNG
    from detsanity.metrics import minmax_normalize

    np.testing.assert_allclose(arr / 65535.0, minmax_normalize(smap), atol=1 / 65534)


def test_export_byte_deterministic(tmp_path, ref_model, det_config, holdout_scenes):
    scene = holdout_scenes[0]
    t = ExplanationTarget(14, "class", 0)
    smap = saliency.gradients(ref_model, scene.image, t, det_config)
    p1, _ = saliency.save_map(smap, tmp_path / "a")
    p2, _ = saliency.save_map(smap, tmp_path / "b")
    from pathlib import Path

    assert Path(p1).read_bytes() == Path(p2).read_bytes()
