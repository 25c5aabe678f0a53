"""Shared fixtures: reference dataset, trained reference detectors.

Training is the slow part of the suite, so trained checkpoints are cached
under tests/_cache keyed by their recipe; delete the directory to retrain
from scratch. All recipes are fully seeded, so cached and fresh runs agree.
"""

from __future__ import annotations

import json
import hashlib
from pathlib import Path

import numpy as np
import pytest

from detsanity import detector, synthdata

CACHE_DIR = Path(__file__).parent / "_cache"

REFERENCE_TRAIN = {
    "n_scenes": 48,
    "dataset_seed": 0,
    "epochs": 200,
    "learning_rate": 0.015,
    "seed": 0,
    "target_map50": 0.9,
    "eval_every": 10,
}

DATA_ARM_TRAIN = {
    "n_scenes": 24,
    "dataset_seed": 0,
    "epochs": 400,
    "learning_rate": 0.015,
    "seed": 0,
    "target_map50": 0.8,
    "eval_every": 25,
    "rand_seed": 7,
}


def _cached_train(tag: str, recipe: dict, scenes, config, **train_kw):
    CACHE_DIR.mkdir(exist_ok=True)
    key = hashlib.sha256(
        json.dumps({"tag": tag, "recipe": recipe, "config": config.to_dict()},
                   sort_keys=True).encode()
    ).hexdigest()[:16]
    path = CACHE_DIR / f"{tag}_{key}.ckpt"
    if path.exists():
        model, _config, extra = detector.load_checkpoint(path)
        return model, extra
    result = detector.train(detector.build(config), scenes, config, **train_kw)
    extra = {
        "train_map50": result.final_map50,
        "epochs_run": result.epochs_run,
        "reached_target": bool(result.reached_target),
    }
    detector.save_checkpoint(path, result.model, config, extra)
    return result.model, extra


@pytest.fixture(scope="session")
def det_config():
    return detector.DetectorConfig()


@pytest.fixture(scope="session")
def ref_scenes():
    return synthdata.generate(
        REFERENCE_TRAIN["n_scenes"], seed=REFERENCE_TRAIN["dataset_seed"]
    )


@pytest.fixture(scope="session")
def holdout_scenes():
    return synthdata.generate(15, seed=100)


@pytest.fixture(scope="session")
def ref_model(det_config, ref_scenes):
    """Detector trained on the reference dataset to train mAP@0.5 >= 0.9."""
    r = REFERENCE_TRAIN
    model, extra = _cached_train(
        "reference",
        r,
        ref_scenes,
        det_config,
        epochs=r["epochs"],
        learning_rate=r["learning_rate"],
        seed=r["seed"],
        target_map50=r["target_map50"],
        eval_every=r["eval_every"],
    )
    assert extra["train_map50"] >= 0.8, "reference training regressed"
    return model


@pytest.fixture(scope="session")
def det_config_smooth():
    return detector.DetectorConfig(activation="smooth")


@pytest.fixture(scope="session")
def smooth_model(det_config_smooth, ref_scenes):
    r = REFERENCE_TRAIN
    model, _extra = _cached_train(
        "smooth",
        r,
        ref_scenes,
        det_config_smooth,
        epochs=r["epochs"],
        learning_rate=r["learning_rate"],
        seed=r["seed"],
        target_map50=r["target_map50"],
        eval_every=r["eval_every"],
    )
    return model


@pytest.fixture(scope="session")
def data_arm_scenes():
    return synthdata.generate(DATA_ARM_TRAIN["n_scenes"], seed=DATA_ARM_TRAIN["dataset_seed"])


@pytest.fixture(scope="session")
def data_true_model(det_config, data_arm_scenes):
    r = DATA_ARM_TRAIN
    model, extra = _cached_train(
        "data_true",
        r,
        data_arm_scenes,
        det_config,
        epochs=r["epochs"],
        learning_rate=r["learning_rate"],
        seed=r["seed"],
        target_map50=r["target_map50"],
        eval_every=r["eval_every"],
    )
    return model, extra


@pytest.fixture(scope="session")
def data_random_model(det_config, data_arm_scenes):
    r = DATA_ARM_TRAIN
    spec = synthdata.RandomizationSpec(
        permute_labels=True,
        box_noise_stddev=synthdata.default_box_noise(data_arm_scenes),
        seed=r["rand_seed"],
    )
    randomized = synthdata.randomize(data_arm_scenes, spec)
    model, extra = _cached_train(
        "data_random",
        r,
        randomized,
        det_config,
        epochs=r["epochs"],
        learning_rate=r["learning_rate"],
        seed=r["seed"],
        target_map50=r["target_map50"],
        eval_every=r["eval_every"],
    )
    return model, extra


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_detsanity_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    store = getattr(request.config, "_detsanity_acceptance_lines", None)
    if store is None:
        store = []
        request.config._detsanity_acceptance_lines = store

    def record(index: int, description: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        line = f"[{status}] criterion {index}: {description}{suffix}"
        store.append(line)
        print(line)
        assert ok, line

    return record
