"""Benchmark the numba kernels against the pure-numpy fallback.

Runs the hot kernels (conv2d forward / backward) and a full detector
forward+backward step on both backends, checks they agree, and prints a
timing table. Run with ``python -m detsanity.benchmark``; pass
``--repeats N`` for steadier numbers.

The active backend for normal package use is chosen at import time:
numba when available, numpy when ``DETSANITY_DISABLE_NUMBA=1`` is set.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import autodiff as ad
from . import kernels
from .detector import DetectorConfig, build, image_to_input, match_anchors, _scene_loss
from .synthdata import generate


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _conv_case():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 12, 48, 48))
    w = rng.standard_normal((12, 12, 5, 5))
    b = rng.standard_normal(12)
    go = rng.standard_normal((1, 12, 24, 24))
    return x, w, b, go


def _detector_step(config, model, scene):
    x = image_to_input(scene.image)
    labels, targets = match_anchors(scene.annotations, config)

    def step():
        loss, _handles = _scene_loss(model, x, labels, targets, config)
        ad.backward(ad.ComputationRecord(loss))

    return step


def run(repeats: int = 5) -> list[tuple[str, float, float]]:
    if not kernels.HAVE_NUMBA:
        raise SystemExit(
            "numba backend unavailable (DETSANITY_DISABLE_NUMBA set or numba "
            "missing); nothing to compare"
        )
    x, w, b, go = _conv_case()
    config = DetectorConfig()
    model = build(config)
    scene = generate(1, seed=0)[0]

    cases = {
        "conv2d_forward": lambda: kernels.conv2d_forward(x, w, b, 2, 2),
        "conv2d_backward_input": lambda: kernels.conv2d_backward_input(w, go, x.shape, 2, 2),
        "conv2d_backward_weights": lambda: kernels.conv2d_backward_weights(x, go, (5, 5), 2, 2),
        "detector_train_step": _detector_step(config, model, scene),
    }

    rows = []
    outputs: dict[str, dict] = {}
    original = kernels.backend()
    try:
        for name, fn in cases.items():
            timings = {}
            for backend in ("numba", "numpy"):
                kernels.set_backend(backend)
                fn()  # warm up (JIT compile / BLAS planning)
                timings[backend] = _time(fn, repeats)
                outputs.setdefault(name, {})[backend] = fn()
            rows.append((name, timings["numba"], timings["numpy"]))
    finally:
        kernels.set_backend(original)

    print(f"{'kernel':<26} {'numba':>10} {'numpy':>10} {'speedup':>8}  agree")
    for name, t_nb, t_np in rows:
        a, b_ = outputs[name]["numba"], outputs[name]["numpy"]
        if isinstance(a, tuple):
            agree = all(np.allclose(u, v, rtol=1e-9, atol=1e-12) for u, v in zip(a, b_))
        elif a is None:
            agree = True  # train step returns nothing; it ran on both paths
        else:
            agree = np.allclose(a, b_, rtol=1e-9, atol=1e-12)
        print(
            f"{name:<26} {t_nb * 1e3:>8.2f}ms {t_np * 1e3:>8.2f}ms "
            f"{t_np / t_nb:>7.2f}x  {agree}"
        )
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    run(repeats=args.repeats)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
