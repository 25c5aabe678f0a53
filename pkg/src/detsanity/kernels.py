"""Hot numeric kernels: convolution and max-pooling, forward and backward.

These inner loops dominate every training step and every saliency backward
pass, so they come in two interchangeable flavors:

* numba ``@njit`` direct-loop kernels (the default when numba imports), and
* a pure-numpy fallback built on strided window views and BLAS contractions.

Set ``DETSANITY_DISABLE_NUMBA=1`` in the environment before import to force
the numpy path; ``set_backend()`` switches at runtime (used by the benchmark
to compare both). Both paths are deterministic; they agree to float64
rounding, not bit-exactly, because summation order differs.

All kernels take and return C-contiguous float64 arrays in NCHW layout.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_DISABLE = os.environ.get("DETSANITY_DISABLE_NUMBA", "").strip().lower() in {
    "1",
    "true",
    "yes",
}

try:
    if _ENV_DISABLE:
        raise ImportError("numba disabled via DETSANITY_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # pragma: no cover - fallback decorator
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


_backend = "numba" if HAVE_NUMBA else "numpy"


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Select the active kernel implementation ("numba" or "numpy")."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    _backend = name


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _out_hw(hp: int, wp: int, kh: int, kw: int, stride: int) -> tuple[int, int]:
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {kh}x{kw} with stride {stride} does not fit input {hp}x{wp}"
        )
    return oh, ow


def _windows(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int):
    """Read-only (N, C, OH, OW, KH, KW) view of all kernel windows."""
    n, c = xp.shape[0], xp.shape[1]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _conv2d_forward_np(xp, w, b, stride):
    o, _, kh, kw = w.shape
    oh, ow = _out_hw(xp.shape[2], xp.shape[3], kh, kw, stride)
    cols = _windows(xp, kh, kw, oh, ow, stride)
    out = np.einsum("ncyxuv,ocuv->noyx", cols, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv2d_backward_input_np(w, go, xp_shape, stride):
    n, c, hp, wp = xp_shape
    _, _, kh, kw = w.shape
    oh, ow = go.shape[2], go.shape[3]
    gxp = np.zeros((n, c, hp, wp))
    for ky in range(kh):
        for kx in range(kw):
            # (N,O,OH,OW) x (O,C) -> (N,OH,OW,C)
            contrib = np.tensordot(go, w[:, :, ky, kx], axes=([1], [0]))
            gxp[:, :, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return gxp


def _conv2d_backward_weights_np(xp, go, kh, kw, stride):
    oh, ow = go.shape[2], go.shape[3]
    cols = _windows(xp, kh, kw, oh, ow, stride)
    return np.einsum("ncyxuv,noyx->ocuv", cols, go, optimize=True)


def _maxpool_forward_np(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = _out_hw(h, w, k, k, stride)
    wins = _windows(x, k, k, oh, ow, stride).reshape(n, c, oh, ow, k * k)
    arg = wins.argmax(axis=-1)
    out = np.take_along_axis(wins, arg[..., None], axis=-1)[..., 0]
    # flat index into the (H, W) plane
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    iy = oy[None, None] * stride + arg // k
    ix = ox[None, None] * stride + arg % k
    flat = (iy * w + ix).astype(np.int64)
    return np.ascontiguousarray(out), flat


def _maxpool_backward_np(flat_idx, go, h, w):
    n, c = go.shape[0], go.shape[1]
    gx = np.zeros((n, c, h * w))
    nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    nn = nn[..., None]
    cc = cc[..., None]
    idx = flat_idx.reshape(n, c, -1)
    np.add.at(gx, (nn, cc, idx), go.reshape(n, c, -1))
    return gx.reshape(n, c, h, w)


# --------------------------------------------------------------------------
# numba implementations (operate on pre-padded inputs)
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_nb(xp, w, b, stride):
        n, c, hp, wp = xp.shape
        o, _, kh, kw = w.shape
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        out = np.empty((n, o, oh, ow))
        for ni in range(n):
            for oi in range(o):
                out[ni, oi] = b[oi]
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[oi, ci, ky, kx]
                            for oy in range(oh):
                                iy = oy * stride + ky
                                for ox in range(ow):
                                    out[ni, oi, oy, ox] += wv * xp[ni, ci, iy, ox * stride + kx]
        return out

    @njit(cache=True)
    def _conv2d_backward_input_nb(w, go, gxp, stride):
        n, o, oh, ow = go.shape
        _, c, kh, kw = w.shape
        for ni in range(n):
            for oi in range(o):
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[oi, ci, ky, kx]
                            for oy in range(oh):
                                iy = oy * stride + ky
                                for ox in range(ow):
                                    gxp[ni, ci, iy, ox * stride + kx] += wv * go[ni, oi, oy, ox]

    @njit(cache=True)
    def _conv2d_backward_weights_nb(xp, go, kh, kw, stride):
        n, c, hp, wp = xp.shape
        o = go.shape[1]
        oh = go.shape[2]
        ow = go.shape[3]
        gw = np.zeros((o, c, kh, kw))
        for ni in range(n):
            for oi in range(o):
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc = 0.0
                            for oy in range(oh):
                                iy = oy * stride + ky
                                for ox in range(ow):
                                    acc += go[ni, oi, oy, ox] * xp[ni, ci, iy, ox * stride + kx]
                            gw[oi, ci, ky, kx] += acc
        return gw

    @njit(cache=True)
    def _maxpool_forward_nb(x, k, stride):
        n, c, h, w = x.shape
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        out = np.empty((n, c, oh, ow))
        flat = np.empty((n, c, oh, ow), dtype=np.int64)
        for ni in range(n):
            for ci in range(c):
                for oy in range(oh):
                    iy0 = oy * stride
                    for ox in range(ow):
                        ix0 = ox * stride
                        best = x[ni, ci, iy0, ix0]
                        by, bx = iy0, ix0
                        for ky in range(k):
                            for kx in range(k):
                                v = x[ni, ci, iy0 + ky, ix0 + kx]
                                if v > best:
                                    best = v
                                    by, bx = iy0 + ky, ix0 + kx
                        out[ni, ci, oy, ox] = best
                        flat[ni, ci, oy, ox] = by * w + bx
        return out, flat

    @njit(cache=True)
    def _maxpool_backward_nb(flat_idx, go, h, w):
        n, c, oh, ow = go.shape
        gx = np.zeros((n, c, h, w))
        for ni in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        f = flat_idx[ni, ci, oy, ox]
                        gx[ni, ci, f // w, f % w] += go[ni, ci, oy, ox]
        return gx


# --------------------------------------------------------------------------
# dispatching wrappers
# --------------------------------------------------------------------------


def conv2d_forward(x, w, b, stride=1, padding=0):
    xp = _pad_nchw(x, padding)
    if _backend == "numba":
        return _conv2d_forward_nb(
            xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride
        )
    return _conv2d_forward_np(xp, w, b, stride)


def conv2d_backward_input(w, go, x_shape, stride=1, padding=0):
    n, c, h, wd = x_shape
    xp_shape = (n, c, h + 2 * padding, wd + 2 * padding)
    go = np.ascontiguousarray(go)
    if _backend == "numba":
        gxp = np.zeros(xp_shape)
        _conv2d_backward_input_nb(np.ascontiguousarray(w), go, gxp, stride)
    else:
        gxp = _conv2d_backward_input_np(w, go, xp_shape, stride)
    if padding == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])


def conv2d_backward_weights(x, go, kernel, stride=1, padding=0):
    """Returns (grad_weight, grad_bias)."""
    kh, kw = kernel
    xp = _pad_nchw(x, padding)
    go = np.ascontiguousarray(go)
    if _backend == "numba":
        gw = _conv2d_backward_weights_nb(xp, go, kh, kw, stride)
    else:
        gw = _conv2d_backward_weights_np(xp, go, kh, kw, stride)
    gb = go.sum(axis=(0, 2, 3))
    return gw, gb


def maxpool_forward(x, k, stride):
    x = np.ascontiguousarray(x)
    if _backend == "numba":
        return _maxpool_forward_nb(x, k, stride)
    return _maxpool_forward_np(x, k, stride)


def maxpool_backward(flat_idx, go, h, w):
    go = np.ascontiguousarray(go)
    if _backend == "numba":
        return _maxpool_backward_nb(flat_idx, go, h, w)
    return _maxpool_backward_np(flat_idx, go, h, w)
