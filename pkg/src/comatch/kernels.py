"""Hot inner loops, each with a numba path and a pure-numpy path.

The backend is chosen once at import time. Set ``COMATCH_NUMBA=0`` to force
the numpy path (also used automatically when numba is not importable).
Both paths are serial, so results are reproducible run to run; they agree
to rounding (col2im accumulation order differs).
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_ENABLED = numba is not None and os.environ.get("COMATCH_NUMBA", "1") != "0"


def _njit(fn):
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------- im2col 3x3


def _im2col_np(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, h, w, c, 3, 3), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, :, ki, kj] = xp[:, :, ki:ki + h, kj:kj + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * 9)


def _col2im_np(cols, shape):
    n, c, h, w = shape
    cols = cols.reshape(n, h, w, c, 3, 3)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            xp[:, :, ki:ki + h, kj:kj + w] += cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return xp[:, :, 1:-1, 1:-1].copy()


def _im2col_loops(x):
    n, c, h, w = x.shape
    # every cell is written exactly once; the kernel is bound by output bandwidth
    cols = np.empty((n * h * w, c * 9), dtype=x.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                row = (b * h + i) * w + j
                for ch in range(c):
                    base = ch * 9
                    for ki in range(3):
                        y = i + ki - 1
                        for kj in range(3):
                            xx = j + kj - 1
                            if y < 0 or y >= h or xx < 0 or xx >= w:
                                cols[row, base + ki * 3 + kj] = 0.0
                            else:
                                cols[row, base + ki * 3 + kj] = x[b, ch, y, xx]
    return cols


def _col2im_loops(cols, n, c, h, w):
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                row = (b * h + i) * w + j
                for ch in range(c):
                    base = ch * 9
                    for ki in range(3):
                        y = i + ki - 1
                        if y < 0 or y >= h:
                            continue
                        for kj in range(3):
                            xx = j + kj - 1
                            if xx < 0 or xx >= w:
                                continue
                            out[b, ch, y, xx] += cols[row, base + ki * 3 + kj]
    return out


# ------------------------------------------------------------ maxpool 2x2


def _maxpool_np(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


def _maxpool_back_np(grad, arg):
    n, c, ho, wo = grad.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, ho * 2, wo * 2)


def _maxpool_loops(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int8)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, 2 * i, 2 * j]
                    k = 0
                    for t in range(1, 4):
                        v = x[b, ch, 2 * i + t // 2, 2 * j + t % 2]
                        if v > best:
                            best = v
                            k = t
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = k
    return out, arg


def _maxpool_back_loops(grad, arg):
    n, c, ho, wo = grad.shape
    out = np.zeros((n, c, ho * 2, wo * 2), dtype=grad.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    t = arg[b, ch, i, j]
                    out[b, ch, 2 * i + t // 2, 2 * j + t % 2] = grad[b, ch, i, j]
    return out


# ------------------------------------------------------ bilinear warp


def _warp_np(imgs, mats):
    b, c, h, w = imgs.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    m = mats[:, :, :, None, None]
    sx = m[:, 0, 0] * xx + m[:, 0, 1] * yy + m[:, 0, 2]
    sy = m[:, 1, 0] * xx + m[:, 1, 1] * yy + m[:, 1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros((b, c, h, w), dtype=np.float64)
    bi = np.broadcast_to(np.arange(b)[:, None, None], (b, h, w))
    for dy, dx, wt in ((0, 0, (1.0 - fx) * (1.0 - fy)), (0, 1, fx * (1.0 - fy)),
                       (1, 0, (1.0 - fx) * fy), (1, 1, fx * fy)):
        yi = y0 + dy
        xi = x0 + dx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w) & (wt != 0.0)
        vals = np.zeros((b, h, w, c), dtype=np.float64)
        vals[ok] = imgs[bi[ok], :, yi[ok], xi[ok]]
        out += vals.transpose(0, 3, 1, 2) * wt[:, None]
    return out.astype(imgs.dtype)


def _warp_loops(imgs, mats):
    b, c, h, w = imgs.shape
    out = np.zeros((b, c, h, w), dtype=imgs.dtype)
    for n in range(b):
        for y in range(h):
            for x in range(w):
                sx = mats[n, 0, 0] * x + mats[n, 0, 1] * y + mats[n, 0, 2]
                sy = mats[n, 1, 0] * x + mats[n, 1, 1] * y + mats[n, 1, 2]
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                fx = sx - x0
                fy = sy - y0
                for ch in range(c):
                    acc = 0.0
                    for t in range(4):
                        dy = t // 2
                        dx = t % 2
                        wy = fy if dy == 1 else 1.0 - fy
                        wx = fx if dx == 1 else 1.0 - fx
                        wt = wx * wy
                        yi = y0 + dy
                        xi = x0 + dx
                        if wt != 0.0 and yi >= 0 and yi < h and xi >= 0 and xi < w:
                            acc += imgs[n, ch, yi, xi] * wt
                    out[n, ch, y, x] = acc
    return out


# ------------------------------------------------ histogram equalisation


def _equalize_plane(q):
    hist = np.bincount(q.ravel(), minlength=256)
    nz = hist[hist > 0]
    step = (nz.sum() - nz[-1]) // 255
    if step == 0:
        return None
    lut = np.clip((np.concatenate((np.zeros(1, np.int64), np.cumsum(hist)[:-1])) + step // 2) // step, 0, 255)
    return lut[q]


def _equalize_np(q):
    """q: int64 [B,C,H,W] in 0..255. Returns int64 levels, -1 where a plane is left as is."""
    out = np.full(q.shape, -1, dtype=np.int64)
    for n in range(q.shape[0]):
        for ch in range(q.shape[1]):
            r = _equalize_plane(q[n, ch])
            if r is not None:
                out[n, ch] = r
    return out


def _equalize_loops(q):
    b, c, h, w = q.shape
    out = np.full((b, c, h, w), -1, dtype=np.int64)
    hist = np.zeros(256, dtype=np.int64)
    lut = np.zeros(256, dtype=np.int64)
    for n in range(b):
        for ch in range(c):
            hist[:] = 0
            for y in range(h):
                for x in range(w):
                    hist[q[n, ch, y, x]] += 1
            last = 0
            total = 0
            for i in range(256):
                if hist[i] > 0:
                    last = hist[i]
                total += hist[i]
            step = (total - last) // 255
            if step == 0:
                continue
            acc = step // 2
            for i in range(256):
                v = acc // step
                lut[i] = 255 if v > 255 else v
                acc += hist[i]
            for y in range(h):
                for x in range(w):
                    out[n, ch, y, x] = lut[q[n, ch, y, x]]
    return out


# ------------------------------------------------------ counter-based RNG
#
# splitmix64 finaliser; uint64 arithmetic wraps modulo 2**64.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)


def _mix_np(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def _uniforms_np(key, index, slots):
    counters = (index.astype(np.uint64)[:, None] << np.uint64(8)) | np.arange(slots, dtype=np.uint64)[None, :]
    z = _mix_np(np.uint64(key) ^ _mix_np(counters))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _uniforms_loops(key, index, slots):
    out = np.empty((index.shape[0], slots), dtype=np.float64)
    k = np.uint64(key)
    for i in range(index.shape[0]):
        for s in range(slots):
            c = (np.uint64(index[i]) << np.uint64(8)) | np.uint64(s)
            c = c + np.uint64(0x9E3779B97F4A7C15)
            c = (c ^ (c >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            c = (c ^ (c >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            c = c ^ (c >> np.uint64(31))
            z = k ^ c
            z = z + np.uint64(0x9E3779B97F4A7C15)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
            out[i, s] = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return out


if NUMBA_ENABLED:
    _im2col_nb = _njit(_im2col_loops)
    _col2im_nb = _njit(_col2im_loops)
    _maxpool_nb = _njit(_maxpool_loops)
    _maxpool_back_nb = _njit(_maxpool_back_loops)
    _warp_nb = _njit(_warp_loops)
    _equalize_nb = _njit(_equalize_loops)
    _uniforms_nb = _njit(_uniforms_loops)

    def im2col(x):
        return _im2col_nb(np.ascontiguousarray(x))

    def col2im(cols, shape):
        return _col2im_nb(np.ascontiguousarray(cols), *shape)

    def maxpool2x2(x):
        return _maxpool_nb(np.ascontiguousarray(x))

    def maxpool2x2_backward(grad, arg):
        return _maxpool_back_nb(np.ascontiguousarray(grad), np.ascontiguousarray(arg))

    def warp_bilinear(imgs, mats):
        return _warp_nb(np.ascontiguousarray(imgs), np.ascontiguousarray(mats, dtype=np.float64))

    def equalize_levels(q):
        return _equalize_nb(np.ascontiguousarray(q, dtype=np.int64))

    def counter_uniforms(key, index, slots):
        return _uniforms_nb(np.uint64(key), np.ascontiguousarray(index, dtype=np.int64), slots)
else:
    im2col = _im2col_np
    col2im = _col2im_np
    maxpool2x2 = _maxpool_np
    maxpool2x2_backward = _maxpool_back_np

    def warp_bilinear(imgs, mats):
        return _warp_np(imgs, np.asarray(mats, dtype=np.float64))

    def equalize_levels(q):
        return _equalize_np(np.asarray(q, dtype=np.int64))

    def counter_uniforms(key, index, slots):
        return _uniforms_np(key, np.asarray(index, dtype=np.int64), slots)

im2col.__doc__ = """[N,C,H,W] -> [N*H*W, C*9] patch matrix for a 3x3 kernel, zero padding 1.

Rows run over (n, h, w), columns over (c, ki, kj).
"""
col2im.__doc__ = "Adjoint of :func:`im2col`: scatter-add patch gradients back to [N,C,H,W]."
maxpool2x2.__doc__ = """2x2 / stride-2 max pool. Returns (out, argmax) where argmax indexes
the window in row-major order and ties resolve to the first element."""
warp_bilinear.__doc__ = """Resample [B,C,H,W] images through per-image inverse affine maps.

``mats[b]`` is 2x3 and maps output pixel (x, y) to source coordinates
``(m[0] @ (x, y, 1), m[1] @ (x, y, 1))``. Samples outside the image read 0.
"""
equalize_levels.__doc__ = """Histogram-equalised 8-bit levels per (image, channel) plane of int
levels ``q``; planes whose histogram is too concentrated come back as -1."""
counter_uniforms.__doc__ = """[len(index), slots] uniforms in [0, 1): entry (i, s) is a pure
function of (key, index[i], s)."""

# Reference implementations, exposed so tests and the benchmark can compare backends.
NUMPY_KERNELS = {
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "maxpool2x2": _maxpool_np,
    "maxpool2x2_backward": _maxpool_back_np,
    "warp_bilinear": lambda imgs, mats: _warp_np(imgs, np.asarray(mats, dtype=np.float64)),
    "equalize_levels": lambda q: _equalize_np(np.asarray(q, dtype=np.int64)),
    "counter_uniforms": lambda key, index, slots: _uniforms_np(key, np.asarray(index, dtype=np.int64), slots),
}
