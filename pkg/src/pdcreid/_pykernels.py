"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Arrays are float64 and C-contiguous; index arrays are int64.
"""
import numpy as np

BACKEND = "python"


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def im2col(x, kh, kw, sh, sw, ph, pw, fill=0.0):
    n, c, h, w = x.shape
    ho = _out_size(h, kh, sh, ph)
    wo = _out_size(w, kw, sw, pw)
    xp = np.full((n, c, h + 2 * ph, w + 2 * pw), fill, dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, x_shape, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x_shape
    ho = _out_size(h, kh, sh, ph)
    wo = _out_size(w, kw, sw, pw)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])


def maxpool_forward(x, k, s, p):
    """Return pooled output and the flat (h*W + w) source index of each max."""
    n, c, h, w = x.shape
    ho = _out_size(h, k, s, p)
    wo = _out_size(w, k, s, p)
    cols = im2col(x, k, k, s, s, p, p, fill=-np.inf).reshape(n, c, k * k, ho * wo)
    arg = cols.argmax(axis=2)
    y = np.take_along_axis(cols, arg[:, :, None, :], axis=2)[:, :, 0, :]
    di, dj = np.divmod(arg, k)
    oy, ox = np.divmod(np.arange(ho * wo), wo)
    src_y = oy * s - p + di
    src_x = ox * s - p + dj
    idx = (src_y * w + src_x).astype(np.int64)
    return y.reshape(n, c, ho, wo), idx.reshape(n, c, ho, wo)


def maxpool_backward(grad, idx, x_shape):
    n, c, h, w = x_shape
    gx = np.zeros((n * c, h * w), dtype=np.float64)
    rows = np.repeat(np.arange(n * c), grad.shape[2] * grad.shape[3])
    np.add.at(gx, (rows, idx.reshape(-1)), grad.reshape(-1))
    return gx.reshape(x_shape)


def _corners(px, py, h, w):
    valid = (px >= 0.0) & (px <= w - 1) & (py >= 0.0) & (py <= h - 1)
    x0 = np.clip(np.floor(px), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(py), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = px - x0
    wy = py - y0
    # park invalid points on pixel 0 with zero weight
    x0 = np.where(valid, x0, 0)
    x1 = np.where(valid, x1, 0)
    y0 = np.where(valid, y0, 0)
    y1 = np.where(valid, y1, 0)
    wx = np.where(valid, wx, 0.0)
    wy = np.where(valid, wy, 0.0)
    return valid, x0, x1, y0, y1, wx, wy


def bilinear_forward(img, px, py):
    """Sample ``img[C,H,W]`` at pixel coordinates; points off the image give 0."""
    c, h, w = img.shape
    valid, x0, x1, y0, y1, wx, wy = _corners(px, py, h, w)
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x1]
    v10 = img[:, y1, x0]
    v11 = img[:, y1, x1]
    top = (1.0 - wx) * v00 + wx * v01
    bot = (1.0 - wx) * v10 + wx * v11
    out = (1.0 - wy) * top + wy * bot
    return np.where(valid, out, 0.0)


def bilinear_backward(img, px, py, grad):
    c, h, w = img.shape
    valid, x0, x1, y0, y1, wx, wy = _corners(px, py, h, w)
    g = np.where(valid, grad, 0.0)
    gimg = np.zeros((c, h * w), dtype=np.float64)
    for flat, weight in (
        (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
        (y0 * w + x1, (1.0 - wy) * wx),
        (y1 * w + x0, wy * (1.0 - wx)),
        (y1 * w + x1, wy * wx),
    ):
        for ch in range(c):
            np.add.at(gimg[ch], flat, g[ch] * weight)
    v00 = img[:, y0, x0]
    v01 = img[:, y0, x1]
    v10 = img[:, y1, x0]
    v11 = img[:, y1, x1]
    gpx = (g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10))).sum(axis=0)
    gpy = (g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01))).sum(axis=0)
    return gimg.reshape(c, h, w), gpx, gpy
