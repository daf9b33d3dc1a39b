"""Per-part affine transformers.

An affine ``theta = (t1..t6)`` maps normalized target coordinates to
normalized source coordinates::

    x_s = t1 * x_t + t2 * y_t + t3
    y_s = t4 * x_t + t5 * y_t + t6

Normalized coordinates run over [-1, 1] with the extremes on the centers of
the border pixels (align-corners), so lattice-preserving transforms resample
exactly.
"""
import numpy as np

from .errors import ShapeError
from .fen import NUM_PARTS, PART_NAMES
from .nn import Conv2d, GlobalAvgPool, Linear, ReLU, Sequential
from .sampling import sample, sample_backward, snap

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
PTN_PARTS = tuple(range(1, NUM_PARTS))  # every part except the head


def target_lattice(out_hw):
    h, w = out_hw
    if h < 2 or w < 2:
        raise ShapeError(f"affine grid needs an output of at least 2x2, got {out_hw}")
    xt = np.linspace(-1.0, 1.0, w)
    yt = np.linspace(-1.0, 1.0, h)
    return np.meshgrid(xt, yt)


def affine_grid(theta, out_hw):
    """Normalized source coordinates ``(xs, ys)``, each ``[H, W]``."""
    t = np.asarray(theta, dtype=np.float64).reshape(6)
    xt, yt = target_lattice(out_hw)
    xs = t[0] * xt + t[1] * yt + t[2]
    ys = t[3] * xt + t[4] * yt + t[5]
    return xs, ys


def to_pixels(xs, ys, in_hw):
    h, w = in_hw
    return snap((xs + 1.0) * (w - 1) / 2.0), snap((ys + 1.0) * (h - 1) / 2.0)


def bilinear_sample(img, grid):
    """Sample ``img[C,H,W]`` on a normalized grid ``(xs, ys)``; off-image reads are 0."""
    xs, ys = grid
    px, py = to_pixels(xs, ys, img.shape[1:])
    return sample(img, px, py)


def affine_sample(img, theta, out_hw=None):
    out_hw = img.shape[1:] if out_hw is None else out_hw
    return bilinear_sample(img, affine_grid(theta, out_hw))


def affine_sample_backward(img, theta, grad, out_hw=None):
    """Gradients of :func:`affine_sample` w.r.t. ``img`` and ``theta``."""
    out_hw = img.shape[1:] if out_hw is None else out_hw
    h, w = img.shape[1:]
    xt, yt = target_lattice(out_hw)
    xs, ys = affine_grid(theta, out_hw)
    px, py = to_pixels(xs, ys, (h, w))
    gimg, gpx, gpy = sample_backward(img, px, py, grad)
    gxs = gpx * (w - 1) / 2.0
    gys = gpy * (h - 1) / 2.0
    gtheta = np.array([
        (gxs * xt).sum(), (gxs * yt).sum(), gxs.sum(),
        (gys * xt).sum(), (gys * yt).sum(), gys.sum(),
    ])
    return gimg, gtheta


def compose(theta_a, theta_b):
    """Single affine equal to sampling with ``theta_a`` and then ``theta_b``.

    Sampling the output of the first pass at ``A_b p`` reads the input at
    ``A_a (A_b p)``.
    """
    def mat(t):
        t = np.asarray(t, dtype=np.float64)
        return np.array([[t[0], t[1], t[2]], [t[3], t[4], t[5]], [0.0, 0.0, 1.0]])

    m = mat(theta_a) @ mat(theta_b)
    return m[:2].reshape(6)


def localization_net(in_ch, channels=(8, 16), rng=None):
    """conv3x3/2 -> ReLU -> conv3x3/2 -> ReLU -> GAP -> FC(6), starting at identity."""
    rng = np.random.default_rng(0) if rng is None else rng
    c1, c2 = channels
    fc = Linear(c2, 6, rng=rng)
    fc.params["W"][:] = 0.0
    fc.params["b"][:] = IDENTITY_THETA
    return Sequential([
        Conv2d(in_ch, c1, 3, stride=2, pad=1, rng=rng), ReLU(),
        Conv2d(c1, c2, 3, stride=2, pad=1, rng=rng), ReLU(),
        GlobalAvgPool(), fc,
    ])


class PtnBank:
    """Five independent localization nets (no head transformer)."""

    def __init__(self, part_extents, in_ch=3, channels=(8, 16), rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.part_extents = tuple(tuple(e) for e in part_extents)
        self.nets = {i: localization_net(in_ch, channels, rng) for i in PTN_PARTS}

    def named_layers(self):
        for i in PTN_PARTS:
            yield from self.nets[i].named_layers(prefix=f"ptn.{PART_NAMES[i]}.")

    def zero_grad(self):
        for net in self.nets.values():
            net.zero_grad()

    def fwd(self, parts, train=True):
        """``parts``: six arrays ``[N, C, h, w]``. Returns (modified parts, thetas, cache).

        ``thetas`` maps part index -> ``[N, 6]``.
        """
        if len(parts) != NUM_PARTS:
            raise ShapeError(f"expected {NUM_PARTS} part batches, got {len(parts)}")
        out = [parts[0]]
        thetas, caches = {}, {}
        for i in PTN_PARTS:
            x = parts[i]
            if x.shape[2:] != self.part_extents[i]:
                raise ShapeError(
                    f"{PART_NAMES[i]}: part extent {x.shape[2:]} != bank extent {self.part_extents[i]}"
                )
            theta, cache = self.nets[i].fwd(x, train)
            thetas[i] = theta
            caches[i] = cache
            out.append(np.stack([affine_sample(x[n], theta[n]) for n in range(x.shape[0])]))
        return out, thetas, (parts, thetas, caches)

    def bwd(self, cache, grads):
        """Backprop part gradients into the localization nets; returns theta grads."""
        parts, thetas, caches = cache
        gthetas = {}
        for i in PTN_PARTS:
            x, g = parts[i], grads[i]
            gt = np.stack([affine_sample_backward(x[n], thetas[i][n], g[n])[1] for n in range(x.shape[0])])
            gthetas[i] = gt
            self.nets[i].bwd(caches[i], gt)
        return gthetas


def write_theta_log_header(fh):
    fh.write("iter,part," + ",".join(f"theta{k}" for k in range(1, 7)) + "\n")


def write_theta_rows(fh, iteration, thetas):
    """Append the batch-mean theta of every part as CSV rows."""
    for i in sorted(thetas):
        mean = np.asarray(thetas[i]).reshape(-1, 6).mean(axis=0)
        fh.write(f"{iteration},{PART_NAMES[i]}," + ",".join(f"{v:.9g}" for v in mean) + "\n")
