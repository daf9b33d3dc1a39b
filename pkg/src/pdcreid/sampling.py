"""Bilinear sampling at pixel coordinates, shared by part normalization and the PTN.

Coordinates use x = column, y = row, pixel centers at integers. A point
samples zero (and receives zero gradient) unless it lies in
``[0, W-1] x [0, H-1]``.
"""
import numpy as np

from . import kernels

SNAP_TOL = 1e-9


def snap(coords, tol=SNAP_TOL):
    """Round coordinates within ``tol`` of an integer onto it.

    Keeps lattice-aligned transforms (identity, 90 degree turns) exact in the
    presence of last-bit rounding from the normalized-coordinate round trip.
    """
    c = np.asarray(coords, dtype=np.float64)
    r = np.round(c)
    return np.where(np.abs(c - r) < tol, r, c)


def sample(img, px, py):
    """Sample ``img[C,H,W]`` at coordinate arrays of any common shape."""
    shape = np.shape(px)
    out = kernels.bilinear_forward(
        np.ascontiguousarray(img, dtype=np.float64),
        np.ascontiguousarray(px, dtype=np.float64).reshape(-1),
        np.ascontiguousarray(py, dtype=np.float64).reshape(-1),
    )
    return out.reshape((img.shape[0],) + tuple(shape))


def sample_backward(img, px, py, grad):
    """Return ``(grad_img, grad_px, grad_py)`` for :func:`sample`."""
    shape = np.shape(px)
    gimg, gpx, gpy = kernels.bilinear_backward(
        np.ascontiguousarray(img, dtype=np.float64),
        np.ascontiguousarray(px, dtype=np.float64).reshape(-1),
        np.ascontiguousarray(py, dtype=np.float64).reshape(-1),
        np.ascontiguousarray(grad, dtype=np.float64).reshape(img.shape[0], -1),
    )
    return gimg, gpx.reshape(shape), gpy.reshape(shape)
