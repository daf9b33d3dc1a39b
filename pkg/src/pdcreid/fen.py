"""Pose geometry of the feature embedding stage.

Joint localization from response maps, grouping of the 14 joints into six
body parts, part bounding boxes, crop/rotate/resize normalization and the
fixed-layout part canvas. Nothing here is learned.

Conventions: images are ``[C, H, W]`` float arrays; points are ``(x, y)``
with x the column and y the row, origin top-left, pixel centers at integers.
Joint and part indices are 1-based in names and docs, 0-based in arrays.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegeneratePartError, NoMassError, ShapeError
from .sampling import sample, snap

JOINT_NAMES = (
    "head", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
)
NUM_JOINTS = len(JOINT_NAMES)

PART_NAMES = ("head", "upper_body", "left_arm", "right_arm", "left_leg", "right_leg")
NUM_PARTS = len(PART_NAMES)

# 1-based joint indices per part
PART_JOINTS = ((1,), (2, 3, 6, 9, 12), (6, 7, 8), (3, 4, 5), (9, 10, 11), (12, 13, 14))

REFERENCE_HW = (512, 256)
HEAD_MARGIN = 30.0
PART_MARGIN = 10.0


@dataclass(frozen=True)
class PartSpec:
    """Joint grouping, orientation axes and normalized extents of the six parts.

    ``axes[i]`` is ``(from_joints, to_joints)``: the part is turned so the
    vector from the mean of ``from_joints`` to the mean of ``to_joints`` points
    straight down. An empty axis keeps the part unrotated (the head).
    ``extents`` are ``(h, w)`` at the 512x256 reference resolution.
    """

    joints: tuple = PART_JOINTS
    axes: tuple = (
        ((), ()),
        ((2,), (9, 12)),
        ((6,), (8,)),
        ((3,), (5,)),
        ((9,), (11,)),
        ((12,), (14,)),
    )
    extents: tuple = ((128, 128), (256, 128), (256, 64), (256, 64), (256, 64), (256, 64))

    def __post_init__(self):
        if self.joints != PART_JOINTS:
            raise ConfigError(f"part joint sets must be {PART_JOINTS}")
        for a, b in self.axes:
            for j in a + b:
                if not 1 <= j <= NUM_JOINTS:
                    raise ConfigError(f"axis joint {j} outside [1, {NUM_JOINTS}]")

    def scaled_extents(self, image_hw):
        sy = image_hw[0] / REFERENCE_HW[0]
        sx = image_hw[1] / REFERENCE_HW[1]
        out = []
        for h, w in self.extents:
            th, tw = h * sy, w * sx
            if th != int(th) or tw != int(tw) or th < 2 or tw < 2:
                raise ConfigError(
                    f"input extent {image_hw} does not scale part extent {(h, w)} to whole pixels >= 2"
                )
            out.append((int(th), int(tw)))
        return tuple(out)


DEFAULT_PART_SPEC = PartSpec()


@dataclass
class PartBoxSet:
    boxes: np.ndarray  # [6, 4] as (x_lo, x_hi, y_lo, y_hi)
    angles: np.ndarray  # [6] radians

    def __len__(self):
        return len(self.boxes)


def validate_maps(maps, image_hw=None):
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] != NUM_JOINTS:
        raise ShapeError(f"expected {NUM_JOINTS} response maps [14, H, W], got shape {maps.shape}")
    if image_hw is not None and maps.shape[1:] != tuple(image_hw):
        raise ShapeError(f"response maps {maps.shape[1:]} do not match image extent {tuple(image_hw)}")
    if np.any(maps < 0) or not np.all(np.isfinite(maps)):
        raise ValueError("response maps must be finite and non-negative")
    return maps


def localize_joints(maps):
    """Intensity-weighted centroid of each response map -> ``[14, 2]`` (x, y)."""
    maps = validate_maps(maps)
    _, h, w = maps.shape
    mass = maps.sum(axis=(1, 2))
    for i, m in enumerate(mass):
        if not m > 0:
            raise NoMassError(i + 1)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    cx = (maps.sum(axis=1) @ xs) / mass
    cy = (maps.sum(axis=2) @ ys) / mass
    return np.stack([cx, cy], axis=1)


def margins(image_hw):
    """Head and limb margins in pixels, scaled from the 512x256 reference."""
    sy = image_hw[0] / REFERENCE_HW[0]
    sx = image_hw[1] / REFERENCE_HW[1]
    return (HEAD_MARGIN * sx, HEAD_MARGIN * sy), (PART_MARGIN * sx, PART_MARGIN * sy)


def raw_boxes(joints, image_hw):
    """Unclamped part boxes ``[6, 4]``.

    The head box is a fixed square around joint 1; the other parts span their
    member joints plus a margin on every side.
    """
    joints = np.asarray(joints, dtype=np.float64)
    (hmx, hmy), (pmx, pmy) = margins(image_hw)
    boxes = np.empty((NUM_PARTS, 4))
    x, y = joints[0]
    boxes[0] = (x - hmx, x + hmx, y - hmy, y + hmy)
    for i in range(1, NUM_PARTS):
        pts = joints[[j - 1 for j in PART_JOINTS[i]]]
        xmin, ymin = pts.min(axis=0)
        xmax, ymax = pts.max(axis=0)
        boxes[i] = (xmin - pmx, xmax + pmx, ymin - pmy, ymax + pmy)
    return boxes


def clamp_boxes(boxes, image_hw):
    h, w = image_hw
    out = np.array(boxes, dtype=np.float64)
    out[:, 0:2] = np.clip(out[:, 0:2], 0.0, w - 1)
    out[:, 2:4] = np.clip(out[:, 2:4], 0.0, h - 1)
    return out


def part_angles(joints, spec=DEFAULT_PART_SPEC):
    """Angle (radians) of each part axis measured from the downward vertical."""
    joints = np.asarray(joints, dtype=np.float64)
    angles = np.zeros(NUM_PARTS)
    for i, (src, dst) in enumerate(spec.axes):
        if not src:
            continue
        a = joints[[j - 1 for j in src]].mean(axis=0)
        b = joints[[j - 1 for j in dst]].mean(axis=0)
        dx, dy = b - a
        if dx == 0 and dy == 0:
            continue
        angles[i] = math.atan2(dx, dy)
    return angles


def part_boxes(joints, image_hw, spec=DEFAULT_PART_SPEC):
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (NUM_JOINTS, 2):
        raise ShapeError(f"expected joints of shape (14, 2), got {joints.shape}")
    boxes = clamp_boxes(raw_boxes(joints, image_hw), image_hw)
    for i, (xlo, xhi, ylo, yhi) in enumerate(boxes):
        if not (xlo < xhi and ylo < yhi):
            raise DegeneratePartError(i + 1, tuple(boxes[i]))
    return PartBoxSet(boxes=boxes, angles=part_angles(joints, spec))


def normalization_grid(box, angle, target_hw, half_extents=None):
    """Source pixel coordinates for :func:`normalize_part`.

    The crop is turned by ``-angle`` about its center and resized to
    ``target_hw`` in one resampling pass. The window in the turned frame has
    half extents ``half_extents = (across, along)``; by default it is the
    axis-aligned hull of the turned box. Window points that fall outside the
    original box are pushed off-image so they sample black.
    """
    xlo, xhi, ylo, yhi = (float(v) for v in box)
    th, tw = target_hw
    cx, cy = (xlo + xhi) / 2, (ylo + yhi) / 2
    a, b = (xhi - xlo) / 2, (yhi - ylo) / 2
    c, s = math.cos(angle), math.sin(angle)
    if half_extents is None:
        half_u = abs(a * c) + abs(b * s)
        half_v = abs(a * s) + abs(b * c)
    else:
        half_u, half_v = half_extents
    u = np.linspace(-half_u, half_u, tw) if tw > 1 else np.zeros(1)
    v = np.linspace(-half_v, half_v, th) if th > 1 else np.zeros(1)
    uu, vv = np.meshgrid(u, v)
    px = snap(cx + uu * c + vv * s)
    py = snap(cy - uu * s + vv * c)
    tol = 1e-9
    inside = (px >= xlo - tol) & (px <= xhi + tol) & (py >= ylo - tol) & (py <= yhi + tol)
    px = np.where(inside, px, -1.0)
    py = np.where(inside, py, -1.0)
    return px, py


def normalize_part(image, box, angle, target_hw, half_extents=None):
    """Crop ``box`` from ``image[C,H,W]``, turn it upright, resize to ``target_hw``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected an image [C, H, W], got shape {image.shape}")
    h, w = image.shape[1:]
    xlo, xhi, ylo, yhi = box
    if xlo < 0 or ylo < 0 or xhi > w - 1 or yhi > h - 1 or xlo > xhi or ylo > yhi:
        raise ShapeError(f"box {tuple(box)} is not inside a {h}x{w} image")
    px, py = normalization_grid(box, angle, target_hw, half_extents)
    return sample(image, px, py)


@dataclass(frozen=True)
class CanvasLayout:
    """Slot origins ``(row, col)`` and extents ``(h, w)`` for the six parts."""

    canvas_hw: tuple
    origins: tuple
    extents: tuple = field(default=())

    def __post_init__(self):
        if len(self.origins) != NUM_PARTS or len(self.extents) != NUM_PARTS:
            raise ConfigError("a canvas layout needs exactly six slots")
        H, W = self.canvas_hw
        taken = np.zeros((H, W), dtype=bool)
        for i, ((r, c), (h, w)) in enumerate(zip(self.origins, self.extents)):
            if r < 0 or c < 0 or r + h > H or c + w > W:
                raise ConfigError(f"slot {i + 1} ({PART_NAMES[i]}) falls outside the {H}x{W} canvas")
            if taken[r:r + h, c:c + w].any():
                raise ConfigError(f"slot {i + 1} ({PART_NAMES[i]}) overlaps another slot")
            taken[r:r + h, c:c + w] = True

    def slot(self, i):
        (r, c), (h, w) = self.origins[i], self.extents[i]
        return slice(r, r + h), slice(c, c + w)


def default_layout(canvas_hw, spec=DEFAULT_PART_SPEC):
    """Head top-left, upper body top-right, the four limbs side by side below.

    Bottom row order is left arm, right arm, left leg, right leg.
    """
    ext = spec.scaled_extents(canvas_hw)
    (hh, hw), (uh, uw), (lh, lw) = ext[0], ext[1], ext[2]
    origins = (
        (0, 0),
        (0, hw),
        (uh, 0),
        (uh, lw),
        (uh, 2 * lw),
        (uh, 3 * lw),
    )
    return CanvasLayout(canvas_hw=tuple(canvas_hw), origins=origins, extents=ext)


def assemble_canvas(parts, layout):
    """Paste six ``[C, h, w]`` parts into a black canvas ``[C, H, W]``."""
    if len(parts) != NUM_PARTS:
        raise ShapeError(f"expected {NUM_PARTS} parts, got {len(parts)}")
    c = parts[0].shape[0]
    canvas = np.zeros((c,) + tuple(layout.canvas_hw))
    for i, part in enumerate(parts):
        if part.shape != (c,) + tuple(layout.extents[i]):
            raise ShapeError(
                f"part {i + 1} ({PART_NAMES[i]}) has shape {part.shape}, slot expects {(c,) + tuple(layout.extents[i])}"
            )
        rs, cs = layout.slot(i)
        canvas[:, rs, cs] = part
    return canvas


def extract_slot(canvas, layout, i):
    rs, cs = layout.slot(i)
    return canvas[..., rs, cs].copy()


def upright_extents(joints, box, angle, part, image_hw):
    """Half extents ``(across, along)`` of a part in its upright frame.

    Member joints are projected onto the part axis and its normal about the
    box center; the window covers the farthest one plus the part margin.
    """
    xlo, xhi, ylo, yhi = box
    cx, cy = (xlo + xhi) / 2, (ylo + yhi) / 2
    pts = np.asarray(joints, dtype=np.float64)[[j - 1 for j in PART_JOINTS[part]]]
    dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c - dy * s
    v = dx * s + dy * c
    _, (mx, my) = margins(image_hw)
    return float(np.abs(u).max() + mx), float(np.abs(v).max() + my)


def extract_parts(image, maps_or_joints, spec=DEFAULT_PART_SPEC, rotate=True, layout=None):
    """Run the whole geometric stage on one image.

    Returns ``(parts, joints, boxset)``. With ``rotate=False`` parts are only
    cropped and resized (the pose-unnormalized baseline).
    """
    image = np.asarray(image, dtype=np.float64)
    hw = image.shape[1:]
    arr = np.asarray(maps_or_joints, dtype=np.float64)
    joints = arr if arr.shape == (NUM_JOINTS, 2) else localize_joints(arr)
    boxset = part_boxes(joints, hw, spec)
    extents = layout.extents if layout is not None else spec.scaled_extents(hw)
    parts = []
    for i in range(NUM_PARTS):
        box = boxset.boxes[i]
        if rotate and boxset.angles[i] != 0.0:
            angle = boxset.angles[i]
            half = upright_extents(joints, box, angle, i, hw)
        else:
            angle, half = 0.0, None
        parts.append(normalize_part(image, box, angle, extents[i], half))
    return parts, joints, boxset


def write_joints_csv(path, joints, index_column="joint_index"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([index_column, "x", "y"])
        for i, (x, y) in enumerate(joints):
            w.writerow([i + 1, repr(float(x)), repr(float(y))])


def read_joints_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != 3:
            raise ShapeError(f"{path}: expected 3 columns, got {header}")
        for row in reader:
            if row:
                rows.append((int(row[0]), float(row[1]), float(row[2])))
    rows.sort()
    if [r[0] for r in rows] != list(range(1, NUM_JOINTS + 1)):
        raise ShapeError(f"{path}: expected joints 1..{NUM_JOINTS}")
    return np.array([(x, y) for _, x, y in rows])


def write_boxes_csv(path, boxset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["part", "xlo", "xhi", "ylo", "yhi"])
        for i, b in enumerate(boxset.boxes):
            w.writerow([i + 1] + [repr(float(v)) for v in b])
