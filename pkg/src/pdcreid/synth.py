"""Procedural stick-figure pedestrians with exact joints and Gaussian heatmaps.

Appearance (per-part base colour, stripe colour, stripe period and phase) is a
pure function of ``(seed, identity)``; pose, background clutter and camera are
pure functions of ``(seed, identity, image index)``. Stripes run across each
limb's own axis, so a limb keeps its look once it is turned upright.

Seed mixing: every draw uses ``numpy.random.default_rng([seed, stream, ...])``
with stream 1 = appearance, 2 = pose and background, 3 = camera.
"""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, ProtocolError
from .fen import NUM_JOINTS, NUM_PARTS

# body proportions as fractions of body height
BODY_FRAC = 0.62
HEAD_Y, HEAD_R = 0.07, 0.065
NECK_Y = 0.15
SHOULDER_Y, SHOULDER_HALF = 0.19, 0.09
UPPER_ARM, FOREARM = 0.17, 0.15
HIP_Y, HIP_HALF = 0.52, 0.06
THIGH, SHIN = 0.23, 0.22
LIMB_HALF, TORSO_HALF = 0.032, 0.085
BASE_ARM_DEG, BASE_LEG_DEG = 8.0, 4.0
LEG_JITTER_SHARE = 0.6
MIN_STRIPE, MAX_STRIPE = 0.06, 0.14  # stripe period as a fraction of body height


@dataclass(frozen=True)
class SynthSpec:
    identities: int = 10
    images_per_identity: int = 4
    image_h: int = 64
    image_w: int = 32
    limb_jitter_deg: float = 20.0
    scale_jitter: float = 0.05
    translation_jitter: float = 0.03
    sigma: float = 1.5
    cameras: int = 2
    clutter: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("identities", "images_per_identity", "image_h", "image_w", "cameras"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.clutter < 0 or self.limb_jitter_deg < 0:
            raise ConfigError("clutter and limb_jitter_deg must be >= 0")
        if not 0 <= self.scale_jitter < 1 or not 0 <= self.translation_jitter < 0.5:
            raise ConfigError("scale_jitter must be in [0, 1) and translation_jitter in [0, 0.5)")
        self._check_frame()

    def _check_frame(self):
        """Worst-case joint reach must stay 2*sigma inside the frame."""
        h, w = self.image_h, self.image_w
        hb = BODY_FRAC * h * (1 + self.scale_jitter)
        j = self.limb_jitter_deg
        arm_u = min(BASE_ARM_DEG + j, 90.0)
        arm_f = min(BASE_ARM_DEG + 1.5 * j, 90.0)
        leg_u = min(BASE_LEG_DEG + LEG_JITTER_SHARE * j, 90.0)
        leg_l = min(BASE_LEG_DEG + 1.5 * LEG_JITTER_SHARE * j, 90.0)
        s = math.sin
        rad = math.radians
        reach_x = max(
            SHOULDER_HALF + UPPER_ARM * s(rad(arm_u)) + FOREARM * s(rad(arm_f)),
            HIP_HALF + THIGH * s(rad(leg_u)) + SHIN * s(rad(leg_l)),
        ) * hb + self.translation_jitter * w
        top = HEAD_Y - 0.5
        bottom = HIP_Y + THIGH + SHIN - 0.5
        reach_up = -top * hb + self.translation_jitter * h
        reach_down = bottom * hb + self.translation_jitter * h
        m = 2 * self.sigma
        cx, cy = (w - 1) / 2, (h - 1) / 2
        if cx - reach_x < m or cx + reach_x > w - 1 - m or cy - reach_up < m or cy + reach_down > h - 1 - m:
            raise ConfigError(
                f"pose jitter can push joints out of a {h}x{w} frame (2*sigma margin); "
                "reduce limb_jitter_deg / scale_jitter / translation_jitter or enlarge the image"
            )

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in mapping.items():
            if k not in known:
                raise ConfigError(f"unknown synth key {k!r}")
            kwargs[k] = float(v) if known[k] in ("float", float) else int(v)
        return cls(**kwargs)


@dataclass
class SynthSample:
    image: np.ndarray  # [3, H, W] in [0, 1], 8-bit quantized
    label: int
    index: int
    camera: int
    joints: np.ndarray  # [14, 2] (x, y)
    sigma: float

    @property
    def response_maps(self):
        return gaussian_maps(self.joints, self.image.shape[1:], self.sigma)


def gaussian_maps(joints, image_hw, sigma):
    """One unit-mass Gaussian per joint -> ``[14, H, W]``."""
    h, w = image_hw
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    maps = np.empty((len(joints), h, w))
    for i, (x, y) in enumerate(joints):
        g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma * sigma))
        maps[i] = g / g.sum()
    return maps


def appearance(seed, identity):
    """Per-part ``(base rgb, stripe rgb, period fraction, phase)``."""
    rng = np.random.default_rng([seed, 1, identity])
    out = []
    for _ in range(NUM_PARTS):
        base = rng.uniform(0.05, 0.95, 3)
        stripe = rng.uniform(0.05, 0.95, 3)
        period = rng.uniform(MIN_STRIPE, MAX_STRIPE)
        phase = rng.uniform(0.0, 1.0)
        out.append((base, stripe, period, phase))
    return out


def camera_params(seed, camera):
    if camera == 0:
        return np.ones(3), np.zeros(3)
    rng = np.random.default_rng([seed, 3, camera])
    return rng.uniform(0.7, 1.0, 3), rng.uniform(-0.05, 0.1, 3)


def pose(spec, rng):
    """Joint coordinates ``[14, 2]`` for one random pose."""
    h, w = spec.image_h, spec.image_w
    s = 1 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    hb = BODY_FRAC * h * s
    cx = (w - 1) / 2 + rng.uniform(-1, 1) * spec.translation_jitter * w
    cy = (h - 1) / 2 + rng.uniform(-1, 1) * spec.translation_jitter * h
    top = cy - 0.5 * hb
    j = spec.limb_jitter_deg
    lj = LEG_JITTER_SHARE * j

    def limb(origin, outward_sign, base, jit, l1, l2):
        a1 = math.radians(base + rng.uniform(-jit, jit))
        a2 = a1 + math.radians(rng.uniform(-jit, jit) / 2)
        mid = origin + l1 * hb * np.array([outward_sign * math.sin(a1), math.cos(a1)])
        end = mid + l2 * hb * np.array([outward_sign * math.sin(a2), math.cos(a2)])
        return mid, end

    J = np.zeros((NUM_JOINTS, 2))
    J[0] = (cx, top + HEAD_Y * hb)
    J[1] = (cx, top + NECK_Y * hb)
    J[2] = (cx - SHOULDER_HALF * hb, top + SHOULDER_Y * hb)  # right shoulder, image left
    J[5] = (cx + SHOULDER_HALF * hb, top + SHOULDER_Y * hb)
    J[3], J[4] = limb(J[2], -1, BASE_ARM_DEG, j, UPPER_ARM, FOREARM)
    J[6], J[7] = limb(J[5], +1, BASE_ARM_DEG, j, UPPER_ARM, FOREARM)
    J[11] = (cx - HIP_HALF * hb, top + HIP_Y * hb)  # right hip
    J[8] = (cx + HIP_HALF * hb, top + HIP_Y * hb)
    J[12], J[13] = limb(J[11], -1, BASE_LEG_DEG, lj, THIGH, SHIN)
    J[9], J[10] = limb(J[8], +1, BASE_LEG_DEG, lj, THIGH, SHIN)
    return J, hb


def _segment_field(xs, ys, p0, p1, half):
    """Coverage in [0, 1] of a capsule and the along-axis distance from ``p0``."""
    d = p1 - p0
    length = math.hypot(d[0], d[1])
    if length == 0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / (length * length), 0.0, 1.0)
    dist = np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))
    return np.clip(half + 0.5 - dist, 0.0, 1.0), t * length


def _paint(img, cov, along, look, hb):
    base, stripe, period, phase = look
    band = np.mod(along / (period * hb) + phase, 1.0) < 0.5
    colour = np.where(band[None], stripe[:, None, None], base[:, None, None])
    img *= 1.0 - cov[None]
    img += cov[None] * colour


def render(spec, joints, hb, looks, rng, camera):
    h, w = spec.image_h, spec.image_w
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((3, h, w))
    img[:] = rng.uniform(0.2, 0.8, 3)[:, None, None]
    for _ in range(spec.clutter):
        x0, x1 = np.sort(rng.uniform(-0.2, 1.2, 2) * w)
        y0, y1 = np.sort(rng.uniform(-0.2, 1.2, 2) * h)
        colour = rng.uniform(0.0, 1.0, 3)
        mask = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        img[:, mask] = colour[:, None]

    J = joints
    limb_half = LIMB_HALF * hb
    # legs, torso, arms, head: later parts are drawn over earlier ones
    for part, chain in ((4, (8, 9, 10)), (5, (11, 12, 13))):
        along0 = 0.0
        for a, b in zip(chain[:-1], chain[1:]):
            cov, along = _segment_field(xs, ys, J[a], J[b], limb_half)
            _paint(img, cov, along + along0, looks[part], hb)
            along0 += float(np.hypot(*(J[b] - J[a])))
    hip_mid = (J[8] + J[11]) / 2
    cov, along = _segment_field(xs, ys, J[1], hip_mid, TORSO_HALF * hb)
    _paint(img, cov, along, looks[1], hb)
    for part, chain in ((2, (5, 6, 7)), (3, (2, 3, 4))):
        along0 = 0.0
        for a, b in zip(chain[:-1], chain[1:]):
            cov, along = _segment_field(xs, ys, J[a], J[b], limb_half)
            _paint(img, cov, along + along0, looks[part], hb)
            along0 += float(np.hypot(*(J[b] - J[a])))
    cov, _ = _segment_field(xs, ys, J[0], J[0], HEAD_R * hb)
    _paint(img, cov, ys - (J[0][1] - HEAD_R * hb), looks[0], hb)

    gain, offset = camera_params(spec.seed, camera)
    img = np.clip(img * gain[:, None, None] + offset[:, None, None], 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def generate_sample(spec, identity, index, looks=None):
    looks = appearance(spec.seed, identity) if looks is None else looks
    rng = np.random.default_rng([spec.seed, 2, identity, index])
    joints, hb = pose(spec, rng)
    camera = index % spec.cameras
    image = render(spec, joints, hb, looks, rng, camera)
    return SynthSample(image=image, label=identity, index=index, camera=camera,
                       joints=joints, sigma=spec.sigma)


def generate(spec):
    """All samples, identity-major: ``identities * images_per_identity`` of them."""
    out = []
    for ident in range(spec.identities):
        looks = appearance(spec.seed, ident)
        for idx in range(spec.images_per_identity):
            out.append(generate_sample(spec, ident, idx, looks))
    return out


@dataclass
class Split:
    train_ids: list
    eval_ids: list
    train: list  # sample positions
    probe: list
    gallery: list


def split(labels, cameras, train_fraction=0.5, seed=0):
    """Identity-disjoint train/eval split with a single-query probe set.

    Each eval identity contributes its first image from every camera as a
    probe (fewer if that would leave no gallery image); the rest is gallery.
    Positions index into ``labels``/``cameras``.
    """
    labels = np.asarray(labels)
    cameras = np.asarray(cameras)
    ids = sorted(set(labels.tolist()))
    if not 0 < train_fraction < 1:
        raise ProtocolError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(train_fraction * len(ids)))
    if n_train < 1 or n_train >= len(ids):
        raise ProtocolError(f"cannot split {len(ids)} identities at {train_fraction}")
    perm = np.random.default_rng([seed, 4]).permutation(len(ids))
    train_ids = sorted(ids[i] for i in perm[:n_train])
    eval_ids = sorted(ids[i] for i in perm[n_train:])
    train_set = set(train_ids)
    train = [i for i, l in enumerate(labels) if l in train_set]
    probe, gallery = [], []
    for ident in eval_ids:
        pos = [i for i in range(len(labels)) if labels[i] == ident]
        if len(pos) < 2:
            raise ProtocolError(f"identity {ident} has {len(pos)} image(s); need >= 2 for probe + gallery")
        chosen = []
        for cam in sorted(set(cameras[pos].tolist())):
            if len(pos) - len(chosen) <= 1:
                break
            chosen.append(next(i for i in pos if cameras[i] == cam))
        probe.extend(chosen)
        gallery.extend(i for i in pos if i not in chosen)
    return Split(train_ids, eval_ids, train, sorted(probe), sorted(gallery))
