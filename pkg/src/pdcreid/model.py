"""Two-stream model: shared trunk, split global/part branches, weighted fusion.

The global image and the part canvas go through the same trunk layer
objects (one parameter set, gradients from both streams summed; batch-norm
running statistics are kept per stream since the two inputs differ), then through
their own branch, a 1x1 convolution and global average pooling. The pooled
vectors are the global and part features; the global classifier reads the
global half of the fused feature and the part classifier its part half, so
the part loss backpropagates through the feature weighting.

Layer strings describe a stack, e.g. ``"c7x16s2 bn relu mp3s2"``:
``c<k>x<out>[s<stride>]`` is a k x k convolution with padding k//2,
``bn``/``relu`` as named, ``mp<k>s<s>``/``ap<k>s<s>`` max/average pooling
with padding k//2.
"""
import enum
import re
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import fen
from .errors import ConfigError, ShapeError
from .fwn import FeatureWeighting, FwnConfig
from .nn import (AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, ReLU,
                 Sequential)
from .ptn import PTN_PARTS, PtnBank


class Variant(enum.Enum):
    GlobalOnly = "GlobalOnly"
    PartOnly = "PartOnly"
    GlobalPart = "GlobalPart"
    GlobalPartFEN = "GlobalPartFEN"
    GlobalPartFWN = "GlobalPartFWN"
    FullPDC = "FullPDC"

    @property
    def uses_global(self):
        return self is not Variant.PartOnly

    @property
    def uses_part(self):
        return self is not Variant.GlobalOnly

    @property
    def fen(self):
        """Pose normalization (part rotation) plus the part transformers."""
        return self in (Variant.GlobalPartFEN, Variant.FullPDC)

    @property
    def fwn(self):
        return self in (Variant.GlobalPartFWN, Variant.FullPDC)

    @classmethod
    def parse(cls, name):
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}") from None


@dataclass
class ModelConfig:
    num_classes: int = 4
    input_h: int = 64
    input_w: int = 32
    in_channels: int = 3
    feature_dim: int = 1024
    trunk: str = "c7x16s2 bn relu mp3s2 c3x32 bn relu c3x32 bn relu"
    branch: str = "c3x64s2 bn relu"
    ptn_channels: str = "8,16"
    fwn_k: int = 1
    variant: str = "FullPDC"
    pixel_mean: float = 0.5

    def __post_init__(self):
        Variant.parse(self.variant)
        FwnConfig(self.fwn_k)
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ConfigError("num_classes and feature_dim must be >= 1")
        stride = total_stride(self.trunk) * total_stride(self.branch)
        if self.input_h % stride or self.input_w % stride:
            raise ConfigError(
                f"input {self.input_h}x{self.input_w} is not divisible by the network stride {stride}"
            )

    def to_meta(self):
        return {f"model.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta):
        kwargs = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key in meta:
                kwargs[f.name] = f.type(meta[key]) if f.type in (int, float) else meta[key]
        return cls(**kwargs)


_TOKEN = re.compile(r"^(c)(\d+)x(\d+)(?:s(\d+))?$|^(mp|ap)(\d+)s(\d+)$|^(bn|relu)$")


def parse_layers(text, in_ch, rng):
    layers, ch = [], in_ch
    for tok in text.split():
        m = _TOKEN.match(tok)
        if not m:
            raise ConfigError(f"bad layer token {tok!r}")
        if m.group(1):
            k, out = int(m.group(2)), int(m.group(3))
            s = int(m.group(4) or 1)
            layers.append(Conv2d(ch, out, k, stride=s, pad=k // 2, rng=rng))
            ch = out
        elif m.group(5):
            k, s = int(m.group(6)), int(m.group(7))
            cls = MaxPool2d if m.group(5) == "mp" else AvgPool2d
            layers.append(cls(k, s, pad=k // 2))
        elif tok == "bn":
            layers.append(BatchNorm2d(ch))
        else:
            layers.append(ReLU())
    return Sequential(layers), ch


def total_stride(text):
    stride = 1
    for tok in text.split():
        m = _TOKEN.match(tok)
        if not m:
            raise ConfigError(f"bad layer token {tok!r}")
        if m.group(1):
            stride *= int(m.group(4) or 1)
        elif m.group(5):
            stride *= int(m.group(7))
    return stride


class PdcModel:
    def __init__(self, config, seed=0):
        self.config = config
        self.variant = Variant.parse(config.variant)
        rng = np.random.default_rng([seed, 10])
        self.input_hw = (config.input_h, config.input_w)
        self.layout = fen.default_layout(self.input_hw)
        self.trunk, ch = parse_layers(config.trunk, config.in_channels, rng)
        m = config.feature_dim
        v = self.variant
        self.branch_g = self.branch_p = None
        self.head_g = self.head_p = None
        self.cls_g = self.cls_p = None
        self.ptn = None
        self.fwn = None
        if v.uses_global:
            self.branch_g, bch = parse_layers(config.branch, ch, rng)
            self.head_g = Sequential([Conv2d(bch, m, 1, rng=rng), GlobalAvgPool()])
            self.cls_g = Linear(m, config.num_classes, rng=rng, std=0.01)
        if v.uses_part:
            self.branch_p, bch = parse_layers(config.branch, ch, rng)
            self.head_p = Sequential([Conv2d(bch, m, 1, rng=rng), GlobalAvgPool()])
            self.cls_p = Linear(m, config.num_classes, rng=rng, std=0.01)
        if v.fen:
            channels = tuple(int(c) for c in config.ptn_channels.split(","))
            self.ptn = PtnBank(self.layout.extents, config.in_channels, channels, rng)
        if v.fwn:
            self.fwn = FeatureWeighting(m, FwnConfig(config.fwn_k))
        # the part stream keeps its own running statistics in the shared trunk
        self._part_stats = {
            name: [layer.running_mean.copy(), layer.running_var.copy()]
            for name, layer in self.trunk.named_layers("trunk.") if isinstance(layer, BatchNorm2d)
        }

    def _swap_trunk_stats(self):
        for name, layer in self.trunk.named_layers("trunk."):
            if name in self._part_stats:
                alt = self._part_stats[name]
                layer.running_mean, alt[0] = alt[0], layer.running_mean
                layer.running_var, alt[1] = alt[1], layer.running_var

    # parameter bookkeeping

    def named_layers(self):
        yield from self.trunk.named_layers("trunk.")
        for name in ("branch_g", "head_g", "branch_p", "head_p"):
            seq = getattr(self, name)
            if seq is not None:
                yield from seq.named_layers(name + ".")
        if self.cls_g is not None:
            yield "cls_g", self.cls_g
        if self.cls_p is not None:
            yield "cls_p", self.cls_p
        if self.ptn is not None:
            yield from self.ptn.named_layers()

    def parameters(self):
        """Live parameter arrays keyed by dotted name."""
        out = {}
        for prefix, layer in self.named_layers():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        if self.fwn is not None:
            out.update(self.fwn.params)
        return out

    def gradients(self):
        out = {}
        for prefix, layer in self.named_layers():
            for k, v in layer.grads.items():
                out[f"{prefix}.{k}"] = v
        if self.fwn is not None:
            out.update(self.fwn.grads)
        return out

    def buffers(self):
        out = {}
        for prefix, layer in self.named_layers():
            for k, v in layer.buffers().items():
                out[f"{prefix}.{k}"] = v
        for name, (mean, var) in self._part_stats.items():
            out[f"{name}.running_mean_part"] = mean
            out[f"{name}.running_var_part"] = var
        return out

    def lr_multipliers(self, ptn_lr_mult):
        return {k: ptn_lr_mult for k in self.parameters() if k.startswith("ptn.")}

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()
        if self.fwn is not None:
            self.fwn.zero_grad()

    def state(self):
        out = dict(self.parameters())
        out.update(self.buffers())
        return out

    def load_state(self, tensors, strict=True):
        """Copy arrays into the model in place (buffers are rebound)."""
        params = self.parameters()
        for name, arr in params.items():
            if name not in tensors:
                if strict:
                    raise ShapeError(f"checkpoint lacks {name}")
                continue
            if tensors[name].shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != model {arr.shape}")
            arr[...] = tensors[name]
        for prefix, layer in self.named_layers():
            for k in layer.buffers():
                key = f"{prefix}.{k}"
                if key in tensors:
                    setattr(layer, k, np.array(tensors[key], dtype=np.float64))
                elif strict:
                    raise ShapeError(f"checkpoint lacks {key}")
        for name, alt in self._part_stats.items():
            for j, k in enumerate(("running_mean_part", "running_var_part")):
                key = f"{name}.{k}"
                if key in tensors:
                    alt[j] = np.array(tensors[key], dtype=np.float64)
                elif strict:
                    raise ShapeError(f"checkpoint lacks {key}")

    # forward / backward

    def canvas(self, parts):
        n, c = parts[0].shape[:2]
        out = np.zeros((n, c) + self.input_hw)
        for i, p in enumerate(parts):
            rs, cs = self.layout.slot(i)
            out[:, :, rs, cs] = p
        return out

    def forward_batch(self, images=None, parts=None, train=True, streams=None):
        """Run the streams on a batch.

        ``images``: ``[N, C, H, W]``; ``parts``: six ``[N, C, h, w]`` arrays
        already cropped (and turned upright for FEN variants). ``streams``
        restricts to ``{"global"}`` or ``{"part"}`` (staged training).
        Returns ``(out, cache)`` with ``out`` holding logits, features and
        the fused vector.
        """
        v = self.variant
        streams = streams or {s for s, on in (("global", v.uses_global), ("part", v.uses_part)) if on}
        out, cache = {}, {"streams": streams}
        mean = self.config.pixel_mean
        if "global" in streams:
            if images is None:
                raise ShapeError("global stream needs images")
            if tuple(images.shape[2:]) != self.input_hw:
                raise ShapeError(f"image extent {images.shape[2:]} != model input {self.input_hw}")
            x, c_t = self.trunk.fwd(images - mean, train)
            x, c_b = self.branch_g.fwd(x, train)
            f, c_h = self.head_g.fwd(x, train)
            out["f_global"] = f
            cache["global"] = (c_t, c_b, c_h)
        if "part" in streams:
            if parts is None:
                raise ShapeError("part stream needs parts")
            if self.ptn is not None:
                parts, thetas, c_ptn = self.ptn.fwd(parts, train)
                out["thetas"] = thetas
                cache["ptn"] = c_ptn
            canvas = self.canvas(parts)
            self._swap_trunk_stats()
            try:
                x, c_t = self.trunk.fwd(canvas - mean, train)
            finally:
                self._swap_trunk_stats()
            x, c_b = self.branch_p.fwd(x, train)
            f, c_h = self.head_p.fwd(x, train)
            out["f_part"] = f
            out["canvas"] = canvas
            cache["part"] = (c_t, c_b, c_h)
        m = self.config.feature_dim
        if "global" in streams and "part" in streams:
            if self.fwn is not None:
                fused, cache["fwn"] = self.fwn.fwd(out["f_global"], out["f_part"])
            else:
                fused = np.concatenate([out["f_global"], out["f_part"]], axis=1)
            out["fused"] = fused
            g_half, p_half = fused[:, :m], fused[:, m:]
        else:
            g_half = out.get("f_global")
            p_half = out.get("f_part")
            out["fused"] = g_half if g_half is not None else p_half
        if g_half is not None:
            out["logits_g"], cache["cls_g"] = self.cls_g.fwd(g_half, train)
        if p_half is not None:
            out["logits_p"], cache["cls_p"] = self.cls_p.fwd(p_half, train)
        return out, cache

    def backward_batch(self, cache, grad_logits_g=None, grad_logits_p=None):
        """Accumulate parameter gradients; returns theta gradients (if any)."""
        streams = cache["streams"]
        gg = self.cls_g.bwd(cache["cls_g"], grad_logits_g) if "cls_g" in cache else None
        gp = self.cls_p.bwd(cache["cls_p"], grad_logits_p) if "cls_p" in cache else None
        if "fwn" in cache:
            gg, gp = self.fwn.bwd(cache["fwn"], np.concatenate([gg, gp], axis=1))
        gthetas = None
        # part stream first, then global: fixed order keeps trunk sums reproducible
        if "part" in streams:
            c_t, c_b, c_h = cache["part"]
            g = self.head_p.bwd(c_h, gp)
            g = self.branch_p.bwd(c_b, g)
            g = self.trunk.bwd(c_t, g)
            if "ptn" in cache:
                slots = [g[:, :, rs, cs] for rs, cs in (self.layout.slot(i) for i in range(fen.NUM_PARTS))]
                gthetas = self.ptn.bwd(cache["ptn"], slots)
        if "global" in streams:
            c_t, c_b, c_h = cache["global"]
            g = self.head_g.bwd(c_h, gg)
            g = self.branch_g.bwd(c_b, g)
            self.trunk.bwd(c_t, g)
        return gthetas

    def part_inputs(self, image, maps_or_joints):
        """Parts of one image as six ``[1, C, h, w]`` arrays, per this model's variant."""
        parts, _, _ = fen.extract_parts(image, maps_or_joints, rotate=self.variant.fen, layout=self.layout)
        return [p[None] for p in parts]

    def forward(self, image, response_maps, train=False):
        """Single image + response maps -> ``(global_logits, part_logits, fused)``."""
        image = np.asarray(image, dtype=np.float64)
        parts = self.part_inputs(image, response_maps) if self.variant.uses_part else None
        out, _ = self.forward_batch(image[None], parts, train=train)
        lg = out.get("logits_g")
        lp = out.get("logits_p")
        return (None if lg is None else lg[0], None if lp is None else lp[0], out["fused"][0])

    def extract_feature(self, image, response_maps):
        return self.forward(image, response_maps, train=False)[2]


PTN_PART_NAMES = tuple(fen.PART_NAMES[i] for i in PTN_PARTS)
