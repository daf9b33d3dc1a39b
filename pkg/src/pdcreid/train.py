"""Training configuration, the training loop, checkpoints and feature extraction.

Config files hold ``key = value`` lines (``#`` starts a comment). Unknown keys
are rejected. Batches are a pure function of ``(seed, iteration)``: the sample
stream is the concatenation of per-epoch permutations, so a resumed run sees
exactly the batches an uninterrupted one would.

With ``schedule = staged`` the first ``pretrain_iterations`` steps train the
global stream alone, then both streams train jointly. ``schedule = joint``
trains both from the first step.
"""
import csv
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import data as datamod
from . import synth
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .model import ModelConfig, PdcModel, Variant
from .nn import SGD, SgdConfig, softmax_xent
from .ptn import write_theta_log_header, write_theta_rows
from .tensorio import load_checkpoint, save_checkpoint

LOG_HEADER = ("iter", "loss_global", "loss_part", "lr")
VELOCITY_PREFIX = "velocity/"
SCHEDULES = ("staged", "joint")


@dataclass
class TrainConfig:
    variant: str = "FullPDC"
    batch_size: int = 16
    input_h: int = 64
    input_w: int = 32
    base_lr: float = 0.01
    decay_interval: int = 20000
    decay_factor: float = 0.1
    ptn_lr_mult: float = 0.001
    fwn_k: int = 1
    seed: int = 0
    iterations: int = 1000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    feature_dim: int = 1024
    schedule: str = "staged"
    pretrain_iterations: int = -1  # -1: a quarter of the iterations
    checkpoint_interval: int = 0  # 0: final checkpoint only
    train_fraction: float = 0.5
    split_seed: int = 0
    trunk: str = ModelConfig.trunk
    branch: str = ModelConfig.branch
    ptn_channels: str = ModelConfig.ptn_channels
    theta_log: int = 0

    def __post_init__(self):
        Variant.parse(self.variant)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        if self.ptn_lr_mult < 0:
            raise ConfigError(f"ptn_lr_mult must be >= 0, got {self.ptn_lr_mult}")
        if self.pretrain_iterations < -1:
            raise ConfigError("pretrain_iterations must be >= 0 (or -1 for the default)")
        self.sgd()
        self.model_config(1)

    @property
    def pretrain_steps(self):
        if self.schedule == "joint":
            return 0
        v = Variant.parse(self.variant)
        if not (v.uses_global and v.uses_part):
            return 0
        if self.pretrain_iterations == -1:
            return self.iterations // 4
        return self.pretrain_iterations

    def sgd(self):
        return SgdConfig(base_lr=self.base_lr, lr_decay_factor=self.decay_factor,
                         decay_interval=self.decay_interval, momentum=self.momentum,
                         weight_decay=self.weight_decay)

    def model_config(self, num_classes):
        return ModelConfig(num_classes=num_classes, input_h=self.input_h, input_w=self.input_w,
                           feature_dim=self.feature_dim, trunk=self.trunk, branch=self.branch,
                           ptn_channels=self.ptn_channels, fwn_k=self.fwn_k, variant=self.variant)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping):
        return cls(**coerce(cls, mapping, "train"))


def coerce(cls, mapping, what):
    types = {f.name: f.default for f in fields(cls)}
    out = {}
    for k, v in mapping.items():
        if k not in types:
            raise ConfigError(f"unknown {what} key {k!r}; known keys: {', '.join(types)}")
        kind = type(types[k])
        try:
            out[k] = kind(v) if kind is not int else int(str(v), 10)
        except ValueError:
            raise ConfigError(f"{what} key {k!r}: cannot read {v!r} as {kind.__name__}") from None
    return out


def parse_config_text(text, source="<config>"):
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(items):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_mapping(config_path=None, overrides=None):
    mapping = {}
    if config_path:
        with open(config_path) as fh:
            mapping.update(parse_config_text(fh.read(), config_path))
    mapping.update(overrides or {})
    if "PDC_SEED" in os.environ:
        mapping["seed"] = os.environ["PDC_SEED"]
    return mapping


@dataclass
class TrainSet:
    """Training images with labels remapped to ``0..K-1`` and precomputed parts."""

    images: np.ndarray
    labels: np.ndarray
    parts: list
    identities: list

    @classmethod
    def build(cls, dataset, variant, layout):
        ids = sorted(set(dataset.labels.tolist()))
        remap = {v: i for i, v in enumerate(ids)}
        labels = np.array([remap[v] for v in dataset.labels.tolist()], dtype=np.int64)
        parts = datamod.part_batches(dataset, rotate=variant.fen, layout=layout) if variant.uses_part else None
        return cls(dataset.images, labels, parts, ids)


def train_eval_split(dataset, config):
    return synth.split(dataset.labels, dataset.cameras, config.train_fraction, config.split_seed)


def batch_positions(n, batch_size, seed, iteration):
    """Sample positions for one iteration of an endless shuffled stream."""
    start = iteration * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    cache = {}
    for j in range(batch_size):
        k = start + j
        epoch = k // n
        if epoch not in cache:
            cache[epoch] = np.random.default_rng([seed, 5, epoch]).permutation(n)
        out[j] = cache[epoch][k % n]
    return out


def _round_f32(arrays):
    for v in arrays.values():
        v[...] = v.astype(np.float32)


class Trainer:
    def __init__(self, config, trainset, model=None):
        self.config = config
        self.trainset = trainset
        self.variant = Variant.parse(config.variant)
        n_cls = len(trainset.identities)
        self.model = model or PdcModel(config.model_config(n_cls), seed=config.seed)
        if tuple(trainset.images.shape[2:]) != self.model.input_hw:
            raise ConfigError(
                f"dataset images are {trainset.images.shape[2]}x{trainset.images.shape[3]} but "
                f"input_h x input_w is {config.input_h}x{config.input_w}"
            )
        self.optimizer = SGD(config.sgd())
        self.multipliers = self.model.lr_multipliers(config.ptn_lr_mult)
        self.iteration = 0

    # one step

    def streams_at(self, iteration):
        if iteration < self.config.pretrain_steps:
            return {"global"}
        return None

    def step(self, iteration=None):
        """One SGD step. Returns ``(loss_global, loss_part, lr, thetas)``."""
        it = self.iteration if iteration is None else iteration
        cfg, ts, model = self.config, self.trainset, self.model
        pos = batch_positions(len(ts.labels), cfg.batch_size, cfg.seed, it)
        labels = ts.labels[pos]
        images = ts.images[pos] if self.variant.uses_global else None
        parts = [p[pos] for p in ts.parts] if ts.parts is not None else None
        streams = self.streams_at(it)
        # non-finite values are reported by _check_finite with context, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out, cache = model.forward_batch(images, parts, train=True, streams=streams)
            loss_g = loss_p = 0.0
            gg = gp = None
            if "logits_g" in out:
                loss_g, gg = softmax_xent(out["logits_g"], labels)
            if "logits_p" in out:
                loss_p, gp = softmax_xent(out["logits_p"], labels)
            model.zero_grad()
            model.backward_batch(cache, gg, gp)
        lr = cfg.sgd().lr_at(it)
        params, grads = model.parameters(), model.gradients()
        if streams is not None:
            active = set(active_parameters(model, streams))
            params = {k: v for k, v in params.items() if k in active}
        self._check_finite(it, lr, loss_g + loss_p, grads)
        self.optimizer.step(params, grads, it, self.multipliers)
        self.iteration = it + 1
        return loss_g, loss_p, lr, out.get("thetas")

    def _check_finite(self, it, lr, loss, grads):
        norms = {k: float(np.sqrt(np.sum(g * g))) for k, g in grads.items()}
        if math.isfinite(loss) and all(math.isfinite(v) for v in norms.values()):
            return
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)
        detail = ", ".join(f"{k}={v:.3g}" for k, v in worst[:8])
        raise NumericError(f"non-finite loss or gradient at iteration {it} (lr={lr:.6g}, loss={loss}); "
                           f"grad norms: {detail}")

    # state

    def state(self):
        tensors = dict(self.model.state())
        for k, v in self.optimizer.velocity.items():
            tensors[VELOCITY_PREFIX + k] = v
        return tensors

    def meta(self):
        meta = {"iteration": self.iteration, "num_classes": len(self.trainset.identities),
                "identities": " ".join(str(i) for i in self.trainset.identities)}
        meta.update({f"train.{k}": v for k, v in asdict(self.config).items()})
        meta.update(self.model.config.to_meta())
        return meta

    def save(self, directory):
        """Checkpoint; live state is rounded to f32 first so that resuming is exact."""
        _round_f32(self.model.parameters())
        for v in self.optimizer.velocity.values():
            v[...] = v.astype(np.float32)
        # buffers may be rebound arrays; round through load_state-like assignment
        bufs = self.model.buffers()
        _round_f32(bufs)
        save_checkpoint(directory, self.state(), self.meta())

    def restore(self, directory):
        tensors, meta = load_checkpoint(directory)
        model_tensors = {k: v for k, v in tensors.items() if not k.startswith(VELOCITY_PREFIX)}
        self.model.load_state(model_tensors)
        self.optimizer.velocity = {k[len(VELOCITY_PREFIX):]: v.copy() for k, v in tensors.items()
                                   if k.startswith(VELOCITY_PREFIX)}
        self.iteration = int(meta.get("iteration", 0))
        return meta


def active_parameters(model, streams):
    """Parameter names touched by the given streams (the trunk is always active)."""
    skip = []
    if "part" not in streams:
        skip += ["branch_p.", "head_p.", "cls_p.", "ptn.", "fwn."]
    if "global" not in streams:
        skip += ["branch_g.", "head_g.", "cls_g."]
    for k in model.parameters():
        if not any(k.startswith(s) for s in skip):
            yield k


def run_training(config, dataset, out_dir, resume=False, progress=None, stop_after=None):
    """Train on the train split of ``dataset``; writes log, checkpoints and the config snapshot.

    ``stop_after`` ends the run early (at that iteration count) without a
    final checkpoint, as an interruption would. Returns the trainer.
    """
    os.makedirs(out_dir, exist_ok=True)
    sp = train_eval_split(dataset, config)
    variant = Variant.parse(config.variant)
    probe = PdcModel(config.model_config(len(sp.train_ids)), seed=config.seed)
    trainset = TrainSet.build(dataset.subset(sp.train), variant, probe.layout)
    trainer = Trainer(config, trainset, model=probe)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    log_path = os.path.join(out_dir, "train_log.csv")
    theta_path = os.path.join(out_dir, "theta_log.csv")
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as fh:
        fh.write(config.to_text())
    if resume:
        meta = trainer.restore(ckpt_dir)
        saved = {k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")}
        ours = {k: str(v) for k, v in asdict(config).items()}
        diff = sorted(k for k in ours if k not in ("iterations", "checkpoint_interval")
                      and saved.get(k) != ours[k])
        if str(TrainConfig.from_mapping(saved).pretrain_steps) != str(config.pretrain_steps):
            diff.append("pretrain length")
        if diff:
            raise ConfigError(f"cannot resume: config differs from the checkpoint in {', '.join(diff)}")
        _truncate_log(log_path, trainer.iteration)
        if config.theta_log:
            _truncate_log(theta_path, trainer.iteration)
    else:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)
        if config.theta_log:
            with open(theta_path, "w") as fh:
                write_theta_log_header(fh)
    with open(log_path, "a", newline="") as log_fh, \
            (open(theta_path, "a") if config.theta_log else open(os.devnull, "w")) as theta_fh:
        writer = csv.writer(log_fh, lineterminator="\n")
        while trainer.iteration < config.iterations:
            if stop_after is not None and trainer.iteration >= stop_after:
                return trainer
            it = trainer.iteration
            lg, lp, lr, thetas = trainer.step()
            writer.writerow([it, repr(float(lg)), repr(float(lp)), repr(float(lr))])
            if thetas and config.theta_log:
                write_theta_rows(theta_fh, it, thetas)
            if progress is not None:
                progress(it, lg, lp, lr)
            done = trainer.iteration
            if config.checkpoint_interval and done % config.checkpoint_interval == 0 and done < config.iterations:
                log_fh.flush()
                theta_fh.flush()
                trainer.save(ckpt_dir)
    trainer.save(ckpt_dir)
    return trainer


def _truncate_log(path, iteration):
    """Keep the header and rows of iterations before ``iteration``."""
    if not os.path.exists(path):
        raise CheckpointError(f"cannot resume: {path} is missing")
    with open(path) as fh:
        lines = fh.readlines()
    keep = lines[:1] + [l for l in lines[1:] if int(l.split(",", 1)[0]) < iteration]
    with open(path, "w") as fh:
        fh.writelines(keep)


def load_model(ckpt_dir):
    """Rebuild a model from a checkpoint directory; returns ``(model, meta)``."""
    tensors, meta = load_checkpoint(ckpt_dir)
    try:
        mc = ModelConfig.from_meta(meta)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{ckpt_dir}: unreadable model metadata ({exc})") from None
    model = PdcModel(mc)
    try:
        model.load_state({k: v for k, v in tensors.items() if not k.startswith(VELOCITY_PREFIX)})
    except ShapeError as exc:
        raise CheckpointError(f"{ckpt_dir}: checkpoint does not fit its own model config ({exc})") from None
    return model, meta


def extract_features(model, dataset, chunk=64):
    """Fused features ``[N, D]`` in inference mode."""
    if tuple(dataset.image_hw) != model.input_hw:
        raise CheckpointError(
            f"dataset images are {dataset.image_hw[0]}x{dataset.image_hw[1]} but the checkpoint expects "
            f"{model.input_hw[0]}x{model.input_hw[1]}"
        )
    variant = model.variant
    feats = []
    for start in range(0, len(dataset), chunk):
        sub = dataset.subset(range(start, min(start + chunk, len(dataset))))
        parts = datamod.part_batches(sub, rotate=variant.fen, layout=model.layout) if variant.uses_part else None
        out, _ = model.forward_batch(sub.images, parts, train=False)
        feats.append(out["fused"])
    return np.concatenate(feats, axis=0)
