"""Finite-difference gradient checks for every differentiable piece.

Each check returns rows ``(component, max_rel_error, tolerance)``. Losses are
random linear functionals ``sum(R * y)`` of the output (or the summed softmax
losses end to end). Instances are drawn away from kinks (ReLU zero, pooling
ties, bilinear cell edges) so central differences are meaningful there.
"""
import numpy as np

from . import nn
from .fwn import FeatureWeighting, FwnConfig
from .model import ModelConfig, PdcModel
from .nn.gradcheck import numeric_grad, rel_error
from .ptn import IDENTITY_THETA, PTN_PARTS, affine_sample, affine_sample_backward

FWN_TOL = 1e-8
PTN_TOL = 1e-4
LAYER_TOL = 1e-4
E2E_TOL = 1e-3


def _signed(rng, lo, hi, size):
    return rng.uniform(lo, hi, size) * rng.choice([-1.0, 1.0], size)


def check_fwn(instances=100, m=8, n=8, seed=0):
    """Single weight layer with tanh, the trained configuration."""
    rng = np.random.default_rng([seed, 20])
    worst = 0.0
    for _ in range(instances):
        g = rng.uniform(-1, 1, (1, m))
        p = _signed(rng, 0.5, 1.0, (1, n))
        fw = FeatureWeighting(n, FwnConfig(1))
        fw.params["fwn.W"][:] = _signed(rng, 0.5, 1.0, n)
        fw.params["fwn.B"][:] = rng.uniform(-0.25, 0.25, n)
        r = _signed(rng, 0.5, 1.5, (1, m + n))

        def loss():
            return float(np.sum(r * fw.fwd(g, p)[0]))

        _, cache = fw.fwd(g, p)
        fw.zero_grad()
        gg, gp = fw.bwd(cache, r)
        pairs = [(gg, numeric_grad(loss, g)), (gp, numeric_grad(loss, p))]
        pairs += [(fw.grads[k], numeric_grad(loss, fw.params[k])) for k in fw.params]
        worst = max(worst, max(rel_error(a, b) for a, b in pairs))
    return [("fwn", worst, FWN_TOL)]


def check_fwn_depths(instances=20, m=8, n=8, seed=0, tol=1e-6):
    """Every depth k = 0..4 (stacked layers lose a few digits to FD noise)."""
    rng = np.random.default_rng([seed, 21])
    rows = []
    for k in range(5):
        worst = 0.0
        for _ in range(instances):
            fw = FeatureWeighting(n, FwnConfig(k))
            for name in fw.params:
                if name.endswith("W"):
                    fw.params[name][:] = _signed(rng, 0.5, 1.0, n)
                else:
                    fw.params[name][:] = rng.uniform(-0.25, 0.25, n)
            g = rng.uniform(-1, 1, (2, m))
            p = _signed(rng, 0.5, 1.0, (2, n))
            r = _signed(rng, 0.5, 1.5, (2, m + n))

            def loss():
                return float(np.sum(r * fw.fwd(g, p)[0]))

            _, cache = fw.fwd(g, p)
            fw.zero_grad()
            gg, gp = fw.bwd(cache, r)
            pairs = [(gg, numeric_grad(loss, g)), (gp, numeric_grad(loss, p))]
            pairs += [(fw.grads[x], numeric_grad(loss, fw.params[x])) for x in fw.params]
            worst = max(worst, max(rel_error(a, b) for a, b in pairs))
        rows.append((f"fwn k={k}", worst, tol))
    return rows


def _off_lattice_theta(rng, in_hw, out_hw, margin=1e-3):
    """A near-identity theta whose sample points avoid cell edges by ``margin`` pixels."""
    h, w = in_hw
    from .ptn import affine_grid, to_pixels
    while True:
        theta = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]) + rng.normal(0, 0.08, 6)
        px, py = to_pixels(*affine_grid(theta, out_hw), in_hw)
        near = lambda c: np.abs(c - np.round(c))
        inside = (px > 0) & (px < w - 1) & (py > 0) & (py < h - 1)
        if inside.any() and near(px).min() > margin and near(py).min() > margin:
            return theta


def check_ptn(instances=10, seed=0):
    """Sampler gradients w.r.t. theta and the input image."""
    rng = np.random.default_rng([seed, 22])
    wt = wi = 0.0
    for _ in range(instances):
        hw = (int(rng.integers(6, 12)), int(rng.integers(4, 9)))
        out_hw = (int(rng.integers(3, 9)), int(rng.integers(3, 9)))
        img = rng.normal(size=(2,) + hw)
        theta = _off_lattice_theta(rng, hw, out_hw)
        r = rng.normal(size=(2,) + out_hw)

        def loss():
            return float(np.sum(r * affine_sample(img, theta, out_hw)))

        gimg, gtheta = affine_sample_backward(img, theta, r, out_hw)
        wt = max(wt, rel_error(gtheta, numeric_grad(loss, theta, eps=1e-6)))
        wi = max(wi, rel_error(gimg, numeric_grad(loss, img)))
    return [("ptn theta", wt, PTN_TOL), ("ptn input", wi, PTN_TOL)]


def _layer_check(layer, x, rng, train=True):
    """Max rel error over the input and every parameter of one layer."""
    y, _ = layer.fwd(x, train)
    r = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(r * layer.fwd(x, train)[0]))

    _, cache = layer.fwd(x, train)
    layer.zero_grad()
    gx = layer.bwd(cache, r)
    errs = [rel_error(gx, numeric_grad(loss, x))]
    errs += [rel_error(layer.grads[k], numeric_grad(loss, layer.params[k])) for k in layer.params]
    return max(errs)


def _spread(rng, shape, gap=1e-3):
    """Random values whose pairwise gaps and distance from zero exceed ``gap``."""
    n = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, 2 * n + 1)
    vals = vals[np.abs(vals) > gap]
    return rng.permutation(rng.choice(vals, n, replace=False)).reshape(shape)


def check_layers(seed=0):
    rng = np.random.default_rng([seed, 23])
    rows = []
    for k, s, p in ((3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)):
        conv = nn.Conv2d(3, 4, k, stride=s, pad=p, rng=rng)
        conv.params["b"][:] = rng.normal(size=4)
        rows.append((f"conv k{k} s{s} p{p}", _layer_check(conv, rng.normal(size=(2, 3, 7, 6)), rng), LAYER_TOL))
    rows.append(("relu", _layer_check(nn.ReLU(), _spread(rng, (2, 3, 4, 4)), rng), LAYER_TOL))
    rows.append(("tanh", _layer_check(nn.Tanh(), rng.normal(size=(2, 3, 4, 4)), rng), LAYER_TOL))
    bn = nn.BatchNorm2d(3)
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"][:] = rng.normal(size=3)
    rows.append(("batchnorm train", _layer_check(bn, rng.normal(size=(3, 3, 4, 4)), rng), LAYER_TOL))
    bn.running_mean = rng.normal(size=3)
    bn.running_var = rng.uniform(0.5, 2.0, 3)
    rows.append(("batchnorm eval", _layer_check(bn, rng.normal(size=(3, 3, 4, 4)), rng, train=False), LAYER_TOL))
    for k, s, p in ((2, 2, 0), (3, 2, 1), (3, 1, 1)):
        rows.append((f"maxpool k{k} s{s} p{p}",
                     _layer_check(nn.MaxPool2d(k, s, p), _spread(rng, (2, 2, 6, 5)), rng), LAYER_TOL))
        rows.append((f"avgpool k{k} s{s} p{p}",
                     _layer_check(nn.AvgPool2d(k, s, p), rng.normal(size=(2, 2, 6, 5)), rng), LAYER_TOL))
    rows.append(("global avgpool", _layer_check(nn.GlobalAvgPool(), rng.normal(size=(2, 3, 4, 5)), rng), LAYER_TOL))
    fc = nn.Linear(5, 4, rng=rng)
    fc.params["b"][:] = rng.normal(size=4)
    rows.append(("linear", _layer_check(fc, rng.normal(size=(3, 5)), rng), LAYER_TOL))
    logits = rng.normal(size=(4, 5)) * 2
    labels = rng.integers(0, 5, 4)
    _, g = nn.softmax_xent(logits, labels)
    num = numeric_grad(lambda: nn.softmax_xent(logits, labels)[0], logits)
    rows.append(("softmax loss", rel_error(g, num), LAYER_TOL))
    return rows


def tiny_model(seed=0, variant="FullPDC"):
    """1-conv trunk, 1-conv branches, 4 classes, 16x8 input."""
    cfg = ModelConfig(num_classes=4, input_h=16, input_w=8, feature_dim=6, trunk="c3x4 bn relu",
                      branch="c3x4 bn relu", ptn_channels="2,2", variant=variant)
    model = PdcModel(cfg, seed=seed)
    rng = np.random.default_rng([seed, 24])
    if model.ptn is not None:
        for i in PTN_PARTS:
            for layer in model.ptn.nets[i].layers:
                if isinstance(layer, nn.Conv2d):  # zero biases put ReLU inputs on the kink
                    layer.params["b"][:] = rng.normal(0, 0.1, layer.params["b"].shape)
            fc = model.ptn.nets[i].layers[-1]
            fc.params["W"][:] = rng.normal(0, 0.3, fc.params["W"].shape)
            fc.params["b"][:] += rng.normal(0, 0.08, 6)
    if model.fwn is not None:
        for k, v in model.fwn.params.items():
            v[:] = _signed(rng, 0.5, 1.0, v.shape) if k.endswith("W") else rng.uniform(-0.25, 0.25, v.shape)
    return model


def check_e2e(seed=0, variant="FullPDC"):
    """Every parameter of a tiny model against central differences of the summed losses."""
    model = tiny_model(seed, variant)
    rng = np.random.default_rng([seed, 25])
    n = 4
    images = rng.uniform(0, 1, (n, 3, 16, 8))
    parts = [rng.uniform(0, 1, (n, 3) + tuple(e)) for e in model.layout.extents]
    labels = np.arange(n) % 4
    if model.ptn is not None:
        _move_off_lattice(model, images, parts, rng)

    def loss():
        out, _ = model.forward_batch(images, parts, train=True)
        total = 0.0
        for key in ("logits_g", "logits_p"):
            if key in out:
                total += nn.softmax_xent(out[key], labels)[0]
        return total

    out, cache = model.forward_batch(images, parts, train=True)
    grads = {}
    for key in ("logits_g", "logits_p"):
        if key in out:
            grads[key] = nn.softmax_xent(out[key], labels)[1]
    model.zero_grad()
    model.backward_batch(cache, grads.get("logits_g"), grads.get("logits_p"))
    analytic = model.gradients()
    worst, where = 0.0, ""
    for name, p in model.parameters().items():
        err = norm_rel_error(analytic[name], numeric_grad(loss, p, eps=1e-6))
        if err > worst:
            worst, where = err, name
    return [(f"end-to-end {variant} (worst: {where})", worst, E2E_TOL)]


def _placement(thetas, extents):
    """Per PTN part: smallest pixel distance to a cell edge, and the smallest inside fraction."""
    from .ptn import affine_grid, to_pixels
    out = {}
    for i, th in thetas.items():
        h, w = extents[i]
        gap, inside = np.inf, 1.0
        for t in th:
            px, py = to_pixels(*affine_grid(t, extents[i]), extents[i])
            gap = min(gap, np.abs(px - np.round(px)).min(), np.abs(py - np.round(py)).min())
            inside = min(inside, float(np.mean((px > 0) & (px < w - 1) & (py > 0) & (py < h - 1))))
        out[i] = gap, inside
    return out


def _move_off_lattice(model, images, parts, rng, margin=1e-3, min_inside=0.75):
    """Redraw localization heads until sample points avoid kinks and mostly land on the part."""
    extents = model.layout.extents
    scale = 0.3
    for _ in range(200):
        out, _ = model.forward_batch(images, parts, train=True)
        bad = [i for i, (gap, inside) in _placement(out["thetas"], extents).items()
               if gap <= margin or inside < min_inside]
        if not bad:
            return
        scale *= 0.9
        for i in bad:
            fc = model.ptn.nets[i].layers[-1]
            fc.params["W"][:] = rng.normal(0, scale, fc.params["W"].shape)
            fc.params["b"][:] = IDENTITY_THETA + rng.normal(0, 0.08, 6)
    raise RuntimeError("could not place PTN sample points away from cell edges")


def norm_rel_error(a, n, floor=1e-5):
    """``|a - n| / max(|a|, |n|, floor)`` over a whole tensor.

    Central differences carry about 1e-10 of round-off per entry, so a tensor
    whose true gradient is tiny or vanishes (a bias feeding batch norm) is
    held to absolute agreement (``tol * floor``) instead of comparing noise
    with noise.
    """
    a, n = np.ravel(a), np.ravel(n)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


SCOPES = {
    "fwn": lambda: check_fwn() + check_fwn_depths(),
    "ptn": check_ptn,
    "nn": check_layers,
    "e2e": check_e2e,
}


def run_scope(scope):
    if scope == "all":
        rows = []
        for name in ("fwn", "ptn", "nn", "e2e"):
            rows += SCOPES[name]()
        return rows
    return SCOPES[scope]()


# optimization sanity

def _one_identity_trainset(variant, seed=0):
    from . import data, fen, synth
    from .model import Variant
    from .train import TrainSet
    spec = synth.SynthSpec(identities=1, images_per_identity=1, seed=seed)
    ds = data.from_samples(synth.generate(spec))
    return TrainSet.build(ds, Variant.parse(variant), fen.default_layout(ds.image_hw))


def toy_train_config(variant="FullPDC", **kw):
    from .train import TrainConfig
    base = dict(variant=variant, batch_size=4, feature_dim=32, schedule="joint", weight_decay=0.0)
    base.update(kw)
    return TrainConfig(**base)


def overfit(variant="FullPDC", iterations=200, target=0.01, seed=0):
    """Train a 4-class toy model on one identity; returns ``(first_iter_below_target, final_loss)``."""
    from .train import Trainer
    cfg = toy_train_config(variant, iterations=iterations, seed=seed)
    ts = _one_identity_trainset(variant, seed)
    trainer = Trainer(cfg, ts, PdcModel(cfg.model_config(4), seed=seed))
    hit, loss = None, None
    for it in range(iterations):
        lg, lp, _, _ = trainer.step()
        loss = lg + lp
        if hit is None and loss < target:
            hit = it + 1
    return hit, loss


def zero_lr_step(variant="FullPDC", seed=0):
    """One step with every multiplier at zero after a warm step; True when nothing moved."""
    from .train import Trainer
    cfg = toy_train_config(variant, seed=seed)
    trainer = Trainer(cfg, _one_identity_trainset(variant, seed), PdcModel(cfg.model_config(4), seed=seed))
    trainer.step()  # non-zero velocity, so a skipped update is really skipped
    before = {k: v.tobytes() for k, v in trainer.model.parameters().items()}
    trainer.multipliers = {k: 0.0 for k in trainer.model.parameters()}
    trainer.step()
    return all(v.tobytes() == before[k] for k, v in trainer.model.parameters().items())


def ptn_lr_ratio(seed=0):
    """First-step update of every PTN parameter divided by ``-grad``, over the base lr.

    Returns ``(effective_lr / base_lr, max abs deviation of delta from -lr_eff * grad)``.
    """
    from .train import Trainer
    cfg = toy_train_config("FullPDC", seed=seed, momentum=0.0)
    trainer = Trainer(cfg, _one_identity_trainset("FullPDC", seed), PdcModel(cfg.model_config(4), seed=seed))
    params = trainer.model.parameters()
    ptn_names = [k for k in params if k.startswith("ptn.")]
    before = {k: params[k].copy() for k in ptn_names}
    trainer.step()
    grads = trainer.model.gradients()
    lr_eff = cfg.sgd().lr_at(0, trainer.multipliers[ptn_names[0]])
    dev = max(float(np.max(np.abs((params[k] - before[k]) + lr_eff * grads[k]))) for k in ptn_names)
    ratios = {trainer.multipliers[k] for k in ptn_names}
    others = {trainer.multipliers.get(k, 1.0) for k in params if k not in ptn_names}
    if len(ratios) != 1 or others != {1.0}:
        return float("nan"), dev
    return lr_eff / cfg.base_lr, dev
