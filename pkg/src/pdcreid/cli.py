"""Command line entry point ``pdc``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(non-finite loss, failed gradient check), 3 I/O or checkpoint error.
"""
import argparse
import contextlib
import os
import sys

import numpy as np

from . import checks, data, evaluation, experiments, fen, synth
from .errors import CheckpointError, ConfigError, NumericError, PdcError, ProtocolError, ShapeError
from .tensorio import read_pdct, write_pdct
from .train import (TrainConfig, coerce, extract_features, load_model, parse_config_text,
                    parse_overrides, resolve_mapping, run_training, train_eval_split)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _write_snapshot(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)


def cmd_synth(args):
    mapping = resolve_mapping(args.config, parse_overrides(args.set))
    spec = synth.SynthSpec.from_mapping(mapping)
    samples = synth.generate(spec)
    data.write_dataset(args.out, samples, spec, heatmaps=args.heatmaps)
    print(f"wrote {len(samples)} images of {spec.identities} identities to {args.out}")
    return EXIT_OK


def _train_config(args):
    return TrainConfig.from_mapping(resolve_mapping(args.config, parse_overrides(args.set)))


def cmd_train(args):
    config = _train_config(args)
    dataset = data.load_dataset(args.data)

    def progress(it, lg, lp, lr):
        if args.verbose and (it % 50 == 0 or it == config.iterations - 1):
            print(f"iter {it} loss_global {lg:.4f} loss_part {lp:.4f} lr {lr:.3g}", flush=True)

    trainer = run_training(config, dataset, args.out, resume=args.resume, progress=progress)
    print(f"trained {config.variant} for {trainer.iteration} iterations; checkpoint in "
          f"{os.path.join(args.out, 'checkpoint')}")
    return EXIT_OK


def _checkpoint_dir(path):
    """Accept a run directory or the checkpoint directory itself."""
    nested = os.path.join(path, "checkpoint")
    return nested if os.path.isdir(nested) else path


def _eval_split(dataset, meta):
    saved = {k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")}
    keys = {k: saved[k] for k in ("train_fraction", "split_seed") if k in saved}
    config = TrainConfig.from_mapping(dict(coerce(TrainConfig, keys, "train")))
    return train_eval_split(dataset, config)


def cmd_eval(args):
    model, meta = load_model(_checkpoint_dir(args.checkpoint))
    dataset = data.load_dataset(args.data)
    sp = _eval_split(dataset, meta)
    probe, gallery = dataset.subset(sp.probe), dataset.subset(sp.gallery)
    dm = evaluation.distance_matrix(extract_features(model, probe), extract_features(model, gallery),
                                    probe.labels, gallery.labels, probe.cameras, gallery.cameras)
    report = evaluation.evaluate(dm, exclude_same_camera=args.exclude_same_camera)
    evaluation.write_report(args.out, report)
    _write_snapshot(args.out, "resolved_config.txt",
                    f"checkpoint = {os.path.abspath(_checkpoint_dir(args.checkpoint))}\n"
                    f"data = {os.path.abspath(args.data)}\n"
                    f"exclude_same_camera = {int(args.exclude_same_camera)}\n"
                    f"probes = {len(sp.probe)}\ngallery = {len(sp.gallery)}\n")
    for name, value in report.metrics().items():
        print(f"{name} {value:.4f}")
    return EXIT_OK


def cmd_extract(args):
    model, _ = load_model(_checkpoint_dir(args.checkpoint))
    dataset = data.load_dataset(args.data)
    feats = extract_features(model, dataset)
    os.makedirs(args.out, exist_ok=True)
    write_pdct(os.path.join(args.out, "features.pdct"), feats)
    with open(os.path.join(args.out, "features_index.csv"), "w") as fh:
        fh.write("row,identity,index,camera\n")
        for i, (l, x, c) in enumerate(zip(dataset.labels, dataset.indices, dataset.cameras)):
            fh.write(f"{i},{l},{x},{c}\n")
    _write_snapshot(args.out, "resolved_config.txt",
                    f"checkpoint = {os.path.abspath(_checkpoint_dir(args.checkpoint))}\n"
                    f"data = {os.path.abspath(args.data)}\n")
    print(f"wrote {feats.shape[0]} features of dimension {feats.shape[1]} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    rows = checks.run_scope(args.scope)
    width = max(len(r[0]) for r in rows)
    ok = True
    print(f"{'component':{width}s}  max_rel_err  tolerance  result")
    for name, err, tol in rows:
        passed = err < tol
        ok &= passed
        print(f"{name:{width}s}  {err:11.3e}  {tol:9.0e}  {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_inspect_parts(args):
    image = data.read_ppm(args.image)
    joints_path = None
    if args.heatmap:
        source = read_pdct(args.heatmap)
    else:
        joints_path = args.joints or os.path.splitext(args.image)[0] + ".joints.csv"
        source = fen.read_joints_csv(joints_path)
    parts, joints, boxset = fen.extract_parts(image, source, rotate=not args.no_rotate)
    canvas = fen.assemble_canvas(parts, fen.default_layout(image.shape[1:]))
    os.makedirs(args.out, exist_ok=True)
    fen.write_joints_csv(os.path.join(args.out, "joints.csv"), joints)
    fen.write_boxes_csv(os.path.join(args.out, "boxes.csv"), boxset)
    data.write_ppm(os.path.join(args.out, "canvas.ppm"), np.clip(canvas, 0.0, 1.0))
    _write_snapshot(args.out, "resolved_config.txt",
                    f"image = {os.path.abspath(args.image)}\n"
                    f"source = {os.path.abspath(args.heatmap or joints_path)}\n"
                    f"rotate = {int(not args.no_rotate)}\n")
    print(f"wrote joints.csv, boxes.csv and canvas.ppm to {args.out}")
    return EXIT_OK


def cmd_ablation(args):
    overrides = parse_overrides(args.set)
    coerce(TrainConfig, overrides, "train")
    cfg = experiments.AblationConfig(
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        identities=args.identities, images_per_identity=args.images,
        iterations=args.iterations,
        fwn_depths=experiments.FWN_DEPTHS if args.fwn_depths else (),
        train=overrides,
    )
    _, summary = experiments.run_ablation(cfg, out_dir=args.out)
    for r in summary:
        print(f"{r['run']:14s} median rank1 {r['median_rank1']:.3f} median mAP {r['median_mAP']:.3f}")
    for name, ok in experiments.ablation_gates(summary).items():
        print(f"{'pass' if ok else 'FAIL'}  {name}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors share the configuration exit code; 2 is reserved for numeric failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="pdc", description="Pose-driven person re-identification toolkit.")
    p.add_argument("--threads", type=int, default=0, help="cap BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="file of key = value lines")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a key")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("synth", help="generate a synthetic pedestrian dataset")
    common(s)
    s.add_argument("--heatmaps", action="store_true", help="also write joint response maps")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="single-query retrieval on the held-out identities")
    s.add_argument("--checkpoint", required=True, help="run directory or checkpoint directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--exclude-same-camera", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("extract", help="fused features for every image of a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--scope", choices=("fwn", "ptn", "nn", "e2e", "all"), default="all")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect-parts", help="dump joints, part boxes and the part canvas of one image")
    s.add_argument("--image", required=True, help="PPM image")
    s.add_argument("--joints", help="joints CSV (default: <image>.joints.csv)")
    s.add_argument("--heatmap", help="PDCT response maps [14, H, W]; overrides --joints")
    s.add_argument("--no-rotate", action="store_true", help="crop without turning parts upright")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect_parts)

    s = sub.add_parser("ablation", help="train and score every variant over several seeds")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="training override")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--identities", type=int, default=100)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--iterations", type=int, default=600)
    s.add_argument("--fwn-depths", action="store_true", help="also run W0..W4")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablation)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        with _threads(args.threads):
            return args.func(args)
    except (ConfigError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, PdcError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
