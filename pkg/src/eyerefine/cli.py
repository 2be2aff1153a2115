"""Command-line entry point: data synthesis, segmentation, refiner
training, batch refinement, gaze benchmarking, and report emission.

Exit codes: 0 success, 1 runtime failure (one `ERROR <code> <message>`
line on stderr), 2 usage error.  Flags override config-file keys, which
override built-in defaults.  Every subcommand writes only under its
--out-dir and records its invocation in run.json there.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time

import numpy as np

from . import core, eyegen, gazeval, refiner, segmenter
from .core import EyeRefineError, MissingRun, RefinerConfig, config_with, load_config


def _write_run_json(out_dir, args, outputs):
    meta = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "outputs": outputs,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def _resolve_config(args, **flag_overrides):
    """flag > config file > defaults."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RefinerConfig()
    overrides = {k: v for k, v in flag_overrides.items() if v is not None}
    if getattr(args, "seed_given", False):
        overrides.setdefault("seed", args.seed)
    return config_with(cfg, **overrides) if overrides else cfg


def _shift_from_args(args):
    shift = eyegen.DomainShiftConfig(
        blur_sigma=args.blur_sigma,
        color_gain=tuple(float(x) for x in args.color_gain.split(",")),
        noise_sigma=args.noise_sigma,
        vignette_strength=args.vignette,
        seed=args.seed,
    )
    return None if shift.is_identity else shift


def _cmd_synth(args):
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = eyegen.generate_dataset(
        args.n, args.gaze_range, _shift_from_args(args), args.out_dir,
        seed=args.seed, size=args.size,
    )
    _write_run_json(args.out_dir, args, [manifest])
    print(manifest)
    return 0


def _cmd_train_segmenter(args):
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = _resolve_config(args)
    samples = eyegen.load_manifest(args.manifest)
    dataset = [(s.image, s.mask) for s in samples if s.mask is not None]
    segmenter.train_segmenter(dataset, args.epochs, cfg, out_dir=args.out_dir,
                              width=args.width)
    latest = os.path.join(args.out_dir, "segmenter", "latest")
    _write_run_json(args.out_dir, args, [latest])
    print(latest)
    return 0


def _cmd_segment(args):
    os.makedirs(args.out_dir, exist_ok=True)
    net = segmenter.load_segmenter(args.weights)
    rows = core.read_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    out_rows = []
    for i, row in enumerate(rows):
        path = row["image_path"]
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        image = core.load_image(path)
        mask = segmenter.repair_orphans(segmenter.segment(net, image))
        name = f"mask_{i:04d}.png"
        core.save_mask(mask, os.path.join(args.out_dir, name))
        out_row = dict(row)
        out_row["image_path"] = os.path.relpath(path, args.out_dir)
        out_row["mask_path"] = name
        out_rows.append(out_row)
    manifest = os.path.join(args.out_dir, "manifest.csv")
    core.write_manifest(manifest, out_rows)
    _write_run_json(args.out_dir, args, [manifest])
    print(manifest)
    return 0


def _parse_stage_iters(text):
    parts = text.split(",")
    if len(parts) != 3 or not all(p.strip().lstrip("-").isdigit() for p in parts):
        raise EyeRefineError("stage-iters must be three comma-separated integers")
    return tuple(int(p) for p in parts)


def _cmd_train_refiner(args):
    os.makedirs(args.out_dir, exist_ok=True)
    overrides = {}
    if args.stage_iters:
        s1, s2, s3 = _parse_stage_iters(args.stage_iters)
        overrides.update(stage1_iters=s1, stage2_iters=s2, stage3_iters=s3)
    if args.resolution:
        overrides["train_resolution"] = args.resolution
    cfg = _resolve_config(args, **overrides)

    from .percept import PerceptualNet, load_weights

    if args.extractor_weights:
        extractor = load_weights(args.extractor_weights)
    else:
        extractor = PerceptualNet(width=cfg.extractor_width, seed=cfg.seed)
    seg_net = segmenter.load_segmenter(args.segmenter) if args.segmenter else None

    synthetic = eyegen.load_manifest(args.synthetic)
    real = eyegen.load_manifest(args.real)
    nets = refiner.build_refiner(cfg, extractor)
    nets, history = refiner.train(nets, synthetic, real, cfg, seg_net=seg_net,
                                  out_dir=args.out_dir, batch_size=args.batch_size)
    final = os.path.join(args.out_dir, "refiner", "final.ckpt")
    refiner.save_refiner(nets, final)
    _write_run_json(args.out_dir, args, [final, os.path.join(args.out_dir, "losses.csv")])
    print(final)
    return 0


def _cmd_refine(args):
    os.makedirs(args.out_dir, exist_ok=True)
    nets = refiner.load_refiner(args.ckpt)
    seg_net = segmenter.load_segmenter(args.segmenter) if args.segmenter else None
    manifest = refiner.refine_batch(nets, args.manifest, args.out_dir, seg_net=seg_net)
    _write_run_json(args.out_dir, args, [manifest])
    print(manifest)
    return 0


def _cmd_eval_gaze(args):
    os.makedirs(args.out_dir, exist_ok=True)
    names = {}
    train_items = []
    for path in args.train:
        name = os.path.splitext(os.path.basename(path))[0]
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        if name == "manifest" and parent:
            name = parent
        if name in names:
            names[name] += 1
            name = f"{name}_{names[name]}"
        else:
            names[name] = 0
        train_items.append((name, path))
    specs = []
    for kind in args.estimator:
        hyper = {}
        if kind == "knn":
            hyper["k"] = args.k
        elif kind == "rf":
            hyper["trees"] = args.trees
            hyper["jobs"] = args.jobs
        specs.append((kind, hyper))
    out_csv = os.path.join(args.out_dir, "report.csv")
    report = gazeval.benchmark(train_items, args.test, specs, out_csv=out_csv,
                               seed=args.seed, include_baselines=args.include_baselines)
    _write_run_json(args.out_dir, args, [out_csv])
    for row in report.rows:
        print(f"{row['estimator']} {row['train_set']} -> {row['mean_error_deg']:.4f} deg "
              f"(n={row['n']}, {row['runtime_s']:.2f}s)")
    print(out_csv)
    return 0


def _grid_mosaic(columns, pad=2):
    """Stack equal-sized rows of (synthetic, refined, real) image triples."""
    rows = []
    for triple in columns:
        h = max(im.shape[0] for im in triple)
        w = max(im.shape[1] for im in triple)
        cells = [segmenter.area_resample(im.astype(np.float64), h, w) for im in triple]
        divider = np.ones((h, pad, 3))
        row = np.concatenate(
            [np.concatenate([c, divider], axis=1) for c in cells], axis=1
        )[:, :-pad]
        rows.append(row)
        rows.append(np.ones((pad, row.shape[1], 3)))
    grid = np.concatenate(rows[:-1], axis=0)
    return np.clip(grid, 0.0, 1.0).astype(np.float32)


def _cmd_report(args):
    run_dir = args.run_dir
    out_dir = args.out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(run_dir, "refiner")
    ckpts = []
    if os.path.isdir(ckpt_dir):
        for name in sorted(os.listdir(ckpt_dir)):
            m = re.fullmatch(r"stage(\d+)_iter(\d+)\.ckpt", name)
            if m:
                ckpts.append((int(m.group(2)), os.path.join(ckpt_dir, name)))
    ckpts.sort()
    losses_src = os.path.join(run_dir, "losses.csv")
    if not ckpts and not os.path.exists(losses_src):
        raise MissingRun(f"no checkpoints or losses.csv under {run_dir}")

    outputs = []
    if os.path.exists(losses_src):
        losses_dst = os.path.join(out_dir, "losses.csv")
        if os.path.abspath(losses_src) != os.path.abspath(losses_dst):
            with open(losses_src) as src, open(losses_dst, "w") as dst:
                dst.write(src.read())
        outputs.append(losses_dst)

    # benchmark-format table; published-only baseline rows reserved for
    # pasting reference numbers
    table = os.path.join(out_dir, "table1.csv")
    report_src = os.path.join(run_dir, "report.csv")
    if os.path.exists(report_src):
        with open(report_src) as src:
            content = src.read()
        with open(table, "w") as dst:
            dst.write(content)
            for name in gazeval.BASELINE_ROWS:
                dst.write(f"{name},published,,,,\n")
    else:
        with open(table, "w") as dst:
            dst.write("estimator,train_set,test_set,n,mean_error_deg,runtime_s\n")
            for name in gazeval.BASELINE_ROWS:
                dst.write(f"{name},published,,,,\n")
    outputs.append(table)

    if ckpts and args.synthetic and args.real:
        syn = eyegen.load_manifest(args.synthetic)[: args.grid_n]
        rea = eyegen.load_manifest(args.real)[: args.grid_n]
        for iteration, path in ckpts:
            nets = refiner.load_refiner(path)
            triples = []
            for i, s in enumerate(syn):
                refined = refiner.generate(nets, s.image, s.mask)
                real_img = rea[i % len(rea)].image
                triples.append((s.image, refined, real_img))
            grid = _grid_mosaic(triples)
            grid_path = os.path.join(out_dir, f"grid_iter{iteration}.png")
            core.save_image(grid, grid_path)
            outputs.append(grid_path)

    _write_run_json(out_dir, args, outputs)
    for path in outputs:
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eyerefine",
        description="Eye-image refinement pipeline: synthesis, segmentation, "
                    "adversarial refinement, and gaze benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out-dir", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="master random seed (default 0)")
        p.add_argument("--config", help="config file path")
        p.add_argument("--jobs", type=int, default=1, help="worker cap")

    p = sub.add_parser("synth", help="render a labeled synthetic eye dataset")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--gaze-range", type=float, default=0.6,
                   help="width of the uniform yaw/pitch box in radians")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--blur-sigma", type=float, default=0.0, help="domain-shift blur")
    p.add_argument("--color-gain", default="1,1,1", help="per-channel gains r,g,b")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="domain-shift noise")
    p.add_argument("--vignette", type=float, default=0.0, help="vignette strength")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-segmenter", help="train the semantic segmenter")
    common(p)
    p.add_argument("--manifest", required=True, help="training manifest with masks")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--width", type=int, default=16, help="base channel width")
    p.set_defaults(func=_cmd_train_segmenter)

    p = sub.add_parser("segment", help="segment images with a trained net")
    common(p)
    p.add_argument("--weights", required=True, help="segmenter checkpoint or dir")
    p.add_argument("--manifest", required=True, help="manifest of images")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("train-refiner", help="run the three-stage refiner training")
    common(p)
    p.add_argument("--synthetic", required=True, help="synthetic training manifest")
    p.add_argument("--real", required=True, help="real-domain training manifest")
    p.add_argument("--stage-iters", help="per-stage iterations, e.g. 300,200,200")
    p.add_argument("--resolution", type=int, help="global resolution override")
    p.add_argument("--segmenter", help="segmenter checkpoint for maskless samples")
    p.add_argument("--extractor-weights", help="perceptual feature weight file")
    p.add_argument("--batch-size", type=int, default=2)
    p.set_defaults(func=_cmd_train_refiner)

    p = sub.add_parser("refine", help="refine a manifest of images")
    common(p)
    p.add_argument("--ckpt", required=True, help="refiner checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--segmenter", help="segmenter checkpoint for maskless samples")
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval-gaze", help="benchmark gaze estimators")
    common(p)
    p.add_argument("--train", action="append", required=True,
                   help="training manifest (repeatable)")
    p.add_argument("--test", required=True, help="test manifest")
    p.add_argument("--estimator", action="append", default=None,
                   choices=["knn", "rf", "cnn"], help="estimator kind (repeatable)")
    p.add_argument("--k", type=int, default=50, help="neighbor count for knn")
    p.add_argument("--trees", type=int, default=20, help="tree count for rf")
    p.add_argument("--include-baselines", action="store_true",
                   help="append placeholder rows for published baselines")
    p.set_defaults(func=_cmd_eval_gaze)

    p = sub.add_parser("report", help="emit loss curves, comparison table, and grids")
    common(p, out_required=False)
    p.add_argument("--run-dir", required=True, help="directory of a training run")
    p.add_argument("--synthetic", help="synthetic manifest for grid columns")
    p.add_argument("--real", help="real manifest for grid columns")
    p.add_argument("--grid-n", type=int, default=4, help="rows per image grid")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = getattr(args, "seed", None) is not None
    if not args.seed_given:
        args.seed = 0
    if args.command == "eval-gaze" and not args.estimator:
        args.estimator = ["knn"]
    try:
        return args.func(args)
    except EyeRefineError as e:
        print(f"ERROR {e.code} {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"ERROR io-error {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
