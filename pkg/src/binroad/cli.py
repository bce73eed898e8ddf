"""Command-line interface.

Subcommands: gen-synthetic, train, eval, infer, report-ops, bench, make-osm.
Exit codes: 0 success, 1 runtime failure (message on stderr), 2 bad usage.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import imgio, losses, metrics, osmmaker, report, synth
from . import network as net


def _load_config(args, data_resolution=None):
    if getattr(args, "config", None):
        return net.PathfinderConfig.from_text(Path(args.config).read_text())
    kwargs = {}
    if data_resolution is not None:
        kwargs["resolution"] = data_resolution
    for key in ("widths", "vit_depth", "vit_heads", "seed", "classes"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            kwargs[key] = val
    if getattr(args, "full_precision", False):
        kwargs["binarize"] = False
    if getattr(args, "no_agb", False):
        kwargs["use_agb"] = False
    return net.PathfinderConfig(**kwargs)


def _split(samples, val_fraction):
    n_val = max(1, int(round(len(samples) * val_fraction))) if val_fraction > 0 else 0
    if n_val >= len(samples):
        raise ValueError("validation split leaves no training samples")
    return (samples[: len(samples) - n_val], samples[len(samples) - n_val :]) if n_val else (samples, [])


def cmd_gen_synthetic(args):
    cfg = synth.SynthConfig(
        n=args.n, resolution=args.resolution, seed=args.seed,
        void_fraction=args.void_fraction, shadow_count=(args.shadow_min, args.shadow_max),
        cloud_frames=args.frames, extra_roads_prob=args.extra_roads_prob,
    )
    dirs = synth.generate_dataset(args.out, cfg)
    digest = synth.dataset_digest(args.out)
    print(f"wrote {len(dirs)} samples to {args.out}")
    print(f"dataset digest: {digest}")
    return 0


def _peek_resolution(data_root):
    dirs = synth.sample_dirs(data_root)
    if not dirs:
        raise ValueError(f"no samples under {data_root}")
    return imgio.read_pgm(dirs[0] / "labels.pgm").shape[0]


def cmd_train(args):
    out = report.ensure_dir(args.out)
    cfg = _load_config(args, data_resolution=_peek_resolution(args.data))
    samples = synth.load_dataset(args.data, max_range=cfg.max_range)
    (out / "config.txt").write_text(cfg.to_text())
    model = net.PathfinderModel(cfg)
    train_set, val_set = _split(samples, args.val_fraction)
    sched = losses.VariantFocalSchedule.from_label_counts(
        synth.label_counts(train_set, cfg.classes), epoch_total=args.epochs
    )
    setup = net.TrainSetup(schedule=sched, batch_size=args.batch_size, seed=args.seed)
    opts = net.build_optimizers(model, epoch_total=args.epochs,
                                lr_cam=args.lr_cam, lr_lidar=args.lr_lidar)
    history = []
    log_lines = []
    t0 = time.perf_counter()
    for epoch in range(args.epochs):
        stats = net.train_epoch(model, train_set, setup, opts, epoch)
        history.append(stats)
        line = (f"epoch {epoch:3d} total {stats['total']:.4f} focal {stats['focal']:.4f} "
                f"vf {stats['vf']:.4f} lovasz_img {stats['lovasz_img']:.4f} "
                f"lovasz_pcd {stats['lovasz_pcd']:.4f} pi {stats['pi']:.4f} "
                f"lr_cam {opts['camera'].lr_at(epoch):.5f}")
        log_lines.append(line)
        if not args.quiet:
            print(line)
    elapsed = time.perf_counter() - t0
    ag.save_checkpoint(out / "model.npz", model, digest=cfg.digest(), optimizers=opts)
    report.write_csv(
        out / "loss_curve.csv",
        ["epoch", "total", "focal", "lovasz_img", "vf", "lovasz_pcd", "pi"],
        [[i, h["total"], h["focal"], h["lovasz_img"], h["vf"], h["lovasz_pcd"], h["pi"]]
         for i, h in enumerate(history)],
    )
    report.save_loss_curves(out / "loss_curve.png", history)
    log_lines.append(f"training time: {elapsed:.1f}s")
    if val_set:
        scores = net.evaluate(model, val_set)
        for stream in ("pcd", "image"):
            row = scores[stream]
            log_lines.append(
                f"val {stream}: mAcc {row['mAcc']:.4f} mIoU {row['mIoU']:.4f} "
                f"RoadAcc {row['RoadAcc']:.4f} RoadIoU {row['RoadIoU']:.4f}"
            )
        report.save_eval_bars(out / "val_scores.png", scores)
    (out / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    for line in log_lines[-3:]:
        print(line)
    print(f"checkpoint: {out / 'model.npz'}")
    return 0


def _load_model(args, data_resolution=None):
    cfg = _load_config(args, data_resolution=data_resolution)
    model = net.PathfinderModel(cfg)
    ag.load_checkpoint(args.checkpoint, model, expect_digest=cfg.digest())
    model.eval().set_packed(not getattr(args, "no_packed", False))
    return model, cfg


def _print_eval(scores):
    print(f"{'stream':<12} {'mAcc':>8} {'mIoU':>8} {'RoadAcc':>8} {'RoadIoU':>8}")
    for stream, name in (("pcd", "point cloud"), ("image", "image")):
        row = scores[stream]
        print(f"{name:<12} {row['mAcc']:>8.4f} {row['mIoU']:>8.4f} "
              f"{row['RoadAcc']:>8.4f} {row['RoadIoU']:>8.4f}")


def cmd_eval(args):
    if args.pred_dir:
        # oracle-mask mode: score stored prediction PGMs against the labels
        samples = synth.load_dataset(args.data)
        if not samples:
            raise ValueError(f"no samples under {args.data}")
        conf = metrics.ConfusionMatrix(args.classes)
        for d, s in zip(synth.sample_dirs(args.data), samples):
            pred = imgio.read_pgm(Path(args.pred_dir) / f"{d.name}.pgm")
            conf.update(s.labels, (pred >= 128).astype(np.int64) if pred.max() > 1 else pred)
        row = metrics.segmentation_scores(conf, args.road_class)
        scores = {"image": row, "pcd": row}
    else:
        model, cfg = _load_model(args, data_resolution=_peek_resolution(args.data))
        samples = synth.load_dataset(args.data, max_range=cfg.max_range)
        scores = net.evaluate(model, samples, road_class=args.road_class)
    _print_eval(scores)
    if args.out:
        out = report.ensure_dir(args.out)
        report.write_csv(
            out / "metrics.csv",
            ["stream", "mAcc", "mIoU", "RoadAcc", "RoadIoU"],
            [[s, scores[s]["mAcc"], scores[s]["mIoU"], scores[s]["RoadAcc"], scores[s]["RoadIoU"]]
             for s in ("pcd", "image")],
        )
        report.save_eval_bars(out / "metrics.png", scores)
    return 0


def cmd_infer(args):
    out = report.ensure_dir(args.out)
    dirs = synth.sample_dirs(args.data)
    model, cfg = _load_model(args, data_resolution=_peek_resolution(args.data))
    samples = synth.load_dataset(args.data, max_range=cfg.max_range)
    for d, s in zip(dirs, samples):
        mask_img, mask_pcd, _ = net.infer(model, s)
        imgio.write_pgm(out / f"{d.name}_img.pgm", (mask_img * 255).clip(0, 255))
        imgio.write_pgm(out / f"{d.name}_pcd.pgm", (mask_pcd * 255).clip(0, 255))
        if args.panels:
            report.save_mask_panel(out / f"{d.name}_panel.png", s.image, s.labels, mask_img, mask_pcd)
    print(f"wrote {2 * len(samples)} masks to {out}")
    return 0


def cmd_report_ops(args):
    cfg = _load_config(args, data_resolution=args.resolution)
    rep = metrics.count_complexity(net.PathfinderModel(cfg))
    twin_cfg_kwargs = {**cfg.__dict__, "binarize": not cfg.binarize}
    twin = metrics.count_complexity(net.PathfinderModel(net.PathfinderConfig(**twin_cfg_kwargs)))
    binary_rep, fp_rep = (rep, twin) if cfg.binarize else (twin, rep)
    print(rep.as_text())
    print()
    print(f"binarized OPs:       {binary_rep.ops:,.0f}")
    print(f"full-precision OPs:  {fp_rep.ops:,.0f}")
    print(f"OPs ratio:           {binary_rep.ops / fp_rep.ops:.4f}")
    print(f"binarized params:    {binary_rep.param_bytes:,.0f} bytes")
    print(f"full-precision:      {fp_rep.param_bytes:,.0f} bytes")
    print(f"param ratio:         {binary_rep.param_bytes / fp_rep.param_bytes:.4f}")
    if args.out:
        out = report.ensure_dir(args.out)
        (out / "ops_report.txt").write_text(rep.as_text() + "\n")
        (out / "ops_report.kv").write_text(
            rep.as_keyvalues()
            + f"\nops_ratio_vs_twin = {binary_rep.ops / fp_rep.ops!r}"
            + f"\nparam_ratio_vs_twin = {binary_rep.param_bytes / fp_rep.param_bytes!r}\n"
        )
        report.write_csv(
            out / "ops_report.csv",
            ["layer", "kind", "bops", "flops", "ops", "param_bits"],
            [[r.name, r.kind, r.bops, r.flops, r.ops, r.param_bits] for r in rep.rows],
        )
        report.save_ops_breakdown(out / "ops_breakdown.png", binary_rep, fp_rep)
    return 0


def cmd_bench(args):
    sizes = [int(s) for s in args.sizes.split(",")]
    results = metrics.bench_gemm(sizes, repeats=args.repeats)
    print(metrics.bench_table(results))
    if args.out:
        out = report.ensure_dir(args.out)
        report.write_csv(
            out / "bench.csv",
            ["size", "binary_s", "float_loop_s", "float_blas_s", "speedup_vs_loop"],
            [[r["m"], r["binary_s"], r["float_loop_s"], r["float_blas_s"], r["speedup_vs_loop"]]
             for r in results],
        )
        report.save_bench_figure(out / "bench.png", results)
    return 0


def _read_homographies(path, count):
    if path is None:
        return [np.eye(3) for _ in range(count)]
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                vals = [float(v) for v in line.split()]
                if len(vals) != 9:
                    raise ValueError("homography lines need 9 values (3x3 row-major)")
                rows.append(np.array(vals).reshape(3, 3))
    if len(rows) != count:
        raise ValueError(f"{count} masks but {len(rows)} homographies")
    return rows


def _read_anchors(path):
    anchors = []
    with open(path) as f:
        for line in f:
            if line.strip() and not line.startswith("#"):
                px, py, lat, lon = (float(v) for v in line.split())
                anchors.append(((px, py), (lat, lon)))
    return anchors


def cmd_make_osm(args):
    out = report.ensure_dir(args.out)
    mask_paths = sorted(Path(args.masks).glob(args.pattern))
    if not mask_paths:
        raise ValueError(f"no masks matching {args.pattern!r} under {args.masks}")
    masks = [imgio.read_pgm(p) >= 128 for p in mask_paths]
    if args.estimate_translation:
        homs = [np.eye(3)]
        for prev, cur in zip(masks, masks[1:]):
            dx, dy = osmmaker.estimate_translation(prev.astype(float), cur.astype(float))
            h = np.eye(3)
            h[0, 2], h[1, 2] = dx, dy
            homs.append(h)
    else:
        homs = _read_homographies(args.homographies, len(masks))
    stitched = osmmaker.stitch(osmmaker.StitchJob(list(zip(masks, homs))))
    skeleton = osmmaker.skeletonize(stitched.mask)
    completed = osmmaker.complete_breakpoints(skeleton, args.max_gap, args.max_angle)
    graph = osmmaker.extract_graph(completed)
    anchors = _read_anchors(args.anchors)
    # anchors are given in stitched-canvas coordinates relative to frame 0
    shifted = [((px - stitched.origin[0], py - stitched.origin[1]), ll) for (px, py), ll in anchors]
    graph = osmmaker.georeference(graph, shifted)
    xml = osmmaker.export_osm_xml(graph, shifted, geometry_every=args.geometry_every)
    (out / "road.osm").write_text(xml)
    imgio.write_pgm(out / "stitched.pgm", stitched.mask.astype(np.uint8) * 255)
    imgio.write_pgm(out / "skeleton.pgm", completed.astype(np.uint8) * 255)
    report.save_osm_overlay(out / "overlay.png", stitched.mask, completed, graph)
    nodes, ways, _ = osmmaker.parse_osm_xml(xml)
    print(f"stitched {len(masks)} frames -> canvas {stitched.mask.shape[1]}x{stitched.mask.shape[0]} "
          f"(origin {stitched.origin})")
    print(f"graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges")
    print(f"osm: {len(nodes)} nodes, {len(ways)} ways -> {out / 'road.osm'}")
    return 0


def _add_shape_flags(parser, defaults=False):
    parser.add_argument("--widths", type=lambda s: tuple(int(v) for v in s.split(",")),
                        default=(8, 16, 24, 32) if defaults else None)
    parser.add_argument("--vit-depth", type=int, default=1 if defaults else None)
    parser.add_argument("--vit-heads", type=int, default=2 if defaults else None)
    parser.add_argument("--full-precision", action="store_true")
    parser.add_argument("--no-agb", action="store_true")


def build_parser():
    p = argparse.ArgumentParser(prog="binroad",
                                description="binarized dual-stream road segmentation and OSM maker")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate the synthetic desk-scale dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--void-fraction", type=float, default=0.5)
    g.add_argument("--shadow-min", type=int, default=1)
    g.add_argument("--shadow-max", type=int, default=3)
    g.add_argument("--frames", type=int, default=2)
    g.add_argument("--extra-roads-prob", type=float, default=0.35)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train the dual-stream model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="config file; otherwise built from flags")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr-cam", type=float, default=0.1)
    t.add_argument("--lr-lidar", type=float, default=0.002)
    t.add_argument("--val-fraction", type=float, default=0.2)
    _add_shape_flags(t, defaults=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or stored oracle masks)")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="config file matching the checkpoint")
    e.add_argument("--pred-dir", help="score stored <sample>.pgm masks instead of a model")
    e.add_argument("--classes", type=int, default=2)
    e.add_argument("--road-class", type=int, default=1)
    e.add_argument("--no-packed", action="store_true")
    _add_shape_flags(e, defaults=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write predicted mask PGMs")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config")
    i.add_argument("--out", required=True)
    i.add_argument("--no-packed", action="store_true")
    _add_shape_flags(i, defaults=True)
    i.add_argument("--panels", action="store_true", help="also render qualitative panels")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report-ops", help="complexity accounting vs the full-precision twin")
    r.add_argument("--config")
    _add_shape_flags(r)
    r.add_argument("--resolution", type=int, default=None)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report_ops)

    b = sub.add_parser("bench", help="binary vs full-precision GEMM microbenchmark")
    b.add_argument("--sizes", default="256,512,1024")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("make-osm", help="stitch masks, extract the road graph, export OSM XML")
    m.add_argument("--masks", required=True, help="directory of per-frame road mask PGMs")
    m.add_argument("--pattern", default="*.pgm", help="mask filename glob, e.g. '*_pcd.pgm'")
    m.add_argument("--homographies", help="one 3x3 row-major homography per line")
    m.add_argument("--estimate-translation", action="store_true",
                   help="phase-correlation translation estimate (synthetic tests)")
    m.add_argument("--anchors", required=True, help="lines: px py lat lon")
    m.add_argument("--max-gap", type=float, default=8.0)
    m.add_argument("--max-angle", type=float, default=30.0)
    m.add_argument("--geometry-every", type=int, default=4)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_osm)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # descriptive nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
