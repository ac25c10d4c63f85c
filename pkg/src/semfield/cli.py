"""Command-line entry point: one binary, subcommand per pipeline stage.

Exit codes: 0 success, 2 invalid config, 3 missing input file, 4 bad
format/version, 5 manifest/array inconsistency, 1 any other stage error.
SEMFIELD_LOG controls the log level.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import kernels
from .config import RunConfig
from .dataset import export_dataset, import_dataset
from .errors import (CheckpointFormatError, ConfigError, ContractError,
                     DatasetConsistencyError, DatasetFormatError, SemfieldError)
from .field import CKPT_VERSION, LanguageField, checkpoint_hash
from .gaussians import (CLOUD_VERSION, GaussianCloud, optimize_gaussians,
                        rasterize, segment_3d_gaussians, transfer_from_field)
from .ioutils import write_f32_blob, write_heatmap_png, write_ply_points, write_rgb_png
from .metrics import average_precision, f1_3d, iou
from .query import QuerySpec, default_density_floor, min_softmax_scores, relevancy_2d, segment_3d
from .renderer import render_view
from .scene import build_camera_rig, generate_scene, render_gt_view, sample_object_surface
from .training import train

_log = logging.getLogger("semfield.cli")

EXIT_OK = 0
EXIT_STAGE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_CONSISTENCY = 5


def _setup_logging():
    level = os.environ.get("SEMFIELD_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args):
    overrides = list(args.set or [])
    cfg = RunConfig.load(args.config, overrides)
    if args.seed is not None:
        cfg.data["run"]["seed"] = args.seed
    if args.out is not None:
        cfg.data["run"]["out_dir"] = args.out
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.data["run"]["threads"] = args.threads
    if cfg.data["run"]["threads"] > 1:
        _log.info("stages execute serially; --threads %d is an upper bound",
                  cfg.data["run"]["threads"])
    return cfg


def _field_config_for_scene(cfg, scene):
    fc = cfg.field_config()
    D = scene.background_embedding.shape[0]
    if fc.embed_dim != D:
        _log.info("using dataset embedding dim %d (config said %d)", D, fc.embed_dim)
        fc.embed_dim = D
    if abs(fc.bound - scene.bound) > 1e-12:
        fc.bound = scene.bound
    return fc


def _sniff_checkpoint(path):
    with open(path, "rb") as f:
        line = f.readline()
    try:
        version = json.loads(line.decode("utf-8")).get("version")
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint header: {e}") from e
    return version


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = _load_config(args)
    seed = cfg["run"]["seed"]
    out = Path(cfg["run"]["out_dir"])
    scene = generate_scene(seed, cfg.scene_config())
    cams = build_camera_rig(
        cfg["scene"]["n_views"], cfg["scene"]["bound"],
        resolution=(cfg["scene"]["resolution"], cfg["scene"]["resolution"]),
        fov_deg=cfg["scene"]["fov_deg"],
        radius_scale=cfg["scene"]["camera_radius_scale"])
    views = [render_gt_view(scene, c) for c in cams]
    export_dataset(scene, views, out, config_hash=cfg.hash())
    print(f"dataset written to {out} ({len(views)} views, "
          f"{len(scene.objects)} objects, config {cfg.hash()})")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    scene, views, manifest = import_dataset(args.dataset)
    fc = _field_config_for_scene(cfg, scene)
    fieldobj = LanguageField.create(fc, cfg["run"]["seed"])
    tcfg = cfg.train_config(loss_mode=args.loss_mode)
    t0 = time.perf_counter()
    result = train(scene, views, fieldobj, tcfg, cfg["run"]["seed"])
    train_s = time.perf_counter() - t0
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "field.ckpt"
    fieldobj.save(ckpt, extra_meta={
        "config_hash": cfg.hash(),
        "loss_mode": tcfg.loss_mode,
        "dataset_config_hash": manifest.get("config_hash", ""),
    })
    with open(out / "trace.csv", "w", newline="") as f:
        f.write(f"# semfield-trace/1 config={cfg.hash()}\n")
        writer = csv.writer(f)
        writer.writerow(["step", "loss_rgb", "loss_lang", "psnr"])
        for row in result.trace:
            writer.writerow([row[0], f"{row[1]:.8g}", f"{row[2]:.8g}", f"{row[3]:.4f}"])
    print(f"trained {tcfg.iterations} steps ({tcfg.loss_mode}) in {train_s:.1f}s, "
          f"final PSNR {result.final_psnr:.2f} dB -> {ckpt}")
    return EXIT_OK


def cmd_transfer(args):
    cfg = _load_config(args)
    fieldobj = LanguageField.load(args.field)
    fieldobj.meta["checkpoint_hash"] = checkpoint_hash(args.field)
    scene, views, _ = import_dataset(args.dataset)
    cams = [v.camera for v in views]
    t0 = time.perf_counter()
    cloud = transfer_from_field(
        fieldobj, cams, cfg["transfer"]["top_n"], cfg["run"]["seed"],
        n_samples=cfg["transfer"]["n_samples"],
        dedup_res=cfg["transfer"]["dedup_res"],
        scale_factor=cfg["transfer"]["scale_factor"])
    transfer_s = time.perf_counter() - t0
    iters = cfg["transfer"]["gs_iterations"]
    if iters > 0:
        cloud = optimize_gaussians(cloud, views, iters, cfg["run"]["seed"])
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cloud.provenance["config_hash"] = cfg.hash()
    ckpt = out / "cloud.ckpt"
    cloud.save(ckpt)
    print(f"transferred {cloud.count} gaussians in {transfer_s * 1e3:.0f}ms "
          f"(+{iters} optimization iters) -> {ckpt}")
    return EXIT_OK


def _query_spec_from_args(args, cfg, scene, tau):
    if args.query_vec:
        vec = np.fromfile(args.query_vec, dtype="<f4").astype(np.float64)
        n = np.linalg.norm(vec)
        if n <= 0:
            raise ContractError("query vector has zero norm")
        vec = vec / n
        label = Path(args.query_vec).stem
    else:
        if args.label is None:
            raise ConfigError("query needs --label or --query-vec")
        idx = scene.object_index(args.label)
        vec = scene.objects[idx].embedding
        label = args.label
    return label, QuerySpec(vec, scene.canonical_embeddings, tau)


def cmd_query(args):
    cfg = _load_config(args)
    scene, views, _ = import_dataset(args.dataset)
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    version = _sniff_checkpoint(args.ckpt)
    meta = {"config_hash": cfg.hash(), "version": version}
    if args.mode in ("3d", "2d"):
        if version != CKPT_VERSION:
            raise CheckpointFormatError(
                f"mode {args.mode} needs a field checkpoint, got {version!r}")
        fieldobj = LanguageField.load(args.ckpt)
        label, spec = _query_spec_from_args(args, cfg, scene, cfg["query"]["tau_nerf"])
        if args.mode == "3d":
            if args.camera is not None:
                _log.warning("--camera is ignored in 3d mode (camera-independent)")
            floor = default_density_floor(0.0, 2.0 * scene.bound,
                                          cfg["training"]["n_samples"])
            seg = segment_3d(fieldobj, spec, grid_res=cfg["query"]["grid_res"],
                             density_floor=floor)
            ply = write_ply_points(out / f"points_{label}.ply", seg.points,
                                   seg.scores, comment=f"config={cfg.hash()}")
            write_f32_blob(out / f"scores_{label}.f32", seg.scores, meta=meta)
            print(f"kept {seg.points.shape[0]} points -> {ply}")
        else:
            cam_idx = args.camera or 0
            if not 0 <= cam_idx < len(views):
                raise ContractError(f"--camera {cam_idx} out of range")
            rel = relevancy_2d(views[cam_idx].camera, fieldobj, spec,
                               n_samples=cfg["training"]["n_samples"],
                               use_normalized=cfg["query"]["use_normalized_2d"])
            write_heatmap_png(out / f"relevancy_{label}_cam{cam_idx}.png",
                              rel.scores, meta=meta)
            write_f32_blob(out / f"relevancy_{label}_cam{cam_idx}.f32",
                           rel.scores, meta=meta)
            print(f"relevancy map ({rel.mask.sum()} px above "
                  f"{cfg['query']['tau_nerf']}) -> {out}")
    elif args.mode == "gs":
        if version != CLOUD_VERSION:
            raise CheckpointFormatError(
                f"mode gs needs a cloud checkpoint, got {version!r}")
        cloud = GaussianCloud.load(args.ckpt)
        label, spec = _query_spec_from_args(args, cfg, scene, cfg["query"]["tau_gs"])
        centers, scores = segment_3d_gaussians(cloud, spec)
        ply = write_ply_points(out / f"centers_{label}.ply", centers, scores,
                               comment=f"config={cfg.hash()}")
        cam_idx = args.camera or 0
        if not 0 <= cam_idx < len(views):
            raise ContractError(f"--camera {cam_idx} out of range")
        rast = rasterize(cloud, views[cam_idx].camera)
        emb = rast["embedding"]
        H, W, D = emb.shape
        smap = min_softmax_scores(emb.reshape(H * W, D), spec).reshape(H, W)
        write_heatmap_png(out / f"relevancy_{label}_cam{cam_idx}.png", smap, meta=meta)
        write_f32_blob(out / f"relevancy_{label}_cam{cam_idx}.f32", smap, meta=meta)
        write_rgb_png(out / f"render_cam{cam_idx}.png", rast["rgb"], meta=meta)
        print(f"kept {centers.shape[0]} centers -> {ply}")
    else:
        raise ConfigError(f"unknown query mode {args.mode!r}")
    return EXIT_OK


def _eval_rows_for_field(cfg, scene, views, fieldobj):
    qcfg = cfg["query"]
    ecfg = cfg["eval"]
    floor = default_density_floor(0.0, 2.0 * scene.bound, cfg["training"]["n_samples"])
    eval_views = views[:min(ecfg["n_eval_views"], len(views))]
    emb_maps = [render_view(fieldobj, v.camera, n_samples=cfg["training"]["n_samples"],
                            need_lang=True) for v in eval_views]
    rows = []
    for prim in scene.objects:
        spec = QuerySpec(prim.embedding, scene.canonical_embeddings, qcfg["tau_nerf"])
        seg = segment_3d(fieldobj, spec, grid_res=qcfg["grid_res"], density_floor=floor)
        gt = sample_object_surface(scene, prim.label, ecfg["gt_points_per_object"],
                                   scene.seed)
        radius = ecfg["radius_scale"] * np.sqrt(
            prim.surface_area() / ecfg["gt_points_per_object"])
        rep = f1_3d(seg.points, gt, radius)
        ious, aps = [], []
        key = "embedding_unit" if qcfg["use_normalized_2d"] else "embedding_raw"
        for v, m in zip(eval_views, emb_maps):
            H, W = v.camera.height, v.camera.width
            smap = min_softmax_scores(m[key].reshape(H * W, -1), spec).reshape(H, W)
            gt_mask = v.labels == scene.object_index(prim.label)
            val = iou(smap > spec.threshold, gt_mask)
            if val is not None:
                ious.append(val)
            ap = average_precision(smap, gt_mask)
            if ap is not None:
                aps.append(ap)
        rows.append(_report_row(scene.seed, "nerf", fieldobj.meta.get("loss_mode", ""),
                                prim.label, rep, ious, aps))
    return rows


def _eval_rows_for_cloud(cfg, scene, views, cloud):
    qcfg = cfg["query"]
    ecfg = cfg["eval"]
    eval_views = views[:min(ecfg["n_eval_views"], len(views))]
    renders = [rasterize(cloud, v.camera) for v in eval_views]
    rows = []
    for prim in scene.objects:
        spec = QuerySpec(prim.embedding, scene.canonical_embeddings, qcfg["tau_gs"])
        centers, _ = segment_3d_gaussians(cloud, spec) if cloud.count else \
            (np.zeros((0, 3)), None)
        gt = sample_object_surface(scene, prim.label, ecfg["gt_points_per_object"],
                                   scene.seed)
        radius = ecfg["radius_scale"] * np.sqrt(
            prim.surface_area() / ecfg["gt_points_per_object"])
        rep = f1_3d(centers, gt, radius)
        ious, aps = [], []
        for v, r in zip(eval_views, renders):
            H, W = v.camera.height, v.camera.width
            smap = min_softmax_scores(r["embedding"].reshape(H * W, -1),
                                      spec).reshape(H, W)
            gt_mask = v.labels == scene.object_index(prim.label)
            val = iou(smap > spec.threshold, gt_mask)
            if val is not None:
                ious.append(val)
            ap = average_precision(smap, gt_mask)
            if ap is not None:
                aps.append(ap)
        rows.append(_report_row(scene.seed, "gs", "", prim.label, rep, ious, aps))
    return rows


def _report_row(seed, method, loss, label, rep, ious, aps):
    return {
        "scene_seed": seed, "method": method, "loss": loss, "query": label,
        "precision": rep.precision, "recall": rep.recall, "f1": rep.f1,
        "miou": float(np.mean(ious)) if ious else 0.0,
        "map": float(np.mean(aps)) if aps else 0.0,
        "radius": rep.radius,
    }


def cmd_eval(args):
    cfg = _load_config(args)
    scene, views, _ = import_dataset(args.dataset)
    pred = Path(args.pred)
    if not pred.exists():
        raise FileNotFoundError(str(pred))
    rows = []
    if pred.is_file():
        version = _sniff_checkpoint(pred)
        if version == CKPT_VERSION:
            fieldobj = LanguageField.load(pred)
            rows = _eval_rows_for_field(cfg, scene, views, fieldobj)
        elif version == CLOUD_VERSION:
            rows = _eval_rows_for_cloud(cfg, scene, views, GaussianCloud.load(pred))
        else:
            raise CheckpointFormatError(f"unknown checkpoint version {version!r}")
    else:
        from .ioutils import read_ply
        ecfg = cfg["eval"]
        plys = sorted(pred.glob("*.ply"))
        if not plys:
            raise FileNotFoundError(f"no .ply predictions in {pred}")
        for ply in plys:
            label = ply.stem.split("_", 1)[-1]
            idx = scene.object_index(label)
            prim = scene.objects[idx]
            gt = sample_object_surface(scene, label, ecfg["gt_points_per_object"],
                                       scene.seed)
            radius = ecfg["radius_scale"] * np.sqrt(
                prim.surface_area() / ecfg["gt_points_per_object"])
            rep = f1_3d(read_ply(ply)["vertices"], gt, radius)
            rows.append(_report_row(scene.seed, args.method, "", label, rep, [], []))
    out = Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    report = out / "report.csv"
    with open(report, "w", newline="") as f:
        f.write(f"# semfield-report/1 config={cfg.hash()}\n")
        writer = csv.DictWriter(f, fieldnames=bench_mod.REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: bench_mod._format_value(row[k])
                             for k in bench_mod.REPORT_COLUMNS})
    print(f"wrote {len(rows)} rows -> {report}")
    return EXIT_OK


def cmd_bench(args):
    cfg = _load_config(args)
    out = Path(cfg["run"]["out_dir"])
    result = bench_mod.benchmark_run(cfg, out_dir=out)
    print(result.summary)
    print(f"report -> {out / 'report.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semfield",
        description="Language-embedded radiance fields on synthetic scenes: "
                    "train, transfer to Gaussian splats, query, evaluate.")
    parser.add_argument("--backend-info", action="store_true",
                        help="print the active kernel backend and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out_dir")
        p.add_argument("--threads", type=int,
                       help="parallelism cap (stages are serial; must be >= 1)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the field on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--loss-mode", choices=("pointwise", "rendered"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="transfer a field into a Gaussian cloud")
    common(p)
    p.add_argument("--field", required=True, help="field.ckpt path")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("query", help="relevancy query against a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("3d", "2d", "gs"), required=True)
    p.add_argument("--label", help="object label whose embedding is the query")
    p.add_argument("--query-vec", help="raw f32 blob with a D-dim query vector")
    p.add_argument("--camera", type=int, default=None,
                   help="view index (2d/gs modes; ignored in 3d)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score predictions against the dataset")
    common(p)
    p.add_argument("--pred", required=True,
                   help="field.ckpt, cloud.ckpt, or a directory of PLY point sets")
    p.add_argument("--method", choices=("nerf", "gs"), default="nerf",
                   help="method tag for PLY-directory predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="full benchmark over seeded scenes")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


_ERROR_EXITS = (
    (ConfigError, EXIT_CONFIG),
    (FileNotFoundError, EXIT_MISSING),
    (DatasetConsistencyError, EXIT_CONSISTENCY),
    (DatasetFormatError, EXIT_FORMAT),
    (CheckpointFormatError, EXIT_FORMAT),
    (SemfieldError, EXIT_STAGE),
)


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.backend_info:
        print(f"kernel backend: {kernels.ACTIVE_BACKEND}")
        return EXIT_OK
    if not getattr(args, "command", None):
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except tuple(e for e, _ in _ERROR_EXITS) as err:
        for etype, code in _ERROR_EXITS:
            if isinstance(err, etype):
                print(f"error [{args.command}]: {err}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
