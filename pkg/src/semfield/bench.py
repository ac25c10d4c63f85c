"""Full-pipeline benchmark: trains both language-loss modes on a set of
seeded scenes, transfers each field into a Gaussian cloud, queries every
object in 3D and 2D on both representations, and scores everything with the
radius-based F1 protocol plus mIoU/mAP.

Outputs: `report.csv` (deterministic per config), `timings.csv` (wall clock,
excluded from determinism), and a human-readable summary.
"""

import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import LanguageField
from .gaussians import (attach_embeddings, optimize_gaussians, rasterize,
                        segment_3d_gaussians, transfer_from_field)
from .metrics import average_precision, f1_3d, iou
from .query import QuerySpec, default_density_floor, min_softmax_scores, occupied_grid
from .renderer import render_view
from .scene import build_camera_rig, generate_scene, render_gt_view, sample_object_surface
from .training import train

_log = logging.getLogger("semfield.bench")

REPORT_COLUMNS = ("scene_seed", "method", "loss", "query", "precision",
                  "recall", "f1", "miou", "map", "radius")
TIMING_COLUMNS = ("scene_seed", "loss", "train_s", "transfer_ms", "attach_ms",
                  "render_ms_nerf", "render_ms_gs")


@dataclass
class BenchResult:
    rows: list
    timing_rows: list
    summary: str
    medians: dict
    iou_spread: dict        # (seed, loss) -> std of per-view IoU, NeRF side


def _objects_for_seed(seed, lo, hi):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 83]))
    return int(rng.integers(lo, hi + 1))


def _score_view_maps(emb_map, specs):
    """Shared per-view scoring: one embedding map, one score map per query."""
    H, W, D = emb_map.shape
    flat = emb_map.reshape(H * W, D)
    return {label: min_softmax_scores(flat, spec).reshape(H, W)
            for label, spec in specs.items()}


def benchmark_run(cfg, out_dir=None):
    """Run the benchmark described by cfg; see module docstring."""
    bench = cfg["bench"]
    qcfg = cfg["query"]
    ecfg = cfg["eval"]
    field_cfg = cfg.field_config()

    rows = []
    timing_rows = []
    iou_spread = {}
    for seed in bench["seeds"]:
        n_objects = _objects_for_seed(seed, bench["objects_min"], bench["objects_max"])
        scene_cfg = cfg.scene_config(n_objects=n_objects)
        scene = generate_scene(seed, scene_cfg)
        cams = build_camera_rig(
            cfg["scene"]["n_views"], scene_cfg.bound,
            resolution=(cfg["scene"]["resolution"], cfg["scene"]["resolution"]),
            fov_deg=cfg["scene"]["fov_deg"],
            radius_scale=cfg["scene"]["camera_radius_scale"])
        views = [render_gt_view(scene, c) for c in cams]
        eval_views = views[:min(ecfg["n_eval_views"], len(views))]

        gt_points = {}
        gt_radius = {}
        for prim in scene.objects:
            pts = sample_object_surface(scene, prim.label,
                                        ecfg["gt_points_per_object"], seed)
            gt_points[prim.label] = pts
            spacing = np.sqrt(prim.surface_area() / ecfg["gt_points_per_object"])
            gt_radius[prim.label] = ecfg["radius_scale"] * spacing

        tcfg_base = cfg.train_config()
        floor = default_density_floor(0.0, 2.0 * scene_cfg.bound, tcfg_base.n_samples)

        for loss_mode in ("pointwise", "rendered"):
            tcfg = cfg.train_config(loss_mode=loss_mode)
            fieldobj = LanguageField.create(field_cfg, seed)
            t0 = time.perf_counter()
            train(scene, views, fieldobj, tcfg, seed)
            train_s = time.perf_counter() - t0
            _log.info("seed %d loss %s: trained in %.1fs", seed, loss_mode, train_s)

            specs_nerf = {p.label: QuerySpec(p.embedding, scene.canonical_embeddings,
                                             qcfg["tau_nerf"])
                          for p in scene.objects}
            specs_gs = {p.label: QuerySpec(p.embedding, scene.canonical_embeddings,
                                           qcfg["tau_gs"])
                        for p in scene.objects}

            # --- NeRF side: 3D segmentation from the shared occupancy grid
            occ_pts, occ_sigma, occ_lang = occupied_grid(
                fieldobj, qcfg["grid_res"], floor)
            f1_nerf = {}
            for label, spec in specs_nerf.items():
                scores = min_softmax_scores(occ_lang, spec) if occ_pts.size else np.zeros(0)
                pred = occ_pts[scores > spec.threshold] if occ_pts.size else occ_pts
                f1_nerf[label] = f1_3d(pred, gt_points[label], gt_radius[label])

            # --- NeRF side: 2D maps (one embedding render per view)
            t0 = time.perf_counter()
            emb_maps = [render_view(fieldobj, v.camera, n_samples=tcfg.n_samples,
                                    need_lang=True) for v in eval_views]
            render_ms_nerf = (time.perf_counter() - t0) * 1e3 / len(eval_views)
            nerf_iou = {label: [] for label in specs_nerf}
            nerf_ap = {label: [] for label in specs_nerf}
            for v, out in zip(eval_views, emb_maps):
                key = "embedding_unit" if qcfg["use_normalized_2d"] else "embedding_raw"
                score_maps = _score_view_maps(out[key], specs_nerf)
                for label, spec in specs_nerf.items():
                    gt_mask = v.labels == scene.object_index(label)
                    val = iou(score_maps[label] > spec.threshold, gt_mask)
                    if val is not None:
                        nerf_iou[label].append(val)
                    ap = average_precision(score_maps[label], gt_mask)
                    if ap is not None:
                        nerf_ap[label].append(ap)

            spreads = [float(np.std(vals)) for vals in nerf_iou.values()
                       if len(vals) >= 2]
            iou_spread[(seed, loss_mode)] = max(spreads) if spreads else 0.0

            for label in sorted(specs_nerf):
                rep = f1_nerf[label]
                rows.append({
                    "scene_seed": seed, "method": "nerf", "loss": loss_mode,
                    "query": label, "precision": rep.precision,
                    "recall": rep.recall, "f1": rep.f1,
                    "miou": float(np.mean(nerf_iou[label])) if nerf_iou[label] else 0.0,
                    "map": float(np.mean(nerf_ap[label])) if nerf_ap[label] else 0.0,
                    "radius": gt_radius[label],
                })

            # --- Gaussian side
            t0 = time.perf_counter()
            cloud = transfer_from_field(fieldobj, cams, cfg["transfer"]["top_n"],
                                        seed, n_samples=cfg["transfer"]["n_samples"],
                                        dedup_res=cfg["transfer"]["dedup_res"],
                                        scale_factor=cfg["transfer"]["scale_factor"])
            transfer_ms = (time.perf_counter() - t0) * 1e3
            t0 = time.perf_counter()
            attach_embeddings(fieldobj, cloud.positions)
            attach_ms = (time.perf_counter() - t0) * 1e3
            if cfg["transfer"]["gs_iterations"] > 0:
                cloud = optimize_gaussians(cloud, views,
                                           cfg["transfer"]["gs_iterations"], seed)
            t0 = time.perf_counter()
            gs_renders = [rasterize(cloud, v.camera) for v in eval_views]
            render_ms_gs = (time.perf_counter() - t0) * 1e3 / len(eval_views)

            gs_iou = {label: [] for label in specs_gs}
            gs_ap = {label: [] for label in specs_gs}
            for v, out in zip(eval_views, gs_renders):
                score_maps = _score_view_maps(out["embedding"], specs_gs)
                for label, spec in specs_gs.items():
                    gt_mask = v.labels == scene.object_index(label)
                    val = iou(score_maps[label] > spec.threshold, gt_mask)
                    if val is not None:
                        gs_iou[label].append(val)
                    ap = average_precision(score_maps[label], gt_mask)
                    if ap is not None:
                        gs_ap[label].append(ap)

            for label in sorted(specs_gs):
                if cloud.count:
                    centers, _ = segment_3d_gaussians(cloud, specs_gs[label])
                else:
                    centers = np.zeros((0, 3))
                rep = f1_3d(centers, gt_points[label], gt_radius[label])
                rows.append({
                    "scene_seed": seed, "method": "gs", "loss": loss_mode,
                    "query": label, "precision": rep.precision,
                    "recall": rep.recall, "f1": rep.f1,
                    "miou": float(np.mean(gs_iou[label])) if gs_iou[label] else 0.0,
                    "map": float(np.mean(gs_ap[label])) if gs_ap[label] else 0.0,
                    "radius": gt_radius[label],
                })
            timing_rows.append({
                "scene_seed": seed, "loss": loss_mode,
                "train_s": round(train_s, 3),
                "transfer_ms": round(transfer_ms, 3),
                "attach_ms": round(attach_ms, 3),
                "render_ms_nerf": round(render_ms_nerf, 3),
                "render_ms_gs": round(render_ms_gs, 3),
            })

    medians = _medians(rows)
    summary = _format_summary(rows, timing_rows, medians, iou_spread)
    result = BenchResult(rows=rows, timing_rows=timing_rows, summary=summary,
                         medians=medians, iou_spread=iou_spread)
    if out_dir is not None:
        write_report(result, out_dir, cfg)
    return result


def _medians(rows):
    def med(method, loss):
        vals = [r["f1"] for r in rows if r["method"] == method and r["loss"] == loss]
        return float(np.median(vals)) if vals else 0.0

    return {
        "f1_nerf_pointwise": med("nerf", "pointwise"),
        "f1_nerf_rendered": med("nerf", "rendered"),
        "f1_gs_pointwise": med("gs", "pointwise"),
        "f1_gs_rendered": med("gs", "rendered"),
    }


def _format_summary(rows, timing_rows, medians, iou_spread):
    buf = io.StringIO()
    print("benchmark summary", file=buf)
    print(f"  rows: {len(rows)}", file=buf)
    for key, val in medians.items():
        print(f"  median {key}: {val:.4f}", file=buf)
    pw, rd = medians["f1_nerf_pointwise"], medians["f1_nerf_rendered"]
    if rd > 0:
        print(f"  pointwise/rendered 3D F1 ratio (nerf): {pw / rd:.3f}", file=buf)
    if pw > 0:
        print(f"  gs/nerf 3D F1 ratio (pointwise): "
              f"{medians['f1_gs_pointwise'] / pw:.3f}", file=buf)
    for r in timing_rows:
        print(f"  seed {r['scene_seed']} {r['loss']}: train {r['train_s']}s, "
              f"transfer {r['transfer_ms']}ms, attach {r['attach_ms']}ms, "
              f"render {r['render_ms_nerf']}ms/frame (nerf) "
              f"{r['render_ms_gs']}ms/frame (gs)", file=buf)
    spreads = [v for v in iou_spread.values()]
    if spreads:
        print(f"  max per-view IoU std (nerf 2D): {max(spreads):.4f}", file=buf)
    return buf.getvalue()


def _format_value(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report(result, out_dir, cfg):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = out_dir / "report.csv"
    with open(report, "w", newline="") as f:
        f.write(f"# semfield-report/1 config={cfg.hash()}\n")
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: _format_value(row[k]) for k in REPORT_COLUMNS})
    with open(out_dir / "timings.csv", "w", newline="") as f:
        f.write(f"# semfield-timings/1 config={cfg.hash()}\n")
        writer = csv.DictWriter(f, fieldnames=TIMING_COLUMNS)
        writer.writeheader()
        for row in result.timing_rows:
            writer.writerow(row)
    (out_dir / "summary.txt").write_text(result.summary)
    (out_dir / "report.meta.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "config": cfg.data}, indent=1))
    return report
