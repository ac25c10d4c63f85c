"""Gaussian-splat transfer and rasterization.

Transfer exports the top-density ray samples of a trained field as frozen
splat centers, attaches the field's language embedding and color at each
center, and leaves rotation/scale/opacity as the only trainable geometry.
Rasterization is tile-based with depth-sorted alpha blending; color and
embedding share the identical alpha chain. A brute-force per-pixel blender
(no tiles, no early exit) serves as the test oracle.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CheckpointFormatError, ContractError, TrainingDivergedError
from .field import stable_sigmoid
from .geometry import normalize_quat, pixel_rays, quat_to_rot, quat_to_rot_grad, ray_box_range
from .query import min_softmax_scores
from .renderer import sample_rays

_log = logging.getLogger("semfield.gaussians")

CLOUD_VERSION = "semfield-gs/1"

TILE_PX = 16
COV_REG = 0.3           # px^2 added to the projected covariance diagonal
NEAR_CLIP = 0.05
TERMINATE_T = 1e-8      # early-exit transmittance (see decisions ledger)
MIN_TRANSFER_SIGMA = 1e-3


@dataclass
class GaussianCloud:
    positions: np.ndarray        # (M, 3) frozen
    quats: np.ndarray            # (M, 4) unit (w, x, y, z)
    log_scales: np.ndarray       # (M, 3)
    logit_opacities: np.ndarray  # (M,)
    colors: np.ndarray           # (M, 3)
    embeddings: np.ndarray       # (M, D) unit, frozen
    provenance: dict

    @property
    def count(self):
        return self.positions.shape[0]

    @property
    def embed_dim(self):
        return self.embeddings.shape[1]

    def opacities(self):
        return stable_sigmoid(self.logit_opacities)

    def scales(self):
        return np.exp(self.log_scales)

    def copy(self):
        return GaussianCloud(
            positions=self.positions.copy(), quats=self.quats.copy(),
            log_scales=self.log_scales.copy(),
            logit_opacities=self.logit_opacities.copy(),
            colors=self.colors.copy(), embeddings=self.embeddings.copy(),
            provenance=dict(self.provenance))

    def permuted(self, order):
        """Storage reordering (for the order-invariance property tests)."""
        return GaussianCloud(
            positions=self.positions[order], quats=self.quats[order],
            log_scales=self.log_scales[order],
            logit_opacities=self.logit_opacities[order],
            colors=self.colors[order], embeddings=self.embeddings[order],
            provenance=dict(self.provenance))

    # -- persistence --------------------------------------------------------

    _FIELDS = ("positions", "quats", "log_scales", "logit_opacities",
               "colors", "embeddings")

    def save(self, path):
        path = Path(path)
        header = {
            "version": CLOUD_VERSION,
            "count": int(self.count),
            "embed_dim": int(self.embed_dim),
            "provenance": self.provenance,
        }
        with open(path, "wb") as f:
            f.write(json.dumps(header).encode("utf-8"))
            f.write(b"\n")
            for name in self._FIELDS:
                f.write(np.ascontiguousarray(getattr(self, name), dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(str(path))
        with open(path, "rb") as f:
            try:
                header = json.loads(f.readline().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointFormatError(f"bad cloud header: {e}") from e
            if header.get("version") != CLOUD_VERSION:
                raise CheckpointFormatError(
                    f"cloud version {header.get('version')!r}, expected {CLOUD_VERSION!r}")
            M = header["count"]
            D = header["embed_dim"]
            shapes = {"positions": (M, 3), "quats": (M, 4), "log_scales": (M, 3),
                      "logit_opacities": (M,), "colors": (M, 3),
                      "embeddings": (M, D)}
            arrays = {}
            for name in cls._FIELDS:
                count = int(np.prod(shapes[name]))
                raw = f.read(count * 4)
                if len(raw) != count * 4:
                    raise CheckpointFormatError(f"truncated blob at {name}")
                arrays[name] = np.frombuffer(raw, dtype="<f4").astype(
                    np.float64).reshape(shapes[name])
            if f.read(1):
                raise CheckpointFormatError("trailing bytes after attribute blobs")
        return cls(provenance=header.get("provenance", {}), **arrays)


def mean_knn_spacing(positions, k=8, max_samples=2048, seed=0):
    """Mean distance to the k nearest neighbors, averaged over a deterministic
    subsample of the points."""
    M = positions.shape[0]
    if M < 2:
        return 1.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 61]))
    sample = positions[rng.permutation(M)[:min(max_samples, M)]]
    k_eff = min(k, M - 1)
    dists = np.empty((sample.shape[0], k_eff))
    for i in range(sample.shape[0]):
        d2 = ((positions - sample[i]) ** 2).sum(axis=1)
        part = np.partition(d2, k_eff)[:k_eff + 1]
        part.sort()
        dists[i] = np.sqrt(part[1:k_eff + 1])     # drop the self distance
    return float(dists.mean())


def attach_embeddings(fieldobj, positions):
    """Query the language field at splat centers (the transfer's only
    semantic step; no optimization involved)."""
    return fieldobj.query_language(np.asarray(positions, dtype=np.float64))


def transfer_from_field(fieldobj, cameras, top_n, seed, n_samples=64,
                        dedup_res=128, scale_factor=0.5):
    """Export the top-density ray samples of the field as a Gaussian cloud.

    Samples are collected through every camera, deduplicated per fine voxel
    cell (keeping the densest sample), then ranked by density. Each center
    gets the field's embedding and color at that point, opacity 0.5, and an
    isotropic scale of scale_factor * mean 8-NN spacing.
    """
    if top_n < 1:
        raise ContractError("top_n must be >= 1")
    lo, hi = fieldobj.bounds_lo, fieldobj.bounds_hi
    all_pts, all_sigma = [], []
    jitter = np.random.default_rng(np.random.SeedSequence([seed, 67]))
    for cam in cameras:
        o, d = pixel_rays(cam)
        tn, tf = ray_box_range(o, d, lo, hi)
        valid = tf > tn + 1e-9
        if not valid.any():
            continue
        samples = sample_rays(o[valid], d[valid], n_samples, tn[valid],
                              tf[valid], jitter_rng=jitter)
        pts = samples.positions.reshape(-1, 3)
        sigma = fieldobj.query_density(pts)
        keep = sigma > MIN_TRANSFER_SIGMA
        all_pts.append(pts[keep])
        all_sigma.append(sigma[keep])

    if all_pts:
        pts = np.concatenate(all_pts)
        sigma = np.concatenate(all_sigma)
    else:
        pts = np.zeros((0, 3))
        sigma = np.zeros(0)

    if pts.shape[0] > 0:
        # one sample per fine voxel cell, keeping the densest
        cell = np.floor((pts - lo) / (hi - lo) * dedup_res).astype(np.int64)
        np.clip(cell, 0, dedup_res - 1, out=cell)
        key = (cell[:, 0] * dedup_res + cell[:, 1]) * dedup_res + cell[:, 2]
        order = np.lexsort((-sigma, key))
        key_sorted = key[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = key_sorted[1:] != key_sorted[:-1]
        chosen = order[first]
        pts = pts[chosen]
        sigma = sigma[chosen]

    if pts.shape[0] < top_n:
        _log.warning("transfer found %d points above density %.2g (requested %d)",
                     pts.shape[0], MIN_TRANSFER_SIGMA, top_n)
    rank = np.argsort(-sigma, kind="stable")[:top_n]
    pts = pts[rank]
    sigma = sigma[rank]
    M = pts.shape[0]
    D = fieldobj.config.embed_dim
    if M == 0:
        return GaussianCloud(
            positions=np.zeros((0, 3)), quats=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)), logit_opacities=np.zeros(0),
            colors=np.zeros((0, 3)), embeddings=np.zeros((0, D)),
            provenance={"density_threshold": MIN_TRANSFER_SIGMA,
                        "top_n": top_n, "seed": seed, "source": "empty"})

    embeddings = attach_embeddings(fieldobj, pts)
    colors = fieldobj.query_color(pts)
    spacing = mean_knn_spacing(pts, k=8, seed=seed)
    scale = max(scale_factor * spacing, 1e-6)
    quats = np.zeros((M, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        positions=pts,
        quats=quats,
        log_scales=np.full((M, 3), np.log(scale)),
        logit_opacities=np.zeros(M),
        colors=colors,
        embeddings=embeddings,
        provenance={"density_threshold": MIN_TRANSFER_SIGMA, "top_n": top_n,
                    "seed": seed, "scale_init": scale,
                    "source": fieldobj.meta.get("checkpoint_hash", "<memory>")})


# ---------------------------------------------------------------------------
# projection


@dataclass
class RasterPrep:
    means2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    A: np.ndarray            # (M, 2, 3) perspective Jacobian times world-to-cam
    rot: np.ndarray          # (M, 3, 3) from unit quats
    scales: np.ndarray       # (M, 3)
    cov2d: np.ndarray        # (M, 3) upper-triangle (a, b, c)
    radius: np.ndarray
    pair_gauss: np.ndarray
    tile_starts: np.ndarray
    tiles_x: int
    tiles_y: int
    n_skipped: int


def project_gaussian(cloud, camera, index):
    """Single-splat projection: (mean2d, cov2d 2x2, depth) or None if culled."""
    prep = _project_arrays(
        cloud.positions[index:index + 1], cloud.quats[index:index + 1],
        cloud.log_scales[index:index + 1], cloud.opacities()[index:index + 1],
        camera)
    means2d, conic, depth, valid, A, rot, scales, cov2d, radius, skipped = prep
    if not valid[0]:
        return None
    a, b, c = cov2d[0]
    return means2d[0], np.array([[a, b], [b, c]]), float(depth[0])


def _project_arrays(positions, quats, log_scales, opacities, camera):
    M = positions.shape[0]
    Rwc = camera.rotation.T
    x_cam = (positions - camera.position) @ camera.rotation
    z = x_cam[:, 2]
    valid = z > NEAR_CLIP
    z_safe = np.where(valid, z, 1.0)
    u = camera.fx * x_cam[:, 0] / z_safe + camera.cx
    v = camera.fy * x_cam[:, 1] / z_safe + camera.cy
    means2d = np.stack([u, v], axis=1)

    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = camera.fx / z_safe
    J[:, 1, 1] = camera.fy / z_safe
    J[:, 0, 2] = -camera.fx * x_cam[:, 0] / (z_safe * z_safe)
    J[:, 1, 2] = -camera.fy * x_cam[:, 1] / (z_safe * z_safe)
    A = J @ Rwc[None, :, :]

    q = normalize_quat(quats)
    rot = quat_to_rot(q)
    scales = np.exp(log_scales)
    Mmat = rot * scales[:, None, :]
    cov3d = Mmat @ np.transpose(Mmat, (0, 2, 1))
    cov2d_full = A @ cov3d @ np.transpose(A, (0, 2, 1))
    a = cov2d_full[:, 0, 0] + COV_REG
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + COV_REG
    det = a * c - b * b
    singular = valid & (det <= 0.0)
    n_skipped = int(singular.sum())
    valid = valid & (det > 0.0)
    det_safe = np.where(det > 0.0, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    gain = np.log(np.maximum(opacities, 1e-12) / kernels.ALPHA_MIN)
    radius = np.where(gain > 0.0, np.sqrt(2.0 * np.maximum(gain, 0.0) * lam_max) + 1.0, 0.0)
    valid = valid & (radius > 0.0)
    return means2d, conic, z, valid, A, rot, scales, \
        np.stack([a, b, c], axis=1), radius, n_skipped


def prepare_raster(cloud, camera, tile_px=TILE_PX):
    """Project, cull, bin to tiles, and depth-sort (insertion-stable ties)."""
    means2d, conic, depth, valid, A, rot, scales, cov2d, radius, n_skipped = \
        _project_arrays(cloud.positions, cloud.quats, cloud.log_scales,
                        cloud.opacities(), camera)
    H, W = camera.height, camera.width
    tiles_x = (W + tile_px - 1) // tile_px
    tiles_y = (H + tile_px - 1) // tile_px
    n_tiles = tiles_x * tiles_y
    ids = np.nonzero(valid)[0]
    if ids.size:
        x0 = np.clip(np.floor((means2d[ids, 0] - radius[ids]) / tile_px), 0, tiles_x - 1).astype(np.int64)
        x1 = np.clip(np.floor((means2d[ids, 0] + radius[ids]) / tile_px), 0, tiles_x - 1).astype(np.int64)
        y0 = np.clip(np.floor((means2d[ids, 1] - radius[ids]) / tile_px), 0, tiles_y - 1).astype(np.int64)
        y1 = np.clip(np.floor((means2d[ids, 1] + radius[ids]) / tile_px), 0, tiles_y - 1).astype(np.int64)
        offscreen = (means2d[ids, 0] + radius[ids] < 0) | \
            (means2d[ids, 0] - radius[ids] > W) | \
            (means2d[ids, 1] + radius[ids] < 0) | \
            (means2d[ids, 1] - radius[ids] > H)
        keep = ~offscreen
        ids, x0, x1, y0, y1 = ids[keep], x0[keep], x1[keep], y0[keep], y1[keep]
        wx = x1 - x0 + 1
        counts = wx * (y1 - y0 + 1)
        total = int(counts.sum())
        gidx = np.repeat(np.arange(ids.size), counts)
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        local = np.arange(total) - np.repeat(starts, counts)
        ty = y0[gidx] + local // wx[gidx]
        tx = x0[gidx] + local % wx[gidx]
        pair_tile = ty * tiles_x + tx
        pair_gauss = ids[gidx]
        order = np.lexsort((pair_gauss, depth[pair_gauss], pair_tile))
        pair_gauss = pair_gauss[order]
        pair_tile = pair_tile[order]
        tile_starts = np.searchsorted(pair_tile, np.arange(n_tiles + 1)).astype(np.int64)
    else:
        pair_gauss = np.zeros(0, dtype=np.int64)
        tile_starts = np.zeros(n_tiles + 1, dtype=np.int64)
    return RasterPrep(means2d=means2d, conic=conic, depth=depth, valid=valid,
                      A=A, rot=rot, scales=scales, cov2d=cov2d, radius=radius,
                      pair_gauss=pair_gauss, tile_starts=tile_starts,
                      tiles_x=tiles_x, tiles_y=tiles_y, n_skipped=n_skipped)


def rasterize(cloud, camera, tile_px=TILE_PX, prep=None):
    """Tile-based rasterization of color + embedding + accumulated opacity."""
    H, W = camera.height, camera.width
    if cloud.count == 0:
        return {"rgb": np.zeros((H, W, 3)), "embedding": np.zeros((H, W, cloud.embed_dim)),
                "alpha": np.zeros((H, W)), "n_skipped": 0}
    if prep is None:
        prep = prepare_raster(cloud, camera, tile_px)
    rgb, emb, alpha = kernels.raster_blend(
        prep.pair_gauss, prep.tile_starts, prep.tiles_x, tile_px, H, W,
        prep.means2d, prep.conic, cloud.opacities(), cloud.colors,
        cloud.embeddings, TERMINATE_T)
    return {"rgb": rgb, "embedding": emb, "alpha": alpha,
            "n_skipped": prep.n_skipped}


def brute_force_rasterize(cloud, camera):
    """Oracle: every splat at every pixel, globally depth-sorted, no tiling,
    no early termination."""
    H, W = camera.height, camera.width
    D = cloud.embed_dim
    rgb = np.zeros((H, W, 3))
    emb = np.zeros((H, W, D))
    if cloud.count == 0:
        return {"rgb": rgb, "embedding": emb, "alpha": np.zeros((H, W)),
                "n_skipped": 0}
    means2d, conic, depth, valid, *_rest, n_skipped = _project_arrays(
        cloud.positions, cloud.quats, cloud.log_scales, cloud.opacities(), camera)
    ids = np.nonzero(valid)[0]
    order = ids[np.lexsort((ids, depth[ids]))]
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs + 0.5
    py = ys + 0.5
    T = np.ones((H, W))
    opac = cloud.opacities()
    for g in order:
        dx = px - means2d[g, 0]
        dy = py - means2d[g, 1]
        power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
            - conic[g, 1] * dx * dy
        a = np.minimum(opac[g] * np.exp(power), kernels.ALPHA_MAX)
        a = np.where(a >= kernels.ALPHA_MIN, a, 0.0)
        w = T * a
        rgb += w[:, :, None] * cloud.colors[g]
        emb += w[:, :, None] * cloud.embeddings[g]
        T = T * (1.0 - a)
    return {"rgb": rgb, "embedding": emb, "alpha": 1.0 - T,
            "n_skipped": n_skipped}


# ---------------------------------------------------------------------------
# attribute optimization (positions and embeddings frozen)


def _conic_grad_to_params(prep, g_conic, quats, log_scales):
    """Chain per-splat conic gradients back to quaternion and log-scale."""
    a = prep.cov2d[:, 0]
    b = prep.cov2d[:, 1]
    c = prep.cov2d[:, 2]
    det = a * c - b * b
    det_safe = np.where(det > 0, det, 1.0)
    lam = np.empty((len(a), 2, 2))
    lam[:, 0, 0] = c / det_safe
    lam[:, 0, 1] = -b / det_safe
    lam[:, 1, 0] = -b / det_safe
    lam[:, 1, 1] = a / det_safe
    G_lam = np.empty_like(lam)
    G_lam[:, 0, 0] = g_conic[:, 0]
    G_lam[:, 0, 1] = 0.5 * g_conic[:, 1]
    G_lam[:, 1, 0] = 0.5 * g_conic[:, 1]
    G_lam[:, 1, 1] = g_conic[:, 2]
    G_cov2 = -lam @ G_lam @ lam
    G_cov3 = np.transpose(prep.A, (0, 2, 1)) @ G_cov2 @ prep.A
    Mmat = prep.rot * prep.scales[:, None, :]
    G_M = 2.0 * G_cov3 @ Mmat
    g_scales = np.einsum("mik,mik->mk", G_M, prep.rot) * prep.scales
    g_rot = G_M * prep.scales[:, None, :]
    g_quat = quat_to_rot_grad(normalize_quat(quats), g_rot)
    return g_quat, g_scales


def optimize_gaussians(cloud, views, iters, seed, lr_rotation=1e-4,
                       lr_scale=5e-3, lr_opacity=5e-2, lr_color=2.5e-3,
                       tile_px=TILE_PX):
    """Photometric-only Adam over rotation/scale/opacity/color; positions and
    embeddings are untouched (bit-identical before/after)."""
    out = cloud.copy()
    if iters == 0 or out.count == 0:
        return out
    rng = np.random.default_rng(np.random.SeedSequence([seed, 71]))
    names = ("quats", "log_scales", "logit_opacities", "colors")
    lrs = {"quats": lr_rotation, "log_scales": lr_scale,
           "logit_opacities": lr_opacity, "colors": lr_color}
    m = {n: np.zeros_like(getattr(out, n)) for n in names}
    v = {n: np.zeros_like(getattr(out, n)) for n in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for it in range(1, iters + 1):
        view = views[int(rng.integers(len(views)))]
        H, W = view.camera.height, view.camera.width
        prep = prepare_raster(out, view.camera, tile_px)
        rgb, _, _ = kernels.raster_blend(
            prep.pair_gauss, prep.tile_starts, prep.tiles_x, tile_px, H, W,
            prep.means2d, prep.conic, out.opacities(),
            out.colors, np.zeros((out.count, 1)), TERMINATE_T)
        resid = rgb - view.rgb.astype(np.float64)
        loss = float(np.mean(resid ** 2))
        if not np.isfinite(loss):
            raise TrainingDivergedError(it - 1)
        g_rgb = 2.0 * resid / resid.size
        g_colors, g_opacity, g_conic = kernels.raster_blend_bwd(
            prep.pair_gauss, prep.tile_starts, prep.tiles_x, tile_px, H, W,
            prep.means2d, prep.conic, out.opacities(), out.colors, g_rgb,
            TERMINATE_T)
        g_quat, g_scales = _conic_grad_to_params(prep, g_conic, out.quats,
                                                 out.log_scales)
        opac = out.opacities()
        grads = {
            "quats": g_quat,
            "log_scales": g_scales,
            "logit_opacities": g_opacity * opac * (1.0 - opac),
            "colors": g_colors,
        }
        c1 = 1.0 - b1 ** it
        c2 = 1.0 - b2 ** it
        for n in names:
            g = grads[n]
            m[n] = b1 * m[n] + (1 - b1) * g
            v[n] = b2 * v[n] + (1 - b2) * g * g
            getattr(out, n)[...] -= lrs[n] * (m[n] / c1) / (np.sqrt(v[n] / c2) + eps)
        out.quats[...] = normalize_quat(out.quats)
    return out


def segment_3d_gaussians(cloud, spec):
    """Relevancy on the stored embeddings; returns (kept centers, scores)."""
    if cloud.count == 0:
        raise ContractError("cloud is empty")
    scores = min_softmax_scores(cloud.embeddings, spec)
    keep = scores > spec.threshold
    return cloud.positions[keep], scores[keep]
