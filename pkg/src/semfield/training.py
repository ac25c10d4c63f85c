"""Losses and the ray-batched optimization loop.

Two language supervision modes: 'rendered' scores the normalized accumulated
embedding against the pixel's ground-truth embedding; 'pointwise' scores every
sample embedding, weighted by its rendering weight. With detach_weights on
(default) neither mode sends gradients into the density path. Training always
composites over a black background, matching the ground-truth renders.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataset import gt_embedding_image
from .errors import ContractError, TrainingDivergedError
from .geometry import pixel_rays, ray_box_range
from .renderer import compute_weights, normalize_embedding, render_view, sample_rays

_log = logging.getLogger("semfield.training")

LOSS_MODES = ("rendered", "pointwise")


@dataclass
class TrainConfig:
    lambda_rgb: float = 1.0
    lambda_lang: float = 1.0
    loss_mode: str = "pointwise"
    detach_weights: bool = True
    lr_grids: float = 1e-2
    lr_heads: float = 1e-3
    iterations: int = 2000
    batch_rays: int = 4096
    n_samples: int = 64

    def validate(self):
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lambda_rgb < 0 or self.lambda_lang < 0 or \
                not np.isfinite([self.lambda_rgb, self.lambda_lang]).all():
            raise ContractError("loss weights must be finite and >= 0")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.batch_rays < 1 or self.n_samples < 2:
            raise ContractError("invalid batch configuration")

    def to_dict(self):
        return {
            "lambda_rgb": self.lambda_rgb, "lambda_lang": self.lambda_lang,
            "loss_mode": self.loss_mode, "detach_weights": self.detach_weights,
            "lr_grids": self.lr_grids, "lr_heads": self.lr_heads,
            "iterations": self.iterations, "batch_rays": self.batch_rays,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _check_unit(gt):
    gt = np.asarray(gt, dtype=np.float64)
    norms = np.linalg.norm(gt, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise ContractError("ground-truth embeddings must be unit norm")
    return gt


def loss_rendered(embedding_unit, gt, lam=1.0):
    """Negative cosine between the normalized rendered embedding and gt."""
    gt = _check_unit(gt)
    return -lam * float(np.dot(np.asarray(embedding_unit), gt))


def loss_pointwise(fieldobj, samples, weights, gt, lam=1.0):
    """Negative weighted sum of per-sample embedding alignments along rays."""
    gt = _check_unit(gt)
    B, N = samples.t.shape
    cache = fieldobj.forward(samples.positions.reshape(B * N, 3),
                             need_color=False, need_lang=True)
    dots = cache.lang.reshape(B, N, -1) @ gt
    return -lam * float((weights * dots).sum())


@dataclass
class BatchResult:
    loss_rgb: float
    loss_lang: float
    grads: object
    rgb: np.ndarray
    n_fallback: int


def batch_loss_and_grads(fieldobj, samples, gt_rgb, gt_emb, cfg):
    """Forward + analytic backward for one ray batch. Returns losses and
    parameter gradients (exact zeros for untouched parameters)."""
    B, N = samples.t.shape
    D = fieldobj.config.embed_dim
    need_lang = cfg.lambda_lang > 0.0
    pts = samples.positions.reshape(B * N, 3)
    cache = fieldobj.forward(pts, need_color=True, need_lang=need_lang)
    sigma = cache.sigma.reshape(B, N)
    T, w = compute_weights(sigma, samples.delta)
    color = cache.color.reshape(B, N, 3)
    rgb = np.einsum("bn,bnc->bc", w, color)

    resid = rgb - gt_rgb
    loss_rgb = cfg.lambda_rgb * float(np.mean(resid ** 2))
    g_rgb = cfg.lambda_rgb * 2.0 * resid / resid.size
    g_color = w[:, :, None] * g_rgb[:, None, :]
    g_w = np.einsum("bc,bnc->bn", g_rgb, color)

    loss_lang = 0.0
    g_lang_flat = None
    n_fallback = 0
    if need_lang:
        lang = cache.lang.reshape(B, N, D)
        g_lang = np.zeros((B, N, D))
        if cfg.loss_mode == "rendered":
            raw = np.einsum("bn,bnd->bd", w, lang)
            y, bad = normalize_embedding(raw, fieldobj.fallback_axis())
            n_fallback = int(bad.sum())
            norm_safe = np.where(bad, 1.0, np.linalg.norm(raw, axis=1))
            dots = np.einsum("bd,bd->b", y, gt_emb)
            loss_lang = -cfg.lambda_lang * float(np.mean(dots))
            # d(-mean(y.gt))/draw = -(gt - (y.gt) y)/(B n); zero on fallback rays
            g_raw = (-cfg.lambda_lang / B) * (gt_emb - dots[:, None] * y) \
                / norm_safe[:, None]
            g_raw = np.where(bad[:, None], 0.0, g_raw)
            g_lang += w[:, :, None] * g_raw[:, None, :]
            if not cfg.detach_weights:
                g_w = g_w + np.einsum("bnd,bd->bn", lang, g_raw)
        else:
            dots = np.einsum("bnd,bd->bn", lang, gt_emb)
            loss_lang = -cfg.lambda_lang * float(np.mean((w * dots).sum(axis=1)))
            g_lang += (-cfg.lambda_lang / B) * w[:, :, None] * gt_emb[:, None, :]
            if not cfg.detach_weights:
                g_w = g_w + (-cfg.lambda_lang / B) * dots
        g_lang_flat = g_lang.reshape(B * N, D)

    g_sigma = kernels.composite_weights_bwd(sigma, samples.delta, T, w, g_w)
    grads = fieldobj.backward(cache,
                              g_sigma=g_sigma.reshape(B * N),
                              g_color=g_color.reshape(B * N, 3),
                              g_lang=g_lang_flat)
    return BatchResult(loss_rgb=loss_rgb, loss_lang=loss_lang, grads=grads,
                       rgb=rgb, n_fallback=n_fallback)


class Adam:
    """Per-array Adam with two learning-rate groups (grids vs heads)."""

    def __init__(self, params, lr_grids, lr_heads, betas=(0.9, 0.999), eps=1e-8):
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.lr = {}
        self.m = {}
        self.v = {}
        for name, arr in params.named_arrays():
            is_grid = name.startswith(("geo_grid", "lang_grid"))
            self.lr[name] = lr_grids if is_grid else lr_heads
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        garrs = dict(grads.named_arrays())
        for name, arr in params.named_arrays():
            kernels.adam_update(arr.reshape(-1), garrs[name].reshape(-1),
                                self.m[name].reshape(-1), self.v[name].reshape(-1),
                                self.lr[name], b1, b2, c1, c2, self.eps)


@dataclass
class TrainResult:
    fieldobj: object
    trace: list                      # rows: (step, loss_rgb, loss_lang, psnr)
    final_psnr: float
    n_fallback: int = 0


def _flatten_rays(scene, views, bounds_lo, bounds_hi):
    origins, dirs, gt_rgb, gt_emb, near, far = [], [], [], [], [], []
    for view in views:
        o, d = pixel_rays(view.camera)
        tn, tf = ray_box_range(o, d, bounds_lo, bounds_hi)
        valid = tf > tn + 1e-9
        origins.append(o[valid])
        dirs.append(d[valid])
        gt_rgb.append(view.rgb.reshape(-1, 3)[valid].astype(np.float64))
        emb = gt_embedding_image(scene, view.labels).reshape(valid.size, -1)
        gt_emb.append(emb[valid])
        near.append(tn[valid])
        far.append(tf[valid])
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(gt_rgb), np.concatenate(gt_emb),
            np.concatenate(near), np.concatenate(far))


def train(scene, views, fieldobj, cfg, seed):
    """Run the optimization loop; deterministic given (inputs, seed)."""
    cfg.validate()
    origins, dirs, gt_rgb, gt_emb, near, far = _flatten_rays(
        scene, views, fieldobj.bounds_lo, fieldobj.bounds_hi)
    n_rays = origins.shape[0]
    if n_rays == 0:
        raise ContractError("no training rays intersect the field bounds")
    perm_rng = np.random.default_rng(np.random.SeedSequence([seed, 53]))
    opt = Adam(fieldobj.params, cfg.lr_grids, cfg.lr_heads)
    order = perm_rng.permutation(n_rays)
    cursor = 0
    trace = []
    n_fallback = 0
    for step in range(cfg.iterations):
        take = min(cfg.batch_rays, n_rays)
        if cursor + take > n_rays:
            order = perm_rng.permutation(n_rays)
            cursor = 0
        sel = order[cursor:cursor + take]
        cursor += take
        jitter = np.random.default_rng(np.random.SeedSequence([seed, 54, step]))
        samples = sample_rays(origins[sel], dirs[sel], cfg.n_samples,
                              near[sel], far[sel], jitter_rng=jitter)
        result = batch_loss_and_grads(fieldobj, samples, gt_rgb[sel],
                                      gt_emb[sel], cfg)
        total = result.loss_rgb + result.loss_lang
        if not np.isfinite(total):
            raise TrainingDivergedError(step)
        opt.step(fieldobj.params, result.grads)
        n_fallback += result.n_fallback
        mse = max(np.mean((result.rgb - gt_rgb[sel]) ** 2), 1e-12)
        trace.append((step, result.loss_rgb, result.loss_lang,
                      -10.0 * np.log10(mse)))
    final_psnr = evaluate_psnr(fieldobj, views, cfg.n_samples)
    _log.info("training done: %d steps, final PSNR %.2f dB", cfg.iterations,
              final_psnr)
    return TrainResult(fieldobj=fieldobj, trace=trace, final_psnr=final_psnr,
                       n_fallback=n_fallback)


def evaluate_psnr(fieldobj, views, n_samples=64):
    """Photometric PSNR over full views (midpoint sampling, no jitter)."""
    err = 0.0
    count = 0
    for view in views:
        out = render_view(fieldobj, view.camera, n_samples=n_samples)
        err += float(((out["rgb"] - view.rgb.astype(np.float64)) ** 2).sum())
        count += view.rgb.size
    mse = max(err / count, 1e-12)
    return -10.0 * np.log10(mse)
