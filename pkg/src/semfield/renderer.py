"""Ray sampling and volume-rendering accumulation.

Weights follow the standard transmittance chain w_i = T_i*(1 - exp(-sigma_i
delta_i)); color and language embeddings are accumulated with the same
weights, and the rendered embedding is additionally normalized to the unit
sphere (with a flagged fallback axis for fully transparent rays).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError
from .geometry import pixel_rays, ray_box_range

FALLBACK_NORM = 1e-8


@dataclass
class RaySamples:
    origins: np.ndarray    # (B, 3)
    dirs: np.ndarray       # (B, 3) unit
    t: np.ndarray          # (B, N) increasing
    delta: np.ndarray      # (B, N) positive spacings

    @property
    def positions(self):
        return self.origins[:, None, :] + self.t[:, :, None] * self.dirs[:, None, :]


@dataclass
class RenderedBatch:
    rgb: np.ndarray             # (B, 3)
    embedding_raw: np.ndarray   # (B, D)
    embedding_unit: np.ndarray  # (B, D)
    opacity: np.ndarray         # (B,)
    fallback: np.ndarray        # (B,) bool, transparent rays
    weights: np.ndarray         # (B, N)
    transmittance: np.ndarray   # (B, N+1)


def sample_rays(origins, dirs, n_samples, near, far, jitter_rng=None):
    """Stratified sampling: one sample per uniform bin of [near, far].

    near/far may be scalars or per-ray arrays. With jitter_rng=None samples sit
    at bin midpoints; otherwise offsets are drawn uniformly per bin.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    B = origins.shape[0]
    if n_samples < 2:
        raise ContractError("need at least 2 samples per ray")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (B,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (B,))
    if np.any(near >= far):
        raise ContractError("near must be < far")
    span = (far - near) / n_samples
    if jitter_rng is None:
        xi = np.full((B, n_samples), 0.5)
    else:
        xi = jitter_rng.random((B, n_samples))
    t = near[:, None] + (np.arange(n_samples)[None, :] + xi) * span[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = span
    return RaySamples(origins=origins, dirs=dirs, t=t, delta=delta)


def sample_ray(camera, pixel, n_samples, near, far, jitter_seed=None):
    """Single-pixel convenience wrapper around sample_rays."""
    row, col = pixel
    o, d = pixel_rays(camera, rows=[row], cols=[col])
    rng = None if jitter_seed is None else \
        np.random.default_rng(np.random.SeedSequence([jitter_seed, 41]))
    return sample_rays(o, d, n_samples, near, far, jitter_rng=rng)


def compute_weights(sigma, delta):
    """(T, w) for densities/spacings; accepts (N,) or (B, N) arrays."""
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if sigma.shape != delta.shape:
        raise ContractError("sigma and delta must have equal shapes")
    if np.any(sigma < 0):
        raise ContractError("negative density")
    if np.any(delta <= 0):
        raise ContractError("non-positive sample spacing")
    squeeze = sigma.ndim == 1
    if squeeze:
        sigma, delta = sigma[None, :], delta[None, :]
    T, w = kernels.composite_weights(sigma, delta)
    if squeeze:
        return T[0], w[0]
    return T, w


def normalize_embedding(raw, fallback_axis):
    """Unit embedding with fallback for near-zero accumulations.

    Returns (unit, fallback_mask)."""
    norm = np.linalg.norm(raw, axis=-1)
    bad = norm <= FALLBACK_NORM
    unit = np.where(bad[:, None], fallback_axis[None, :],
                    raw / np.where(bad, 1.0, norm)[:, None])
    return unit, bad


def render_batch(fieldobj, samples, weights=None, transmittance=None,
                 need_lang=True, white_background=False, cache_out=None):
    """Accumulate color and embedding for a batch of sampled rays."""
    B, N = samples.t.shape
    pts = samples.positions.reshape(B * N, 3)
    cache = fieldobj.forward(pts, need_color=True, need_lang=need_lang)
    if weights is None:
        transmittance, weights = compute_weights(
            cache.sigma.reshape(B, N), samples.delta)
    rgb = np.einsum("bn,bnc->bc", weights, cache.color.reshape(B, N, 3))
    if white_background:
        rgb = rgb + transmittance[:, -1][:, None]
    opacity = weights.sum(axis=1)
    if need_lang:
        D = fieldobj.config.embed_dim
        raw = np.einsum("bn,bnd->bd", weights, cache.lang.reshape(B, N, D))
        unit, bad = normalize_embedding(raw, fieldobj.fallback_axis())
    else:
        raw = unit = None
        bad = np.zeros(B, dtype=bool)
    if cache_out is not None:
        cache_out["field_cache"] = cache
    return RenderedBatch(rgb=rgb, embedding_raw=raw, embedding_unit=unit,
                         opacity=opacity, fallback=bad, weights=weights,
                         transmittance=transmittance)


def render_embedding(samples, fieldobj):
    """Volume-rendered language embedding for sampled rays."""
    return render_batch(fieldobj, samples, need_lang=True)


def render_rgb(samples, fieldobj, white_background=False):
    return render_batch(fieldobj, samples, need_lang=False,
                        white_background=white_background).rgb


def render_view(fieldobj, camera, n_samples=64, jitter_seed=None,
                need_lang=False, white_background=False, chunk=16384):
    """Render a full camera view; rays are clipped to the field bounds and
    rays that miss the bounds produce background pixels."""
    H, W = camera.height, camera.width
    origins, dirs = pixel_rays(camera)
    t_near, t_far = ray_box_range(origins, dirs, fieldobj.bounds_lo,
                                  fieldobj.bounds_hi)
    valid = t_far > t_near + 1e-9
    D = fieldobj.config.embed_dim
    rgb = np.zeros((H * W, 3))
    if white_background:
        rgb[~valid] = 1.0
    emb_raw = np.zeros((H * W, D)) if need_lang else None
    emb_unit = np.zeros((H * W, D)) if need_lang else None
    opacity = np.zeros(H * W)
    fallback = np.zeros(H * W, dtype=bool)
    if need_lang:
        emb_unit[:] = fieldobj.fallback_axis()
        fallback[~valid] = True
    rng = None if jitter_seed is None else \
        np.random.default_rng(np.random.SeedSequence([jitter_seed, 43]))
    idx = np.nonzero(valid)[0]
    for s in range(0, idx.size, chunk):
        sel = idx[s:s + chunk]
        samples = sample_rays(origins[sel], dirs[sel], n_samples,
                              t_near[sel], t_far[sel], jitter_rng=rng)
        out = render_batch(fieldobj, samples, need_lang=need_lang,
                           white_background=white_background)
        rgb[sel] = out.rgb
        opacity[sel] = out.opacity
        if need_lang:
            emb_raw[sel] = out.embedding_raw
            emb_unit[sel] = out.embedding_unit
            fallback[sel] = out.fallback
    result = {
        "rgb": rgb.reshape(H, W, 3),
        "opacity": opacity.reshape(H, W),
        "fallback": fallback.reshape(H, W),
    }
    if need_lang:
        result["embedding_raw"] = emb_raw.reshape(H, W, D)
        result["embedding_unit"] = emb_unit.reshape(H, W, D)
    return result
