"""Open-vocabulary relevancy queries in 3D (on points) and 2D (on rendered
embeddings), thresholded segmentation, and density isosurface extraction.

The relevancy of an embedding e against a query is the minimum over canonical
embeddings of the pairwise softmax exp(e.t) / (exp(e.t) + exp(e.c_i)), i.e.
sigmoid(min_i (e.t - e.c_i)). 2D scoring applies this to the *raw* accumulated
embedding by default (the normalized variant is a switch).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .field import stable_sigmoid
from .renderer import render_view

_MARGIN_CLIP = 30.0


@dataclass
class QuerySpec:
    text_embedding: np.ndarray      # (D,) unit
    canonicals: np.ndarray          # (K, D) unit rows
    threshold: float = 0.55

    def __post_init__(self):
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float64)
        self.canonicals = np.atleast_2d(np.asarray(self.canonicals, dtype=np.float64))
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold must lie strictly in (0, 1)")
        norms = np.linalg.norm(self.canonicals, axis=1)
        if abs(np.linalg.norm(self.text_embedding) - 1.0) > 1e-6 or \
                np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("query and canonical embeddings must be unit norm")
        if self.canonicals.shape[0] < 1:
            raise ContractError("need at least one canonical embedding")


@dataclass
class RelevancyResult:
    scores: np.ndarray
    mask: np.ndarray
    fallback: np.ndarray = None


def min_softmax_scores(embeddings, spec):
    """Score rows of `embeddings` (any magnitude; Eq. uses plain dot products)."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    margin = e @ spec.text_embedding - (e @ spec.canonicals.T).max(axis=1)
    return stable_sigmoid(np.clip(margin, -_MARGIN_CLIP, _MARGIN_CLIP))


def relevancy_of_embedding(embedding, spec):
    """Relevancy score in (0,1) for a single unit embedding."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if abs(np.linalg.norm(embedding) - 1.0) > 1e-6:
        raise ContractError("embedding must be unit norm")
    return float(min_softmax_scores(embedding[None, :], spec)[0])


def relevancy_3d(points, fieldobj, spec):
    """Per-point relevancy from the language field; a pure function of
    (points, field, spec) -- no camera enters anywhere."""
    points = np.asarray(points, dtype=np.float64)
    if not np.isfinite(points).all():
        raise ContractError("non-finite query points")
    lang = fieldobj.query_language(points)
    scores = min_softmax_scores(lang, spec)
    return RelevancyResult(scores=scores, mask=scores > spec.threshold)


def relevancy_2d(camera, fieldobj, spec, n_samples=64, use_normalized=False):
    """Per-pixel relevancy of the rendered embedding (raw by default).

    Fully transparent pixels are flagged; in normalized mode they are scored
    on the fallback axis, in raw mode the zero vector scores exactly 0.5.
    """
    out = render_view(fieldobj, camera, n_samples=n_samples, need_lang=True)
    H, W = camera.height, camera.width
    emb = out["embedding_unit"] if use_normalized else out["embedding_raw"]
    scores = min_softmax_scores(emb.reshape(H * W, -1), spec).reshape(H, W)
    return RelevancyResult(scores=scores, mask=scores > spec.threshold,
                           fallback=out["fallback"])


@dataclass
class SegmentResult:
    points: np.ndarray      # (P, 3) kept grid points
    scores: np.ndarray      # (P,) relevancy at the kept points
    sigma: np.ndarray       # (P,) density at the kept points
    grid_res: int
    cell_size: float


def grid_points(lo, hi, res):
    """Cell centers of a res^3 partition of the box."""
    axes = [lo[a] + (np.arange(res) + 0.5) * (hi[a] - lo[a]) / res for a in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def default_density_floor(near, far, n_samples):
    """Density at which one sample of mean spacing reaches opacity 0.5."""
    mean_delta = (far - near) / n_samples
    return float(np.log(2.0) / mean_delta)


def occupied_grid(fieldobj, grid_res, density_floor, chunk=65536):
    """Grid cell centers with sigma above the floor, plus their density and
    language embedding (the query-independent half of segment_3d)."""
    if grid_res < 16:
        raise ContractError("grid_res must be >= 16")
    pts = grid_points(fieldobj.bounds_lo, fieldobj.bounds_hi, grid_res)
    keep_pts, keep_sigma, keep_lang = [], [], []
    for s in range(0, pts.shape[0], chunk):
        block = pts[s:s + chunk]
        sigma = fieldobj.query_density(block)
        occ = sigma > density_floor
        if not occ.any():
            continue
        sub = block[occ]
        keep_pts.append(sub)
        keep_sigma.append(sigma[occ])
        keep_lang.append(fieldobj.query_language(sub))
    if keep_pts:
        return (np.concatenate(keep_pts), np.concatenate(keep_sigma),
                np.concatenate(keep_lang))
    return (np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, fieldobj.config.embed_dim)))


def segment_3d(fieldobj, spec, grid_res=64, density_floor=None, chunk=65536):
    """Keep grid points that are both occupied (sigma > floor) and relevant
    (score > threshold). Empty output is a valid result."""
    if density_floor is None:
        density_floor = default_density_floor(
            0.0, float(fieldobj.bounds_hi[0] - fieldobj.bounds_lo[0]), 64)
    pts, sigma, lang = occupied_grid(fieldobj, grid_res, density_floor, chunk)
    cell = float((fieldobj.bounds_hi[0] - fieldobj.bounds_lo[0]) / grid_res)
    if pts.shape[0]:
        scores = min_softmax_scores(lang, spec)
        rel = scores > spec.threshold
        return SegmentResult(points=pts[rel], scores=scores[rel],
                             sigma=sigma[rel], grid_res=grid_res, cell_size=cell)
    return SegmentResult(points=pts, scores=np.zeros(0), sigma=sigma,
                         grid_res=grid_res, cell_size=cell)


def extract_mesh(fieldobj, density_floor, grid_res=64, chunk=131072):
    """Marching-cubes surface of the density field at iso level density_floor.

    Returns (vertices (V,3) float64, faces (F,3) int32); both empty when the
    level is never crossed.
    """
    if grid_res < 16:
        raise ContractError("grid_res must be >= 16")
    from skimage import measure

    lo, hi = fieldobj.bounds_lo, fieldobj.bounds_hi
    axes = [np.linspace(lo[a], hi[a], grid_res) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sigma = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        sigma[s:s + chunk] = fieldobj.query_density(pts[s:s + chunk])
    vol = sigma.reshape(grid_res, grid_res, grid_res)
    spacing = tuple((hi - lo) / (grid_res - 1))
    try:
        verts, faces, _, _ = measure.marching_cubes(vol, level=density_floor,
                                                    spacing=spacing)
    except (ValueError, RuntimeError):
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32)
    return verts.astype(np.float64) + lo[None, :], faces.astype(np.int32)
