"""Trainable scene representation: two dense multi-resolution voxel pyramids
(geometry and language) with affine heads.

Geometry features drive density (softplus) and color (sigmoid); language
features drive a D-dim embedding projected to the unit sphere. All math is
float64 with hand-written backward passes; gradients touch exactly the eight
corner voxels per level per query point. Level grids are stored stacked in a
single (sum res^3, C) array per pyramid so the hot gather/scatter runs as one
kernel call.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CheckpointFormatError, ContractError

CKPT_VERSION = "semfield-ckpt/1"

DEGENERATE_NORM = 1e-8


def stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class FieldConfig:
    level_resolutions: tuple = (16, 32, 64)
    channels: int = 4
    embed_dim: int = 32
    bound: float = 1.0
    density_bias: float = -10.0
    normalize_point_embeddings: bool = True
    lang_init_std: float = 1.0

    @property
    def feature_dim(self):
        return len(self.level_resolutions) * self.channels

    def level_offsets(self):
        sizes = [r ** 3 for r in self.level_resolutions]
        return np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)

    def validate(self):
        res = tuple(self.level_resolutions)
        if len(res) < 1 or any(r < 2 for r in res):
            raise ContractError("level resolutions must each be >= 2")
        if any(res[i] >= res[i + 1] for i in range(len(res) - 1)):
            raise ContractError("level resolutions must be strictly increasing")
        if self.channels < 1 or self.embed_dim < 1 or self.bound <= 0:
            raise ContractError("invalid field configuration")

    def to_dict(self):
        return {
            "level_resolutions": list(self.level_resolutions),
            "channels": self.channels,
            "embed_dim": self.embed_dim,
            "bound": self.bound,
            "density_bias": self.density_bias,
            "normalize_point_embeddings": self.normalize_point_embeddings,
            "lang_init_std": self.lang_init_std,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["level_resolutions"] = tuple(d["level_resolutions"])
        return cls(**d)


def corner_indices(pts01, res):
    """Trilinear corner flat-indices and weights for points in [0,1]^3
    (reference helper; the hot path lives in the kernels)."""
    from .kernels.numpy_impl import _corners
    return _corners(np.clip(pts01, 0.0, 1.0), res)


@dataclass
class FieldParams:
    geo_grids: np.ndarray    # (sum res^3, C) stacked level grids
    lang_grids: np.ndarray
    w_sigma: np.ndarray      # (F,)
    b_sigma: np.ndarray      # (1,)
    W_color: np.ndarray      # (3, F)
    b_color: np.ndarray      # (3,)
    W_lang: np.ndarray       # (D, F)
    b_lang: np.ndarray       # (D,)

    def named_arrays(self):
        return [("geo_grids", self.geo_grids), ("lang_grids", self.lang_grids),
                ("w_sigma", self.w_sigma), ("b_sigma", self.b_sigma),
                ("W_color", self.W_color), ("b_color", self.b_color),
                ("W_lang", self.W_lang), ("b_lang", self.b_lang)]

    def zeros_like(self):
        return FieldParams(**{name: np.zeros_like(arr)
                              for name, arr in self.named_arrays()})

    def copy(self):
        return FieldParams(**{name: arr.copy()
                              for name, arr in self.named_arrays()})


@dataclass
class ForwardCache:
    pts: np.ndarray
    u: np.ndarray             # normalized coordinates
    inside: np.ndarray
    feats_geo: np.ndarray
    feats_lang: np.ndarray
    a_sigma: np.ndarray
    sigma: np.ndarray
    a_color: np.ndarray
    color: np.ndarray
    a_lang: np.ndarray
    lang_norm: np.ndarray
    lang: np.ndarray
    valid_lang: np.ndarray
    need_color: bool
    need_lang: bool


class LanguageField:
    """Density + color + unit language embedding at any 3D point."""

    def __init__(self, config, params):
        config.validate()
        self.config = config
        self.params = params
        self.offsets = config.level_offsets()
        self.res_arr = np.array(config.level_resolutions, dtype=np.int64)
        self.degenerate_count = 0
        self.meta = {}

    # -- construction -----------------------------------------------------

    @classmethod
    def create(cls, config, seed=0):
        config.validate()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 37]))
        F = config.feature_dim
        D = config.embed_dim
        total = int(sum(r ** 3 for r in config.level_resolutions))
        geo = np.zeros((total, config.channels))
        lang = rng.normal(0.0, 1.0, size=(total, config.channels))
        params = FieldParams(
            geo_grids=geo,
            lang_grids=lang,
            w_sigma=np.full(F, 3.0),
            b_sigma=np.array([config.density_bias]),
            W_color=rng.normal(0.0, 0.1, size=(3, F)),
            b_color=np.zeros(3),
            W_lang=rng.normal(0.0, 1.0 / np.sqrt(F), size=(D, F)),
            b_lang=np.zeros(D),
        )
        return cls(config, params)

    def level_grid(self, kind, level):
        """View of one level's voxel grid, shape (res, res, res, C)."""
        arr = self.params.geo_grids if kind == "geo" else self.params.lang_grids
        res = int(self.res_arr[level])
        block = arr[self.offsets[level]:self.offsets[level + 1]]
        return block.reshape(res, res, res, self.config.channels)

    @property
    def bounds_lo(self):
        return np.full(3, -self.config.bound)

    @property
    def bounds_hi(self):
        return np.full(3, self.config.bound)

    def fallback_axis(self):
        e = np.zeros(self.config.embed_dim)
        e[0] = 1.0
        return e

    # -- forward ----------------------------------------------------------

    def forward(self, pts, need_color=True, need_lang=True):
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractError("points must be (P, 3)")
        if not np.isfinite(pts).all():
            raise ContractError("non-finite query point")
        cfg = self.config
        lo, hi = self.bounds_lo, self.bounds_hi
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        u = (pts - lo) / (hi - lo)

        P = pts.shape[0]
        feats_geo = kernels.pyramid_gather(self.params.geo_grids, self.offsets,
                                           self.res_arr, u, inside)
        feats_lang = None
        if need_lang:
            feats_lang = kernels.pyramid_gather(self.params.lang_grids,
                                                self.offsets, self.res_arr,
                                                u, inside)

        a_sigma = feats_geo @ self.params.w_sigma + self.params.b_sigma[0]
        sigma = softplus(a_sigma)
        sigma = np.where(inside, sigma, 0.0)

        a_color = color = None
        if need_color:
            a_color = feats_geo @ self.params.W_color.T + self.params.b_color
            color = stable_sigmoid(a_color)

        a_lang = lang = lang_norm = valid = None
        if need_lang:
            a_lang = feats_lang @ self.params.W_lang.T + self.params.b_lang
            if cfg.normalize_point_embeddings:
                lang_norm = np.linalg.norm(a_lang, axis=1)
                valid = lang_norm > DEGENERATE_NORM
                n_deg = int((~valid).sum())
                if n_deg:
                    self.degenerate_count += n_deg
                lang = np.where(valid[:, None],
                                a_lang / np.where(valid, lang_norm, 1.0)[:, None],
                                self.fallback_axis()[None, :])
            else:
                lang_norm = np.ones(P)
                valid = np.ones(P, dtype=bool)
                lang = a_lang

        return ForwardCache(
            pts=pts, u=u, inside=inside,
            feats_geo=feats_geo, feats_lang=feats_lang,
            a_sigma=a_sigma, sigma=sigma, a_color=a_color, color=color,
            a_lang=a_lang, lang_norm=lang_norm, lang=lang, valid_lang=valid,
            need_color=need_color, need_lang=need_lang)

    def query_density(self, pts):
        return self.forward(pts, need_color=False, need_lang=False).sigma

    def query_color(self, pts):
        return self.forward(pts, need_color=True, need_lang=False).color

    def query_language(self, pts):
        """Unit embedding per point (or the fallback axis for degenerate
        pre-normalization norms). Outside the bounds this is the normalized
        head bias."""
        return self.forward(pts, need_color=False, need_lang=True).lang

    # -- backward ---------------------------------------------------------

    def backward(self, cache, g_sigma=None, g_color=None, g_lang=None):
        """Accumulate parameter gradients for upstream gradients on any of the
        three outputs. Untouched parameters come back exactly zero."""
        cfg = self.config
        P = cache.pts.shape[0]
        grads = self.params.zeros_like()

        g_feats_geo = None
        if g_sigma is not None:
            g_sigma = np.asarray(g_sigma, dtype=np.float64)
            if g_sigma.shape != (P,):
                raise ContractError("g_sigma shape mismatch")
            g_a = g_sigma * stable_sigmoid(cache.a_sigma) * cache.inside
            grads.w_sigma += g_a @ cache.feats_geo
            grads.b_sigma += g_a.sum()
            g_feats_geo = g_a[:, None] * self.params.w_sigma[None, :]
        if g_color is not None:
            if not cache.need_color:
                raise ContractError("forward pass did not compute color")
            g_color = np.asarray(g_color, dtype=np.float64)
            if g_color.shape != (P, 3):
                raise ContractError("g_color shape mismatch")
            g_ac = g_color * cache.color * (1.0 - cache.color)
            grads.W_color += g_ac.T @ cache.feats_geo
            grads.b_color += g_ac.sum(axis=0)
            add = g_ac @ self.params.W_color
            g_feats_geo = add if g_feats_geo is None else g_feats_geo + add

        g_feats_lang = None
        if g_lang is not None:
            if not cache.need_lang:
                raise ContractError("forward pass did not compute language")
            g_lang = np.asarray(g_lang, dtype=np.float64)
            if g_lang.shape != (P, cfg.embed_dim):
                raise ContractError("g_lang shape mismatch")
            if cfg.normalize_point_embeddings:
                # d(x/|x|) = (I - yy^T)/|x| applied to upstream
                proj = np.einsum("pd,pd->p", g_lang, cache.lang)
                g_al = (g_lang - proj[:, None] * cache.lang) \
                    / np.where(cache.valid_lang, cache.lang_norm, 1.0)[:, None]
                g_al = np.where(cache.valid_lang[:, None], g_al, 0.0)
            else:
                g_al = g_lang
            grads.W_lang += g_al.T @ cache.feats_lang
            grads.b_lang += g_al.sum(axis=0)
            g_feats_lang = g_al @ self.params.W_lang

        if g_feats_geo is not None:
            kernels.pyramid_scatter(grads.geo_grids, self.offsets, self.res_arr,
                                    cache.u, cache.inside,
                                    np.ascontiguousarray(g_feats_geo))
        if g_feats_lang is not None:
            kernels.pyramid_scatter(grads.lang_grids, self.offsets, self.res_arr,
                                    cache.u, cache.inside,
                                    np.ascontiguousarray(g_feats_lang))
        return grads

    # -- persistence -------------------------------------------------------

    def save(self, path, extra_meta=None):
        path = Path(path)
        if extra_meta:
            self.meta.update(extra_meta)
        blobs = []
        layout = []
        for name, arr in self.params.named_arrays():
            layout.append({"name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        header = {
            "version": CKPT_VERSION,
            "config": self.config.to_dict(),
            "layout": layout,
        }
        if self.meta:
            header["meta"] = self.meta
        with open(path, "wb") as f:
            f.write(json.dumps(header).encode("utf-8"))
            f.write(b"\n")
            for b in blobs:
                f.write(b)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(str(path))
        with open(path, "rb") as f:
            line = f.readline()
            try:
                header = json.loads(line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointFormatError(f"bad checkpoint header: {e}") from e
            if header.get("version") != CKPT_VERSION:
                raise CheckpointFormatError(
                    f"checkpoint version {header.get('version')!r}, "
                    f"expected {CKPT_VERSION!r}")
            config = FieldConfig.from_dict(header["config"])
            arrays = {}
            for entry in header["layout"]:
                count = int(np.prod(entry["shape"]))
                raw = f.read(count * 4)
                if len(raw) != count * 4:
                    raise CheckpointFormatError(
                        f"truncated parameter blob at {entry['name']}")
                arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(
                    np.float64).reshape(entry["shape"])
            if f.read(1):
                raise CheckpointFormatError("trailing bytes after parameter blob")
        params = FieldParams(**arrays)
        fieldobj = cls(config, params)
        fieldobj.meta = header.get("meta", {})
        return fieldobj


def checkpoint_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
