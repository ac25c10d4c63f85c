"""Synthetic scenes with a verifiable semantic oracle.

Each primitive carries a fixed unit embedding; ground-truth views are rendered
by analytic ray intersection, and the per-pixel label map doubles as the
masked-object supervision source (front-most object wins, -1 is background).
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, GenerationError, UnknownLabelError
from .geometry import Camera, look_at, pixel_rays, quat_to_rot

SHAPE_NAMES = {kernels.SHAPE_SPHERE: "sphere",
               kernels.SHAPE_BOX: "box",
               kernels.SHAPE_CAPSULE: "capsule"}
SHAPE_CODES = {v: k for k, v in SHAPE_NAMES.items()}

LIGHT_DIR = np.array([0.35, -0.45, 0.82])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.3

MAX_EMBED_DOT = 0.9
_REJECT_LIMIT = 1000


@dataclass
class SceneConfig:
    n_objects: int = 3
    embed_dim: int = 32
    n_canonical: int = 4
    bound: float = 1.0                  # scene AABB is [-bound, bound]^3
    shapes: tuple = ("sphere", "box", "capsule")
    min_extent: float = 0.14
    max_extent: float = 0.32
    placement: float = 0.78             # fraction of the feasible center range

    def validate(self):
        if not 1 <= self.n_objects <= 32:
            raise ContractError("n_objects must be in [1, 32]")
        if self.embed_dim < 4:
            raise ContractError("embed_dim must be >= 4")
        if self.n_canonical < 1:
            raise ContractError("n_canonical must be >= 1")
        unknown = set(self.shapes) - set(SHAPE_CODES)
        if unknown:
            raise ContractError(f"unknown shapes {sorted(unknown)}")
        if not 0 < self.min_extent <= self.max_extent < self.bound:
            raise ContractError("extent range must satisfy 0 < min <= max < bound")
        if not 0.0 < self.placement <= 1.0:
            raise ContractError("placement must lie in (0, 1]")

    def to_dict(self):
        return {
            "n_objects": self.n_objects, "embed_dim": self.embed_dim,
            "n_canonical": self.n_canonical, "bound": self.bound,
            "shapes": list(self.shapes),
            "min_extent": self.min_extent, "max_extent": self.max_extent,
            "placement": self.placement,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["shapes"] = tuple(d.get("shapes", ("sphere", "box", "capsule")))
        return cls(**d)


@dataclass
class Primitive:
    shape: str
    rotation: np.ndarray     # (3,3) world-from-local
    center: np.ndarray       # (3,)
    extent: np.ndarray       # (3,) per-axis half sizes
    albedo: np.ndarray       # (3,) in [0,1]
    embedding: np.ndarray    # (D,) unit
    label: str

    def world_to_local(self, points):
        return (np.asarray(points) - self.center) @ self.rotation

    def local_to_world(self, points):
        return np.asarray(points) @ self.rotation.T + self.center

    @property
    def bounding_radius(self):
        if self.shape == "sphere":
            return float(self.extent[0])
        if self.shape == "capsule":
            return float(self.extent[2])
        return float(np.linalg.norm(self.extent))

    def surface_area(self):
        ex, ey, ez = self.extent
        if self.shape == "sphere":
            return 4.0 * np.pi * ex * ex
        if self.shape == "box":
            return 8.0 * (ex * ey + ex * ez + ey * ez)
        r, h = ex, ez
        return 4.0 * np.pi * r * r + 4.0 * np.pi * r * (h - r)

    def to_dict(self):
        return {
            "shape": self.shape,
            "rotation": self.rotation.reshape(-1).tolist(),
            "center": self.center.tolist(),
            "extent": self.extent.tolist(),
            "albedo": self.albedo.tolist(),
            "embedding": self.embedding.tolist(),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            shape=d["shape"],
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            center=np.array(d["center"], dtype=np.float64),
            extent=np.array(d["extent"], dtype=np.float64),
            albedo=np.array(d["albedo"], dtype=np.float64),
            embedding=np.array(d["embedding"], dtype=np.float64),
            label=d["label"],
        )


@dataclass
class SemanticScene:
    objects: list
    background_embedding: np.ndarray
    canonical_embeddings: np.ndarray     # (K, D)
    bound: float
    seed: int
    config: SceneConfig = field(default=None)

    @property
    def bounds_lo(self):
        return np.full(3, -self.bound)

    @property
    def bounds_hi(self):
        return np.full(3, self.bound)

    def object_index(self, label):
        for i, p in enumerate(self.objects):
            if p.label == label:
                return i
        raise UnknownLabelError(label)

    def embedding_for_label(self, idx):
        """Supervision embedding for a label-map value (-1 = background)."""
        if idx < 0:
            return self.background_embedding
        return self.objects[idx].embedding

    def primitive_arrays(self):
        shapes = np.array([SHAPE_CODES[p.shape] for p in self.objects], dtype=np.int64)
        rot = np.stack([p.rotation for p in self.objects]).astype(np.float64)
        trans = np.stack([p.center for p in self.objects]).astype(np.float64)
        extent = np.stack([p.extent for p in self.objects]).astype(np.float64)
        return shapes, rot, trans, extent

    def to_dict(self):
        return {
            "objects": [p.to_dict() for p in self.objects],
            "background_embedding": self.background_embedding.tolist(),
            "canonical_embeddings": self.canonical_embeddings.tolist(),
            "bound": self.bound,
            "seed": self.seed,
            "config": self.config.to_dict() if self.config else None,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            objects=[Primitive.from_dict(p) for p in d["objects"]],
            background_embedding=np.array(d["background_embedding"], dtype=np.float64),
            canonical_embeddings=np.array(d["canonical_embeddings"], dtype=np.float64),
            bound=d["bound"],
            seed=d["seed"],
            config=SceneConfig.from_dict(d["config"]) if d.get("config") else None,
        )


@dataclass
class TrainView:
    camera: Camera
    rgb: np.ndarray       # (H, W, 3) float32 in [0,1]
    labels: np.ndarray    # (H, W) int32, -1 background
    depth: np.ndarray     # (H, W) float32, inf on miss


def _unit_vector(rng, dim):
    while True:
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def generate_scene(seed, config):
    """Deterministic scene from (seed, config); embeddings are drawn uniformly
    on the unit sphere and redrawn until all object pairs have dot < 0.9."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    D = config.embed_dim

    background = _unit_vector(rng, D)
    canonicals = np.stack([_unit_vector(rng, D) for _ in range(config.n_canonical)])

    embeds = []
    for _ in range(config.n_objects):
        for attempt in range(_REJECT_LIMIT + 1):
            if attempt == _REJECT_LIMIT:
                raise GenerationError(
                    f"could not draw {config.n_objects} embeddings with pairwise "
                    f"dot < {MAX_EMBED_DOT} in dimension {D}")
            cand = _unit_vector(rng, D)
            if all(np.dot(cand, e) < MAX_EMBED_DOT for e in embeds):
                embeds.append(cand)
                break

    objects = []
    for i in range(config.n_objects):
        shape = config.shapes[rng.integers(len(config.shapes))]
        ext = rng.uniform(config.min_extent, config.max_extent, size=3)
        if shape == "sphere":
            ext[:] = ext[0]
        elif shape == "capsule":
            ext[1] = ext[0]
            ext[2] = max(ext[2], ext[0] * 1.5)
        rot = quat_to_rot(_unit_vector(rng, 4))
        margin = config.bound
        if shape == "sphere":
            brad = ext[0]
        elif shape == "capsule":
            brad = ext[2]
        else:
            brad = float(np.linalg.norm(ext))
        center = rng.uniform(-(margin - brad) * config.placement,
                             (margin - brad) * config.placement, size=3)
        albedo = rng.uniform(0.25, 1.0, size=3)
        objects.append(Primitive(shape=shape, rotation=rot, center=center,
                                 extent=ext, albedo=albedo,
                                 embedding=embeds[i], label=f"obj{i}"))
    return SemanticScene(objects=objects, background_embedding=background,
                         canonical_embeddings=canonicals, bound=config.bound,
                         seed=seed, config=config)


def render_gt_view(scene, camera):
    """Analytic closest-hit render: Lambertian shading with a fixed light,
    black background, per-pixel object label map and depth."""
    if camera.height < 8 or camera.width < 8:
        raise ContractError("camera resolution must be at least 8x8")
    origins, dirs = pixel_rays(camera)
    shapes, rot, trans, extent = scene.primitive_arrays()
    t, hit, normals = kernels.intersect_scene(origins, dirs, shapes, rot, trans, extent)

    H, W = camera.height, camera.width
    rgb = np.zeros((H * W, 3))
    lam = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, normals @ LIGHT_DIR)
    for k, prim in enumerate(scene.objects):
        sel = hit == k
        rgb[sel] = prim.albedo[None, :] * lam[sel, None]
    np.clip(rgb, 0.0, 1.0, out=rgb)
    return TrainView(
        camera=camera,
        rgb=rgb.reshape(H, W, 3).astype(np.float32),
        labels=hit.reshape(H, W).astype(np.int32),
        depth=t.reshape(H, W).astype(np.float32),
    )


def sample_object_surface(scene, label, n, seed):
    """n area-uniform points on the primitive surface, deterministic per seed."""
    if n < 1:
        raise ContractError("n must be >= 1")
    idx = scene.object_index(label)
    prim = scene.objects[idx]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23, idx]))

    if prim.shape == "sphere":
        r = prim.extent[0]
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        local = d * r
    elif prim.shape == "box":
        ex, ey, ez = prim.extent
        areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=n)
        v = rng.uniform(-1.0, 1.0, size=n)
        local = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            oa, ob = [b for b in range(3) if b != a]
            local[sel, a] = sign[sel] * prim.extent[a]
            local[sel, oa] = u[sel] * prim.extent[oa]
            local[sel, ob] = v[sel] * prim.extent[ob]
    else:
        r, h = prim.extent[0], prim.extent[2]
        half_core = h - r
        p_caps = r / h
        on_cap = rng.uniform(size=n) < p_caps
        local = np.empty((n, 3))
        n_cap = int(on_cap.sum())
        d = rng.standard_normal((n_cap, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        cap_pts = d * r
        cap_pts[:, 2] += np.where(d[:, 2] >= 0.0, half_core, -half_core)
        local[on_cap] = cap_pts
        n_cyl = n - n_cap
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n_cyl)
        z = rng.uniform(-half_core, half_core, size=n_cyl)
        local[~on_cap] = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)

    return prim.local_to_world(local)


def build_camera_rig(n_views, bound, resolution=(64, 64), fov_deg=50.0,
                     radius_scale=2.6):
    """Inward-looking rig on a ring with alternating elevation for coverage."""
    radius = radius_scale * bound
    cams = []
    for i in range(n_views):
        ang = 2.0 * np.pi * i / n_views
        elev = np.deg2rad(22.0 if i % 2 == 0 else 45.0)
        pos = np.array([
            radius * np.cos(elev) * np.cos(ang),
            radius * np.cos(elev) * np.sin(ang),
            radius * np.sin(elev),
        ])
        H, W = resolution
        f = 0.5 * W / np.tan(np.deg2rad(fov_deg) / 2.0)
        cams.append(Camera(fx=f, fy=f, cx=W / 2.0, cy=H / 2.0, height=H,
                           width=W, rotation=look_at(pos, (0.0, 0.0, 0.0)),
                           position=pos))
    return cams
