"""Run configuration: a single TOML document with one section per stage.

Unknown keys are rejected; every default below is part of the documented
contract. A sha256 hash of the resolved config is embedded in all artifacts.
"""

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib as toml_reader
else:
    import tomli as toml_reader

from .errors import ConfigError
from .field import FieldConfig
from .scene import SceneConfig
from .training import TrainConfig

DEFAULTS = {
    "run": {
        "seed": 0,
        "out_dir": "runs/out",
        "threads": 1,
    },
    "scene": {
        "n_objects": 3,
        "embed_dim": 32,
        "n_canonical": 4,
        "bound": 1.0,
        "shapes": ["sphere", "box", "capsule"],
        "min_extent": 0.14,
        "max_extent": 0.32,
        "n_views": 12,
        "resolution": 64,
        "fov_deg": 50.0,
        "camera_radius_scale": 2.6,
    },
    "field": {
        "level_resolutions": [16, 32, 64],
        "channels": 4,
        "density_bias": -10.0,
        "normalize_point_embeddings": True,
    },
    "training": {
        "lambda_rgb": 1.0,
        "lambda_lang": 1.0,
        "loss_mode": "pointwise",
        "detach_weights": True,
        "lr_grids": 1e-2,
        "lr_heads": 1e-3,
        "iterations": 2000,
        "batch_rays": 4096,
        "n_samples": 64,
    },
    "transfer": {
        "top_n": 20000,
        "n_samples": 64,
        "dedup_res": 128,
        "scale_factor": 0.5,
        "gs_iterations": 0,
    },
    "query": {
        "tau_nerf": 0.55,
        "tau_gs": 0.60,
        "grid_res": 64,
        "use_normalized_2d": False,
    },
    "eval": {
        "gt_points_per_object": 10000,
        "radius_scale": 2.0,
        "n_eval_views": 8,
    },
    "bench": {
        "seeds": [0, 1, 2, 3, 4],
        "objects_min": 2,
        "objects_max": 4,
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


class RunConfig:
    def __init__(self, data=None):
        self.data = _merge(DEFAULTS, data or {})

    @classmethod
    def load(cls, path=None, overrides=()):
        """Build from an optional TOML file plus `key.path=value` overrides."""
        data = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(str(path))
            try:
                data = toml_reader.loads(path.read_text())
            except toml_reader.TOMLDecodeError as e:
                raise ConfigError(f"invalid config file {path}: {e}") from e
        cfg = cls(data)
        for item in overrides:
            cfg.apply_override(item)
        return cfg

    def apply_override(self, item):
        if "=" not in item:
            raise ConfigError(f"override must be key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = toml_reader.loads(f"v = {raw}")["v"]
        except toml_reader.TOMLDecodeError:
            value = raw
        node = self.data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{key} is a table, not a value")
        node[leaf] = value

    def __getitem__(self, section):
        return self.data[section]

    def hash(self):
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    # -- typed stage configs -------------------------------------------------

    def scene_config(self, n_objects=None):
        s = self.data["scene"]
        return SceneConfig(
            n_objects=n_objects if n_objects is not None else s["n_objects"],
            embed_dim=s["embed_dim"], n_canonical=s["n_canonical"],
            bound=s["bound"], shapes=tuple(s["shapes"]),
            min_extent=s["min_extent"], max_extent=s["max_extent"])

    def field_config(self):
        f = self.data["field"]
        return FieldConfig(
            level_resolutions=tuple(f["level_resolutions"]),
            channels=f["channels"],
            embed_dim=self.data["scene"]["embed_dim"],
            bound=self.data["scene"]["bound"],
            density_bias=f["density_bias"],
            normalize_point_embeddings=f["normalize_point_embeddings"])

    def train_config(self, loss_mode=None):
        t = dict(self.data["training"])
        if loss_mode is not None:
            t["loss_mode"] = loss_mode
        return TrainConfig(**t)
