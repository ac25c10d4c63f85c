"""Dataset directory IO.

Layout: `manifest.json` (version string, scene config, cameras, canonical
embeddings, per-view blob names) + `scene.json` + per-view raw little-endian
blobs `view_<i>.rgb.f32`, `view_<i>.labels.i32`, `view_<i>.depth.f32`.
Round-trips are bit-exact.
"""

import json
from pathlib import Path

import numpy as np

from .errors import DatasetConsistencyError, DatasetFormatError, DatasetVersionError
from .geometry import Camera
from .scene import SceneConfig, SemanticScene, TrainView

DATASET_VERSION = "semfield-ds/1"


def _write_blob(path, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    path.write_bytes(arr.astype(np.dtype(dtype).newbyteorder("<"), copy=False).tobytes())


def _read_blob(path, dtype, shape):
    if not path.is_file():
        raise FileNotFoundError(str(path))
    raw = path.read_bytes()
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != want:
        raise DatasetConsistencyError(
            f"{path.name}: expected {want} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(shape)


def export_dataset(scene, views, path, config_hash=""):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    view_entries = []
    for i, view in enumerate(views):
        names = {
            "rgb": f"view_{i}.rgb.f32",
            "labels": f"view_{i}.labels.i32",
            "depth": f"view_{i}.depth.f32",
        }
        _write_blob(path / names["rgb"], view.rgb, np.float32)
        _write_blob(path / names["labels"], view.labels, np.int32)
        _write_blob(path / names["depth"], view.depth, np.float32)
        view_entries.append({
            "camera": view.camera.to_dict(),
            "height": view.camera.height,
            "width": view.camera.width,
            "files": names,
        })
    manifest = {
        "version": DATASET_VERSION,
        "config_hash": config_hash,
        "scene_config": scene.config.to_dict() if scene.config else None,
        "canonical_embeddings": scene.canonical_embeddings.tolist(),
        "views": view_entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (path / "scene.json").write_text(json.dumps(scene.to_dict(), indent=1))
    return path


def import_dataset(path):
    """Load a dataset directory; returns (scene, views, manifest)."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(str(mpath))
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"manifest.json is not valid JSON: {e}") from e
    version = manifest.get("version")
    if version != DATASET_VERSION:
        raise DatasetVersionError(
            f"dataset version {version!r}, expected {DATASET_VERSION!r}")
    try:
        scene = SemanticScene.from_dict(json.loads((path / "scene.json").read_text()))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"scene.json is not valid JSON: {e}") from e
    except KeyError as e:
        raise DatasetFormatError(f"scene.json is missing field {e}") from e

    canon = np.array(manifest["canonical_embeddings"], dtype=np.float64)
    if canon.shape != scene.canonical_embeddings.shape or \
            not np.array_equal(canon, scene.canonical_embeddings):
        raise DatasetConsistencyError("manifest and scene canonical embeddings disagree")

    views = []
    for entry in manifest["views"]:
        cam = Camera.from_dict(entry["camera"])
        H, W = entry["height"], entry["width"]
        if (H, W) != (cam.height, cam.width):
            raise DatasetConsistencyError("view resolution disagrees with its camera")
        f = entry["files"]
        views.append(TrainView(
            camera=cam,
            rgb=_read_blob(path / f["rgb"], np.float32, (H, W, 3)),
            labels=_read_blob(path / f["labels"], np.int32, (H, W)),
            depth=_read_blob(path / f["depth"], np.float32, (H, W)),
        ))
    return scene, views, manifest


def gt_embedding_image(scene, labels):
    """Per-pixel supervision embeddings for a label map: the front-most
    object's embedding, background embedding where labels == -1."""
    D = scene.background_embedding.shape[0]
    table = np.concatenate([
        scene.background_embedding[None, :],
        np.stack([p.embedding for p in scene.objects]) if scene.objects else
        np.zeros((0, D)),
    ])
    return table[labels.astype(np.int64) + 1]
