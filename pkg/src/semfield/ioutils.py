"""Artifact IO: binary little-endian PLY, PNG dumps, raw float blobs."""

from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .errors import DatasetFormatError

PLY_VERSION = "semfield-ply/1"

# piecewise-linear heatmap (dark blue -> magenta -> yellow)
_HEAT_ANCHORS = np.array([
    [13, 8, 135],
    [126, 3, 168],
    [204, 71, 120],
    [248, 149, 64],
    [240, 249, 33],
], dtype=np.float64)


def write_ply_points(path, points, scores=None, comment=""):
    """Binary little-endian PLY point cloud; optional per-vertex score."""
    points = np.asarray(points, dtype="<f4").reshape(-1, 3)
    n = points.shape[0]
    props = ["property float x", "property float y", "property float z"]
    if scores is not None:
        scores = np.asarray(scores, dtype="<f4").reshape(-1)
        props.append("property float score")
        payload = np.empty((n, 4), dtype="<f4")
        payload[:, :3] = points
        payload[:, 3] = scores
    else:
        payload = points
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"comment {PLY_VERSION} {comment}".rstrip(),
        f"element vertex {n}",
        *props,
        "end_header",
    ]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload.tobytes())
    return Path(path)


def write_ply_mesh(path, vertices, faces, comment=""):
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"comment {PLY_VERSION} {comment}".rstrip(),
        f"element vertex {vertices.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {faces.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]) + "\n"
    face_block = np.empty((faces.shape[0], 13), dtype=np.uint8)
    face_block[:, 0] = 3
    face_block[:, 1:] = faces.astype("<i4").view(np.uint8).reshape(-1, 12)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vertices.tobytes())
        f.write(face_block.tobytes())
    return Path(path)


def read_ply(path):
    """Minimal reader for the files this package writes.

    Returns dict with 'vertices' (n,3 float64), optional 'scores', 'faces'."""
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise DatasetFormatError(f"{path}: not a PLY file")
        n_vertex = n_face = 0
        vprops = []
        element = None
        while True:
            line = f.readline()
            if not line:
                raise DatasetFormatError(f"{path}: truncated header")
            tok = line.decode("ascii").strip().split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "binary_little_endian":
                raise DatasetFormatError(f"{path}: unsupported format {tok[1]}")
            if tok[0] == "element":
                element = tok[1]
                if element == "vertex":
                    n_vertex = int(tok[2])
                elif element == "face":
                    n_face = int(tok[2])
            elif tok[0] == "property" and element == "vertex" and tok[1] != "list":
                vprops.append(tok[2])
            elif tok[0] == "end_header":
                break
        out = {}
        vdata = np.frombuffer(f.read(n_vertex * 4 * len(vprops)), dtype="<f4")
        vdata = vdata.reshape(n_vertex, len(vprops)).astype(np.float64)
        out["vertices"] = vdata[:, :3]
        if "score" in vprops:
            out["scores"] = vdata[:, vprops.index("score")]
        if n_face:
            fdata = np.frombuffer(f.read(n_face * 13), dtype=np.uint8)
            fdata = fdata.reshape(n_face, 13)
            if not (fdata[:, 0] == 3).all():
                raise DatasetFormatError(f"{path}: non-triangle face")
            out["faces"] = fdata[:, 1:].reshape(-1).view("<i4").reshape(n_face, 3)
        return out


def _png_info(meta):
    info = PngImagePlugin.PngInfo()
    for k, v in (meta or {}).items():
        info.add_text(str(k), str(v))
    return info


def write_rgb_png(path, rgb, meta=None):
    """rgb float array in [0,1] -> 8-bit PNG."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))
    img.save(path, pnginfo=_png_info(meta))
    return Path(path)


def write_heatmap_png(path, values, vmin=0.0, vmax=1.0, meta=None):
    """Scalar map -> colormapped 8-bit PNG."""
    v = np.clip((np.asarray(values, dtype=np.float64) - vmin) / (vmax - vmin), 0.0, 1.0)
    pos = v * (len(_HEAT_ANCHORS) - 1)
    i0 = np.clip(pos.astype(int), 0, len(_HEAT_ANCHORS) - 2)
    frac = (pos - i0)[..., None]
    rgb = _HEAT_ANCHORS[i0] * (1.0 - frac) + _HEAT_ANCHORS[i0 + 1] * frac
    img = Image.fromarray((rgb + 0.5).astype(np.uint8))
    img.save(path, pnginfo=_png_info(meta))
    return Path(path)


def write_f32_blob(path, arr, meta=None):
    """Raw little-endian float32 blob with a JSON sidecar describing it."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())
    if meta is not None:
        import json
        side = dict(meta)
        side["shape"] = list(arr.shape)
        side["dtype"] = "float32-le"
        Path(str(path) + ".json").write_text(json.dumps(side, indent=1))
    return Path(path)


def read_f32_blob(path, shape):
    raw = Path(path).read_bytes()
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
