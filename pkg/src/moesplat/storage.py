"""On-disk formats.

Everything numeric goes through one container, the "bundle": an ASCII header
declaring named arrays and their shapes, a lone `data` line, then the arrays
as little-endian float32 in declaration order. Gaussian sets are packed as
(N, 14) records in the field order mean xyz, quat wxyz, scale xyz, opacity,
rgb. Images are written twice: 8-bit PNG for eyeballs, float32 .npy for
numerics (loaders prefer the .npy).

Directories produced by the CLI carry a manifest.json with sha256 digests of
every file so a copied or tampered run is detectable.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
from PIL import Image

from .errors import DataError, InvalidParameterError
from .experts import ExpertModel
from .scene import Camera, Dataset, GaussianSet, View

BUNDLE_MAGIC = "moesplat-bundle"
BUNDLE_VERSION = 1
SCHEMA_VERSION = 1

GAUSSIAN_RECORD = 14   # mean(3) quat(4) scale(3) opacity(1) rgb(3)


# ---------------------------------------------------------------------------
# bundles


def save_bundle(path, kind: str, meta: dict, arrays: dict) -> None:
    lines = [f"{BUNDLE_MAGIC} {BUNDLE_VERSION}", f"kind {kind}"]
    for k, v in meta.items():
        lines.append(f"meta {k} {v}")
    for name, arr in arrays.items():
        if " " in name:
            raise InvalidParameterError(f"array name may not contain spaces: {name!r}")
        lines.append("array " + name + " " + " ".join(str(s) for s in arr.shape))
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_bundle(path):
    """Returns (kind, meta, arrays); arrays come back float64."""
    with open(path, "rb") as f:
        blob = f.read()
    sep = b"\ndata\n"
    cut = blob.find(sep)
    if cut < 0:
        raise DataError(f"{path}: missing data marker")
    try:
        header = blob[:cut].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: bad header encoding") from e
    if not header or not header[0].startswith(BUNDLE_MAGIC + " "):
        raise DataError(f"{path}: not a bundle file")
    version = header[0].split()[1]
    if version != str(BUNDLE_VERSION):
        raise DataError(f"{path}: unsupported bundle version {version}")

    kind = None
    meta: dict[str, str] = {}
    shapes: list[tuple[str, tuple]] = []
    for line in header[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "kind":
            kind = rest
        elif tag == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif tag == "array":
            parts = rest.split()
            shapes.append((parts[0], tuple(int(s) for s in parts[1:])))
        else:
            raise DataError(f"{path}: unknown header line {line!r}")
    if kind is None:
        raise DataError(f"{path}: bundle kind missing")

    body = blob[cut + len(sep):]
    arrays = {}
    off = 0
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(body):
            raise DataError(f"{path}: truncated array {name}")
        arrays[name] = np.frombuffer(body[off:off + nbytes], dtype="<f4") \
            .astype(np.float64).reshape(shape)
        off += nbytes
    if off != len(body):
        raise DataError(f"{path}: {len(body) - off} trailing bytes")
    return kind, meta, arrays


def _pack_gaussians(gs: GaussianSet) -> np.ndarray:
    return np.concatenate([gs.means, gs.quats, gs.scales,
                           gs.opacities[:, None], gs.colors], axis=1)


def _unpack_gaussians(rec: np.ndarray, path) -> GaussianSet:
    if rec.ndim != 2 or rec.shape[1] != GAUSSIAN_RECORD:
        raise DataError(f"{path}: bad gaussian record shape {rec.shape}")
    try:
        return GaussianSet(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10],
                           rec[:, 10], rec[:, 11:14])
    except Exception as e:
        raise DataError(f"{path}: corrupt gaussian values ({e})") from e


def save_gaussians(path, gs: GaussianSet) -> None:
    save_bundle(path, "gaussians", {}, {"gaussians": _pack_gaussians(gs)})


def load_gaussians(path) -> GaussianSet:
    kind, _, arrays = load_bundle(path)
    if kind != "gaussians" or "gaussians" not in arrays:
        raise DataError(f"{path}: not a gaussian set file")
    return _unpack_gaussians(arrays["gaussians"], path)


def save_expert(path, expert: ExpertModel) -> None:
    arrays = {"gaussians": _pack_gaussians(expert.base)}
    for k, v in expert.motion.items():
        arrays["motion." + k] = v
    save_bundle(path, "expert", {"expert_kind": expert.kind}, arrays)


def load_expert(path) -> ExpertModel:
    kind, meta, arrays = load_bundle(path)
    if kind != "expert" or "expert_kind" not in meta:
        raise DataError(f"{path}: not an expert file")
    base = _unpack_gaussians(arrays.pop("gaussians"), path)
    motion = {k[len("motion."):]: v for k, v in arrays.items()
              if k.startswith("motion.")}
    try:
        return ExpertModel(meta["expert_kind"], base, motion)
    except Exception as e:
        raise DataError(f"{path}: corrupt expert ({e})") from e


# ---------------------------------------------------------------------------
# images


def save_image(path_base, image: np.ndarray) -> None:
    """Writes <base>.npy (float32) and <base>.png (8 bit)."""
    image = np.asarray(image, dtype=np.float64)
    np.save(str(path_base) + ".npy", image.astype(np.float32))
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(str(path_base) + ".png")


def load_image(path_base) -> np.ndarray:
    npy = str(path_base) + ".npy"
    if os.path.exists(npy):
        return np.load(npy).astype(np.float64)
    png = str(path_base) + ".png"
    if os.path.exists(png):
        return np.asarray(Image.open(png), dtype=np.float64) / 255.0
    raise DataError(f"no image at {path_base}(.npy|.png)")


# ---------------------------------------------------------------------------
# datasets


def _camera_json(c: Camera) -> dict:
    return {"width": c.width, "height": c.height, "fx": c.fx, "fy": c.fy,
            "cx": c.cx, "cy": c.cy, "quat": list(c.quat),
            "position": list(c.position), "near_clip": c.near_clip}


def _camera_from_json(d: dict) -> Camera:
    return Camera(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"],
                  np.array(d["quat"]), np.array(d["position"]), d["near_clip"])


def save_dataset(out_dir, dataset: Dataset, extra_meta: dict | None = None) -> None:
    os.makedirs(os.path.join(out_dir, "views"), exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "views": [{"camera": _camera_json(v.camera), "time": v.time,
                   "image": f"views/view_{i:03d}"}
                  for i, v in enumerate(dataset.views)],
        "test_indices": list(dataset.test_indices),
    }
    if extra_meta:
        doc.update(extra_meta)
    for i, v in enumerate(dataset.views):
        if v.image is not None:
            save_image(os.path.join(out_dir, f"views/view_{i:03d}"), v.image)
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_dataset(out_dir) -> Dataset:
    path = os.path.join(out_dir, "dataset.json")
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"no dataset at {out_dir}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid json") from e
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema version")
    views = []
    for item in doc["views"]:
        img = None
        base = os.path.join(out_dir, item["image"])
        if os.path.exists(base + ".npy") or os.path.exists(base + ".png"):
            img = load_image(base)
        views.append(View(_camera_from_json(item["camera"]), item["time"], img))
    return Dataset(views, list(doc["test_indices"]))


def save_scene_model(out_dir, model) -> None:
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    names = []
    for i, region in enumerate(model.regions):
        name = f"gt/region_{i:02d}.expert"
        save_expert(os.path.join(out_dir, name), region)
        names.append(name)
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump({"schema_version": SCHEMA_VERSION, "regions": names,
                   "regimes": list(model.regimes)}, f, indent=1, sort_keys=True)


def load_scene_model(out_dir):
    from .synth import SceneModel
    path = os.path.join(out_dir, "scene.json")
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"no scene at {out_dir}") from e
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema version")
    regions = [load_expert(os.path.join(out_dir, n)) for n in doc["regions"]]
    return SceneModel(regions, list(doc["regimes"]))


# ---------------------------------------------------------------------------
# manifests


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir) -> dict:
    files = {}
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, out_dir)
            if rel == "manifest.json" or name.endswith(".lock"):
                continue
            files[rel] = _sha256(full)
    doc = {"schema_version": SCHEMA_VERSION, "files": files}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    return doc


def verify_manifest(out_dir) -> None:
    path = os.path.join(out_dir, "manifest.json")
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"no manifest in {out_dir}") from e
    for rel, digest in doc.get("files", {}).items():
        full = os.path.join(out_dir, rel)
        if not os.path.exists(full):
            raise DataError(f"manifest entry missing on disk: {rel}")
        if _sha256(full) != digest:
            raise DataError(f"checksum mismatch: {rel}")
