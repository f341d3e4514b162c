"""On-disk scene datasets.

A dataset is a directory holding ``manifest.json`` (generation parameters,
seed, camera models, counts, and the per-record field list) plus one binary
record per scene under ``scenes/``. Each record is the manifest-declared
fields in order; every field is written as little-endian unsigned 64-bit
``ndim`` then each dimension, then the raw little-endian payload. Bytes are a
pure function of (seed, params): per-scene rng streams are derived from
(seed, kind, scene_id), so records can be produced in any order or in
parallel without changing a single byte.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import BEVGridSpec, CameraModel
from .rng import seeded_rng
from .synthscene import (
    RenderedSample,
    Scene,
    SceneBox,
    SceneParams,
    default_rig,
    render_cameras,
    render_lidar,
    sample_scene,
)

_FIELDS = [
    ("camera_images", "<f8"),
    ("lidar_grid", "<f8"),
    ("gt_centers", "<f8"),
    ("gt_sizes", "<f8"),
    ("gt_yaws", "<f8"),
    ("gt_heights", "<f8"),
    ("gt_classes", "<i8"),
    ("gt_appearance", "<f8"),
]


def _write_array(f, arr: np.ndarray, dtype: str):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    f.write(struct.pack("<Q", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(arr.tobytes())


def _read_array(buf: memoryview, offset: int, dtype: str):
    (ndim,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<Q", buf, offset)
        shape.append(d)
        offset += 8
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    offset += arr.nbytes
    return arr.copy(), offset


def _params_from_json(d: dict) -> SceneParams:
    d = dict(d)
    for key in ("n_boxes", "area_range", "height_range", "appearance_range"):
        d[key] = tuple(d[key])
    d["aspect_ranges"] = tuple(tuple(x) for x in d["aspect_ranges"])
    return SceneParams(**d)


def render_scene_record(seed: int, scene_id: int, params: SceneParams,
                        spec: BEVGridSpec, rig, lidar_shape) -> bytes:
    """Render one scene to its record bytes (deterministic in all arguments)."""
    scene = sample_scene(seeded_rng(seed, "scene", scene_id), params, spec, scene_id)
    images = render_cameras(scene, rig, seeded_rng(seed, "cam", scene_id), params.sigma_cam)
    lidar = render_lidar(scene, spec, lidar_shape, seeded_rng(seed, "lidar", scene_id),
                         params.sigma_lidar, params.lidar_drop_full_range)
    n = len(scene.boxes)
    arrays = {
        "camera_images": images,
        "lidar_grid": lidar,
        "gt_centers": np.array([[b.cx, b.cy] for b in scene.boxes]).reshape(n, 2),
        "gt_sizes": np.array([[b.w, b.l] for b in scene.boxes]).reshape(n, 2),
        "gt_yaws": np.array([b.yaw for b in scene.boxes]),
        "gt_heights": np.array([b.height for b in scene.boxes]),
        "gt_classes": np.array([b.class_id for b in scene.boxes], dtype=np.int64),
        "gt_appearance": np.array([b.appearance for b in scene.boxes]),
    }
    buf = io.BytesIO()
    for name, dtype in _FIELDS:
        _write_array(buf, arrays[name], dtype)
    return buf.getvalue()


def generate_dataset(root, n_scenes: int, seed: int, params: SceneParams,
                     spec: BEVGridSpec, lidar_shape=(32, 32), image_h: int = 48,
                     image_w: int = 64, fx: float = 24.0, jobs: int = 1) -> "SceneDataset":
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    rig = default_rig(image_h=image_h, image_w=image_w, fx=fx)
    manifest = {
        "format": "bevkit-dataset",
        "version": 1,
        "seed": seed,
        "n_scenes": n_scenes,
        "scene_params": asdict(params),
        "grid": asdict(spec),
        "lidar_shape": list(lidar_shape),
        "cameras": [c.to_json() for c in rig],
        "record_fields": [{"name": n, "dtype": d} for n, d in _FIELDS],
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)

    def write_record(i, payload):
        with open(root / "scenes" / f"scene_{i:06d}.bin", "wb") as f:
            f.write(payload)

    if jobs > 1:
        from multiprocessing import Pool

        with Pool(jobs) as pool:
            args = [(seed, i, params, spec, rig, lidar_shape) for i in range(n_scenes)]
            for i, payload in enumerate(pool.starmap(render_scene_record, args, chunksize=16)):
                write_record(i, payload)
    else:
        for i in range(n_scenes):
            write_record(i, render_scene_record(seed, i, params, spec, rig, lidar_shape))
    return SceneDataset(root)


class SceneDataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"{self.root}: no manifest.json (not a dataset directory)")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        if self.manifest.get("format") != "bevkit-dataset":
            raise DataError(f"{self.root}: unrecognized dataset format")
        self.n_scenes = int(self.manifest["n_scenes"])
        self.spec = BEVGridSpec(
            h=self.manifest["grid"]["h"], w=self.manifest["grid"]["w"],
            d=self.manifest["grid"]["d"],
            extent=tuple(self.manifest["grid"]["extent"]),
            z_range=tuple(self.manifest["grid"]["z_range"]),
        )
        self.lidar_shape = tuple(self.manifest["lidar_shape"])
        self.cams = [CameraModel.from_json(c) for c in self.manifest["cameras"]]
        self.params = _params_from_json(self.manifest["scene_params"])

    def __len__(self):
        return self.n_scenes

    def load(self, i: int) -> RenderedSample:
        if not 0 <= i < self.n_scenes:
            raise DataError(f"scene index {i} out of range [0, {self.n_scenes})")
        path = self.root / "scenes" / f"scene_{i:06d}.bin"
        try:
            raw = memoryview(path.read_bytes())
        except FileNotFoundError:
            raise DataError(f"missing scene record {path}")
        arrays = {}
        offset = 0
        for spec_field in self.manifest["record_fields"]:
            arrays[spec_field["name"]], offset = _read_array(raw, offset, spec_field["dtype"])
        boxes = []
        for j in range(arrays["gt_centers"].shape[0]):
            boxes.append(SceneBox(
                cx=float(arrays["gt_centers"][j, 0]), cy=float(arrays["gt_centers"][j, 1]),
                w=float(arrays["gt_sizes"][j, 0]), l=float(arrays["gt_sizes"][j, 1]),
                yaw=float(arrays["gt_yaws"][j]), class_id=int(arrays["gt_classes"][j]),
                height=float(arrays["gt_heights"][j]),
                appearance=float(arrays["gt_appearance"][j]),
            ))
        return RenderedSample(
            scene_id=i,
            camera_images=arrays["camera_images"],
            lidar_grid=arrays["lidar_grid"],
            gts=boxes,
            cams=self.cams,
        )
