"""Synthetic labeled scenes with complementary sensor renders.

The two sensors are engineered so that fusing them genuinely helps: camera
images color-code each box's class (channel = class one-hot scaled by an
appearance factor) but see geometry only through perspective; the LiDAR
occupancy grid captures footprints precisely and degrades smoothly with
range, but carries no class channel at all. Classes differ by footprint
aspect ratio at a shared area distribution, so geometry alone separates them
spatially while first-order LiDAR channel statistics stay class-blind.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .detection import GroundTruthBox
from .errors import GenerationError
from .geometry import BEVGridSpec, CameraModel, make_camera
from .tensor import Parameter, Tensor


@dataclass
class SceneBox(GroundTruthBox):
    height: float = 1.5
    appearance: float = 1.0


@dataclass
class Scene:
    scene_id: int
    boxes: List[SceneBox]


@dataclass
class RenderedSample:
    scene_id: int
    camera_images: np.ndarray  # [V, h_img, w_img, 3]
    lidar_grid: np.ndarray  # [H_L, W_L, 2] (occupancy, mean height)
    gts: List[SceneBox]
    cams: List[CameraModel]


@dataclass(frozen=True)
class SceneParams:
    """Scene sampling knobs. Classes share one footprint-area distribution and
    differ in aspect ratio (length/width), most elongated first."""

    n_boxes: Tuple[int, int] = (1, 6)
    min_center_dist: float = 3.0
    margin: float = 2.5
    area_range: Tuple[float, float] = (6.5, 9.5)
    aspect_ranges: Tuple[Tuple[float, float], ...] = ((3.2, 4.8), (1.6, 2.4), (0.9, 1.3))
    height_range: Tuple[float, float] = (1.2, 1.8)
    appearance_range: Tuple[float, float] = (0.2, 1.0)
    sigma_cam: float = 0.05
    sigma_lidar: float = 0.05
    lidar_drop_full_range: float = 40.0  # p_drop(r) = min(0.8, r / this)

    @property
    def n_classes(self) -> int:
        return len(self.aspect_ranges)


def sample_scene(rng: np.random.Generator, params: SceneParams, spec: BEVGridSpec,
                 scene_id: int = 0) -> Scene:
    """Rejection-sample box centers until the pairwise distance bound holds;
    after 1000 failed attempts the box count is reduced."""
    x_min, x_max, y_min, y_max = spec.extent
    lo = np.array([x_min + params.margin, y_min + params.margin])
    hi = np.array([x_max - params.margin, y_max - params.margin])
    if np.any(hi <= lo):
        raise GenerationError(f"margin {params.margin} leaves no room in extent {spec.extent}")
    n_target = int(rng.integers(params.n_boxes[0], params.n_boxes[1] + 1))
    centers: List[np.ndarray] = []
    attempts = 0
    while len(centers) < n_target:
        c = rng.uniform(lo, hi)
        if all(np.hypot(*(c - o)) >= params.min_center_dist for o in centers):
            centers.append(c)
            continue
        attempts += 1
        if attempts > 1000:
            if not centers:
                raise GenerationError("extent too small for even one box")
            n_target = len(centers)  # give up on the rest
            break
    boxes = []
    for c in centers:
        class_id = int(rng.integers(0, params.n_classes))
        area = rng.uniform(*params.area_range)
        aspect = rng.uniform(*params.aspect_ranges[class_id])
        length = float(np.sqrt(area * aspect))
        width = float(np.sqrt(area / aspect))
        boxes.append(SceneBox(
            cx=float(c[0]), cy=float(c[1]), w=width, l=length,
            yaw=float(rng.uniform(-np.pi, np.pi)), class_id=class_id,
            height=float(rng.uniform(*params.height_range)),
            appearance=float(rng.uniform(*params.appearance_range)),
        ))
    return Scene(scene_id=scene_id, boxes=boxes)


def default_rig(image_h: int = 48, image_w: int = 64, fx: float = 24.0,
                mount_height: float = 1.6, pitch_down_deg: float = 5.0) -> List[CameraModel]:
    """Four cameras on the ego at yaw 0/90/180/270 degrees."""
    return [
        make_camera([0.0, 0.0, mount_height], yaw=np.deg2rad(90.0 * i),
                    pitch_down=np.deg2rad(pitch_down_deg), fx=fx, fy=fx,
                    image_h=image_h, image_w=image_w)
        for i in range(4)
    ]


def _box_corners_3d(box: SceneBox) -> np.ndarray:
    """8 corners in world coordinates, box base on the ground plane."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    half = np.array([
        [+box.l / 2, +box.w / 2], [+box.l / 2, -box.w / 2],
        [-box.l / 2, +box.w / 2], [-box.l / 2, -box.w / 2],
    ])
    rot = np.array([[c, -s], [s, c]])
    xy = half @ rot.T + np.array([box.cx, box.cy])
    corners = np.zeros((8, 4))
    corners[:4, :2] = xy
    corners[4:, :2] = xy
    corners[:4, 2] = 0.0
    corners[4:, 2] = box.height
    corners[:, 3] = 1.0
    return corners


def render_cameras(scene: Scene, rig: Sequence[CameraModel], rng: np.random.Generator,
                   sigma_cam: float) -> np.ndarray:
    """Painter's-algorithm Gaussian splats, far to near, plus pixel noise.

    Color channel c carries (class == c) * (0.35 + 0.65 * appearance), so the
    class is readable from color alone while geometry is only implicit in the
    blob footprint.
    """
    v = len(rig)
    h_img, w_img = rig[0].image_h, rig[0].image_w
    images = np.zeros((v, h_img, w_img, 3))
    vv, uu = np.meshgrid(np.arange(h_img), np.arange(w_img), indexing="ij")
    for vi, cam in enumerate(rig):
        w2c = np.asarray(cam.world_to_cam)
        order = []
        for box in scene.boxes:
            center = w2c @ np.array([box.cx, box.cy, box.height / 2.0, 1.0])
            order.append((center[2], box))
        order.sort(key=lambda t: -t[0])  # far first
        img = images[vi]
        for depth, box in order:
            if depth < 0.5:
                continue
            pc = _box_corners_3d(box) @ w2c.T
            good = pc[:, 2] > 0.1
            if good.sum() < 4:
                continue
            us = cam.fx * pc[good, 0] / pc[good, 2] + cam.cx
            vs = cam.fy * pc[good, 1] / pc[good, 2] + cam.cy
            cu, cv = us.mean(), vs.mean()
            su = max(0.7, (us.max() - us.min()) / 4.0)
            sv = max(0.7, (vs.max() - vs.min()) / 4.0)
            if cu < -3 * su or cu > w_img - 1 + 3 * su or cv < -3 * sv or cv > h_img - 1 + 3 * sv:
                continue
            alpha = np.exp(-0.5 * (((uu - cu) / su) ** 2 + ((vv - cv) / sv) ** 2))
            color = np.zeros(3)
            color[box.class_id] = 0.35 + 0.65 * box.appearance
            img += alpha[:, :, None] * (color[None, None, :] - img)
        img += rng.normal(0.0, sigma_cam, img.shape)
    return images


def _interior_mask(box: SceneBox, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    dx = xs - box.cx
    dy = ys - box.cy
    along = c * dx + s * dy
    across = -s * dx + c * dy
    return (np.abs(along) <= box.l / 2.0) & (np.abs(across) <= box.w / 2.0)


def render_lidar(scene: Scene, spec: BEVGridSpec, lidar_shape: Tuple[int, int],
                 rng: np.random.Generator, sigma_lidar: float,
                 drop_full_range: float = 40.0) -> np.ndarray:
    """Occupancy + height grid with range-dependent cell dropout.

    Cells inside a footprint survive with probability 1 - min(0.8, r/range);
    the height channel records the box height on surviving cells. No class
    information is rendered.
    """
    h_l, w_l = lidar_shape
    x_min, x_max, y_min, y_max = spec.extent
    xs = x_min + (np.arange(w_l) + 0.5) * (x_max - x_min) / w_l
    ys = y_min + (np.arange(h_l) + 0.5) * (y_max - y_min) / h_l
    gx, gy = np.meshgrid(xs, ys)  # [h_l, w_l], row = y
    keep_field = rng.random((h_l, w_l))
    occ_noise = rng.normal(0.0, sigma_lidar, (h_l, w_l))
    hgt_noise = rng.normal(0.0, sigma_lidar, (h_l, w_l))
    r = np.hypot(gx, gy)
    kept = keep_field >= np.minimum(0.8, r / drop_full_range)
    occ = np.zeros((h_l, w_l))
    hgt = np.zeros((h_l, w_l))
    for box in scene.boxes:
        inside = _interior_mask(box, gx, gy) & kept
        occ[inside] = 1.0
        hgt[inside] = np.maximum(hgt[inside], box.height)
    return np.stack([occ + occ_noise, hgt + hgt_noise], axis=-1)


# ---------------------------------------------------------------------------
# tiny trainable backbones


class CameraBackbone:
    """conv3x3 -> relu -> 2x2 avg pool -> conv3x3 -> relu -> 1x1 linear."""

    def __init__(self, out_channels: int, rng: np.random.Generator,
                 hidden: Tuple[int, int] = (8, 16), in_channels: int = 3,
                 prefix: str = "backbone.camera"):
        h1, h2 = hidden
        self.out_channels = out_channels
        s1 = 1.0 / np.sqrt(9 * in_channels)
        s2 = 1.0 / np.sqrt(9 * h1)
        s3 = 1.0 / np.sqrt(h2)
        self.k1 = Parameter(f"{prefix}.conv1.kernel", rng.uniform(-s1, s1, (3, 3, in_channels, h1)))
        self.b1 = Parameter(f"{prefix}.conv1.bias", np.zeros(h1))
        self.k2 = Parameter(f"{prefix}.conv2.kernel", rng.uniform(-s2, s2, (3, 3, h1, h2)))
        self.b2 = Parameter(f"{prefix}.conv2.bias", np.zeros(h2))
        self.pw = Parameter(f"{prefix}.proj.weight", rng.uniform(-s3, s3, (h2, out_channels)))
        self.pb = Parameter(f"{prefix}.proj.bias", np.zeros(out_channels))

    def forward_one(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image)
        x = T.relu(T.conv2d_3x3(x, self.k1.tensor, self.b1.tensor))
        x = T.avgpool2x2(x)
        x = T.relu(T.conv2d_3x3(x, self.k2.tensor, self.b2.tensor))
        return T.linear(x, self.pw.tensor, self.pb.tensor)

    def forward(self, images) -> List[Tensor]:
        return [self.forward_one(images[i]) for i in range(len(images))]

    def parameters(self) -> List[Parameter]:
        return [self.k1, self.b1, self.k2, self.b2, self.pw, self.pb]


class LidarBackbone:
    """conv3x3 -> relu -> conv3x3 -> relu -> 1x1 linear (no pooling)."""

    def __init__(self, out_channels: int, rng: np.random.Generator,
                 hidden: Tuple[int, int] = (12, 16), in_channels: int = 2,
                 prefix: str = "backbone.lidar"):
        h1, h2 = hidden
        self.out_channels = out_channels
        s1 = 1.0 / np.sqrt(9 * in_channels)
        s2 = 1.0 / np.sqrt(9 * h1)
        s3 = 1.0 / np.sqrt(h2)
        self.k1 = Parameter(f"{prefix}.conv1.kernel", rng.uniform(-s1, s1, (3, 3, in_channels, h1)))
        self.b1 = Parameter(f"{prefix}.conv1.bias", np.zeros(h1))
        self.k2 = Parameter(f"{prefix}.conv2.kernel", rng.uniform(-s2, s2, (3, 3, h1, h2)))
        self.b2 = Parameter(f"{prefix}.conv2.bias", np.zeros(h2))
        self.pw = Parameter(f"{prefix}.proj.weight", rng.uniform(-s3, s3, (h2, out_channels)))
        self.pb = Parameter(f"{prefix}.proj.bias", np.zeros(out_channels))

    def forward(self, grid) -> Tensor:
        x = grid if isinstance(grid, Tensor) else Tensor(grid)
        x = T.relu(T.conv2d_3x3(x, self.k1.tensor, self.b1.tensor))
        x = T.relu(T.conv2d_3x3(x, self.k2.tensor, self.b2.tensor))
        return T.linear(x, self.pw.tensor, self.pb.tensor)

    def parameters(self) -> List[Parameter]:
        return [self.k1, self.b1, self.k2, self.b2, self.pw, self.pb]
