"""Center-distance detection metrics and the three-condition harness.

AP uses greedy score-descending matching: a prediction matches the nearest
still-unmatched ground truth of its class within the radius, and the PR curve
is integrated with all-points interpolation. mAP averages AP over classes x
radii {0.5, 1, 2, 4} m. The summary metric is the plain mean of mAP under
both-sensors, LiDAR-only, and camera-only input, all from one set of weights.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .detection import BoxPrediction
from .errors import ContractError
from .fusion import ModalityMask

RADII = (0.5, 1.0, 2.0, 4.0)

CONDITIONS = {
    "both": ModalityMask(True, True),
    "lidar": ModalityMask(False, True),
    "camera": ModalityMask(True, False),
}


def average_precision(preds: Sequence[Tuple[int, float, float, float]],
                      gts: Dict[int, List[Tuple[float, float]]],
                      match_radius: float) -> float:
    """AP for one class. preds: (scene_id, score, x, y); gts: scene -> centers.

    No ground truths and no predictions is defined as 1; no ground truths with
    any prediction is 0.
    """
    if match_radius < 0:
        raise ContractError(f"match radius must be >= 0, got {match_radius}")
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return 1.0 if len(preds) == 0 else 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], preds[i][0], i))
    matched = {scene: np.zeros(len(v), dtype=bool) for scene, v in gts.items()}
    centers = {scene: np.asarray(v, dtype=np.float64).reshape(-1, 2) for scene, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        scene, _, x, y = preds[i]
        if scene not in centers or centers[scene].shape[0] == 0:
            continue
        free = ~matched[scene]
        if not free.any():
            continue
        d = np.hypot(centers[scene][:, 0] - x, centers[scene][:, 1] - y)
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= match_radius:
            matched[scene][j] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # monotone precision envelope, then sum rectangle areas at recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for k in range(len(order)):
        if tp[k]:
            ap += (recall[k] - prev_r) * env[k]
            prev_r = recall[k]
    return float(ap)


def collect_class(preds_by_scene: Dict[int, Sequence[BoxPrediction]],
                  gts_by_scene: Dict[int, Sequence], class_id: int):
    preds = []
    for scene, ps in preds_by_scene.items():
        for p in ps:
            if p.class_id == class_id:
                preds.append((scene, p.score, p.cx, p.cy))
    gts = {scene: [(g.cx, g.cy) for g in gs if g.class_id == class_id]
           for scene, gs in gts_by_scene.items()}
    return preds, gts


def mean_ap(preds_by_scene, gts_by_scene, classes: Sequence[int],
            radii: Sequence[float] = RADII):
    """mAP plus the per-(class, radius) AP table."""
    table = {}
    for c in classes:
        preds, gts = collect_class(preds_by_scene, gts_by_scene, c)
        for r in radii:
            table[(c, r)] = average_precision(preds, gts, r)
    return float(np.mean(list(table.values()))), table


def summary_metric(m_lc: float, m_l: float, m_c: float) -> float:
    """Mean performance over both-sensor, LiDAR-only and camera-only input."""
    return (m_lc + m_l + m_c) / 3.0


@dataclass
class MetricsReport:
    map_lc: float
    map_l: float
    map_c: float
    summary_map: float
    ap_table: Dict[str, Dict[str, float]]  # condition -> "class/radius" -> AP
    config: dict = field(default_factory=dict)

    def check(self):
        expected = summary_metric(self.map_lc, self.map_l, self.map_c)
        assert abs(self.summary_map - expected) < 1e-12
        return self

    def to_json(self) -> dict:
        return {
            "map_lc": self.map_lc, "map_l": self.map_l, "map_c": self.map_c,
            "summary_map": self.summary_map, "ap_table": self.ap_table,
            "config": self.config,
        }

    def write(self, json_path, csv_path):
        with open(json_path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
        cond_map = {"both": self.map_lc, "lidar": self.map_l, "camera": self.map_c}
        with open(csv_path, "w", newline="") as f:
            f.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
            w = csv.writer(f)
            w.writerow(["condition", "class", "radius", "ap", "map", "summary"])
            for cond in ("both", "lidar", "camera"):
                for key, ap in sorted(self.ap_table[cond].items()):
                    cls, radius = key.split("/")
                    w.writerow([cond, cls, radius, f"{ap:.6f}",
                                f"{cond_map[cond]:.6f}", f"{self.summary_map:.6f}"])


def evaluate_conditions(model, dataset, config_echo: dict | None = None,
                        scene_indices: Sequence[int] | None = None,
                        jobs: int = 1) -> MetricsReport:
    """Run inference three times per scene (both / L / C) with one set of
    weights and aggregate the mAP table."""
    if tuple(model.spec.extent) != tuple(dataset.spec.extent):
        raise ContractError(
            f"model extent {model.spec.extent} != dataset extent {dataset.spec.extent}"
        )
    indices = list(scene_indices) if scene_indices is not None else list(range(len(dataset)))
    classes = list(range(dataset.params.n_classes))
    preds = {name: {} for name in CONDITIONS}
    gts = {}

    def run_scene(i):
        sample = dataset.load(i)
        return i, {name: model.predict(sample, mask) for name, mask in CONDITIONS.items()}, sample.gts

    model._bind(dataset.cams)  # before threading: binding mutates model state once
    from . import tensor as T

    if jobs > 1:
        from multiprocessing.dummy import Pool  # threads: model is read-only here

        with T.no_grad(), Pool(jobs) as pool:
            results = pool.map(run_scene, indices)
    else:
        results = [run_scene(i) for i in indices]
    for i, per_cond, scene_gts in results:
        gts[i] = scene_gts
        for name in CONDITIONS:
            preds[name][i] = per_cond[name]

    maps = {}
    tables = {}
    for name in CONDITIONS:
        m, table = mean_ap(preds[name], gts, classes)
        maps[name] = m
        tables[name] = {f"{c}/{r}": ap for (c, r), ap in table.items()}
    report = MetricsReport(
        map_lc=maps["both"], map_l=maps["lidar"], map_c=maps["camera"],
        summary_map=summary_metric(maps["both"], maps["lidar"], maps["camera"]),
        ap_table=tables, config=config_echo or {},
    )
    return report.check()
