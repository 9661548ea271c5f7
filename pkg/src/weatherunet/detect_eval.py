"""Detection scoring (IoU, all-points AP, mAP@0.5), a contrast-blob detector,
and per-set evaluation of raw or WUNet-denoised validation sets."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .imaging import RGB, Image, mse, read_ppm

log = logging.getLogger(__name__)

CLASS_NAMES = {0: "car", 1: "pedestrian"}
IGNORE_CLASS = -1
REPORT_HEADER = ["set", "images", "mse", "map", "ap_car", "ap_pedestrian"]
AP_METHOD = "all-points"


@dataclass(frozen=True)
class GtBox:
    class_id: int
    left: float
    top: float
    right: float
    bottom: float
    ignore: bool = False
    image_id: str = ""

    @property
    def area(self) -> float:
        return (self.right - self.left) * (self.bottom - self.top)


@dataclass(frozen=True)
class Detection:
    class_id: int
    left: float
    top: float
    right: float
    bottom: float
    confidence: float
    image_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def area(self) -> float:
        return (self.right - self.left) * (self.bottom - self.top)


def _coords(box) -> tuple[float, float, float, float]:
    return box.left, box.top, box.right, box.bottom


def _check_box(box) -> None:
    l, t, r, b = _coords(box)
    if not all(math.isfinite(v) for v in (l, t, r, b)):
        raise ValueError(f"non-finite box {box}")
    if r <= l or b <= t:
        raise ValueError(f"degenerate box with zero area: {box}")


def _intersection(a, b) -> float:
    w = min(a.right, b.right) - max(a.left, b.left)
    h = min(a.bottom, b.bottom) - max(a.top, b.top)
    return max(w, 0.0) * max(h, 0.0)


def iou(a, b) -> float:
    _check_box(a)
    _check_box(b)
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def _in_ignore(det, regions: Sequence[GtBox], min_cover: float = 0.5) -> bool:
    return any(_intersection(det, r) >= min_cover * det.area for r in regions)


def match_detections(dets: Sequence[Detection], gts: Sequence[GtBox],
                     iou_thresh: float = 0.5) -> list[bool | None]:
    """Greedy matching in the given order; True = TP, False = FP, None = ignored."""
    positives: dict[str, list[GtBox]] = {}
    ignores: dict[str, list[GtBox]] = {}
    for g in gts:
        (ignores if g.ignore else positives).setdefault(g.image_id, []).append(g)
    used = {k: [False] * len(v) for k, v in positives.items()}
    flags = []
    for d in dets:
        cands = positives.get(d.image_id, [])
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(cands):
            if used[d.image_id][j]:
                continue
            ov = iou(d, g)
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = j, ov
        if best >= 0:
            used[d.image_id][best] = True
            flags.append(True)
        elif _in_ignore(d, ignores.get(d.image_id, [])):
            flags.append(None)
        else:
            flags.append(False)
    return flags


def average_precision(dets: Sequence[Detection], gts: Sequence[GtBox],
                      iou_thresh: float = 0.5) -> float:
    """Single-class AP: area under the monotone precision envelope over recall."""
    npos = sum(1 for g in gts if not g.ignore)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    flags = [f for f in match_detections([dets[i] for i in order], gts, iou_thresh) if f is not None]
    if npos == 0:
        if flags:
            return 0.0
        log.debug("AP of an empty class with no detections defined as 1")
        return 1.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.array(flags, dtype=float))
    fp = np.cumsum(~np.array(flags, dtype=bool))
    recall = tp / npos
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(dets: Sequence[Detection], gts: Sequence[GtBox],
                           iou_thresh: float = 0.5,
                           classes: Iterable[int] | None = None) -> tuple[float, dict[int, float]]:
    """Unweighted mean of per-class AP over classes with at least one GT box.

    Ignore regions (class IGNORE_CLASS) apply to every class.
    """
    ignore = [g for g in gts if g.ignore]
    present = sorted({g.class_id for g in gts if not g.ignore})
    if classes is not None:
        present = [c for c in sorted(set(classes)) if c in present]
    if not present:
        raise ValueError("mean_average_precision needs at least one ground-truth box")
    per_class = {}
    for c in present:
        cg = [g for g in gts if g.class_id == c and not g.ignore] + ignore
        cd = [d for d in dets if d.class_id == c]
        per_class[c] = average_precision(cd, cg, iou_thresh)
    return float(np.mean(list(per_class.values()))), per_class


# -- toy detector ----------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    radius: int = 4
    contrast: float = 0.15
    min_area: int = 12
    pedestrian_aspect: float = 2.0  # height / width at or above this => pedestrian


def luma(img: Image) -> np.ndarray:
    d = img.data
    return 0.299 * d[..., 0] + 0.587 * d[..., 1] + 0.114 * d[..., 2]


def blob_detect(img: Image, cfg: DetectorConfig = DetectorConfig(),
                image_id: str = "") -> list[Detection]:
    """Local-contrast blobs as detections.

    Pixels whose luma differs from the box-filtered local mean by more than
    ``cfg.contrast`` are grouped into 4-connected components. Each component
    at least ``cfg.min_area`` pixels in size yields one detection. The box is
    tightened to the pixels that differ from the median luma of the
    component's surrounding ring, which drops the opposite-polarity halo a
    box filter leaves outside an object's edge.
    """
    if img.space != RGB:
        raise ValueError("blob_detect expects an RGB image")
    y = luma(img)
    local = ndimage.uniform_filter(y, size=2 * cfg.radius + 1, mode="nearest")
    contrast = np.abs(y - local)
    labels, n = ndimage.label(contrast > cfg.contrast)
    if n == 0:
        return []
    areas = ndimage.sum_labels(np.ones_like(y), labels, index=np.arange(1, n + 1))
    means = ndimage.mean(contrast, labels, index=np.arange(1, n + 1))
    h, w = y.shape
    dets = []
    for k, sl in enumerate(ndimage.find_objects(labels)):
        if sl is None or areas[k] < cfg.min_area:
            continue
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        ey0, ey1, ex0, ex1 = max(y0 - 1, 0), min(y1 + 1, h), max(x0 - 1, 0), min(x1 + 1, w)
        ring = np.ones((ey1 - ey0, ex1 - ex0), dtype=bool)
        ring[1:-1, 1:-1] = False
        bg = float(np.median(y[ey0:ey1, ex0:ex1][ring]))
        obj = np.abs(y[y0:y1, x0:x1] - bg) > cfg.contrast
        if obj.any():
            rows = np.nonzero(obj.any(axis=1))[0]
            cols = np.nonzero(obj.any(axis=0))[0]
            y0, y1 = y0 + rows[0], y0 + rows[-1] + 1
            x0, x1 = x0 + cols[0], x0 + cols[-1] + 1
        bw, bh = x1 - x0, y1 - y0
        cls = 1 if bh / bw >= cfg.pedestrian_aspect else 0
        conf = float(min(max(means[k], 0.0), 1.0))
        dets.append(Detection(cls, float(x0), float(y0), float(x1), float(y1), conf, image_id))
    return dets


# -- detection dumps -------------------------------------------------------

def write_detections(dets: Iterable[Detection], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(asdict(d), sort_keys=True) + "\n")


def read_detections(path: str | os.PathLike) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = Detection(**json.loads(line))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from None
            out.setdefault(d.image_id, []).append(d)
    return out


# -- set evaluation --------------------------------------------------------

@dataclass
class SetReport:
    name: str
    images: int
    mse: float
    ap: dict[str, float] = field(default_factory=dict)
    map: float = float("nan")

    def to_dict(self) -> dict:
        return {"name": self.name, "images": self.images, "mse": self.mse,
                "ap": dict(self.ap), "map": self.map, "ap_method": AP_METHOD}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SetReport":
        return cls(d["name"], int(d["images"]), float(d["mse"]),
                   {k: float(v) for k, v in d.get("ap", {}).items()}, float(d["map"]))


class EvalDataError(RuntimeError):
    pass


def evaluate_set(records: Sequence, model=None, detector: DetectorConfig = DetectorConfig(),
                 detections: Mapping[str, list[Detection]] | None = None,
                 name: str = "set", class_table: Mapping[str, int] | None = None,
                 threads: int = 1, keep_mse: bool = True) -> SetReport:
    """Denoise (optionally), detect and score every record of one validation set.

    ``detections`` replaces the built-in detector with externally produced
    boxes keyed by record id; images are still loaded for the MSE column.
    """
    from .datasets import parse_kitti_labels
    from .wunet import forward_image

    def one(rec):
        try:
            img = read_ppm(rec.image_path)
        except FileNotFoundError:
            raise EvalDataError(f"record {rec.id!r}: missing image {rec.image_path}") from None
        if model is not None:
            img = forward_image(model, img)
        err = float("nan")
        if keep_mse:
            if not rec.clear_ref:
                raise EvalDataError(f"record {rec.id!r}: no clear_ref for MSE")
            try:
                err = mse(img, read_ppm(rec.clear_ref))
            except FileNotFoundError:
                raise EvalDataError(f"record {rec.id!r}: missing clear_ref {rec.clear_ref}") from None
        gts = []
        if rec.labels_path:
            try:
                gts = parse_kitti_labels(rec.labels_path, class_table, image_id=rec.id)
            except FileNotFoundError:
                raise EvalDataError(f"record {rec.id!r}: missing labels {rec.labels_path}") from None
        if detections is not None:
            dets = [d if d.image_id == rec.id else Detection(**{**asdict(d), "image_id": rec.id})
                    for d in detections.get(rec.id, [])]
        else:
            dets = blob_detect(img, detector, image_id=rec.id)
        return err, gts, dets

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]

    all_gts, all_dets, errs = [], [], []
    for err, gts, dets in results:
        errs.append(err)
        all_gts.extend(gts)
        all_dets.extend(dets)
    report = SetReport(name, len(records), float(np.mean(errs)) if errs else float("nan"))
    if any(not g.ignore for g in all_gts):
        report.map, per_class = mean_average_precision(all_dets, all_gts)
        report.ap = {CLASS_NAMES.get(c, str(c)): v for c, v in per_class.items()}
    return report


def _fmt(v: float | None) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{v:.6f}"


def emit_report(reports: Sequence[SetReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow([r.name, r.images, _fmt(r.mse), _fmt(r.map),
                        _fmt(r.ap.get("car")), _fmt(r.ap.get("pedestrian"))])
