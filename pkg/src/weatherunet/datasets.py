"""Synthetic road scenes, KITTI labels, JSONL manifests and dataset builders.

Manifests hold one :class:`SampleRecord` per line. Paths are written
relative to the manifest's directory and resolved to absolute paths when
read, so a dataset tree can be moved or rebuilt elsewhere byte-identically.
"""

from __future__ import annotations

import json
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .detect_eval import IGNORE_CLASS, GtBox
from .imaging import CropGrid, DimensionError, Image, read_ppm, split_crops, write_ppm
from .rng import derive_seed, stream, value_noise
from .weathergen import (
    WEATHER,
    AdversityTier,
    Condition,
    WeatherSpec,
    apply_weather,
    sample_intensity,
)

VARIANTS = ("clear", "fog", "rain", "snow")
SPLITS = ("train", "test", "val")
DEFAULT_CLASS_TABLE = {"Car": 0, "Pedestrian": 1}
KITTI_NAMES = {0: "Car", 1: "Pedestrian"}


class DatasetError(RuntimeError):
    """Unreadable or inconsistent dataset input."""


class SceneError(RuntimeError):
    pass


class LabelParseError(ValueError):
    pass


@dataclass
class SampleRecord:
    id: str
    image_path: str
    variant: str = "clear"
    intensity: float = 0.0
    tier: str | None = None
    clear_ref: str | None = None
    labels_path: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.clear_ref is None and self.variant == "clear":
            self.clear_ref = self.image_path
        if self.variant == "clear" and (self.intensity != 0 or self.clear_ref != self.image_path):
            raise ValueError(f"clear record {self.id!r} must have intensity 0 and clear_ref == image_path")


# -- manifests -------------------------------------------------------------

_PATH_FIELDS = ("image_path", "clear_ref", "labels_path")


def write_manifest(records: Iterable[SampleRecord], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w") as fh:
        for rec in records:
            d = asdict(rec)
            for k in _PATH_FIELDS:
                if d[k] is not None:
                    d[k] = Path(os.path.relpath(Path(d[k]).resolve(), base)).as_posix()
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    base = path.parent.resolve()
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                for k in _PATH_FIELDS:
                    if d.get(k) is not None:
                        d[k] = os.path.normpath(base / d[k])
                out.append(SampleRecord(**d))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad record: {exc}") from None
    return out


def _records(manifest) -> list[SampleRecord]:
    if isinstance(manifest, (str, os.PathLike)):
        return read_manifest(manifest)
    return list(manifest)


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _read(path: str, rec_id: str) -> Image:
    try:
        return read_ppm(path)
    except OSError as exc:
        raise DatasetError(f"record {rec_id!r}: cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise DatasetError(f"record {rec_id!r}: {exc}") from None


# -- KITTI labels ----------------------------------------------------------

def parse_kitti_labels(path: str | os.PathLike, class_table: Mapping[str, int] | None = None,
                       image_id: str = "") -> list[GtBox]:
    """Read 2D boxes from a KITTI object label file.

    Field 1 is the class name; fields 5-8 are left, top, right, bottom in
    pixels. ``DontCare`` lines become ignore regions; classes missing from
    ``class_table`` are skipped.
    """
    table = DEFAULT_CLASS_TABLE if class_table is None else class_table
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 8:
                raise LabelParseError(f"{path}:{lineno}: expected at least 8 fields, got {len(fields)}")
            name = fields[0]
            try:
                l, t, r, b = (float(v) for v in fields[4:8])
            except ValueError:
                raise LabelParseError(f"{path}:{lineno}: non-numeric box coordinates") from None
            if name == "DontCare":
                boxes.append(GtBox(IGNORE_CLASS, l, t, r, b, ignore=True, image_id=image_id))
            elif name in table:
                boxes.append(GtBox(table[name], l, t, r, b, image_id=image_id))
    return boxes


def format_kitti_labels(boxes: Iterable[GtBox], names: Mapping[int, str] = KITTI_NAMES) -> str:
    lines = []
    for b in boxes:
        name = "DontCare" if b.ignore else names[b.class_id]
        lines.append(f"{name} 0.00 0 0.00 {b.left:.2f} {b.top:.2f} {b.right:.2f} {b.bottom:.2f} "
                     "0.00 0.00 0.00 0.00 0.00 0.00 0.00")
    return "\n".join(lines) + ("\n" if lines else "")


# -- synthetic scenes ------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    cls: str  # "car" | "pedestrian"
    bbox: tuple[int, int, int, int]  # left, top, right, bottom (right/bottom exclusive)
    fill: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int = 64
    height: int = 64
    n_objects: int = 3
    objects: tuple[SceneObject, ...] | None = None
    margin: int = 5  # minimum gap between objects and to the border

    def __post_init__(self):
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        for o in self.objects or ():
            l, t, r, b = o.bbox
            if not (0 <= l < r <= self.width and 0 <= t < b <= self.height):
                raise ValueError(f"object {o} lies outside the {self.width}x{self.height} frame")


def _overlaps(a, b, gap):
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _between(rng, lo: int, hi: int) -> int:
    return int(rng.integers(lo, max(lo, hi) + 1))


def place_objects(spec: SceneSpec, max_tries: int = 100) -> tuple[SceneObject, ...]:
    rng = stream(spec.seed, "scene", "objects")
    w, h, gap = spec.width, spec.height, spec.margin
    placed: list[SceneObject] = []
    for k in range(spec.n_objects):
        for _ in range(max_tries):
            if rng.random() < 0.65:
                cls = "car"
                bw = _between(rng, max(6, w // 8), w // 4)
                bh = _between(rng, max(4, bw // 2), (bw * 4) // 5)
            else:
                cls = "pedestrian"
                bw = _between(rng, 3, 5)
                bh = _between(rng, max(8, 2 * bw + 2), min(h // 3, 18))
            fill = float(rng.uniform(0.85, 0.97) if rng.random() < 0.5 else rng.uniform(0.02, 0.10))
            if bw + 2 * 2 > w or bh + 2 * 2 > h:
                continue
            left = int(rng.integers(2, w - bw - 2 + 1))
            top = int(rng.integers(2, h - bh - 2 + 1))
            box = (left, top, left + bw, top + bh)
            if all(not _overlaps(box, o.bbox, gap) for o in placed):
                placed.append(SceneObject(cls, box, fill))
                break
        else:
            raise SceneError(f"could not place object {k} of seed {spec.seed} after {max_tries} tries")
    return tuple(placed)


def generate_scene(spec: SceneSpec) -> tuple[Image, list[GtBox]]:
    """Textured background plus filled rectangles and their exact boxes."""
    objects = spec.objects if spec.objects is not None else place_objects(spec)
    rng = stream(spec.seed, "scene", "background")
    noise = value_noise(spec.height, spec.width, rng, cell=16.0)
    base = 0.45 + 0.2 * (noise - 0.5)
    tint = np.array([0.97, 1.0, 1.03])
    data = np.clip(base[..., None] * tint, 0.0, 1.0)
    boxes = []
    for o in objects:
        l, t, r, b = o.bbox
        otint = np.array([1.0, 0.98, 0.96]) if o.cls == "car" else np.array([0.96, 0.98, 1.0])
        data[t:b, l:r] = np.clip(o.fill * otint, 0.0, 1.0)
        boxes.append(GtBox(0 if o.cls == "car" else 1, float(l), float(t), float(r), float(b)))
    return Image(data), boxes


def generate_corpus(out_dir: str | os.PathLike, count: int, width: int = 64, height: int = 64,
                    seed: int = 0, split: str = "train", n_objects: tuple[int, int] = (2, 4),
                    prefix: str = "scene", threads: int = 1) -> list[SampleRecord]:
    """Render ``count`` scenes to ``out_dir/images`` with KITTI labels and a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    def one(i):
        sid = f"{prefix}_{i:05d}"
        k = int(stream(seed, sid, "count").integers(n_objects[0], n_objects[1] + 1))
        img, boxes = generate_scene(SceneSpec(derive_seed(seed, sid), width, height, k))
        ip, lp = out / "images" / f"{sid}.ppm", out / "labels" / f"{sid}.txt"
        write_ppm(img, ip)
        lp.write_text(format_kitti_labels(boxes))
        return SampleRecord(sid, str(ip), labels_path=str(lp), split=split)

    records = _pmap(one, list(range(count)), threads)
    write_manifest(records, out / "manifest.jsonl")
    return records


# -- dataset builders ------------------------------------------------------

def extend_dataset(clear_manifest, out_dir: str | os.PathLike, seed: int,
                   materialize: bool = True, threads: int = 1) -> list[SampleRecord]:
    """Original plus one fog, rain and snow version of every clear image.

    Intensities are drawn from U[0.2, 1.0] per image per condition. With
    ``materialize=False`` only the records are planned; nothing is written.
    """
    sources = _records(clear_manifest)
    out = Path(out_dir)
    img_dir = out / "images"
    plan: list[tuple[SampleRecord, SampleRecord | None, WeatherSpec | None]] = []
    for src in sources:
        clear = SampleRecord(src.id, src.image_path, "clear", 0.0, None, src.image_path,
                             src.labels_path, src.split)
        plan.append((clear, None, None))
        for cond in WEATHER:
            rid = f"{src.id}_{cond.value}"
            t = sample_intensity(None, derive_seed(seed, src.id, cond.value, "intensity"))
            rec = SampleRecord(rid, str(img_dir / f"{rid}.ppm"), cond.value, t, None,
                               src.image_path, src.labels_path, src.split)
            plan.append((rec, src, WeatherSpec(cond, t, derive_seed(seed, src.id, cond.value, "weather"))))
    records = [p[0] for p in plan]
    if not materialize:
        return records
    img_dir.mkdir(parents=True, exist_ok=True)
    _materialize_weather(plan, threads)
    write_manifest(records, out / "manifest.jsonl")
    return records


def _materialize_weather(plan, threads: int) -> None:
    def one(item):
        rec, src, spec = item
        if src is None:
            _read(rec.image_path, rec.id)  # readability check
            return
        write_ppm(apply_weather(_read(src.image_path, src.id), spec), rec.image_path)

    _pmap(one, plan, threads)


VALIDATION_SETS = ["normal"] + [f"{c.value}_{t.value}" for c in WEATHER for t in AdversityTier]


def build_validation_sets(clear_test_manifest, out_dir: str | os.PathLike, seed: int,
                          threads: int = 1) -> dict[str, list[SampleRecord]]:
    """Ten sets: ``normal`` plus {fog, rain, snow} x {low, medium, high}.

    Each set gets its own directory with images and ``manifest.jsonl``;
    intensities are drawn per image within the tier range.
    """
    sources = _records(clear_test_manifest)
    if not sources:
        raise DatasetError("validation sets need a non-empty clear test manifest")
    out = Path(out_dir)
    sets: dict[str, list[SampleRecord]] = {}
    jobs = []
    for name in VALIDATION_SETS:
        set_dir = out / name / "images"
        set_dir.mkdir(parents=True, exist_ok=True)
        recs = []
        for src in sources:
            dest = str(set_dir / f"{src.id}.ppm")
            if name == "normal":
                rec = SampleRecord(src.id, dest, "clear", 0.0, None, dest, src.labels_path, "val")
                jobs.append((src, rec, None))
            else:
                cond, tier = name.split("_")
                t = sample_intensity(AdversityTier(tier), derive_seed(seed, src.id, name, "intensity"))
                rec = SampleRecord(src.id, dest, cond, t, tier, src.image_path, src.labels_path, "val")
                jobs.append((src, rec, WeatherSpec(Condition(cond), t,
                                                   derive_seed(seed, src.id, name, "weather"))))
            recs.append(rec)
        sets[name] = recs

    def one(job):
        src, rec, spec = job
        if spec is None:
            try:
                shutil.copyfile(src.image_path, rec.image_path)
            except OSError as exc:
                raise DatasetError(f"record {src.id!r}: cannot copy {src.image_path}: {exc}") from None
        else:
            write_ppm(apply_weather(_read(src.image_path, src.id), spec), rec.image_path)

    _pmap(one, jobs, threads)
    for name, recs in sets.items():
        write_manifest(recs, out / name / "manifest.jsonl")
    return sets


def crop_id(rec_id: str, k: int) -> str:
    return f"{rec_id}_c{k}"


def cropify_dataset(manifest, grid: CropGrid, out_dir: str | os.PathLike,
                    materialize: bool = True, threads: int = 1) -> list[SampleRecord]:
    """Replace every record with ``grid.count`` crop records (row-major order).

    Crop k of an augmented image is paired with crop k of its clear
    reference. Labels are not carried over to crops.
    """
    sources = _records(manifest)
    out = Path(out_dir)
    img_dir, ref_dir = out / "images", out / "refs"
    clear_ids = {r.image_path: r.id for r in sources if r.variant == "clear"}
    ref_jobs: dict[str, str] = {}  # clear_ref path -> crop stem for refs without a clear record
    records = []
    for rec in sources:
        if rec.clear_ref in clear_ids:
            ref_stem, ref_base = clear_ids[rec.clear_ref], img_dir
        else:
            ref_stem = "ref_" + Path(rec.clear_ref).stem
            ref_jobs.setdefault(rec.clear_ref, ref_stem)
            ref_base = ref_dir
        for k in range(grid.count):
            cid = crop_id(rec.id, k)
            path = str(img_dir / f"{cid}.ppm")
            ref = path if rec.variant == "clear" else str(ref_base / f"{crop_id(ref_stem, k)}.ppm")
            records.append(SampleRecord(cid, path, rec.variant, rec.intensity, rec.tier,
                                        ref, None, rec.split))
    if not materialize:
        return records
    img_dir.mkdir(parents=True, exist_ok=True)
    if ref_jobs:
        ref_dir.mkdir(parents=True, exist_ok=True)

    def write_crops(src_path: str, rec_id: str, stem: str, base: Path):
        img = _read(src_path, rec_id)
        try:
            crops = split_crops(img, grid)
        except DimensionError as exc:
            raise DimensionError(f"record {rec_id!r}: {exc}") from None
        for k, c in enumerate(crops):
            write_ppm(c, base / f"{crop_id(stem, k)}.ppm")

    jobs = [(r.image_path, r.id, r.id, img_dir) for r in sources]
    jobs += [(p, stem, stem, ref_dir) for p, stem in ref_jobs.items()]
    _pmap(lambda j: write_crops(*j), jobs, threads)
    write_manifest(records, out / "manifest.jsonl")
    return records
