"""WUNet: a small UNet denoiser built on :mod:`weatherunet.autodiff`.

Layout (``depth`` levels, widths ``base * 2**level``)::

    enc[l]:  conv3x3+ReLU, conv3x3+ReLU, maxpool2      l = 0..depth-1
    bott:    conv3x3+ReLU, conv3x3+ReLU
    dec[l]:  upsample_nn2, concat enc[l] skip, conv3x3+ReLU, conv3x3+ReLU
    head:    conv1x1 -> 3 channels, sigmoid
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .imaging import HSV, RGB, CropGrid, Image, join_crops, read_ppm, split_crops, to_space
from .rng import stream

log = logging.getLogger(__name__)

MAGIC = b"WUN1"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    """A training or evaluation sample could not be resolved."""


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class WUNetConfig:
    depth: int = 3
    base_channels: int = 16
    color_space: str = RGB
    crop_mode: bool = False
    crop_grid: tuple[int, int] | None = None  # (cols, rows)
    input_size: tuple[int, int] = (64, 32)  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.crop_grid is not None:
            object.__setattr__(self, "crop_grid", tuple(int(v) for v in self.crop_grid))
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.color_space not in (RGB, HSV):
            raise ConfigError(f"color_space must be RGB or HSV, got {self.color_space!r}")
        if self.crop_mode and self.crop_grid is None:
            raise ConfigError("crop_mode requires crop_grid")
        w, h = self.net_size
        unit = 2 ** self.depth
        if w % unit or h % unit:
            raise ConfigError(
                f"network input {w}x{h} must be divisible by 2**depth = {unit}"
            )

    @property
    def grid(self) -> CropGrid | None:
        if not self.crop_mode:
            return None
        w, h = self.input_size
        cols, rows = self.crop_grid
        try:
            return CropGrid.for_size(w, h, cols, rows)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def net_size(self) -> tuple[int, int]:
        """(width, height) of one tensor sample: the crop size in crop mode."""
        if self.crop_mode:
            g = self.grid
            return g.crop_width, g.crop_height
        return self.input_size

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** lvl for lvl in range(self.depth + 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["crop_grid"] = list(self.crop_grid) if self.crop_grid else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WUNetConfig":
        d = dict(d)
        if d.get("crop_grid") is not None:
            d["crop_grid"] = tuple(d["crop_grid"])
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int | None = None  # 24 whole-image, 160 crop mode
    lr: float = 0.01
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    def resolved_batch(self, crop_mode: bool) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 160 if crop_mode else 24


def conv_shapes(cfg: WUNetConfig) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Kernel shapes of every conv in build order."""
    ws = cfg.widths()
    shapes = []
    cin = 3
    for lvl in range(cfg.depth):
        shapes.append((f"enc{lvl}.conv1", (ws[lvl], cin, 3, 3)))
        shapes.append((f"enc{lvl}.conv2", (ws[lvl], ws[lvl], 3, 3)))
        cin = ws[lvl]
    shapes.append(("bott.conv1", (ws[cfg.depth], cin, 3, 3)))
    shapes.append(("bott.conv2", (ws[cfg.depth], ws[cfg.depth], 3, 3)))
    for lvl in reversed(range(cfg.depth)):
        shapes.append((f"dec{lvl}.conv1", (ws[lvl], ws[lvl + 1] + ws[lvl], 3, 3)))
        shapes.append((f"dec{lvl}.conv2", (ws[lvl], ws[lvl], 3, 3)))
    shapes.append(("head", (3, ws[0], 1, 1)))
    return shapes


class Model:
    def __init__(self, cfg: WUNetConfig, params: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.params = params

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def forward(self, x: ad.Tensor, grad: bool = True) -> ad.Tensor:
        if grad:
            P = self.params
        else:
            P = {k: ad.Tensor(p.data) for k, p in self.params.items()}

        def conv(name, t):
            return ad.conv2d(t, P[f"{name}.weight"], P[f"{name}.bias"])

        skips = []
        h = x
        for lvl in range(self.cfg.depth):
            h = ad.relu(conv(f"enc{lvl}.conv1", h))
            h = ad.relu(conv(f"enc{lvl}.conv2", h))
            skips.append(h)
            h = ad.maxpool2(h)
        h = ad.relu(conv("bott.conv1", h))
        h = ad.relu(conv("bott.conv2", h))
        for lvl in reversed(range(self.cfg.depth)):
            h = ad.concat_channels(ad.upsample_nn2(h), skips[lvl])
            h = ad.relu(conv(f"dec{lvl}.conv1", h))
            h = ad.relu(conv(f"dec{lvl}.conv2", h))
        return ad.sigmoid(conv("head", h))

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """NCHW float array in, NCHW float32 prediction out (no graph kept)."""
        return self.forward(ad.Tensor(np.asarray(batch, dtype=np.float32)), grad=False).data


def build_model(cfg: WUNetConfig, seed: int) -> Model:
    """He-uniform weights drawn from a per-layer seeded stream; zero biases."""
    params = {}
    for name, shape in conv_shapes(cfg):
        fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(6.0 / fan_in)
        w = stream(seed, "init", name).uniform(-bound, bound, size=shape).astype(np.float32)
        params[f"{name}.weight"] = ad.Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = ad.Tensor(np.zeros(shape[0], np.float32), requires_grad=True)
    return Model(cfg, params)


def image_to_array(img: Image, space: str) -> np.ndarray:
    """Image -> 3xHxW float32 in the requested color space."""
    return to_space(img, space).data.transpose(2, 0, 1).astype(np.float32)


def array_to_image(arr: np.ndarray, space: str) -> Image:
    """3xHxW prediction -> RGB Image."""
    data = np.clip(np.asarray(arr, dtype=np.float64).transpose(1, 2, 0), 0.0, 1.0)
    return to_space(Image(data, space), RGB)


def forward_image(model: Model, img: Image) -> Image:
    cfg = model.cfg
    if (img.width, img.height) != cfg.input_size:
        raise ad.ShapeError(
            f"image is {img.width}x{img.height}, model expects {cfg.input_size[0]}x{cfg.input_size[1]}"
        )
    img = to_space(img, RGB) if img.space != RGB else img
    if not cfg.crop_mode:
        pred = model.predict(image_to_array(img, cfg.color_space)[None])
        return array_to_image(pred[0], cfg.color_space)
    grid = cfg.grid
    crops = split_crops(img, grid)
    batch = np.stack([image_to_array(c, cfg.color_space) for c in crops])
    pred = model.predict(batch)
    return join_crops([array_to_image(p, cfg.color_space) for p in pred], grid)


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    config: WUNetConfig
    params: dict[str, np.ndarray]
    test_mse: float = float("nan")
    epoch: int = 0

    def to_model(self) -> Model:
        names = [f"{n}.{kind}" for n, _ in conv_shapes(self.config) for kind in ("weight", "bias")]
        if sorted(names) != sorted(self.params):
            raise CheckpointError("checkpoint parameter names do not match its config")
        return Model(self.config, {
            n: ad.Tensor(self.params[n].astype(np.float32), requires_grad=True) for n in names
        })

    @classmethod
    def from_model(cls, model: Model, test_mse: float = float("nan"), epoch: int = 0) -> "Checkpoint":
        return cls(model.cfg, model.state_dict(), test_mse, epoch)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.config.to_dict(), _epoch=ckpt.epoch)
    cfg_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<dI", ckpt.test_mse, len(ckpt.params)))
    for name, arr in ckpt.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4:
        raise CheckpointTruncatedError("checkpoint shorter than its magic")
    if data[:4] != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(cfg_len).decode("utf-8"))
    epoch = meta.pop("_epoch", 0)
    cfg = WUNetConfig.from_dict(meta)
    test_mse, count = r.unpack("<dI")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return Checkpoint(cfg, params, test_mse, epoch)


def save_checkpoint(model: Model | Checkpoint, path: str | os.PathLike,
                    test_mse: float = float("nan")) -> None:
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint.from_model(model, test_mse)
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path: str | os.PathLike) -> Model:
    return read_checkpoint(path).to_model()


# -- training --------------------------------------------------------------

def _load_pair(rec, cfg: WUNetConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    try:
        noisy = read_ppm(rec.image_path)
        clear = read_ppm(rec.clear_ref)
    except FileNotFoundError as exc:
        raise DataError(f"record {rec.id!r}: missing file {exc.filename}") from None
    except ValueError as exc:
        raise DataError(f"record {rec.id!r}: {exc}") from None
    if (noisy.width, noisy.height) != (clear.width, clear.height):
        raise DataError(f"record {rec.id!r}: image and clear_ref sizes differ")
    size = (noisy.width, noisy.height)
    if size == cfg.net_size:
        xs, ys = [noisy], [clear]
    elif cfg.crop_mode and size == cfg.input_size:
        xs, ys = split_crops(noisy, cfg.grid), split_crops(clear, cfg.grid)
    else:
        raise DataError(f"record {rec.id!r}: image {size[0]}x{size[1]} does not fit the model input {cfg.net_size}")
    space = cfg.color_space
    return [image_to_array(x, space) for x in xs], [image_to_array(y, space) for y in ys]


def load_pairs(records: Sequence, cfg: WUNetConfig) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for rec in records:
        x, y = _load_pair(rec, cfg)
        xs.extend(x)
        ys.extend(y)
    if not xs:
        w, h = cfg.net_size
        return np.zeros((0, 3, h, w), np.float32), np.zeros((0, 3, h, w), np.float32)
    return np.stack(xs), np.stack(ys)


def evaluate_mse(model: Model, x: np.ndarray, y: np.ndarray, batch: int = 32) -> float:
    """Mean squared error over all elements, in the model's color space."""
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(x), batch):
        pred = model.predict(x[i:i + batch]).astype(np.float64)
        total += float(np.sum((pred - y[i:i + batch]) ** 2))
    return total / x.size


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[tuple[int, float, float]] = field(default_factory=list)


def fit(model: Model, x: np.ndarray, y: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
        tcfg: TrainConfig, log_path: str | os.PathLike | None = None) -> TrainResult:
    """Train on in-memory NCHW arrays. Returns the best-on-test checkpoint."""
    if len(x) == 0:
        raise DataError("empty training set")
    batch = tcfg.resolved_batch(model.cfg.crop_mode)
    opt = ad.Adam(model.parameters(), lr=tcfg.lr)
    ckpt_dir = Path(tcfg.checkpoint_dir) if tcfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    has_test = len(x_test) > 0
    best = None
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        order = stream(tcfg.seed, "shuffle", epoch).permutation(len(x))
        sq_sum = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            pred = model.forward(ad.Tensor(x[idx]))
            loss = ad.mse_loss(pred, ad.Tensor(y[idx]))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start}; "
                    f"lr={tcfg.lr}, batch={batch}"
                )
            ad.backward(loss)
            opt.step()
            sq_sum += value * len(idx)
        train_mse = sq_sum / len(x)
        test_mse = evaluate_mse(model, x_test, y_test) if has_test else train_mse
        history.append((epoch, train_mse, test_mse))
        log.info("epoch %d train_mse %.6f test_mse %.6f", epoch, train_mse, test_mse)
        ckpt = Checkpoint.from_model(model, test_mse, epoch)
        if best is None or test_mse < best.test_mse:
            best = ckpt
            if ckpt_dir:
                save_checkpoint(best, ckpt_dir / "best.wun")
        if ckpt_dir:
            save_checkpoint(ckpt, ckpt_dir / "last.wun")
        if log_path:
            write_log(history, log_path)
    return TrainResult(best, history)


def write_log(history, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "test_mse"])
        for epoch, tr, te in history:
            w.writerow([epoch, f"{tr:.8f}", f"{te:.8f}"])


def train(model: Model, train_set, test_set, tcfg: TrainConfig,
          log_path: str | os.PathLike | None = None) -> Checkpoint:
    """Train from manifests (lists of records or manifest paths)."""
    from .datasets import read_manifest

    if isinstance(train_set, (str, os.PathLike)):
        train_set = read_manifest(train_set)
    if isinstance(test_set, (str, os.PathLike)):
        test_set = read_manifest(test_set)
    x, y = load_pairs(train_set, model.cfg)
    xt, yt = load_pairs(test_set, model.cfg)
    if log_path is None and tcfg.checkpoint_dir:
        log_path = Path(tcfg.checkpoint_dir) / "train_log.csv"
    return fit(model, x, y, xt, yt, tcfg, log_path).best
