"""Procedural fog, rain and snow at a controllable intensity t in [0, 1].

All three models are pure functions of (image, t, seed). Random draws for
streak and flake placement do not depend on t, so raising t only adds
artifacts on top of the ones already present at lower intensity.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .imaging import RGB, ColorSpaceError, Image
from .rng import stream, value_noise


class Condition(str, enum.Enum):
    NONE = "none"
    FOG = "fog"
    RAIN = "rain"
    SNOW = "snow"


WEATHER = (Condition.FOG, Condition.RAIN, Condition.SNOW)


class AdversityTier(str, enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def range(self) -> tuple[float, float]:
        return TIER_RANGES[self]


TIER_RANGES = {
    AdversityTier.LOW: (0.2, 0.4),
    AdversityTier.MEDIUM: (0.4, 0.7),
    AdversityTier.HIGH: (0.7, 1.0),
}
TRAIN_RANGE = (0.2, 1.0)


def tier_of(intensity: float) -> AdversityTier | None:
    for tier, (lo, hi) in TIER_RANGES.items():
        if lo <= intensity < hi or (tier is AdversityTier.HIGH and intensity == hi):
            return tier
    return None


@dataclass(frozen=True)
class WeatherParams:
    """Tuning constants of the three generators."""

    airlight: float = 0.92
    fog_extinction: float = 4.0
    fog_noise_cell: float = 32.0
    rain_density: float = 300.0
    rain_min_len: float = 8.0
    rain_max_len: float = 20.0
    rain_angle: tuple[float, float] = (75.0, 85.0)
    rain_brightness: float = 0.25
    rain_desaturation: float = 0.10
    snow_density: float = 200.0
    snow_radius: tuple[float, float] = (1.0, 3.0)
    snow_alpha: float = 0.9
    snow_veil: float = 0.3
    reference_area: float = 128000.0


DEFAULT_PARAMS = WeatherParams()


@dataclass(frozen=True)
class WeatherSpec:
    condition: Condition
    intensity: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "condition", Condition(self.condition))
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must be in [0, 1], got {self.intensity}")
        if self.condition is Condition.NONE and self.intensity != 0:
            raise ValueError("condition 'none' requires intensity 0")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"intensity must be in [0, 1], got {t}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def fog_transmission(height: int, width: int, t: float, seed: int,
                     params: WeatherParams = DEFAULT_PARAMS) -> np.ndarray:
    """tau = exp(-k d), k = extinction * t, d = 0.5 + 0.5 * noise."""
    noise = value_noise(height, width, stream(seed, "fog"), cell=params.fog_noise_cell)
    depth = 0.5 + 0.5 * noise
    return np.exp(-params.fog_extinction * t * depth)


def apply_fog(img: Image, t: float, seed: int, params: WeatherParams = DEFAULT_PARAMS) -> Image:
    _check_t(t)
    if t == 0:
        return img.copy()
    tau = fog_transmission(img.height, img.width, t, seed, params)[..., None]
    out = tau * img.data + (1.0 - tau) * params.airlight
    return Image(np.clip(out, 0.0, 1.0), RGB)


def rain_streak_count(width: int, height: int, t: float,
                      params: WeatherParams = DEFAULT_PARAMS) -> int:
    return _round_half_up(params.rain_density * t * (width * height / params.reference_area))


def rain_streaks(width: int, height: int, t: float, seed: int,
                 params: WeatherParams = DEFAULT_PARAMS) -> np.ndarray:
    """Streak segments as rows (x0, y0, x1, y1)."""
    n = rain_streak_count(width, height, t, params)
    length = params.rain_min_len + (params.rain_max_len - params.rain_min_len) * t
    draws = stream(seed, "rain").random((n, 3))
    lo, hi = params.rain_angle
    x0 = draws[:, 0] * width
    # start above the frame by up to one full length so streaks enter from the top
    y0 = draws[:, 1] * (height + params.rain_max_len) - params.rain_max_len
    angle = np.deg2rad(lo + (hi - lo) * draws[:, 2])
    x1 = x0 - length * np.cos(angle)
    y1 = y0 + length * np.sin(angle)
    return np.stack([x0, y0, x1, y1], axis=1)


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    u = np.clip(((px - x0) * dx + (py - y0) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (x0 + u * dx), py - (y0 + u * dy))


def apply_rain(img: Image, t: float, seed: int, params: WeatherParams = DEFAULT_PARAMS) -> Image:
    _check_t(t)
    if t == 0:
        return img.copy()
    h, w = img.height, img.width
    layer = np.zeros((h, w))
    for x0, y0, x1, y1 in rain_streaks(w, h, t, seed, params):
        c0 = max(int(math.floor(min(x0, x1))) - 1, 0)
        c1 = min(int(math.ceil(max(x0, x1))) + 2, w)
        r0 = max(int(math.floor(min(y0, y1))) - 1, 0)
        r1 = min(int(math.ceil(max(y0, y1))) + 2, h)
        if c0 >= c1 or r0 >= r1:
            continue
        py, px = np.mgrid[r0:r1, c0:c1].astype(np.float64)
        # pixel centres sit at integer + 0.5
        dist = _segment_distance(px + 0.5, py + 0.5, x0, y0, x1, y1)
        layer[r0:r1, c0:c1] += params.rain_brightness * np.clip(1.0 - dist, 0.0, None)
    streaked = np.clip(img.data + layer[..., None], 0.0, 1.0)
    b = params.rain_desaturation * t
    gray = streaked.mean(axis=2, keepdims=True)
    out = (1.0 - b) * streaked + b * gray
    return Image(np.clip(out, 0.0, 1.0), RGB)


def snow_flake_count(width: int, height: int, t: float,
                     params: WeatherParams = DEFAULT_PARAMS) -> int:
    return _round_half_up(params.snow_density * t * (width * height / params.reference_area))


def apply_snow(img: Image, t: float, seed: int, params: WeatherParams = DEFAULT_PARAMS) -> Image:
    _check_t(t)
    if t == 0:
        return img.copy()
    h, w = img.height, img.width
    m = snow_flake_count(w, h, t, params)
    draws = stream(seed, "snow").random((m, 3))
    rlo, rhi = params.snow_radius
    # running product of (1 - alpha); compositing toward white is order-free
    clear = np.ones((h, w))
    for fx, fy, fr in draws:
        cx, cy = fx * w, fy * h
        radius = rlo + (rhi - rlo) * fr
        sigma = radius / 2.0
        reach = 2.0 * radius
        c0, c1 = max(int(cx - reach), 0), min(int(math.ceil(cx + reach)) + 1, w)
        r0, r1 = max(int(cy - reach), 0), min(int(math.ceil(cy + reach)) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        py, px = np.mgrid[r0:r1, c0:c1].astype(np.float64)
        d2 = (px + 0.5 - cx) ** 2 + (py + 0.5 - cy) ** 2
        alpha = params.snow_alpha * np.exp(-d2 / (2.0 * sigma * sigma))
        alpha[d2 > reach * reach] = 0.0
        clear[r0:r1, c0:c1] *= 1.0 - alpha
    flaked = 1.0 - clear[..., None] * (1.0 - img.data)
    veil = params.snow_veil * t
    out = (1.0 - veil) * flaked + veil
    return Image(np.clip(out, 0.0, 1.0), RGB)


def apply_weather(img: Image, spec: WeatherSpec, params: WeatherParams = DEFAULT_PARAMS) -> Image:
    if img.space != RGB:
        raise ColorSpaceError("weather synthesis expects an RGB image")
    if spec.condition is Condition.NONE:
        return img.copy()
    fn = {Condition.FOG: apply_fog, Condition.RAIN: apply_rain, Condition.SNOW: apply_snow}
    return fn[spec.condition](img, spec.intensity, spec.seed, params)


def sample_intensity(tier: AdversityTier | tuple[float, float] | None, rng_seed: int) -> float:
    """Uniform draw from a tier's range, or from TRAIN_RANGE when tier is None."""
    if tier is None:
        lo, hi = TRAIN_RANGE
    elif isinstance(tier, tuple):
        lo, hi = tier
    else:
        lo, hi = AdversityTier(tier).range
    return float(stream(rng_seed, "intensity").uniform(lo, hi))
