"""Multi-crop view construction for co-registered HR / MS / SAR samples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .geometry import ViewGeometry
from .synthetic import GeoSample


@dataclass(frozen=True)
class AugSpec:
    n_local: int = 6
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    global_size: int = 16   # output side on the coarse grid
    local_size: int = 8
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    p_flip: float = 0.5
    p_rotate: float = 0.5
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    p_solarize: float = 0.2
    p_jitter: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    ms_seq: int = 10
    sar_seq: int = 5
    day_jitter: int = 5

    def validate(self, source_size: int | None = None) -> None:
        if self.n_local < 1:
            raise ValueError("n_local must be >= 1")
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
            if source_size is not None and hi * source_size * source_size < 1.0:
                raise ValueError(f"{name} {(lo, hi)} cannot fit a single pixel of a "
                                 f"{source_size}x{source_size} source")
        if self.global_size <= 0 or self.local_size <= 0:
            raise ValueError("view sizes must be positive")
        if self.ms_seq < 1 or self.sar_seq < 1:
            raise ValueError("temporal sequence lengths must be >= 1")


@dataclass
class View:
    hr: np.ndarray        # (S*R, S*R, 3)
    ms: np.ndarray        # (T_ms, S, S, 10) full series, geometric augmentation only
    sar: np.ndarray       # (T_sar, S, S, 2)
    labels: np.ndarray    # (S, S)
    geometry: ViewGeometry

    @property
    def modalities(self) -> tuple[str, ...]:
        return ("HR", "MS", "SAR")


@dataclass
class ViewSet:
    global_views: list[View]
    local_views: list[View]
    student_temporal_indices: dict[str, np.ndarray]
    teacher_temporal_indices: dict[str, np.ndarray]
    student_days: dict[str, np.ndarray] = field(default_factory=dict)
    teacher_days: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def views(self) -> list[View]:
        return self.global_views + self.local_views


def sample_crop(rng: np.random.Generator, size: int, scale, aspect, tries: int = 20):
    """Integer (x0, y0, w, h) with area fraction in ``scale``."""
    lo, hi = scale
    area = size * size
    for _ in range(tries):
        target = rng.uniform(lo, hi) * area
        ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 1 <= w <= size and 1 <= h <= size and lo * area - 1e-9 <= w * h <= hi * area + 1e-9:
            return int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1)), w, h
    # fall back to the square closest to the lower bound that still fits
    side = min(size, max(1, math.ceil(math.sqrt(lo * area))))
    return int(rng.integers(0, size - side + 1)), int(rng.integers(0, size - side + 1)), side, side


def _resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (..., H, W, C) arrays (align_corners=False)."""
    if arr.shape[-3:-1] == tuple(out_hw):
        return arr
    lead = arr.shape[:-3]
    h, w, c = arr.shape[-3:]
    t = torch.from_numpy(np.ascontiguousarray(arr.reshape(-1, h, w, c))).permute(0, 3, 1, 2)
    t = F.interpolate(t.float(), size=out_hw, mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1).numpy().reshape(lead + tuple(out_hw) + (c,)).astype(arr.dtype)


def _resize_nearest(labels: np.ndarray, out: int) -> np.ndarray:
    h, w = labels.shape
    rows = np.minimum(((np.arange(out) + 0.5) * h / out).astype(int), h - 1)
    cols = np.minimum(((np.arange(out) + 0.5) * w / out).astype(int), w - 1)
    return labels[np.ix_(rows, cols)]


def _orient(arr: np.ndarray, geom: ViewGeometry, axes=(0, 1)) -> np.ndarray:
    if geom.flip_h:
        arr = np.flip(arr, axis=axes[1])
    if geom.rotation_quarter_turns:
        arr = np.rot90(arr, k=geom.rotation_quarter_turns, axes=axes)
    return np.ascontiguousarray(arr)


def _grayscale(x):
    return x @ np.array([0.299, 0.587, 0.114], dtype=x.dtype)


def photometric(hr: np.ndarray, aug: AugSpec, rng: np.random.Generator) -> np.ndarray:
    x = hr.astype(np.float32, copy=True)
    if rng.random() < aug.p_jitter:
        x = x * rng.uniform(1 - aug.brightness, 1 + aug.brightness)
        mean = x.mean()
        x = (x - mean) * rng.uniform(1 - aug.contrast, 1 + aug.contrast) + mean
        gray = _grayscale(x)[..., None]
        x = gray + (x - gray) * rng.uniform(1 - aug.saturation, 1 + aug.saturation)
        x = np.clip(x, 0.0, 1.0)
    if rng.random() < aug.p_blur:
        sigma = rng.uniform(*aug.blur_sigma)
        x = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")
    if rng.random() < aug.p_solarize:
        x = np.where(x >= 0.5, 1.0 - x, x)
    return x.astype(np.float32)


def _make_view(sample: GeoSample, aug: AugSpec, rng, scale, out_size) -> View:
    S = sample.labels.shape[0]
    R = sample.hr_image.shape[0] // S
    x0, y0, w, h = sample_crop(rng, S, scale, aug.aspect)
    geom = ViewGeometry(
        crop_box=(x0, y0, w, h),
        out_size=out_size,
        flip_h=bool(rng.random() < aug.p_flip),
        rotation_quarter_turns=int(rng.integers(1, 4)) if rng.random() < aug.p_rotate else 0,
    )
    hr = sample.hr_image[y0 * R:(y0 + h) * R, x0 * R:(x0 + w) * R]
    hr = _orient(_resize(hr, (out_size * R, out_size * R)), geom)
    ms = _orient(_resize(sample.ms_series[:, y0:y0 + h, x0:x0 + w], (out_size, out_size)), geom, (1, 2))
    sar = _orient(_resize(sample.sar_series[:, y0:y0 + h, x0:x0 + w], (out_size, out_size)), geom, (1, 2))
    labels = _orient(_resize_nearest(sample.labels[y0:y0 + h, x0:x0 + w], out_size), geom)
    return View(photometric(hr, aug, rng), ms, sar, labels, geom)


def _temporal(rng, length: int, seq: int) -> np.ndarray:
    if seq >= length:
        return np.arange(length)
    return np.sort(rng.choice(length, size=seq, replace=False))


def _jitter_days(rng, days: np.ndarray, amount: int) -> np.ndarray:
    if amount <= 0:
        return days.astype(np.int64)
    return days.astype(np.int64) + rng.integers(-amount, amount + 1, size=days.shape)


def make_views(sample: GeoSample, aug: AugSpec, rng: np.random.Generator) -> ViewSet:
    """Two global and ``aug.n_local`` local views of one sample.

    MS/SAR views keep the whole (cropped, oriented) series; the selected
    frames and jittered acquisition days live on the view set, separately
    for the student and the teacher branch.
    """
    aug.validate(sample.labels.shape[0])
    globals_ = [_make_view(sample, aug, rng, aug.global_scale, aug.global_size) for _ in range(2)]
    locals_ = [_make_view(sample, aug, rng, aug.local_scale, aug.local_size) for _ in range(aug.n_local)]

    series = {"MS": (sample.ms_days, aug.ms_seq), "SAR": (sample.sar_days, aug.sar_seq)}
    student_idx, teacher_idx, student_days, teacher_days = {}, {}, {}, {}
    for name, (days, seq) in series.items():
        for idx_map, day_map in ((student_idx, student_days), (teacher_idx, teacher_days)):
            idx = _temporal(rng, len(days), seq)
            idx_map[name] = idx
            day_map[name] = _jitter_days(rng, days[idx], aug.day_jitter)
    return ViewSet(globals_, locals_, student_idx, teacher_idx, student_days, teacher_days)
