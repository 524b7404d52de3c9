"""Deterministic synthetic geo-aligned multi-modal scenes.

Every sample is a set of co-registered rasters: a high-resolution RGB
image, a multi-spectral (10 band) series and a SAR (2 band) series on a
grid 8x coarser than the RGB image, plus a per-pixel class map on the
coarse grid.  Scenes are built from smoothed random class fields; each
class owns a fixed spectral signature per modality, so the class map is
recoverable from every modality but only up to noise and seasonal drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MS_BANDS = 10
SAR_BANDS = 2
DAYS_PER_YEAR = 365


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    n_classes: int = 4
    ms_size: int = 16
    t_ms: int = 12
    t_sar: int = 6
    hr_ratio: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        for name in ("ms_size", "t_ms", "t_sar", "hr_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class GeoSample:
    """One co-registered record.

    Attributes:
        hr_image: (H_hr, W_hr, 3) reflectance in [0, 1].
        ms_series: (T_ms, H_ms, W_ms, 10).
        sar_series: (T_sar, H_ms, W_ms, 2).
        labels: (H_ms, W_ms) int32 class ids.
        lon, lat: degrees.
        acquisition_days: (T_ms + T_sar,) int32 day offsets, MS frames first.
    """

    hr_image: np.ndarray
    ms_series: np.ndarray
    sar_series: np.ndarray
    labels: np.ndarray
    lon: float
    lat: float
    acquisition_days: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def ms_days(self) -> np.ndarray:
        return self.acquisition_days[: self.ms_series.shape[0]]

    @property
    def sar_days(self) -> np.ndarray:
        return self.acquisition_days[self.ms_series.shape[0]:]

    def scene_label(self) -> int:
        """Majority class of the label map (lowest id on ties)."""
        counts = np.bincount(self.labels.ravel(), minlength=int(self.labels.max()) + 1)
        return int(np.argmax(counts))


@dataclass(frozen=True)
class ClassSignatures:
    hr: np.ndarray          # (K, 3)
    ms: np.ndarray          # (K, 10)
    sar: np.ndarray         # (K, 2)
    season_amp: np.ndarray  # (K,)
    season_phase: np.ndarray


def _seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) % (1 << 64), spawn_key=tuple(key))


def class_signatures(n_classes: int, seed: int) -> ClassSignatures:
    rng = np.random.default_rng(_seed_sequence(seed, 0))
    return ClassSignatures(
        hr=rng.uniform(0.15, 0.85, size=(n_classes, 3)),
        ms=rng.uniform(0.05, 0.6, size=(n_classes, MS_BANDS)),
        sar=rng.uniform(0.02, 0.5, size=(n_classes, SAR_BANDS)),
        season_amp=rng.uniform(0.05, 0.3, size=n_classes),
        season_phase=rng.uniform(0.0, 2 * np.pi, size=n_classes),
    )


def _class_fields(rng, n_classes, size, sigma):
    fields = rng.normal(size=(n_classes, size, size))
    fields = np.stack([ndimage.gaussian_filter(f, sigma, mode="wrap") for f in fields])
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    # a dominant class per scene keeps the majority label informative
    dominant = rng.integers(n_classes)
    fields[dominant] += rng.uniform(0.3, 1.0)
    return fields


def _seasonal(days, sig: ClassSignatures):
    # (T, K) multiplicative factor per frame and class
    angle = 2 * np.pi * days[:, None] / DAYS_PER_YEAR + sig.season_phase[None, :]
    return 1.0 + sig.season_amp[None, :] * np.sin(angle)


def generate_sample(spec: DatasetSpec, index: int, sig: ClassSignatures | None = None) -> GeoSample:
    spec.validate()
    sig = sig if sig is not None else class_signatures(spec.n_classes, spec.seed)
    rng = np.random.default_rng(_seed_sequence(spec.seed, 1, index))
    K, S, R = spec.n_classes, spec.ms_size, spec.hr_ratio

    fields = _class_fields(rng, K, S, sigma=max(S / 8.0, 1.0))
    labels = np.argmax(fields, axis=0).astype(np.int32)
    hr_fields = ndimage.zoom(fields, (1, R, R), order=1, mode="grid-wrap", grid_mode=True)
    hr_classes = np.argmax(hr_fields, axis=0)

    gain = rng.uniform(0.8, 1.2)
    hr = sig.hr[hr_classes] * gain + rng.normal(0.0, 0.03, size=hr_classes.shape + (3,))
    hr = np.clip(hr, 0.0, 1.0)

    ms_days = np.sort(rng.integers(0, DAYS_PER_YEAR, size=spec.t_ms))
    sar_days = np.sort(rng.integers(0, DAYS_PER_YEAR, size=spec.t_sar))

    season = _seasonal(ms_days, sig)[:, labels]                    # (T, S, S)
    frame_gain = rng.uniform(0.9, 1.1, size=(spec.t_ms, 1, 1, 1))
    ms = sig.ms[labels][None] * season[..., None] * frame_gain
    ms = ms + rng.normal(0.0, 0.02, size=ms.shape)

    season = _seasonal(sar_days, sig)[:, labels]
    speckle = rng.gamma(16.0, 1.0 / 16.0, size=(spec.t_sar, S, S, SAR_BANDS))
    sar = sig.sar[labels][None] * season[..., None] * speckle

    return GeoSample(
        hr_image=hr.astype(np.float32),
        ms_series=ms.astype(np.float32),
        sar_series=sar.astype(np.float32),
        labels=labels,
        lon=float(rng.uniform(-180.0, 180.0)),
        lat=float(rng.uniform(-90.0, 90.0)),
        acquisition_days=np.concatenate([ms_days, sar_days]).astype(np.int32),
    )


def generate_dataset(spec: DatasetSpec) -> list[GeoSample]:
    """Generate ``spec.count`` samples; a pure function of ``spec``.

    Sample ``i`` depends only on ``(seed, i)``, so growing ``count`` keeps the
    earlier samples unchanged.
    """
    spec.validate()
    sig = class_signatures(spec.n_classes, spec.seed)
    return [generate_sample(spec, i, sig) for i in range(spec.count)]
