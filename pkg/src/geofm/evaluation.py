"""Frozen-feature evaluation: k-NN classification, feature export, query-attention dumps."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import MODALITIES
from .datakit import GeoSample, ViewSet
from .model import PretrainModel, ViewBatch, _view_batch, encode, sample_batch


FEATURE_LEVELS = ("fused", "backbone") + MODALITIES


@dataclass
class EvalReport:
    protocol: str
    k: int
    accuracy: float
    per_class: dict
    source: str
    dataset_hash: str
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def extract_features(model: PretrainModel, samples: list[GeoSample], branch: str = "teacher",
                     level: str = "fused", batch_size: int = 8):
    """Image-level features: mean over locations (and time) of one feature family.

    ``level`` is ``fused``, one modality, or ``backbone`` (the average of the
    three pooled modality features).  Returns ``(features (n, d) float32, scene labels (n,))``.
    """
    if branch not in ("teacher", "student"):
        raise ValueError(f"branch must be 'teacher' or 'student', got {branch!r}")
    if level not in FEATURE_LEVELS:
        raise ValueError(f"unknown feature level {level!r}")
    net = getattr(model, branch)
    was_training = net.training
    net.eval()
    feats = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            out = encode(net, sample_batch(chunk))
            names = MODALITIES if level == "backbone" else (level,)
            pooled = [out[n].reshape(len(chunk), -1, out[n].shape[-1]).mean(dim=1) for n in names]
            feats.append(torch.stack(pooled).mean(dim=0))
    finally:
        net.train(was_training)
    labels = np.array([s.scene_label() for s in samples], dtype=np.int64)
    return torch.cat(feats).numpy().astype(np.float32), labels


def knn_predict(train_x, train_y, test_x, k: int = 20) -> np.ndarray:
    """Cosine-similarity majority vote; ties go to the class with the larger
    summed similarity, then to the smaller label."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if k < 1:
        raise ValueError("k must be >= 1")
    a = train_x / np.maximum(np.linalg.norm(train_x, axis=1, keepdims=True), 1e-12)
    b = test_x / np.maximum(np.linalg.norm(test_x, axis=1, keepdims=True), 1e-12)
    sim = b @ a.T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    classes = np.unique(train_y)
    preds = np.empty(len(test_x), dtype=train_y.dtype)
    for i, nn in enumerate(order):
        votes = np.array([(train_y[nn] == c).sum() for c in classes])
        mass = np.array([sim[i, nn][train_y[nn] == c].sum() for c in classes])
        best = np.lexsort((-classes, mass, votes))[-1]
        preds[i] = classes[best]
    return preds


def knn_eval(train_x, train_y, test_x, test_y, k: int = 20, source: str = "fused/teacher",
             dataset_hash: str = "") -> EvalReport:
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("k-NN needs non-empty train and test splits")
    if k > len(train_x):
        raise ValueError(f"k={k} exceeds the {len(train_x)} training samples")
    preds = knn_predict(train_x, train_y, test_x, k)
    test_y = np.asarray(test_y)
    per_class = {int(c): float((preds[test_y == c] == c).mean()) for c in np.unique(test_y)}
    return EvalReport("knn-cosine", k, float((preds == test_y).mean()), per_class, source, dataset_hash,
                      len(train_x), len(test_y))


def dataset_hash(samples: list[GeoSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.float64([s.lon, s.lat]).tobytes())
        for arr in (s.hr_image, s.ms_series, s.sar_series, s.labels, s.acquisition_days):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def export_features_csv(features, labels, path, ids=None) -> None:
    features = np.asarray(features)
    ids = range(len(features)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"f{j}" for j in range(features.shape[1])])
        for i, lab, row in zip(ids, labels, features):
            w.writerow([i, int(lab)] + [repr(float(v)) for v in row])


def read_features_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body])
    feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    return ids, labels, feats


@torch.no_grad()
def query_attention(model: PretrainModel, viewset: ViewSet, branch: str = "teacher",
                    region: int = 0) -> list[np.ndarray]:
    """Per-view ``(m, h, w)`` attention of every query over the fused feature grid.

    The student branch applies its geo-context step with ``region``'s
    prototypes first; the teacher has none.
    """
    net = getattr(model, branch)
    maps = []
    for group in ("global", "local"):
        vb: ViewBatch = _view_batch([viewset], group, branch)
        fused = encode(net, vb)["fused"][0]                          # (V, h, w, d)
        V, h, w, d = fused.shape
        if branch == "student":
            protos = model.bank.prototypes[region].to(fused)
            fused = net.geo(fused, protos.expand(V, -1, -1))
        _, attn = net.decoder(fused.reshape(V, h * w, d), return_attn=True)
        maps.extend(a.reshape(-1, h, w).numpy().astype(np.float32) for a in attn)
    return maps


def _to_png(grid: np.ndarray, path: Path, scale: int = 16) -> None:
    lo, hi = float(grid.min()), float(grid.max())
    img = np.zeros_like(grid) if hi <= lo else (grid - lo) / (hi - lo)
    im = Image.fromarray((img * 255).round().astype(np.uint8), mode="L")
    im.resize((grid.shape[1] * scale, grid.shape[0] * scale), Image.NEAREST).save(path)


def dump_query_attention(maps: list[np.ndarray], out_dir) -> list[Path]:
    """Write ``view{v}.npy`` (m, h, w) float32 grids plus one PNG per query."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for v, m in enumerate(maps):
        p = out / f"view{v}.npy"
        np.save(p, m.astype(np.float32))
        written.append(p)
        for i, grid in enumerate(m):
            png = out / f"view{v}_query{i:02d}.png"
            _to_png(grid, png)
            written.append(png)
    return written
