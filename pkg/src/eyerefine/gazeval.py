"""Appearance-based gaze estimators (k-NN, random forest, small CNN), the
angular-error metric, and the benchmark harness that scores estimators
across training sets and emits a comparison-table CSV.

Estimators consume row-major grayscale pixel vectors of a fixed input
size (default 15x9, a common choice for low-resolution eye crops) and
emit unit gaze vectors.  The benchmark trains each estimator once per
training manifest and reports mean angular error on a shared test set.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import eyegen, segmenter
from .core import (
    EmptyDataset,
    NonUnitInput,
    NotTrained,
    PairMismatch,
    derive_seed,
    make_rng,
    validate_image,
    yaw_pitch_to_vector,
)

BASELINE_ROWS = ("alr", "svr")   # published-only baselines; no implementation


def angular_error(g1, g2) -> float:
    """Angle between two unit gaze vectors, in degrees."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    for name, g in (("g1", g1), ("g2", g2)):
        if g.shape != (3,):
            raise NonUnitInput(f"{name}: expected a 3-vector, got {g.shape}")
        if abs(np.linalg.norm(g) - 1.0) > 1e-6:
            raise NonUnitInput(f"{name}: norm {np.linalg.norm(g):.8f} is not 1")
    return float(np.degrees(np.arccos(np.clip(g1 @ g2, -1.0, 1.0))))


def featurize(image: np.ndarray, height: int = 9, width: int = 15) -> np.ndarray:
    """Row-major grayscale pixel vector at the estimator input size."""
    image = validate_image(image)
    gray = image.astype(np.float64).mean(axis=2)
    small = segmenter.area_resample(gray, height, width)
    return small.reshape(-1)


def _normalize(v, fallback):
    n = np.linalg.norm(v)
    if n < 1e-8:
        return np.asarray(fallback, dtype=np.float64)
    return np.asarray(v, dtype=np.float64) / n


class KnnEstimator:
    """k nearest neighbors on pixel vectors; prediction is the normalized
    mean of the neighbors' gaze vectors.  Zero-mean ties fall back to the
    first (lowest-index, then nearest) neighbor's label."""

    kind = "knn"

    def __init__(self, k: int = 50, height: int = 9, width: int = 15):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.height = height
        self.width = width
        self.features = None
        self.labels = None

    def fit(self, samples):
        if not samples:
            raise EmptyDataset("knn fit needs samples")
        self.features = np.stack([
            featurize(s.image, self.height, self.width) for s in samples
        ])
        self.labels = np.stack([np.asarray(s.gaze, dtype=np.float64) for s in samples])
        return self

    def neighbor_indices(self, image) -> np.ndarray:
        if self.features is None:
            raise NotTrained("knn estimator is not fitted")
        f = featurize(image, self.height, self.width)
        d2 = ((self.features - f) ** 2).sum(axis=1)
        order = np.argsort(d2, kind="stable")
        return order[: min(self.k, len(order))]

    def predict(self, image) -> np.ndarray:
        idx = self.neighbor_indices(image)
        mean = self.labels[idx].mean(axis=0)
        return _normalize(mean, self.labels[idx[0]])


class RfEstimator:
    """Random-forest regression from pixel vectors to gaze vectors; the
    per-tree mean is renormalized onto the sphere."""

    kind = "rf"

    def __init__(self, trees: int = 20, height: int = 9, width: int = 15,
                 seed: int = 0, jobs: int = 1):
        self.trees = trees
        self.height = height
        self.width = width
        self.seed = seed
        self.jobs = jobs
        self.model = None

    def fit(self, samples):
        from sklearn.ensemble import RandomForestRegressor

        if not samples:
            raise EmptyDataset("rf fit needs samples")
        x = np.stack([featurize(s.image, self.height, self.width) for s in samples])
        y = np.stack([np.asarray(s.gaze, dtype=np.float64) for s in samples])
        self.model = RandomForestRegressor(
            n_estimators=self.trees,
            random_state=derive_seed(self.seed, "rf-fit") % (2 ** 32),
            n_jobs=self.jobs,
        )
        self.model.fit(x, y)
        return self

    def predict(self, image) -> np.ndarray:
        if self.model is None:
            raise NotTrained("rf estimator is not fitted")
        f = featurize(image, self.height, self.width)[None]
        return _normalize(self.model.predict(f)[0], (0.0, 0.0, 1.0))


class _GazeCnn(nn.Module):
    """Two conv + two fully connected layers, about 50k parameters."""

    def __init__(self, height, width, seed):
        super().__init__()
        torch.manual_seed(derive_seed(seed, "cnn-init"))
        self.conv = nn.Sequential(
            nn.Conv2d(1, 8, 5, stride=2, padding=2), nn.ReLU(inplace=True),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        ceil2 = lambda n: -(-n // 2)
        h = ceil2(ceil2(height))   # two stride-2 convs with same padding
        w = ceil2(ceil2(width))
        self.fc = nn.Sequential(
            nn.Flatten(),
            nn.Linear(16 * h * w, 256), nn.ReLU(inplace=True),
            nn.Linear(256, 3),
        )

    def forward(self, x):
        return self.fc(self.conv(x))


class CnnEstimator:
    """Small convolutional regressor trained until its validation error
    plateaus for 5 epochs."""

    kind = "cnn"

    def __init__(self, height: int = 9, width: int = 15, seed: int = 0,
                 max_epochs: int = 200, batch_size: int = 16, lr: float = 3e-3):
        self.height = height
        self.width = width
        self.seed = seed
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.net = None

    def fit(self, samples):
        if not samples:
            raise EmptyDataset("cnn fit needs samples")
        x = np.stack([
            featurize(s.image, self.height, self.width).reshape(self.height, self.width)
            for s in samples
        ]).astype(np.float32)[:, None]
        y = np.stack([np.asarray(s.gaze, dtype=np.float32) for s in samples])
        rng = make_rng(self.seed, "cnn-split")
        order = rng.permutation(len(x))
        n_val = max(1, len(x) // 10) if len(x) > 1 else 0
        val_idx, train_idx = order[:n_val], order[n_val:]
        if len(train_idx) == 0:
            train_idx = order
        xt = torch.from_numpy(x[train_idx])
        yt = torch.from_numpy(y[train_idx])
        xv = torch.from_numpy(x[val_idx]) if n_val else xt
        yv = torch.from_numpy(y[val_idx]) if n_val else yt

        net = _GazeCnn(self.height, self.width, self.seed)
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        best, since_best = np.inf, 0
        batch_rng = make_rng(self.seed, "cnn-batches")
        for _ in range(self.max_epochs):
            net.train()
            for start in range(0, len(xt), self.batch_size):
                idx = torch.from_numpy(
                    batch_rng.integers(len(xt), size=min(self.batch_size, len(xt)))
                )
                loss = ((net(xt[idx]) - yt[idx]) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
            net.eval()
            with torch.no_grad():
                pred = net(xv).numpy()
            errs = [
                angular_error(_normalize(p, (0, 0, 1)), _normalize(t, (0, 0, 1)))
                for p, t in zip(pred, yv.numpy())
            ]
            val = float(np.mean(errs))
            if val < best - 1e-3:
                best, since_best = val, 0
            else:
                since_best += 1
                if since_best >= 5:
                    break
        net.eval()
        self.net = net
        return self

    def predict(self, image) -> np.ndarray:
        if self.net is None:
            raise NotTrained("cnn estimator is not fitted")
        f = featurize(image, self.height, self.width).reshape(self.height, self.width)
        x = torch.from_numpy(f.astype(np.float32))[None, None]
        with torch.no_grad():
            out = self.net(x)[0].numpy()
        return _normalize(out, (0.0, 0.0, 1.0))


ESTIMATOR_KINDS = {"knn": KnnEstimator, "rf": RfEstimator, "cnn": CnnEstimator}


def make_estimator(kind: str, **hyper):
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return ESTIMATOR_KINDS[kind](**hyper)


def fit(estimator, train):
    return estimator.fit(train)


def predict(estimator, image) -> np.ndarray:
    return estimator.predict(image)


def mean_error(estimator, samples) -> float:
    """Mean angular error of an estimator over labeled samples."""
    if not samples:
        raise EmptyDataset("no evaluation samples")
    errs = [angular_error(estimator.predict(s.image), s.gaze) for s in samples]
    return float(np.mean(errs))


@dataclass
class BenchmarkReport:
    """Rows of (estimator, train_set, test_set, n, mean_error_deg, runtime_s)."""

    rows: list = field(default_factory=list)

    def to_csv(self, path, include_baselines=False):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["estimator", "train_set", "test_set", "n", "mean_error_deg",
                        "runtime_s"])
            for r in self.rows:
                w.writerow([r["estimator"], r["train_set"], r["test_set"], r["n"],
                            f"{r['mean_error_deg']:.4f}", f"{r['runtime_s']:.3f}"])
            if include_baselines:
                # placeholder rows for published-only baselines
                test = self.rows[0]["test_set"] if self.rows else ""
                for name in BASELINE_ROWS:
                    w.writerow([name, "published", test, "", "", ""])
        return path


def benchmark(train_manifests, test_manifest, estimators, out_csv=None,
              seed: int = 0, include_baselines: bool = False) -> BenchmarkReport:
    """Train each estimator spec on each training manifest and score it on
    the shared test manifest.

    train_manifests: dict name -> manifest path (or list of (name, path)).
    estimators: list of kinds ("knn") or (kind, hyper-dict) pairs.
    One report row per (estimator, train set); deterministic ordering.
    """
    if isinstance(train_manifests, dict):
        train_items = list(train_manifests.items())
    else:
        train_items = [tuple(t) for t in train_manifests]
    test_name = os.path.splitext(os.path.basename(str(test_manifest)))[0]
    test_samples = eyegen.load_manifest(test_manifest)

    report = BenchmarkReport()
    for spec in estimators:
        kind, hyper = (spec, {}) if isinstance(spec, str) else (spec[0], dict(spec[1]))
        for train_name, train_path in train_items:
            if "seed" not in hyper and kind in ("rf", "cnn"):
                hyper["seed"] = seed
            est = make_estimator(kind, **hyper)
            train_samples = eyegen.load_manifest(train_path)
            t0 = time.time()
            est.fit(train_samples)
            err = mean_error(est, test_samples)
            report.rows.append({
                "estimator": kind,
                "train_set": train_name,
                "test_set": test_name,
                "n": len(test_samples),
                "mean_error_deg": err,
                "runtime_s": time.time() - t0,
            })
    if out_csv is not None:
        report.to_csv(out_csv, include_baselines=include_baselines)
    return report


def label_preservation(estimator, raw_images, refined_images) -> float:
    """Mean angular shift of the estimator's predictions between paired raw
    and refined images."""
    raw = list(raw_images)
    ref = list(refined_images)
    if len(raw) != len(ref):
        raise PairMismatch(f"{len(raw)} raw vs {len(ref)} refined images")
    if not raw:
        raise PairMismatch("no pairs supplied")
    shifts = [
        angular_error(estimator.predict(a), estimator.predict(b))
        for a, b in zip(raw, ref)
    ]
    return float(np.mean(shifts))
