"""Unpaired inference and FID scoring.

Feature statistics are mergeable, so shards of an image set can be
summarised independently and combined. Covariances are unbiased
(divide by ``n - 1``).
"""

from __future__ import annotations

import csv
import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Tuple

import numpy as np
import torch

from . import data_io
from .agnostic import AgnosticConfig, build_agnostic
from .crop import CropConfig, CropWindow, crop_sample
from .errors import ComparabilityError, DataError, DependencyError, InsufficientDataError, ModeViolationError
from .networks import NetConfig
from .training import STAGES, load_pipeline, make_batch


class FeatureExtractor(ABC):
    """Deterministic image -> feature-vector map used for FID."""

    id: str = "abstract"
    dim: int = 0

    @abstractmethod
    def __call__(self, image: np.ndarray) -> np.ndarray:
        """``image`` is (H, W, 3) float in [0, 1]; returns a float64 (dim,) vector."""


class HandcraftedExtractor(FeatureExtractor):
    """Weight-free 64-d features: a 4x4 grid of mean luminance plus 16-bin
    histograms of each colour channel."""

    id = "handcrafted-v1"
    dim = 64

    def __init__(self, grid: int = 4, bins: int = 16):
        self.grid, self.bins = grid, bins
        self.dim = grid * grid + 3 * bins
        self.id = f"handcrafted-v1-g{grid}-b{bins}"

    def __call__(self, image):
        img = np.asarray(image, dtype=np.float64)
        lum = img @ np.array([0.299, 0.587, 0.114])
        rows = np.array_split(np.arange(lum.shape[0]), self.grid)
        cols = np.array_split(np.arange(lum.shape[1]), self.grid)
        means = [lum[np.ix_(r, c)].mean() for r in rows for c in cols]
        hists = [np.histogram(img[..., ch], bins=self.bins, range=(0.0, 1.0))[0] / lum.size
                 for ch in range(3)]
        return np.concatenate([np.asarray(means), *hists])


class TorchFeatureExtractor(FeatureExtractor):
    """Wraps any frozen torch module (for instance an Inception pool layer)
    taking (1, 3, H, W) input in [-1, 1]."""

    def __init__(self, module: torch.nn.Module, extractor_id: str, dim: int):
        self.module = module.eval()
        self.id, self.dim = extractor_id, dim

    @torch.no_grad()
    def __call__(self, image):
        x = torch.from_numpy(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None] * 2 - 1
        return self.module(x).reshape(-1).double().numpy()


@dataclass
class FIDStats:
    n: int
    mean: np.ndarray
    cov: np.ndarray
    extractor_id: str

    def merge(self, other: "FIDStats") -> "FIDStats":
        """Combine statistics of two disjoint sets (Chan's pairwise update)."""
        if other.extractor_id != self.extractor_id:
            raise ComparabilityError("cannot merge statistics from different extractors")
        return _from_moments(*_combine(_moments(self), _moments(other)), self.extractor_id)


def _moments(s: FIDStats):
    return s.n, s.mean, s.cov * (s.n - 1) if s.n > 1 else np.zeros_like(s.cov)


def _combine(a, b):
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    scatter = sa + sb + np.outer(delta, delta) * (na * nb / n)
    return n, mean, scatter


def _from_moments(n, mean, scatter, extractor_id):
    cov = scatter / (n - 1) if n > 1 else np.zeros_like(scatter)
    return FIDStats(int(n), mean, (cov + cov.T) / 2, extractor_id)


class FIDAccumulator:
    """Streaming count / mean / scatter matrix of feature vectors."""

    def __init__(self, extractor_id: str, dim: int):
        self.extractor_id = extractor_id
        self.n = 0
        self.mean = np.zeros(dim)
        self.scatter = np.zeros((dim, dim))

    def add_features(self, feats: np.ndarray):
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if not len(feats):
            return
        m = feats.mean(0)
        centred = feats - m
        block = (len(feats), m, centred.T @ centred)
        self.n, self.mean, self.scatter = _combine((self.n, self.mean, self.scatter), block) \
            if self.n else block

    def stats(self) -> FIDStats:
        if self.n < 2:
            raise InsufficientDataError(f"need at least 2 images for FID statistics, got {self.n}")
        return _from_moments(self.n, self.mean, self.scatter, self.extractor_id)


def accumulate_fid_stats(images: Iterable[np.ndarray], extractor: FeatureExtractor,
                         chunk: int = 64) -> FIDStats:
    acc = FIDAccumulator(extractor.id, extractor.dim)
    buf = []
    for img in images:
        buf.append(extractor(img))
        if len(buf) == chunk:
            acc.add_features(np.stack(buf))
            buf = []
    if buf:
        acc.add_features(np.stack(buf))
    return acc.stats()


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(ca, cb) -> float:
    ra = _sqrt_psd(ca)
    vals = np.linalg.eigvalsh((ra @ cb @ ra + (ra @ cb @ ra).T) / 2)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(a: FIDStats, b: FIDStats, eps: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``, clamped at 0.

    Square roots come from symmetric eigendecompositions with negative
    eigenvalues clipped; if that fails, ``eps`` is added to both diagonals.
    """
    if a.extractor_id != b.extractor_id:
        raise ComparabilityError(f"extractor mismatch: {a.extractor_id!r} vs {b.extractor_id!r}")
    if a.mean.shape != b.mean.shape:
        raise ComparabilityError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    if min(a.n, b.n) < 2:
        raise InsufficientDataError("both statistics need n >= 2")
    diff = a.mean - b.mean
    try:
        tr = _trace_sqrt_product(a.cov, b.cov)
        if not np.isfinite(tr):
            raise np.linalg.LinAlgError("non-finite trace")
    except np.linalg.LinAlgError:
        off = eps * np.eye(len(diff))
        tr = _trace_sqrt_product(a.cov + off, b.cov + off)
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr)
    return max(d, 0.0)


def list_images(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    files = sorted(d.glob("*.png"))
    if not files:
        raise DataError(f"no PNG images in {d}")
    return files


def iter_images(directory):
    for p in list_images(directory):
        yield data_io.read_rgb(p)


def stats_for_dir(directory, extractor: FeatureExtractor) -> FIDStats:
    return accumulate_fid_stats(iter_images(directory), extractor)


def _hash_file(path):
    p = Path(path)
    return hashlib.sha256(p.read_bytes()).hexdigest() if p.is_file() else None


def run_unpaired_inference(ckpt_dir, test_root, out_dir, net_cfg: NetConfig,
                           agnostic_cfg: AgnosticConfig = AgnosticConfig(), sigma: float = 3.0,
                           split: str = "test", mode: str = "unpaired", batch_size: int = 8) -> Dict:
    """Run the three-stage chain on every (person, mixed garment) pair.

    Records that are not already at the network size (for instance an
    uncropped test set) are resized with a full-image window. Writes
    ``<person>_<cloth>.png`` per pair and ``manifest.json``.
    """
    ckpt_dir, out_dir = Path(ckpt_dir), Path(out_dir)
    for s in STAGES:
        if not (ckpt_dir / f"{s}.pt").is_file():
            raise DependencyError(f"missing {s} checkpoint in {ckpt_dir}")
    pipeline = load_pipeline(ckpt_dir, net_cfg)
    pairs = data_io.load_dataset_index(test_root, split, mode)
    if mode == "unpaired" and pairs.mode != "unpaired":
        raise ModeViolationError("inference expects an unpaired pair list")
    palette = data_io.load_palette(test_root)
    oh, ow = net_cfg.image_size
    resize = CropConfig(scale_lo=1.0, scale_hi=1.0, out_h=oh, out_w=ow)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    entries = list(pairs)
    for start in range(0, len(entries), batch_size):
        bundles = []
        for person_id, cloth_id in entries[start:start + batch_size]:
            sample = data_io.load_sample(test_root, person_id, cloth_id, split, palette=palette)
            ag = build_agnostic(sample, agnostic_cfg)
            bundles.append(crop_sample(sample, ag, CropWindow.full(*sample.size), resize, sigma=sigma))
        batch = make_batch(bundles, net_cfg)
        tryon = pipeline(batch)
        images = ((tryon.permute(0, 2, 3, 1).numpy().astype(np.float64) + 1.0) / 2.0).clip(0, 1)
        for (pid, cid), img in zip(entries[start:start + batch_size], images):
            name = f"{pid}_{cid}.png"
            data_io.write_rgb(out_dir / name, img)
            written.append({"person_id": pid, "cloth_id": cid, "file": name})

    manifest = {
        "pairs": written,
        "checkpoints": {s: _hash_file(ckpt_dir / f"{s}.pt") for s in STAGES},
        "crop_manifest": _hash_file(Path(test_root) / "manifest.json"),
        "image_size": [oh, ow],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


REPORT_COLUMNS = ("model", "scale", "fid", "n_real", "n_fake")


def build_fid_report(real_dirs_by_scale: Mapping[float, Path],
                     fake_dirs_by_model_and_scale: Mapping[Tuple[str, float], Path],
                     extractor: FeatureExtractor, out_dir=None) -> List[Dict]:
    """FID of every (model, scale) output set against the real set at that scale.

    Rows are sorted by (model, scale). With ``out_dir``, writes
    ``fid_report.csv``, ``fid_chart.csv`` (one column per model, one row per
    scale) and ``fid_chart.png``.
    """
    real_stats = {}
    rows = []
    for (model, scale) in sorted(fake_dirs_by_model_and_scale):
        if scale not in real_dirs_by_scale:
            raise DataError(f"no real reference directory for scale {scale}")
        if scale not in real_stats:
            real_stats[scale] = stats_for_dir(real_dirs_by_scale[scale], extractor)
        fake = stats_for_dir(fake_dirs_by_model_and_scale[(model, scale)], extractor)
        rows.append({"model": model, "scale": float(scale),
                     "fid": frechet_distance(real_stats[scale], fake),
                     "n_real": real_stats[scale].n, "n_fake": fake.n})
    if out_dir is not None:
        write_report(rows, out_dir)
    return rows


def chart_series(rows) -> Dict[str, List[Tuple[float, float]]]:
    series: Dict[str, List[Tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r["model"], []).append((r["scale"], r["fid"]))
    return {m: sorted(v) for m, v in series.items()}


def write_report(rows, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "fid_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["model"], repr(r["scale"]), repr(r["fid"]), r["n_real"], r["n_fake"]])

    series = chart_series(rows)
    models = sorted(series)
    scales = sorted({s for pts in series.values() for s, _ in pts}, reverse=True)
    lookup = {(r["model"], r["scale"]): r["fid"] for r in rows}
    with open(out_dir / "fid_chart.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", *models])
        for s in scales:
            w.writerow([repr(s), *[repr(lookup[(m, s)]) if (m, s) in lookup else "" for m in models]])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(len(models), 1)
    for k, m in enumerate(models):
        xs = [scales.index(s) + (k - (len(models) - 1) / 2) * width for s, _ in series[m]]
        ax.bar(xs, [f for _, f in series[m]], width=width, label=m)
    ax.set_xticks(range(len(scales)))
    ax.set_xticklabels([f"scale={s:g}" for s in scales])
    ax.set_ylabel("FID (lower is better)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "fid_chart.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
