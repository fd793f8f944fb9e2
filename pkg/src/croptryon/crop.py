"""Random-resized-crop augmentation applied in lockstep to every person-side
modality, plus whole-dataset pre-cropping at a fixed scale.

Window sampling follows torchvision's ``RandomResizedCrop.get_params``:
up to ``max_attempts`` draws of (area, log-uniform aspect), then a
deterministic centre-crop fallback.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data_io
from .data_io import PoseKeypoints, Sample, SegmentationMap
from .errors import ConfigError, GeometryError, OutputExistsError


@dataclass(frozen=True)
class CropConfig:
    scale_lo: float = 0.5
    scale_hi: float = 1.0
    ratio_lo: float = 3.0 / 4.0
    ratio_hi: float = 4.0 / 3.0
    out_h: int = 512
    out_w: int = 384
    max_attempts: int = 10
    # Garment photo is resized, not cropped, unless this is set.
    include_cloth: bool = False
    # Independent window per training stage instead of one shared window.
    per_stage: bool = False

    def __post_init__(self):
        if not 0 < self.scale_lo <= self.scale_hi <= 1:
            raise ConfigError(
                f"need 0 < scale_lo <= scale_hi <= 1, got ({self.scale_lo}, {self.scale_hi})")
        if not 0 < self.ratio_lo <= self.ratio_hi:
            raise ConfigError(
                f"need 0 < ratio_lo <= ratio_hi, got ({self.ratio_lo}, {self.ratio_hi})")
        if self.out_h <= 0 or self.out_w <= 0:
            raise ConfigError("output size must be positive")
        if self.max_attempts < 0:
            raise ConfigError("max_attempts must be >= 0")

    def at_scale(self, scale: float) -> "CropConfig":
        """Same policy with the scale range collapsed to one value."""
        return replace(self, scale_lo=scale, scale_hi=scale)

    @property
    def disabled(self) -> bool:
        return self.scale_lo == 1.0 and self.scale_hi == 1.0


@dataclass(frozen=True)
class CropWindow:
    top: int
    left: int
    height: int
    width: int
    src_h: int
    src_w: int
    fallback: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"empty window {self}")
        if self.top < 0 or self.left < 0:
            raise GeometryError(f"negative window offset {self}")
        if self.top + self.height > self.src_h or self.left + self.width > self.src_w:
            raise GeometryError(f"window exceeds the {self.src_h}x{self.src_w} source")

    @classmethod
    def full(cls, src_h: int, src_w: int) -> "CropWindow":
        return cls(0, 0, src_h, src_w, src_h, src_w)

    @property
    def area_fraction(self) -> float:
        return self.height * self.width / (self.src_h * self.src_w)

    def to_dict(self) -> Dict[str, int]:
        d = asdict(self)
        d.pop("fallback")
        return d


def derive_rng(base_seed: int, sample_index: int = 0, epoch: int = 0) -> np.random.Generator:
    """Independent random stream per (seed, sample, epoch)."""
    return np.random.default_rng([int(base_seed), int(sample_index), int(epoch)])


def sample_crop_window(src_h: int, src_w: int, cfg: CropConfig,
                       rng: np.random.Generator) -> CropWindow:
    if src_h < 1 or src_w < 1:
        raise GeometryError("source raster is empty")
    area = src_h * src_w
    log_lo, log_hi = math.log(cfg.ratio_lo), math.log(cfg.ratio_hi)
    for _ in range(cfg.max_attempts):
        target_area = area * rng.uniform(cfg.scale_lo, cfg.scale_hi)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= src_w and 0 < h <= src_h:
            top = int(rng.integers(0, src_h - h + 1))
            left = int(rng.integers(0, src_w - w + 1))
            return CropWindow(top, left, h, w, src_h, src_w)

    # Centre crop with the image ratio clamped into the allowed range.
    in_ratio = src_w / src_h
    if in_ratio < cfg.ratio_lo:
        w = src_w
        h = int(round(w / cfg.ratio_lo))
    elif in_ratio > cfg.ratio_hi:
        h = src_h
        w = int(round(h * cfg.ratio_hi))
    else:
        w, h = src_w, src_h
    h, w = max(1, min(h, src_h)), max(1, min(w, src_w))
    return CropWindow((src_h - h) // 2, (src_w - w) // 2, h, w, src_h, src_w, fallback=True)


def transform_keypoints(kps: PoseKeypoints, win: CropWindow, out_h: int, out_w: int) -> PoseKeypoints:
    """Map keypoints into the resized window; points that leave it are hidden."""
    pts = kps.points.copy()
    vis = pts[:, 2] > 0
    pts[vis, 0] = (pts[vis, 0] - win.left) * (out_w / win.width)
    pts[vis, 1] = (pts[vis, 1] - win.top) * (out_h / win.height)
    outside = vis & ~((pts[:, 0] >= 0) & (pts[:, 0] < out_w)
                      & (pts[:, 1] >= 0) & (pts[:, 1] < out_h))
    pts[outside, 2] = 0.0
    return PoseKeypoints(pts)


def _check_window(win: CropWindow, raster: np.ndarray, name: str):
    if tuple(raster.shape[:2]) != (win.src_h, win.src_w):
        raise GeometryError(
            f"{name} is {raster.shape[0]}x{raster.shape[1]} but the window was "
            f"sampled for {win.src_h}x{win.src_w}")


def _source_coords(start: int, length: int, n_out: int) -> np.ndarray:
    # Output pixel centres mapped into source pixel-index coordinates.
    i = np.arange(n_out, dtype=np.float64)
    return start + (i + 0.5) * length / n_out - 0.5


def nearest_indices(start: int, length: int, n_out: int) -> np.ndarray:
    """Source index of each output pixel: floor(coord + 0.5), kept in the window."""
    idx = np.floor(_source_coords(start, length, n_out) + 0.5).astype(np.int64)
    return np.clip(idx, start, start + length - 1)


def resize_nearest(raster: np.ndarray, win: CropWindow, out_h: int, out_w: int) -> np.ndarray:
    _check_window(win, raster, "label raster")
    rows = nearest_indices(win.top, win.height, out_h)
    cols = nearest_indices(win.left, win.width, out_w)
    return raster[rows[:, None], cols[None, :]]


def _linear_taps(start, length, n_out):
    c = np.clip(_source_coords(start, length, n_out), start, start + length - 1)
    i0 = np.floor(c).astype(np.int64)
    i1 = np.minimum(i0 + 1, start + length - 1)
    return i0, i1, c - i0


def resize_bilinear(raster: np.ndarray, win: CropWindow, out_h: int, out_w: int) -> np.ndarray:
    """Crop ``win`` and resize bilinearly; samples never leave the window.

    Works on (H, W), (H, W, C) rasters. A full window at the source size
    returns the input unchanged bit for bit.
    """
    _check_window(win, raster, "raster")
    r0, r1, wy = _linear_taps(win.top, win.height, out_h)
    c0, c1, wx = _linear_taps(win.left, win.width, out_w)
    x = np.asarray(raster, dtype=np.float64)
    extra = (None,) * (x.ndim - 2)
    wx = wx[(None, slice(None)) + extra]
    wy = wy[(slice(None), None) + extra]
    top = x[r0][:, c0] * (1 - wx) + x[r0][:, c1] * wx
    bot = x[r1][:, c0] * (1 - wx) + x[r1][:, c1] * wx
    return top * (1 - wy) + bot * wy


def resize_channels_first(stack: np.ndarray, win: CropWindow, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear crop-resize of a (C, H, W) stack such as a pose map."""
    moved = np.moveaxis(stack, 0, -1)
    return np.moveaxis(resize_bilinear(moved, win, out_h, out_w), -1, 0).astype(stack.dtype)


@dataclass
class CroppedBundle:
    """All modalities of one record after one crop window."""

    sample_id: str
    cloth_id: str
    window: CropWindow
    person_image: np.ndarray
    parse: SegmentationMap
    agnostic_image: np.ndarray
    agnostic_parse: SegmentationMap
    keypoints: PoseKeypoints
    pose_map: Optional[np.ndarray]
    cloth_image: np.ndarray
    cloth_mask: np.ndarray


def crop_sample(sample: Sample, agnostic_pair: Tuple[np.ndarray, SegmentationMap],
                win: CropWindow, cfg: CropConfig, pose_map: Optional[np.ndarray] = None,
                sigma: Optional[float] = None) -> CroppedBundle:
    """Apply one window to every person-side raster of ``sample``.

    Continuous rasters are resampled bilinearly, label maps by nearest
    neighbour, keypoints with :func:`transform_keypoints`. A pre-rendered
    ``pose_map`` is cropped with the same window; otherwise, if ``sigma``
    is given, the pose map is rendered from the transformed keypoints.
    The garment photo and mask are only resized unless
    ``cfg.include_cloth``.
    """
    ag_image, ag_parse = agnostic_pair
    oh, ow = cfg.out_h, cfg.out_w
    for name, r in (("person_image", sample.person_image), ("parse", sample.parse.labels),
                    ("agnostic_image", ag_image), ("agnostic_parse", ag_parse.labels)):
        _check_window(win, r, name)

    kps = transform_keypoints(sample.keypoints, win, oh, ow)
    if pose_map is not None:
        _check_window(win, pose_map.transpose(1, 2, 0), "pose_map")
        pose_out = resize_channels_first(pose_map, win, oh, ow)
    elif sigma is not None:
        pose_out = data_io.render_pose_map(kps, oh, ow, sigma)
    else:
        pose_out = None

    cloth_win = win if cfg.include_cloth else CropWindow.full(*sample.cloth_image.shape[:2])
    return CroppedBundle(
        sample_id=sample.sample_id,
        cloth_id=sample.cloth_id,
        window=win,
        person_image=resize_bilinear(sample.person_image, win, oh, ow),
        parse=SegmentationMap(resize_nearest(sample.parse.labels, win, oh, ow),
                              sample.parse.palette),
        agnostic_image=resize_bilinear(ag_image, win, oh, ow),
        agnostic_parse=SegmentationMap(resize_nearest(ag_parse.labels, win, oh, ow),
                                       ag_parse.palette),
        keypoints=kps,
        pose_map=pose_out,
        cloth_image=resize_bilinear(sample.cloth_image, cloth_win, oh, ow),
        cloth_mask=resize_nearest(sample.cloth_mask, cloth_win, oh, ow),
    )


@dataclass
class PrecropReport:
    count: int
    windows: List[Dict]
    manifest_path: Path


def _clear_or_refuse(out_root: Path, force: bool):
    if out_root.exists() and any(out_root.iterdir()):
        if not force:
            raise OutputExistsError(f"{out_root} exists and is not empty (use force)")
        shutil.rmtree(out_root)
    out_root.mkdir(parents=True, exist_ok=True)


def precrop_dataset(root, out_root, scale: float, seed: int, cfg: CropConfig = CropConfig(),
                    split: str = "test", force: bool = False) -> PrecropReport:
    """Crop every record of ``split`` once at a fixed scale and write a new
    dataset with the same layout under ``out_root``.

    Sample ``i`` (in sorted id order) draws its window from
    ``derive_rng(seed, i)``, so the output depends only on the inputs and
    the seed. ``manifest.json`` lists one window per person id.
    """
    if not 0 < scale <= 1:
        raise ConfigError(f"scale must lie in (0, 1], got {scale}")
    root, out_root = Path(root), Path(out_root)
    palette = data_io.load_palette(root)
    person_ids = data_io.list_ids(root, split)
    cloth_dir = root / split / "cloth"
    if not cloth_dir.is_dir():
        raise data_io.LayoutError(f"missing directory: {cloth_dir}")
    cloth_ids = sorted(p.stem for p in cloth_dir.glob("*.png"))
    fixed = cfg.at_scale(scale)
    oh, ow = cfg.out_h, cfg.out_w

    _clear_or_refuse(out_root, force)
    data_io.save_palette(out_root, palette)
    for mode in data_io.MODES:
        src = data_io.pairs_path(root, split, mode)
        if src.is_file():
            shutil.copyfile(src, data_io.pairs_path(out_root, split, mode))

    windows = []
    for index, pid in enumerate(person_ids):
        base = root / split
        image = data_io.read_rgb(base / "image" / f"{pid}.png")
        labels = data_io.read_labels(base / "image-parse" / f"{pid}.png")
        kps = data_io.read_keypoints(base / "pose" / f"{pid}.json")
        if labels.shape != image.shape[:2]:
            raise data_io.ConsistencyError(f"{pid}: parse and image sizes differ")
        win = sample_crop_window(image.shape[0], image.shape[1], fixed, derive_rng(seed, index))
        out = out_root / split
        data_io.write_rgb(out / "image" / f"{pid}.png", resize_bilinear(image, win, oh, ow))
        data_io.write_labels(out / "image-parse" / f"{pid}.png", resize_nearest(labels, win, oh, ow))
        data_io.write_keypoints(out / "pose" / f"{pid}.json", transform_keypoints(kps, win, oh, ow))
        windows.append({"id": pid, **win.to_dict(), "seed": int(seed), "scale": float(scale)})

    for cid in cloth_ids:
        base, out = root / split, out_root / split
        cloth = data_io.read_rgb(base / "cloth" / f"{cid}.png")
        mask = data_io.read_gray(base / "cloth-mask" / f"{cid}.png")
        full = CropWindow.full(*cloth.shape[:2])
        data_io.write_rgb(out / "cloth" / f"{cid}.png", resize_bilinear(cloth, full, oh, ow))
        data_io.write_gray(out / "cloth-mask" / f"{cid}.png",
                           resize_nearest((mask >= 0.5).astype(np.float64), full, oh, ow))

    manifest = out_root / "manifest.json"
    manifest.write_text(json.dumps(windows, indent=1) + "\n")
    return PrecropReport(len(windows), windows, manifest)
