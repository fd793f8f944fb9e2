"""Dataset layout, per-record loading and pose heatmaps.

On-disk layout (``root`` is the dataset root)::

    root/palette.json                 label integer -> role string
    root/<split>_pairs_<mode>.txt     lines "person_id cloth_id"
    root/<split>/image/<id>.png       person photo, RGB
    root/<split>/cloth/<id>.png       flat garment photo, RGB
    root/<split>/cloth-mask/<id>.png  garment mask, 8-bit gray
    root/<split>/image-parse/<id>.png indexed label map
    root/<split>/pose/<id>.json       {"keypoints": [[x, y, conf], ... 18 rows]}

Rasters are held as float arrays in [0, 1] obtained from 8-bit files, so
``save_sample`` followed by ``load_sample`` is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import (
    ConsistencyError,
    DatasetIndexError,
    LayoutError,
    ModeViolationError,
    PaletteError,
    SampleIOError,
)

ROLES = frozenset({
    "background", "hair", "face", "neck", "upper_clothes",
    "lower_clothes", "arms", "legs", "agnostic", "other",
})

# OpenPose COCO-18 ordering.
COCO18 = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
NUM_KEYPOINTS = len(COCO18)

SPLITS = ("train", "test")
MODES = ("paired", "unpaired")
MODALITY_DIRS = ("image", "cloth", "cloth-mask", "image-parse", "pose")

# Default palette used by the toy generator and as a reference taxonomy.
DEFAULT_PALETTE = {
    0: "background",
    1: "hair",
    2: "face",
    3: "neck",
    4: "upper_clothes",
    5: "lower_clothes",
    6: "arms",
    7: "legs",
    8: "agnostic",
    9: "other",
}

# Display colors for the indexed PNG palette (one per label, cycled).
_DISPLAY_COLORS = [
    (0, 0, 0), (128, 0, 0), (254, 205, 160), (220, 170, 130), (255, 85, 0),
    (0, 85, 85), (51, 170, 221), (170, 255, 85), (128, 128, 128), (255, 255, 0),
]


@dataclass
class SegmentationMap:
    """Integer label raster plus the role of every label."""

    labels: np.ndarray
    palette: Dict[int, str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise PaletteError("parse labels must be an integer raster")
        self.palette = {int(k): str(v) for k, v in self.palette.items()}
        validate_palette(self.palette)
        present = np.unique(self.labels)
        missing = [int(v) for v in present if int(v) not in self.palette]
        if missing:
            raise PaletteError(f"parse labels {missing} have no palette entry")

    @property
    def shape(self):
        return self.labels.shape

    def label_of(self, role: str) -> int:
        """The single label carrying ``role`` (first one if several)."""
        for label, r in sorted(self.palette.items()):
            if r == role:
                return label
        raise PaletteError(f"role {role!r} is not in the palette")

    def labels_of(self, roles) -> List[int]:
        return sorted(k for k, r in self.palette.items() if r in set(roles))

    def role_mask(self, roles) -> np.ndarray:
        return np.isin(self.labels, self.labels_of(roles))

    @property
    def num_labels(self) -> int:
        return max(self.palette) + 1


@dataclass
class PoseKeypoints:
    """18 (x, y, confidence) rows in COCO-18 order, pixel units.

    Confidence 0 marks an absent point; its coordinates carry no meaning.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 3):
            raise ConsistencyError(
                f"expected {NUM_KEYPOINTS}x3 keypoints, got shape {pts.shape}")
        self.points = pts

    @property
    def visible(self) -> np.ndarray:
        return self.points[:, 2] > 0

    def copy(self) -> "PoseKeypoints":
        return PoseKeypoints(self.points.copy())


@dataclass
class Sample:
    sample_id: str
    person_image: np.ndarray
    cloth_image: np.ndarray
    cloth_mask: np.ndarray
    parse: SegmentationMap
    keypoints: PoseKeypoints
    cloth_id: str = ""

    def __post_init__(self):
        if not self.cloth_id:
            self.cloth_id = self.sample_id
        self.validate()

    @property
    def size(self) -> Tuple[int, int]:
        return self.person_image.shape[:2]

    def validate(self):
        h, w = self.person_image.shape[:2]
        shapes = {
            "person_image": self.person_image.shape[:2],
            "cloth_image": self.cloth_image.shape[:2],
            "cloth_mask": self.cloth_mask.shape[:2],
            "parse": self.parse.shape,
        }
        bad = {k: s for k, s in shapes.items() if tuple(s) != (h, w)}
        if bad:
            raise ConsistencyError(
                f"sample {self.sample_id}: raster sizes disagree {shapes}")
        if not np.isin(self.cloth_mask, (0, 1)).all():
            raise ConsistencyError(
                f"sample {self.sample_id}: cloth_mask is not binary")
        pts = self.keypoints.points[self.keypoints.visible]
        inside = ((pts[:, 0] >= 0) & (pts[:, 0] < w)
                  & (pts[:, 1] >= 0) & (pts[:, 1] < h))
        if not inside.all():
            raise ConsistencyError(
                f"sample {self.sample_id}: visible keypoint outside the "
                f"{w}x{h} raster")


@dataclass
class PairList:
    entries: List[Tuple[str, str]]
    mode: str = "paired"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeViolationError(f"unknown pair mode {self.mode!r}")
        self.entries = [(str(p), str(c)) for p, c in self.entries]
        if self.mode == "paired":
            for p, c in self.entries:
                if p != c:
                    raise ModeViolationError(
                        f"paired list contains mixed pair ({p}, {c})")
        elif self.entries and all(p == c for p, c in self.entries):
            raise ModeViolationError(
                "unpaired list has no entry with person_id != cloth_id")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def validate_palette(palette: Dict[int, str]):
    unknown = sorted({r for r in palette.values() if r not in ROLES})
    if unknown:
        raise PaletteError(f"unknown roles in palette: {unknown}")
    for role in ("upper_clothes", "background"):
        n = sum(1 for r in palette.values() if r == role)
        if n != 1:
            raise PaletteError(
                f"palette must map exactly one label to {role!r}, found {n}")


def pairs_path(root, split: str, mode: str) -> Path:
    return Path(root) / f"{split}_pairs_{mode}.txt"


def load_palette(root) -> Dict[int, str]:
    path = Path(root) / "palette.json"
    if not path.is_file():
        raise LayoutError(f"missing palette file: {path}")
    try:
        raw = json.loads(path.read_text())
        palette = {int(k): str(v) for k, v in raw.items()}
    except (ValueError, AttributeError) as exc:
        raise SampleIOError(f"cannot parse palette {path}: {exc}") from exc
    validate_palette(palette)
    return palette


def save_palette(root, palette: Dict[int, str]):
    Path(root).mkdir(parents=True, exist_ok=True)
    data = {str(k): v for k, v in sorted(palette.items())}
    (Path(root) / "palette.json").write_text(json.dumps(data, indent=2) + "\n")


def _modality_path(root, split, modality, sample_id) -> Path:
    ext = ".json" if modality == "pose" else ".png"
    return Path(root) / split / modality / f"{sample_id}{ext}"


def load_dataset_index(root, split: str = "train", mode: str = "paired") -> PairList:
    """Read and validate ``<split>_pairs_<mode>.txt``.

    Entries keep the file order. Every id must resolve to its files:
    person-side modalities for the person id, garment-side ones for the
    cloth id.
    """
    root = Path(root)
    if split not in SPLITS:
        raise LayoutError(f"unknown split {split!r}")
    if mode not in MODES:
        raise ModeViolationError(f"unknown pair mode {mode!r}")
    for sub in [root, root / split] + [root / split / m for m in MODALITY_DIRS]:
        if not sub.is_dir():
            raise LayoutError(f"missing directory: {sub}")
    pfile = pairs_path(root, split, mode)
    if not pfile.is_file():
        raise LayoutError(f"missing pairs file: {pfile}")

    entries = []
    for lineno, line in enumerate(pfile.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetIndexError(f"{pfile}:{lineno}: expected 'person_id cloth_id'")
        entries.append((parts[0], parts[1]))

    pairs = PairList(entries, mode)
    for person_id, cloth_id in pairs:
        for modality in ("image", "image-parse", "pose"):
            if not _modality_path(root, split, modality, person_id).is_file():
                raise DatasetIndexError(
                    f"id {person_id!r} has no {modality} file in {root / split}")
        for modality in ("cloth", "cloth-mask"):
            if not _modality_path(root, split, modality, cloth_id).is_file():
                raise DatasetIndexError(
                    f"id {cloth_id!r} has no {modality} file in {root / split}")
    return pairs


def list_ids(root, split: str) -> List[str]:
    """All person ids of a split, sorted."""
    d = Path(root) / split / "image"
    if not d.is_dir():
        raise LayoutError(f"missing directory: {d}")
    return sorted(p.stem for p in d.glob("*.png"))


def _open(path):
    path = Path(path)
    if not path.is_file():
        raise DatasetIndexError(f"missing file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise SampleIOError(f"cannot decode {path}: {exc}") from exc
    return img


def read_rgb(path) -> np.ndarray:
    img = _open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def read_gray(path) -> np.ndarray:
    img = _open(path).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def read_labels(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("P", "L"):
        raise SampleIOError(f"parse map {path} must be single-channel, got {img.mode}")
    return np.asarray(img, dtype=np.int64)


def read_keypoints(path) -> PoseKeypoints:
    path = Path(path)
    if not path.is_file():
        raise DatasetIndexError(f"missing file: {path}")
    try:
        data = json.loads(path.read_text())
        pts = data["keypoints"]
    except (ValueError, KeyError, TypeError) as exc:
        raise SampleIOError(f"cannot parse keypoints {path}: {exc}") from exc
    return PoseKeypoints(np.asarray(pts, dtype=np.float64))


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_rgb(path, image: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def write_gray(path, image: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="L").save(path)


def write_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise PaletteError("labels must fit in 0..255 for an indexed PNG")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = []
    for i in range(256):
        flat.extend(_DISPLAY_COLORS[i % len(_DISPLAY_COLORS)])
    img.putpalette(flat)
    img.save(path)


def write_keypoints(path, kps: PoseKeypoints):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows = [[float(v) for v in row] for row in kps.points]
    Path(path).write_text(json.dumps({"keypoints": rows}) + "\n")


def load_sample(root, person_id: str, cloth_id: str, split: str = "train",
                binarize_mask: bool = True, palette=None) -> Sample:
    """Load one (person, garment) record.

    With ``binarize_mask`` the garment mask is thresholded at 0.5 (8-bit
    values >= 128 become 1); otherwise any non-binary value is a
    :class:`ConsistencyError`.
    """
    root = Path(root)
    if palette is None:
        palette = load_palette(root)
    person = read_rgb(_modality_path(root, split, "image", person_id))
    cloth = read_rgb(_modality_path(root, split, "cloth", cloth_id))
    mask = read_gray(_modality_path(root, split, "cloth-mask", cloth_id))
    if binarize_mask:
        mask = (mask >= 0.5).astype(np.float64)
    labels = read_labels(_modality_path(root, split, "image-parse", person_id))
    kps = read_keypoints(_modality_path(root, split, "pose", person_id))
    return Sample(
        sample_id=person_id,
        cloth_id=cloth_id,
        person_image=person,
        cloth_image=cloth,
        cloth_mask=mask,
        parse=SegmentationMap(labels, palette),
        keypoints=kps,
    )


def save_sample(root, sample: Sample, split: str = "train"):
    """Write a record into the layout (person side under ``sample_id``,
    garment side under ``cloth_id``)."""
    root = Path(root)
    write_rgb(_modality_path(root, split, "image", sample.sample_id), sample.person_image)
    write_labels(_modality_path(root, split, "image-parse", sample.sample_id), sample.parse.labels)
    write_keypoints(_modality_path(root, split, "pose", sample.sample_id), sample.keypoints)
    write_rgb(_modality_path(root, split, "cloth", sample.cloth_id), sample.cloth_image)
    write_gray(_modality_path(root, split, "cloth-mask", sample.cloth_id), sample.cloth_mask)


def write_pairs(root, split: str, mode: str, entries: Sequence[Tuple[str, str]]):
    PairList(list(entries), mode)
    path = pairs_path(root, split, mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{p} {c}\n" for p, c in entries))


def render_pose_map(kps: PoseKeypoints, H: int, W: int, sigma: float = 3.0) -> np.ndarray:
    """Render one Gaussian bump per visible keypoint.

    The bump of channel k is centred on the integer pixel nearest to the
    keypoint, so its peak is exactly 1. Absent points give an all-zero
    channel. Returns float32 of shape (18, H, W).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros((NUM_KEYPOINTS, H, W), dtype=np.float32)
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    for k, (x, y, conf) in enumerate(kps.points):
        if conf <= 0:
            continue
        cx, cy = np.floor(x + 0.5), np.floor(y + 0.5)
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        out[k] = np.exp(-d2 / (2.0 * sigma * sigma))
    return out
