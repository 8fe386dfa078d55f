"""Dataset manifests, patient-wise splitting, image decoding, augmentation,
and normalization."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import CHEXPERT_LABELS, CHESTXRAY14_LABELS, LabelState, LabelVector


class ManifestError(ValueError):
    pass


class View(enum.Enum):
    FRONTAL = "frontal"
    LATERAL = "lateral"
    UNKNOWN = "unknown"


@dataclass
class ManifestRow:
    image_path: str
    patient_id: str
    view: View
    labels: LabelVector

    def __post_init__(self):
        if not self.image_path:
            raise ManifestError("image_path must be nonempty")
        if not self.patient_id:
            raise ManifestError("patient_id must be nonempty")


MANIFEST_COLUMNS = ["path", "patient_id", "view"]


def load_manifest(csv_path, vocabulary: list[str] | None = None) -> list[ManifestRow]:
    """Parse a manifest CSV: path, patient_id, view, then the 14 label columns.

    Label cells: blank -> Blank, "0" -> Negative, "1" -> Positive,
    "-1" or "u" -> Uncertain."""
    vocabulary = vocabulary or CHEXPERT_LABELS
    rows: list[ManifestRow] = []
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS + vocabulary if c not in header]
        if missing:
            raise ManifestError(f"{csv_path}: missing columns {missing}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                labels = [LabelState.from_cell(rec[name] or "")
                          for name in vocabulary]
                rows.append(ManifestRow(
                    image_path=rec["path"],
                    patient_id=rec["patient_id"],
                    view=View(rec["view"] or "unknown"),
                    labels=labels))
            except ValueError as exc:
                raise ManifestError(f"{csv_path}:{lineno}: {exc}") from exc
    return rows


def save_manifest(csv_path, rows: list[ManifestRow],
                  vocabulary: list[str] | None = None) -> None:
    vocabulary = vocabulary or CHEXPERT_LABELS
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS + vocabulary)
        for row in rows:
            writer.writerow([row.image_path, row.patient_id, row.view.value]
                            + [s.to_cell() for s in row.labels])


def patient_split(rows: list[ManifestRow], fractions: tuple[float, float, float],
                  seed: int) -> tuple[list[ManifestRow], ...]:
    """Split rows into (train, val, test) keeping each patient in one split."""
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    patients: dict[str, list[ManifestRow]] = {}
    for row in rows:
        patients.setdefault(row.patient_id, []).append(row)
    if len(patients) < len(fractions):
        raise ValueError(
            f"{len(patients)} patients cannot fill {len(fractions)} splits")
    ids = sorted(patients)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    total = len(rows)
    splits: list[list[ManifestRow]] = [[] for _ in fractions]
    # greedy fill toward each split's row quota, in patient order
    quotas = [f * total for f in fractions]
    counts = [0] * len(fractions)
    for pid in ids:
        group = patients[pid]
        deficits = [(counts[i] + len(group)) - quotas[i] for i in range(len(fractions))]
        target = int(np.argmin(deficits))
        splits[target].extend(group)
        counts[target] += len(group)
    # guarantee nonempty splits
    for i, split in enumerate(splits):
        if not split:
            donor = int(np.argmax([len(s) for s in splits]))
            pid = splits[donor][-1].patient_id
            moved = [r for r in splits[donor] if r.patient_id == pid]
            splits[donor] = [r for r in splits[donor] if r.patient_id != pid]
            splits[i] = moved
    return tuple(splits)


# ---------------------------------------------------------------------------
# image decoding and geometry

SUPPORTED_CONTAINERS = {".png", ".ppm", ".pgm", ".pbm"}
OPTIONAL_CONTAINERS = {".jpg", ".jpeg"}


def decode_image(path, allow_jpeg: bool = False) -> np.ndarray:
    """Decode to a 3 x H x W float array in [0, 1]; grayscale is replicated."""
    suffix = Path(path).suffix.lower()
    if suffix not in SUPPORTED_CONTAINERS:
        if suffix in OPTIONAL_CONTAINERS and allow_jpeg:
            pass
        else:
            raise ManifestError(f"unsupported image container {suffix!r}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ManifestError(f"unreadable image {path}: {exc}") from exc
    if img.mode not in ("RGB", "L", "I;16", "I"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64)
    if img.mode == "I;16" or img.mode == "I":
        arr = arr / 65535.0
    else:
        arr = arr / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return np.clip(arr, 0.0, 1.0)


def bilinear_resize(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a C x H x W array (half-pixel centers, no aspect
    preservation).  An identity target returns the input unchanged."""
    c, h, w = image.shape
    th, tw = target
    if (h, w) == (th, tw):
        return image.copy()
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    return _sample_bilinear(image, ys[:, None] * np.ones((1, tw)),
                            np.ones((th, 1)) * xs[None, :], fill=None)


def _sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     fill: float | None = 0.0) -> np.ndarray:
    """Sample C x H x W at fractional (y, x) grids.  Out-of-range taps use
    `fill`, or replicate the nearest edge pixel when fill is None (the resize
    convention; rotation wants zeros)."""
    c, h, w = image.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    def fetch(yy, xx):
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        vals = image[:, yc, xc]
        if fill is None:
            return vals
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        return np.where(inside[None, :, :], vals, fill)

    v00 = fetch(y0, x0)
    v01 = fetch(y0, x0 + 1)
    v10 = fetch(y0 + 1, x0)
    v11 = fetch(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def decode_and_resize(path, target: tuple[int, int],
                      allow_jpeg: bool = False) -> np.ndarray:
    return bilinear_resize(decode_image(path, allow_jpeg), target)


# ---------------------------------------------------------------------------
# augmentation

# vertical flip is deliberately not part of this vocabulary
AUGMENT_OPS = ("horizontal_flip", "rotate", "scale", "crop",
               "contrast", "translate", "noise")


@dataclass
class AugmentConfig:
    horizontal_flip_prob: float = 0.5
    rotation_max_degrees: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    crop_size: tuple[int, int] | None = None    # None: no crop
    contrast_range: tuple[float, float] = (0.9, 1.1)
    translate_max_fraction: float = 0.05
    noise_sigma: float = 0.01
    enabled_ops: tuple[str, ...] = ("horizontal_flip", "rotate", "scale", "crop")

    def __post_init__(self):
        if not 0 <= self.horizontal_flip_prob <= 1:
            raise ValueError("horizontal_flip_prob must be in [0, 1]")
        bad = set(self.enabled_ops) - set(AUGMENT_OPS)
        if bad:
            raise ValueError(f"unknown augmentation ops {sorted(bad)}")


def sample_rng(seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    """Per-sample random stream so augmentation is order-independent."""
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, sample_index)))


def _rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return image.copy()
    c, h, w = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: rotate output coordinates back into the input frame
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ys = cos_t * (yy - cy) + sin_t * (xx - cx) + cy
    xs = -sin_t * (yy - cy) + cos_t * (xx - cx) + cx
    return _sample_bilinear(image, ys, xs, fill=0.0)


def _translate(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    c, h, w = image.shape
    out = np.zeros_like(image)
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[:, ys_dst, xs_dst] = image[:, ys_src, xs_src]
    return out


def augment(image: np.ndarray, config: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Apply the enabled ops in the fixed order flip -> rotate -> scale ->
    crop (-> contrast -> translate -> noise).  `rng` should come from
    sample_rng for reproducibility."""
    out = image
    ops = config.enabled_ops
    if "horizontal_flip" in ops:
        if rng.random() < config.horizontal_flip_prob:
            out = out[:, :, ::-1].copy()
    if "rotate" in ops:
        deg = rng.uniform(-config.rotation_max_degrees, config.rotation_max_degrees)
        out = _rotate(out, deg)
    if "scale" in ops:
        factor = rng.uniform(*config.scale_range)
        if factor != 1.0:
            _, h, w = out.shape
            out = bilinear_resize(out, (max(1, round(h * factor)),
                                        max(1, round(w * factor))))
    if "crop" in ops and config.crop_size is not None:
        ch, cw = config.crop_size
        _, h, w = out.shape
        if ch > h or cw > w:
            raise ValueError(f"crop {config.crop_size} larger than image {h}x{w}")
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        out = out[:, top:top + ch, left:left + cw]
    if "contrast" in ops:
        factor = rng.uniform(*config.contrast_range)
        mean = out.mean()
        out = np.clip(mean + (out - mean) * factor, 0.0, 1.0)
    if "translate" in ops:
        _, h, w = out.shape
        max_dy = int(h * config.translate_max_fraction)
        max_dx = int(w * config.translate_max_fraction)
        out = _translate(out, int(rng.integers(-max_dy, max_dy + 1)),
                         int(rng.integers(-max_dx, max_dx + 1)))
    if "noise" in ops:
        out = np.clip(out + rng.normal(0, config.noise_sigma, out.shape), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormalizationSpec:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")


def normalize(image: np.ndarray, spec: NormalizationSpec | None = None) -> np.ndarray:
    spec = spec or NormalizationSpec()
    if image.shape[0] != 3:
        raise ValueError(f"expected 3 channels, got {image.shape[0]}")
    mean = np.asarray(spec.mean)[:, None, None]
    std = np.asarray(spec.std)[:, None, None]
    return (image - mean) / std


def denormalize(image: np.ndarray, spec: NormalizationSpec | None = None) -> np.ndarray:
    spec = spec or NormalizationSpec()
    mean = np.asarray(spec.mean)[:, None, None]
    std = np.asarray(spec.std)[:, None, None]
    return image * std + mean


def eval_transform(path, target: tuple[int, int],
                   spec: NormalizationSpec | None = None,
                   allow_jpeg: bool = False) -> np.ndarray:
    """Deterministic evaluation pipeline: decode -> resize -> normalize."""
    return normalize(decode_and_resize(path, target, allow_jpeg), spec)


def train_transform(path, target: tuple[int, int], config: AugmentConfig,
                    rng: np.random.Generator,
                    spec: NormalizationSpec | None = None,
                    allow_jpeg: bool = False) -> np.ndarray:
    img = decode_and_resize(path, target, allow_jpeg)
    img = augment(img, config, rng)
    if img.shape[1:] != tuple(target):
        img = bilinear_resize(img, target)
    return normalize(img, spec)
