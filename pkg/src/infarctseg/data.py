"""Dataset ingestion: PNG image/label pairs, manifests, patient-level splits and
on-the-fly geometric augmentation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .errors import DataError, DomainError
from .kernels import bilinear_upsample

MVO = 4
SCAR = 3
SPLITS = ("train", "val", "test")
DEFAULT_SIZE = 256


@dataclass
class Sample:
    image: np.ndarray    # H x W float64 in [0, 1]
    labels: np.ndarray   # H x W uint8 in {0, 1, 2, 3}
    patient: str = ""


# ---------------------------------------------------------------------------
# PNG I/O


def save_image_png(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit grayscale."""
    a = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path, optimize=False)


LABEL_PALETTE = [
    255, 0, 0,      # background: red
    0, 0, 255,      # blood: blue
    0, 255, 0,      # muscle: green
    255, 255, 0,    # scar: yellow
    128, 0, 128,    # MVO (raw files only)
]


def save_label_png(path: str | Path, labels: np.ndarray) -> None:
    """Write a label map as an 8-bit indexed (palette) PNG."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > MVO):
        raise DataError(f"label values must lie in 0..{MVO}: {path}")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(LABEL_PALETTE)
    im.save(path, optimize=False)


def _read_png(path: str | Path, kind: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if kind == "label":
                if im.mode not in ("P", "L"):
                    raise DataError(f"label file must be indexed or 8-bit gray, got {im.mode}: {path}")
                return np.array(im, dtype=np.uint8)
            return np.array(im.convert("L"), dtype=np.uint8)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {kind} file {path}: {exc}") from exc


def resize_labels_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize (pixel-center sampling); never invents class values."""
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


def merge_mvo(labels: np.ndarray) -> np.ndarray:
    out = np.array(labels, dtype=np.uint8)
    out[out == MVO] = SCAR
    return out


def load_sample(image_path: str | Path, label_path: str | Path, size: int = DEFAULT_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Read an image/label pair, resize to ``size x size`` and merge MVO into scar.

    The image is scaled to [0, 1] and resized bilinearly; the labels are
    resized by nearest neighbor.
    """
    raw = _read_png(image_path, "image")
    lab = _read_png(label_path, "label")
    if raw.shape != lab.shape:
        raise DataError(f"image {image_path} is {raw.shape} but labels {label_path} are {lab.shape}")
    if lab.size and lab.max() > MVO:
        raise DataError(f"label value {int(lab.max())} > {MVO} in {label_path}")
    image = raw.astype(np.float64) / 255.0
    if raw.shape != (size, size):
        image = bilinear_upsample(image, size, size)
        lab = resize_labels_nearest(lab, size, size)
    return image, merge_mvo(lab)


# ---------------------------------------------------------------------------
# manifests and splits


def read_manifest(path: str | Path) -> list[dict]:
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(records, list):
        raise DataError(f"manifest {path} must be a JSON array")
    for r in records:
        if not {"image", "label", "patient"} <= set(r):
            raise DataError(f"manifest record missing fields: {r}")
        if "split" in r and r["split"] not in SPLITS:
            raise DataError(f"unknown split {r['split']!r} in {path}")
    return records


def write_manifest(path: str | Path, records: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(list(records), indent=1) + "\n")


def check_no_leakage(records: Iterable[dict]) -> None:
    owner: dict[str, str] = {}
    for r in records:
        prev = owner.setdefault(r["patient"], r["split"])
        if prev != r["split"]:
            raise DataError(f"patient {r['patient']} appears in both {prev} and {r['split']}")


def split_by_patient(records: Sequence[dict], fractions: Sequence[float] = (0.6, 0.2, 0.2),
                     seed: int = 0) -> list[dict]:
    """Assign whole patients to train/val/test so image counts approach ``fractions``.

    Patients are shuffled by ``seed``; the first three seed one split each, the
    rest go one at a time to the split furthest below its target image count.
    """
    if len(fractions) != len(SPLITS) or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DomainError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    by_patient: dict[str, list[dict]] = {}
    for r in records:
        by_patient.setdefault(str(r["patient"]), []).append(r)
    patients = sorted(by_patient)
    if len(patients) < len(SPLITS):
        raise DomainError(f"need at least {len(SPLITS)} patients to split, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    total = sum(len(v) for v in by_patient.values())
    targets = np.asarray(fractions) * total
    counts = np.zeros(len(SPLITS))
    assign: dict[str, str] = {}
    for rank, pi in enumerate(order):
        pid = patients[pi]
        k = rank if rank < len(SPLITS) else int(np.argmax(targets - counts))
        assign[pid] = SPLITS[k]
        counts[k] += len(by_patient[pid])
    return [{**r, "split": assign[str(r["patient"])]} for r in records]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation: tuple[float, float] = (0.0, 360.0)
    scale: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def draw(self, epoch: int, index: int) -> "AugmentDraw":
        """Draw the transform for one sample; depends only on (seed, epoch, index)."""
        rng = np.random.default_rng([self.seed, epoch, index])
        return AugmentDraw(float(rng.uniform(*self.rotation)), float(rng.uniform(*self.scale)))


@dataclass(frozen=True)
class AugmentDraw:
    angle: float = 0.0   # degrees, clockwise as displayed (rows pointing down)
    scale: float = 1.0


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else v


def augment_sample(image: np.ndarray, labels: np.ndarray, draw: AugmentDraw) -> tuple[np.ndarray, np.ndarray]:
    """Rotate and scale image and labels about the image center.

    The image is resampled bilinearly, the labels by nearest neighbor; pixels
    mapped from outside the frame become intensity 0 / background.
    """
    if draw.angle % 360.0 == 0.0 and draw.scale == 1.0:
        return np.array(image, dtype=np.float64), np.array(labels)
    h, w = labels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(draw.angle)
    c, s = _snap(math.cos(theta)), _snap(math.sin(theta))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    src_y = (c * yy - s * xx) / draw.scale + cy
    src_x = (s * yy + c * xx) / draw.scale + cx
    img = map_coordinates(np.asarray(image, dtype=np.float64), [src_y, src_x], order=1,
                          mode="constant", cval=0.0)
    ry = np.rint(src_y).astype(np.int64)
    rx = np.rint(src_x).astype(np.int64)
    inside = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
    lab = np.zeros_like(labels)
    lab[inside] = labels[ry[inside], rx[inside]]
    return img, lab
