"""Cue extraction: principal-face selection, face crop/occlusion, body isolation."""

from __future__ import annotations

import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import DetectorError, DimensionError, NoFaceError, ParseError, ValidationError
from .imageio import write_image

PersonMask = np.ndarray  # H x W uint8 in {0, 1}


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "FaceBox":
        if len(values) not in (4, 5):
            raise ValidationError(f"face box needs [x, y, w, h(, confidence)], got {values!r}")
        x, y, w, h = (int(round(float(v))) for v in values[:4])
        conf = float(values[4]) if len(values) == 5 else 1.0
        return cls(x, y, w, h, conf)

    def clip(self, img_w: int, img_h: int) -> Optional["FaceBox"]:
        """Intersect with the image; ``None`` if nothing positive-area remains."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, img_w), min(self.y + self.h, img_h)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, x=x0, y=y0, w=x1 - x0, h=y1 - y0)

    def inside(self, img_w: int, img_h: int) -> bool:
        return self.w > 0 and self.h > 0 and self.x >= 0 and self.y >= 0 and (
            self.x + self.w <= img_w and self.y + self.h <= img_h
        )


@dataclass
class CueBundle:
    """One sample: scene image in [0,1], selected face, optional person mask and label."""

    image: np.ndarray
    face: FaceBox
    mask: Optional[PersonMask] = None
    label: Optional[int] = None
    face_fallback: bool = False

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if not self.face.inside(w, h):
            raise ValidationError(f"face {self.face} outside image {w}x{h}")
        if self.mask is not None and self.mask.shape != (h, w):
            raise DimensionError(f"mask {self.mask.shape} does not match image {(h, w)}")


# -- detection ---------------------------------------------------------------


class FaceDetector(Protocol):
    def detect(self, image: np.ndarray, key: Optional[str] = None) -> list[FaceBox]: ...


class AnnotationDetector:
    """Looks boxes up from annotations keyed by image path."""

    def __init__(self, boxes: dict[str, list[FaceBox]]):
        self.boxes = boxes

    @classmethod
    def from_sidecar(cls, path: str | os.PathLike) -> "AnnotationDetector":
        from .data import read_sidecar

        table = {}
        for rec in read_sidecar(path):
            cands = rec.get("faces")
            if cands is None:
                cands = [rec["face"]] if rec.get("face") is not None else []
            table[rec["image"]] = [FaceBox.from_seq(b) for b in cands]
        return cls(table)

    def detect(self, image, key=None):
        if key is None:
            raise DetectorError("annotation detector needs the image key")
        return list(self.boxes.get(key, []))


def parse_detector_output(text: str) -> list[FaceBox]:
    """Parse ``x y w h confidence`` lines; blank lines are ignored."""
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ParseError(f"expected 'x y w h confidence', got {line!r}", lineno)
        try:
            x, y, w, h, conf = (float(p) for p in parts)
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno) from None
        if not all(math.isfinite(v) for v in (x, y, w, h, conf)):
            raise ParseError(f"non-finite field in {line!r}", lineno)
        boxes.append(FaceBox(int(round(x)), int(round(y)), int(round(w)), int(round(h)), conf))
    return boxes


class CommandDetector:
    """Runs an external command as ``<command> <image.ppm>`` and parses its stdout."""

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def detect(self, image, key=None):
        with tempfile.TemporaryDirectory() as tmp:
            path = key if key and os.path.exists(key) else os.path.join(tmp, "frame.ppm")
            if path != key:
                write_image(path, image)
            try:
                proc = subprocess.run(
                    [*self.argv, path], capture_output=True, text=True, timeout=self.timeout
                )
            except (FileNotFoundError, PermissionError) as exc:
                raise DetectorError(f"detector unavailable: {exc}") from exc
            except subprocess.TimeoutExpired as exc:
                raise DetectorError(f"detector timed out after {self.timeout}s") from exc
        if proc.returncode != 0:
            raise DetectorError(
                f"detector exited with status {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        return parse_detector_output(proc.stdout)


def detect_faces(image: np.ndarray, backend: FaceDetector, key: Optional[str] = None) -> list[FaceBox]:
    """Boxes from ``backend`` clipped to the image, sorted by confidence (descending)."""
    h, w = image.shape[:2]
    clipped = [b for b in (box.clip(w, h) for box in backend.detect(image, key)) if b is not None]
    return sorted(clipped, key=lambda b: -b.confidence)


# -- principal face ------------------------------------------------------------


def face_score(box: FaceBox, img_w: int, img_h: int, size_weight: float = 1.0, center_weight: float = 1.0) -> float:
    """Foreground-size term minus off-centre term, both dimensionless."""
    size = math.sqrt(box.area) / math.sqrt(img_w * img_h)
    cx, cy = box.center
    dist = math.hypot(cx - img_w / 2.0, cy - img_h / 2.0) / math.hypot(img_w, img_h)
    return size_weight * size - center_weight * dist


def select_principal_face(
    boxes: Sequence[FaceBox],
    img_w: int,
    img_h: int,
    size_weight: float = 1.0,
    center_weight: float = 1.0,
) -> FaceBox:
    if not boxes:
        raise NoFaceError("no face boxes to select from")

    def key(b: FaceBox):
        return (face_score(b, img_w, img_h, size_weight, center_weight), b.area, -b.x, -b.y, b.confidence)

    return max(boxes, key=key)


def fallback_face(img_w: int, img_h: int) -> FaceBox:
    """Centered box of one third of the image, used by the lenient no-face policy."""
    w, h = max(1, img_w // 3), max(1, img_h // 3)
    return FaceBox((img_w - w) // 2, (img_h - h) // 2, w, h, 0.0)


# -- pixel operations ------------------------------------------------------------


def crop_face(image: np.ndarray, box: FaceBox) -> np.ndarray:
    h, w = image.shape[:2]
    if not box.inside(w, h):
        raise ValidationError(f"crop box {box} degenerate or outside image {w}x{h}")
    return image[box.y : box.y + box.h, box.x : box.x + box.w].copy()


def occlude_face(image: np.ndarray, box: FaceBox) -> np.ndarray:
    """Copy of ``image`` with the (clipped) face box filled with zeros."""
    out = image.copy()
    h, w = image.shape[:2]
    b = box.clip(w, h)
    if b is not None:
        out[b.y : b.y + b.h, b.x : b.x + b.w] = 0
    return out


def mask_overlap(mask: PersonMask, box: FaceBox) -> float:
    """Fraction of the face-box area covered by person pixels."""
    region = mask[box.y : box.y + box.h, box.x : box.x + box.w]
    return float(np.count_nonzero(region)) / box.area


def select_person_mask(
    masks: Sequence[PersonMask], face: FaceBox, threshold: float = 0.1
) -> Optional[PersonMask]:
    idx = select_person_mask_index(masks, face, threshold)
    return None if idx is None else masks[idx]


def select_person_mask_index(
    masks: Sequence[PersonMask], face: FaceBox, threshold: float = 0.1
) -> Optional[int]:
    if not masks:
        return None
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise ValidationError(f"person masks disagree in size: {m.shape} vs {shape}")
    h, w = shape
    b = face.clip(w, h)
    if b is None:
        return None
    overlaps = [mask_overlap(m, b) for m in masks]
    best = int(np.argmax(overlaps))  # first index wins ties
    return best if overlaps[best] >= threshold else None


def remove_background(image: np.ndarray, mask: PersonMask) -> np.ndarray:
    if mask.shape != image.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    m = (np.asarray(mask) > 0).astype(image.dtype)
    return image * (m[:, :, None] if image.ndim == 3 else m)
